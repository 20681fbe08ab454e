"""The experiment steps shared by the CLI and the acceptance tests.

Each function takes the experiment config and returns plain artifacts;
writing them to disk is left to :mod:`promptdoor.harness.runs`.

A seed's bundle holds three learners trained on the same few-shot set:
the attacked context generator, the attacked static context (the
trigger-agnostic ablation) and a clean static context (the reference for
clean accuracy and the clean model for the defenses).
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np

from ..attack import AttackResult, apply_trigger, run_attack
from ..defensesuite import NCConfig, PruneReport, ReconstructedTrigger, clp_sweep, neural_cleanse, patch_backdoor_fixture
from ..evalsuite import (
    EvalReport, EvalRow, TransferRow, evaluate_classes, retrieval_galleries, retrieval_recall_at_1, similarity_decoupling,
    stealth,
)
from ..promptengine import ClassTokenSet
from ..synthcorpus import Corpus, CorpusSpec, generate, sample_few_shot, split_seen_unseen
from ..twotower import TwoTowerModel, build_model, contrastive_pretrain
from .config import ExperimentConfig

log = logging.getLogger(__name__)

DTYPES = {32: np.float32, 64: np.float64}
BUNDLE = ("generator", "static", "baseline")


@functools.lru_cache(maxsize=32)
def _generate_cached(spec: CorpusSpec) -> Corpus:
    return generate(spec)


def corpus(spec: CorpusSpec, dtype=np.float32) -> Corpus:
    """Generated corpus, cached per spec; images cast to ``dtype``."""
    c = _generate_cached(spec)
    images = c.images if c.images.dtype == dtype else c.images.astype(dtype)
    return Corpus(images, c.labels, c.class_names, c.spec)


def pretrain_victim(cfg: ExperimentConfig):
    """Contrastive pre-training on the base corpus plus its disjoint-vocabulary variant; returns ``(model, log)``."""
    data = cfg.corpus.pretrain_corpus()
    dtype = DTYPES[cfg.precision]
    data = Corpus(data.images.astype(dtype), data.labels, data.class_names, data.spec)
    model = build_model(data.class_names, cfg.model_config(), seed=cfg.pretrain.seed, dtype=dtype)
    p = cfg.pretrain
    return contrastive_pretrain(model, data, p.epochs, p.batch_size, p.seed, lr=p.lr)


def attack_seed(cfg: ExperimentConfig, model: TwoTowerModel, seed: int, **overrides) -> AttackResult:
    """Few-shot attack on the seen half of the training corpus for one seed."""
    train = corpus(cfg.corpus.train_spec(), model.dtype)
    plan = split_seen_unseen(len(train.class_names), seed)
    few = sample_few_shot(train, plan.seen, cfg.shots, seed)
    return run_attack(model, few, plan.seen, cfg.attack_config(seed, **overrides))


def attack_bundle(cfg: ExperimentConfig, model: TwoTowerModel, seed: int) -> dict[str, AttackResult]:
    return {
        "generator": attack_seed(cfg, model, seed, learner="generator"),
        "static": attack_seed(cfg, model, seed, learner="static"),
        "baseline": attack_seed(cfg, model, seed, learner="static", clean_only=True),
    }


def retrieval_seed(cfg: ExperimentConfig, model: TwoTowerModel, seed: int) -> dict:
    """Prompts and trigger learned on every class, then image-to-caption retrieval.

    The training split covers all classes with ``eval.retrieval_shots``
    examples each; queries come from the test corpus in galleries holding
    one caption per class.
    """
    train = corpus(cfg.corpus.train_spec(), model.dtype)
    classes = list(range(len(train.class_names)))
    few = sample_few_shot(train, classes, cfg.eval.retrieval_shots, seed)
    res = run_attack(model, few, classes, cfg.attack_config(seed))
    test = corpus(cfg.corpus.test_spec(), model.dtype)
    order, size = retrieval_galleries(test, classes, seed)
    tokens = ClassTokenSet.from_names(model, test.class_names)
    target = test.class_names.index(res.target_name)
    r1, br1 = retrieval_recall_at_1(model, res.learner, tokens, test.images[order], test.labels[order], res.trigger.delta, target, size)
    return {"r1": r1, "br1": br1}


def seen_unseen_row(cfg: ExperimentConfig, model: TwoTowerModel, result: AttackResult, seed: int, name: str) -> EvalRow:
    test = corpus(cfg.corpus.test_spec(), model.dtype)
    plan = split_seen_unseen(len(test.class_names), seed)
    ex = cfg.eval.exclude_target
    s = evaluate_classes(model, result.learner, test, plan.seen, result.target_name, result.trigger.delta, ex)
    u = evaluate_classes(model, result.learner, test, plan.unseen, result.target_name, result.trigger.delta, ex)
    return EvalRow(name, s["acc"], s["asr"], u["acc"], u["asr"])


def evaluate_seed(cfg: ExperimentConfig, model: TwoTowerModel, result: AttackResult, seed: int, protocols=None) -> EvalReport:
    """Every selected protocol for the attacked generator of one seed."""
    protocols = list(protocols or cfg.eval.protocols)
    dtype = model.dtype
    test = corpus(cfg.corpus.test_spec(), dtype)
    plan = split_seen_unseen(len(test.class_names), seed)
    delta, target = result.trigger.delta, result.target_name
    ex = cfg.eval.exclude_target
    report = EvalReport()
    if "seen-unseen" in protocols:
        report.rows.append(seen_unseen_row(cfg, model, result, seed, "A"))
    if "cross-dataset" in protocols:
        var = corpus(cfg.corpus.variant_test_spec(), dtype)
        r = evaluate_classes(model, result.learner, var, range(len(var.class_names)), target, delta, ex)
        report.transfer.append(TransferRow("B", r["acc"], r["asr"]))
    if "cross-domain" in protocols:
        for domain in cfg.eval.domains:
            shifted = corpus(cfg.corpus.domain_test_spec(domain), dtype)
            r = evaluate_classes(model, result.learner, shifted, plan.seen, target, delta, ex)
            report.transfer.append(TransferRow(f"A/{domain}", r["acc"], r["asr"]))
    if "stealth" in protocols:
        report.stealth = stealth(test.images, delta, cfg.eval.stealth_pairs)
    if "similarity" in protocols:
        seen = test.restrict(plan.seen)
        tokens = ClassTokenSet.from_names(model, result.class_names)
        prof = similarity_decoupling(model, result.learner, tokens, delta, seen.images, result.class_names.index(target))
        report.similarity = prof.means
    if "retrieval" in protocols:
        report.retrieval = retrieval_seed(cfg, model, seed)
    return report


def evaluate_bundle(cfg: ExperimentConfig, model: TwoTowerModel, bundle: dict[str, AttackResult], seed: int) -> EvalReport:
    """Generator report plus seen/unseen rows for the static ablation and the clean baseline."""
    report = evaluate_seed(cfg, model, bundle["generator"], seed)
    if "seen-unseen" in cfg.eval.protocols:
        for name in ("static", "baseline"):
            if name in bundle:
                report.rows.append(seen_unseen_row(cfg, model, bundle[name], seed, f"A/{name}"))
    return report


@dataclass
class DefenseResult:
    nc: dict[str, ReconstructedTrigger]
    clp: list[PruneReport]
    reference: dict


def nc_images(cfg: ExperimentConfig, dtype, seed: int) -> np.ndarray:
    test = corpus(cfg.corpus.test_spec(), dtype)
    seen = test.restrict(split_seen_unseen(len(test.class_names), seed).seen)
    pick = np.random.default_rng([seed, 37]).choice(len(seen), min(cfg.defense.nc_images, len(seen)), replace=False)
    return seen.images[np.sort(pick)]


def nc_config(cfg: ExperimentConfig, seed: int) -> NCConfig:
    d = cfg.defense
    return NCConfig(steps=d.nc_steps, lam=d.nc_lambda, lr=d.nc_lr, optimizer=d.nc_optimizer, seed=seed)


def defend_seed(cfg: ExperimentConfig, model: TwoTowerModel, bundle: dict[str, AttackResult], seed: int) -> DefenseResult:
    """Trigger reconstruction on the clean and attacked learners; CLP sweep on the attacked one.

    CLP is scored on seen test classes, where the attack was trained.
    """
    attacked = bundle["generator"]
    tokens = ClassTokenSet.from_names(model, attacked.class_names)
    images = nc_images(cfg, model.dtype, seed)
    ncfg = nc_config(cfg, seed)
    nc = {name: neural_cleanse(model, bundle[name].learner, tokens, images, ncfg) for name in ("baseline", "generator")}

    test = corpus(cfg.corpus.test_spec(), model.dtype)
    plan = split_seen_unseen(len(test.class_names), seed)

    def score(m):
        r = evaluate_classes(m, attacked.learner, test, plan.seen, attacked.target_name, attacked.trigger.delta)
        return r["acc"], r["asr"]

    acc, asr = score(model)
    sweep = clp_sweep(model, cfg.defense.clp_u, score)
    return DefenseResult(nc, sweep, {"acc": acc, "asr": asr})


def patch_fixture_nc(cfg: ExperimentConfig, model: TwoTowerModel, seed: int) -> ReconstructedTrigger:
    """Trigger reconstruction on a patch-poisoned copy of the victim (target = first seen class)."""
    train = corpus(cfg.corpus.train_spec(), model.dtype)
    plan = split_seen_unseen(len(train.class_names), seed)
    few = sample_few_shot(train, plan.seen, cfg.shots, seed)
    poisoned, gen = patch_backdoor_fixture(model, few, plan.seen, target=0, seed=seed)
    tokens = ClassTokenSet.from_names(poisoned, [train.class_names[c] for c in plan.seen])
    return neural_cleanse(poisoned, gen, tokens, nc_images(cfg, model.dtype, seed), nc_config(cfg, seed))


def sweep_point(child: ExperimentConfig, model: TwoTowerModel, seed: int) -> EvalRow:
    """Seen/unseen row of one sweep child for one seed."""
    return seen_unseen_row(child, model, attack_seed(child, model, seed), seed, "A")


def triggered(images, delta) -> np.ndarray:
    return apply_trigger(images, delta).data
