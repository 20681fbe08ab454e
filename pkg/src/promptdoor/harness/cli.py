"""``promptdoor`` command line.

Every subcommand reads an experiment config (``--config``, else the run
directory's ``config.json``, else the built-in defaults), writes under the
run directory (``--out``, else ``$PROMPTDOOR_OUT/<name>``, else
``runs/<name>``) and prints a one-line summary.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .. import container
from ..synthcorpus import split_seen_unseen
from . import pipeline
from .config import SWEEP_AXES, ConfigError, ExperimentConfig, config_hash, load_config
from .images import dump_images
from .runs import (
    AggregateReport, Layout, RunManifest, aggregate_runs, load_bundle, load_checkpoint, render_table, save_bundle,
    save_checkpoint, sweep_csv,
)

OUT_ENV = "PROMPTDOOR_OUT"
COMMANDS = ("pretrain", "attack", "eval", "defend", "sweep", "dump-images", "report")

log = logging.getLogger("promptdoor")


class CliError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptdoor", description="Backdoored prompt learning experiments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="experiment config (JSON)")
        s.add_argument("--out", type=Path, help=f"run directory (default ${OUT_ENV}/<name> or runs/<name>)")
        s.add_argument("--seed", type=int, help="run this seed only")
        s.add_argument("--precision", type=int, choices=(32, 64), help="floating-point width")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "sweep":
            s.add_argument("--axis", choices=SWEEP_AXES, action="append", help="sweep only this axis (repeatable)")
        if name == "dump-images":
            s.add_argument("--count", type=int, default=4, help="images per kind")
    return p


def resolve(args) -> tuple[ExperimentConfig, Layout]:
    cfg = None
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.out is not None and Layout(args.out).config.is_file():
        cfg = load_config(Layout(args.out).config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seeds([args.seed])
    if args.precision is not None:
        cfg = dataclasses.replace(cfg, precision=args.precision)
    out = args.out or Path(os.environ.get(OUT_ENV, "runs")) / cfg.name
    return cfg, Layout(out)


def _victim(cfg: ExperimentConfig, layout: Layout):
    path = Path(cfg.victim) if cfg.victim else layout.victim
    if not path.is_file():
        raise CliError(f"{path}: victim checkpoint missing; run `pretrain` first")
    return load_checkpoint(path, precision=cfg.precision)


def _record(layout: Layout, cfg: ExperimentConfig, step: str, paths, seconds: float, metrics: dict | None = None) -> None:
    """Merge one step into the run-level manifest and keep the config beside it."""
    layout.root.mkdir(parents=True, exist_ok=True)
    layout.config.write_text(cfg.to_json())
    if layout.manifest.is_file():
        old = RunManifest.read(layout.manifest)
        artifacts, metrics_all, wall = old.artifacts, old.metrics, old.wall_clock_s
        if old.config_hash != config_hash(cfg):
            artifacts, metrics_all, wall = {}, {}, 0.0
    else:
        artifacts, metrics_all, wall = {}, {}, 0.0
    artifacts[step] = [str(p) for p in paths]
    if metrics is not None:
        metrics_all[step] = metrics
    RunManifest.create(cfg, cfg.seeds, wall + seconds, artifacts, metrics_all).write(layout.manifest)


def cmd_pretrain(cfg, layout, args) -> str:
    t = time.perf_counter()
    model, hist = pipeline.pretrain_victim(cfg)
    path = save_checkpoint(model, layout.victim)
    _record(layout, cfg, "pretrain", [path], time.perf_counter() - t, {"losses": hist.losses, "tau": hist.taus})
    return f"pretrain: {len(hist.losses)} epochs, final loss {hist.losses[-1]:.4f}, tau {model.tau:.4f} -> {path}"


def cmd_attack(cfg, layout, args) -> str:
    t = time.perf_counter()
    model = _victim(cfg, layout)
    h = config_hash(cfg)
    paths, linf = [], []
    for seed in cfg.seeds:
        bundle = pipeline.attack_bundle(cfg, model, seed)
        paths += save_bundle(layout, seed, bundle, h)
        linf.append(bundle["generator"].trigger.linf)
    _record(layout, cfg, "attack", paths, time.perf_counter() - t)
    return f"attack: {len(cfg.seeds)} seed(s), max |delta|_inf {max(linf) * 255:.3f}/255 -> {layout.root / 'checkpoints'}"


def _seed_eval(cfg, layout, model, seed) -> RunManifest:
    t = time.perf_counter()
    bundle = load_bundle(layout, seed, config_hash(cfg), cfg.precision)
    report = pipeline.evaluate_bundle(cfg, model, bundle, seed)
    csv_path, json_path = report.write(layout.seed_reports(seed))
    m = RunManifest.create(cfg, [seed], time.perf_counter() - t, {"reports": [str(csv_path), str(json_path)]}, report.to_json())
    m.write(layout.seed_reports(seed) / "manifest.json")
    if "defense" in cfg.eval.protocols:
        _seed_defense(cfg, layout, model, bundle, seed)
    return m


def cmd_eval(cfg, layout, args) -> str:
    t = time.perf_counter()
    model = _victim(cfg, layout)
    manifests = [_seed_eval(cfg, layout, model, s) for s in cfg.seeds]
    agg = aggregate_runs(manifests)
    paths = agg.write(layout.reports)
    _record(layout, cfg, "eval", paths, time.perf_counter() - t, agg.to_json())
    try:
        acc, asr = agg.value("A", "h")
        head = f"H ACC {acc:.2f} H ASR {asr:.2f}"
    except KeyError:
        head = f"{len(agg.table)} rows"
    return f"eval: {len(manifests)} seed(s), {head} -> {paths[0]}"


def _seed_defense(cfg, layout, model, bundle, seed):
    from ..defensesuite import write_defense_report

    res = pipeline.defend_seed(cfg, model, bundle, seed)
    return res, write_defense_report(layout.defense(seed), res.nc, res.clp, res.reference)


def cmd_defend(cfg, layout, args) -> str:
    t = time.perf_counter()
    model = _victim(cfg, layout)
    paths, idx, flagged = [], [], []
    for seed in cfg.seeds:
        bundle = load_bundle(layout, seed, config_hash(cfg), cfg.precision)
        res, written = _seed_defense(cfg, layout, model, bundle, seed)
        paths += written
        idx.append(res.nc["baseline"].max_index)
        flagged.append(res.nc["generator"].flagged)
    _record(layout, cfg, "defend", paths, time.perf_counter() - t)
    return (f"defend: {len(cfg.seeds)} seed(s), clean max anomaly index {max(idx):.2f}, "
            f"attacked flagged {flagged} -> {layout.reports / 'defense'}")


def cmd_sweep(cfg, layout, args) -> str:
    t = time.perf_counter()
    model = _victim(cfg, layout)
    axes = args.axis or list(SWEEP_AXES)
    paths = []
    for axis in axes:
        rows = []
        for value, child in cfg.sweep_children(axis):
            rows.append((value, [pipeline.sweep_point(child, model, s) for s in cfg.seeds]))
            log.info("sweep %s=%s done", axis, value)
        p = layout.reports / f"sweep_{axis}.csv"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(sweep_csv(axis, rows))
        paths.append(p)
    _record(layout, cfg, "sweep", paths, time.perf_counter() - t)
    return f"sweep: axes {', '.join(axes)} over {len(cfg.seeds)} seed(s) -> {layout.reports}"


def cmd_dump_images(cfg, layout, args) -> str:
    t = time.perf_counter()
    paths = []
    test = pipeline.corpus(cfg.corpus.test_spec(), pipeline.DTYPES[cfg.precision])
    for seed in cfg.seeds:
        tp = layout.trigger(seed, "generator")
        if not tp.is_file():
            raise CliError(f"{tp}: missing; run `attack` first")
        trig = load_checkpoint(tp, precision=cfg.precision)
        seen = test.restrict(split_seen_unseen(len(test.class_names), seed).seen)
        pick = np.random.default_rng([seed, 41]).choice(len(seen), min(args.count, len(seen)), replace=False)
        paths += dump_images(seen.images[np.sort(pick)], trig, layout.images(seed))
    _record(layout, cfg, "dump-images", paths, time.perf_counter() - t)
    return f"dump-images: {len(paths)} files -> {layout.root / 'images'}"


def cmd_report(cfg, layout, args) -> str:
    src = layout.reports / "aggregate.json"
    if not src.is_file():
        raise CliError(f"{src}: missing; run `eval` first")
    agg = AggregateReport.from_json(json.loads(src.read_text()))
    text = render_table(agg)
    out = layout.reports / "table.md"
    out.write_text(text)
    print(text, end="")
    return f"report: {len(agg.table)} rows -> {out}"


HANDLERS = {
    "pretrain": cmd_pretrain, "attack": cmd_attack, "eval": cmd_eval, "defend": cmd_defend, "sweep": cmd_sweep,
    "dump-images": cmd_dump_images, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg, layout = resolve(args)
        print(HANDLERS[args.command](cfg, layout, args))
    except (ConfigError, CliError, container.ContainerError, FileNotFoundError) as exc:
        print(f"promptdoor {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
