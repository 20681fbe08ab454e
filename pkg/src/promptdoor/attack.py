"""Backdoor injection through prompt learning with an l-inf bounded additive trigger.

Training runs in two stages. The warm-up stage moves only the trigger,
with the prompt learner held at its random initialisation; the joint stage
then updates learner and trigger together from the same loss evaluation.
After every trigger step the trigger is clipped back into the l-inf ball.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .numerics import SgdConfig, Tensor, add, backward, clamp, cross_entropy, sgd_step
from .promptengine import ClassTokenSet, ContextGenerator, StaticContext, prompt_logits
from .synthcorpus import Corpus
from .twotower import TwoTowerModel

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``last_good`` holds the last finite state."""

    def __init__(self, msg: str, last_good: dict | None = None):
        super().__init__(msg)
        self.last_good = last_good


class ConstraintViolation(AssertionError):
    pass


@dataclass
class Trigger:
    delta: np.ndarray
    epsilon: float = 4 / 255

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")

    @classmethod
    def zeros(cls, image_shape, epsilon: float = 4 / 255, dtype=np.float32) -> Trigger:
        return cls(np.zeros(image_shape, dtype=dtype), epsilon)

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max(initial=0.0))

    def check(self) -> None:
        # exact comparison against the float-rounded budget the clip used
        if self.linf > self.delta.dtype.type(self.epsilon):
            raise ConstraintViolation(f"||delta||_inf = {self.linf:.6g} exceeds epsilon = {self.epsilon:.6g}")


@dataclass
class AttackConfig:
    target_class: int = 0
    epsilon: float = 4 / 255
    warmup_epochs: int = 3
    joint_epochs: int = 10
    alpha: float = 0.1
    beta: float = 0.002
    lr_warmup_epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    learner: str = "generator"
    clean_only: bool = False
    n_ctx: int | None = None

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be non-negative")
        if self.target_class < 0:
            raise ValueError("target_class must be a non-negative index")
        if self.warmup_epochs < 0 or self.joint_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learner not in ("generator", "static"):
            raise ValueError(f"unknown learner {self.learner!r}")
        if self.n_ctx is not None and self.n_ctx < 1:
            raise ValueError("n_ctx must be >= 1")


def apply_trigger(images, delta) -> Tensor:
    """``clip(x + delta, 0, 1)``; differentiable in both arguments."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    d = delta if isinstance(delta, Tensor) else Tensor(delta, dtype=x.dtype)
    if x.shape[-3:] != d.shape:
        raise ValueError(f"trigger shape {d.shape} does not match image shape {x.shape[-3:]}")
    return clamp(add(x, d), 0.0, 1.0)


def project_linf(trigger: Trigger) -> Trigger:
    np.clip(trigger.delta, -trigger.epsilon, trigger.epsilon, out=trigger.delta)
    return trigger


def loss_tri(model: TwoTowerModel, learner, class_tokens: ClassTokenSet, delta, images, target: int) -> Tensor:
    """Mean of -log p(target | x + delta) over the batch."""
    logits = prompt_logits(model, learner, class_tokens, apply_trigger(images, delta))
    return cross_entropy(logits, np.full(logits.shape[0], target))


def loss_cle(model: TwoTowerModel, learner, class_tokens: ClassTokenSet, images, labels) -> Tensor:
    """Mean of -log p(y_i | x_i) over the clean batch."""
    return cross_entropy(prompt_logits(model, learner, class_tokens, images), np.asarray(labels))


def loss_total(model, learner, class_tokens, delta, images, labels, target: int) -> Tensor:
    return loss_tri(model, learner, class_tokens, delta, images, target) + loss_cle(model, learner, class_tokens, images, labels)


@dataclass
class AttackState:
    model: TwoTowerModel
    learner: ContextGenerator | StaticContext
    class_tokens: ClassTokenSet
    trigger: Trigger
    train: Corpus
    label_map: np.ndarray
    history: dict = field(default_factory=lambda: {"warmup": [], "joint": []})
    linf_checks: int = 0
    iterations: dict = field(default_factory=lambda: {"warmup": 0, "joint": 0})

    @property
    def labels(self) -> np.ndarray:
        """Training labels re-indexed into ``class_tokens``."""
        return self.label_map[self.train.labels]


def _batches(n: int, batch_size: int, seed: int, stage: str, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, {"warmup": 1, "joint": 2}[stage], epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _checked(state: AttackState) -> None:
    state.trigger.check()
    state.linf_checks += 1


def warmup_stage(state: AttackState, config: AttackConfig) -> Trigger:
    """Optimise only the trigger on the trigger loss with fixed rate ``alpha``."""
    sgd = SgdConfig(config.alpha, "fixed")
    n = len(state.train)
    delta = Tensor(state.trigger.delta, requires_grad=True, name="delta")
    for ep in range(config.warmup_epochs):
        losses = []
        for idx in _batches(n, config.batch_size, config.seed, "warmup", ep):
            loss = loss_tri(state.model, state.learner, state.class_tokens, delta, state.train.images[idx], config.target_class)
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite trigger loss in warm-up epoch {ep}")
            (g,) = backward(loss, [delta])
            sgd_step([delta], [g], sgd, state.iterations["warmup"])
            project_linf(state.trigger)
            _checked(state)
            state.iterations["warmup"] += 1
            losses.append(loss.item())
        state.history["warmup"].append(float(np.mean(losses)))
        log.info("warm-up epoch %d trigger loss %.4f", ep, state.history["warmup"][-1])
    return state.trigger


def joint_stage(state: AttackState, config: AttackConfig):
    """Update learner and trigger together with a warm-up + cosine schedule on ``beta``."""
    if config.joint_epochs == 0:
        return state.learner, state.trigger
    n = len(state.train)
    per_epoch = math.ceil(n / config.batch_size)
    sgd = SgdConfig(config.beta, "warmup_cosine", min(config.lr_warmup_epochs, config.joint_epochs - 1), config.joint_epochs, per_epoch)
    params = state.learner.parameters()
    delta = Tensor(state.trigger.delta, requires_grad=not config.clean_only, name="delta")
    labels = state.labels
    last_good = None
    for ep in range(config.joint_epochs):
        losses = {"total": [], "tri": [], "cle": []}
        for idx in _batches(n, config.batch_size, config.seed, "joint", ep):
            x, y = state.train.images[idx], labels[idx]
            l_cle = loss_cle(state.model, state.learner, state.class_tokens, x, y)
            if config.clean_only:
                l_tri, total = None, l_cle
            else:
                l_tri = loss_tri(state.model, state.learner, state.class_tokens, delta, x, config.target_class)
                total = l_tri + l_cle
            if not math.isfinite(total.item()):
                raise TrainingDiverged(f"non-finite loss in joint epoch {ep}", last_good)
            last_good = {"learner": state.learner.copy(), "delta": state.trigger.delta.copy()}
            wrt = params + ([] if config.clean_only else [delta])
            grads = backward(total, wrt)
            sgd_step(wrt, grads, sgd, state.iterations["joint"])
            if not config.clean_only:
                project_linf(state.trigger)
                _checked(state)
            state.iterations["joint"] += 1
            losses["total"].append(total.item())
            losses["cle"].append(l_cle.item())
            losses["tri"].append(l_tri.item() if l_tri is not None else 0.0)
        state.history["joint"].append({k: float(np.mean(v)) for k, v in losses.items()})
        log.info("joint epoch %d %s", ep, state.history["joint"][-1])
    return state.learner, state.trigger


@dataclass
class AttackResult:
    learner: ContextGenerator | StaticContext
    trigger: Trigger
    class_names: list[str]
    target_name: str
    manifest: dict


def run_attack(model: TwoTowerModel, train: Corpus, classes, config: AttackConfig) -> AttackResult:
    """Full pipeline on the few-shot set ``train`` restricted to ``classes``.

    ``config.target_class`` indexes ``classes`` (0 = first training class).
    """
    if not model.frozen:
        raise RuntimeError("the victim model must be frozen before prompt learning")
    classes = [int(c) for c in classes]
    names = [train.class_names[c] for c in classes]
    tokens = ClassTokenSet.from_names(model, names)
    label_map = np.full(len(train.class_names), -1)
    label_map[classes] = np.arange(len(classes))
    if np.any(label_map[train.labels] < 0):
        raise ValueError("training set contains classes outside `classes`")
    if config.learner == "generator":
        learner = ContextGenerator.init(model, config.seed, n_ctx=config.n_ctx)
    else:
        learner = StaticContext.init(model, config.seed, n_ctx=config.n_ctx)
    image_shape = train.images.shape[1:]
    trigger = Trigger.zeros(image_shape, config.epsilon, model.dtype)
    state = AttackState(model, learner, tokens, trigger, train, label_map)
    frozen_sum = model.checksum()
    start = time.perf_counter()
    if not config.clean_only:
        warmup_stage(state, config)
    joint_stage(state, config)
    elapsed = time.perf_counter() - start
    if model.checksum() != frozen_sum:
        raise RuntimeError("frozen model parameters changed during the attack")
    manifest = {
        "config": asdict(config),
        "classes": classes,
        "class_names": names,
        "target_name": names[config.target_class],
        "losses": state.history,
        "iterations": state.iterations,
        "linf_checks": state.linf_checks,
        "final_linf": state.trigger.linf,
        "model_checksum": frozen_sum,
        "wall_clock_s": elapsed,
    }
    return AttackResult(learner, trigger, names, names[config.target_class], manifest)


def save_trigger(trigger: Trigger, path) -> None:
    container.write_container(path, "trigger", {"delta": trigger.delta}, {"epsilon": trigger.epsilon})


def load_trigger(path, precision: int | None = None, allow_cast: bool = False) -> Trigger:
    header, arrays = container.read_container(path, precision, allow_cast)
    if header["kind"] != "trigger":
        raise container.ContainerError(f"{path}: not a trigger checkpoint")
    return Trigger(arrays["delta"], header["meta"]["epsilon"])
