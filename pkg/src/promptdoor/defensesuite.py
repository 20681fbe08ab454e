"""Two backdoor defenses applied to the composite classifier (image tower + prompts).

* Trigger reconstruction: per class, search for the smallest blending mask
  that sends clean images to that class; classes whose mask is abnormally
  small (MAD outlier) are flagged.
* Channel Lipschitzness pruning: data-free; zero convolution channels whose
  per-channel spectral norm is an upper outlier within its layer.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .numerics import Adam, SgdConfig, Tensor, add, backward, cross_entropy, mul, no_grad, sgd_step, sigmoid, sub, sum_
from .promptengine import ClassTokenSet, ContextGenerator, prompt_logits
from .synthcorpus import Corpus
from .twotower import TwoTowerModel

log = logging.getLogger(__name__)

MAD_SCALE = 1.4826
ANOMALY_THRESHOLD = 2.0


# --- trigger reconstruction ----------------------------------------------------------

@dataclass
class NCConfig:
    steps: int = 200
    lam: float = 0.01
    lam_up: float = 1.5
    success: float = 0.99
    lr: float = 0.1
    optimizer: str = "gd"
    check_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ReconstructedTrigger:
    masks: dict[int, np.ndarray]
    patterns: dict[int, np.ndarray]
    norms: dict[int, float]
    anomaly: dict[int, float] = field(default_factory=dict)
    flagged: list[int] = field(default_factory=list)
    aborted: list[int] = field(default_factory=list)

    @property
    def max_index(self) -> float:
        keys = sorted(self.norms)
        return max_anomaly([self.norms[k] for k in keys]) if len(keys) >= 3 else 0.0

    def to_json(self) -> dict:
        return {
            "norms": {str(k): v for k, v in self.norms.items()},
            "max_index": self.max_index,
            "anomaly_index": {str(k): v for k, v in self.anomaly.items()},
            "flagged": self.flagged,
            "aborted": self.aborted,
        }


def blend(images, mask: Tensor, pattern: Tensor) -> Tensor:
    """``(1 - m) * x + m * p`` with a ``(1, H, W)`` mask broadcast over channels."""
    x = images if isinstance(images, Tensor) else Tensor(images, dtype=mask.dtype)
    return add(mul(sub(1.0, mask), x), mul(mask, pattern))


def reconstruct_trigger(model: TwoTowerModel, learner, class_tokens: ClassTokenSet, images, target: int, config: NCConfig | None = None):
    """Optimise a sigmoid-parameterised (mask, pattern) pair towards ``target``.

    Returns ``(mask, pattern, l1)``; the kept mask is the smallest one that
    reached the success rate, or the last iterate if none did. Raises
    ``FloatingPointError`` on a non-finite loss.
    """
    cfg = config or NCConfig()
    _, _, h, w = np.shape(images)
    rng = np.random.default_rng([cfg.seed, 29, target])
    dt = model.dtype
    m_logit = Tensor(rng.normal(0, 0.1, (1, h, w)).astype(dt), requires_grad=True, name="mask")
    p_logit = Tensor(rng.normal(0, 0.1, (3, h, w)).astype(dt), requires_grad=True, name="pattern")
    sgd = SgdConfig(cfg.lr, "fixed")
    adam = Adam([m_logit, p_logit], lr=cfg.lr, betas=(0.5, 0.9)) if cfg.optimizer == "adam" else None
    lam = cfg.lam
    labels = np.full(len(images), target)
    best = None
    for step in range(cfg.steps):
        mask, pattern = sigmoid(m_logit), sigmoid(p_logit)
        logits = prompt_logits(model, learner, class_tokens, blend(images, mask, pattern))
        l1 = sum_(mask)
        loss = cross_entropy(logits, labels) + l1 * lam
        if not math.isfinite(loss.item()):
            raise FloatingPointError(f"non-finite reconstruction loss for class {target} at step {step}")
        hit = float(np.mean(logits.data.argmax(1) == target))
        if hit >= cfg.success and (best is None or l1.item() < best[2]):
            best = (mask.data.copy(), pattern.data.copy(), l1.item())
        grads = backward(loss, [m_logit, p_logit])
        if adam is not None:
            adam.step()
        else:
            sgd_step([m_logit, p_logit], grads, sgd, step)
        if (step + 1) % cfg.check_every == 0 and hit >= cfg.success:
            lam *= cfg.lam_up
    if best is None:
        with no_grad():
            mask, pattern = sigmoid(m_logit).data, sigmoid(p_logit).data
        best = (mask, pattern, float(mask.sum()))
    return best


def anomaly_index(norms: Sequence[float]) -> np.ndarray:
    """|n - median| / (1.4826 * MAD), MAD floored at 1e-6 * median."""
    n = np.asarray(norms, dtype=np.float64)
    if n.size < 3:
        raise ValueError("anomaly index needs at least three classes")
    med = np.median(n)
    dev = np.abs(n - med)
    mad = max(np.median(dev), 1e-6 * abs(med))
    if mad == 0:
        return np.zeros_like(n)
    return dev / (MAD_SCALE * mad)


def flag_classes(norms: Sequence[float], threshold: float = ANOMALY_THRESHOLD) -> list[int]:
    """Indices whose norm is below the median and whose anomaly index exceeds ``threshold``."""
    n = np.asarray(norms, dtype=np.float64)
    idx = anomaly_index(n)
    return [int(i) for i in np.flatnonzero((n < np.median(n)) & (idx > threshold))]


def max_anomaly(norms: Sequence[float]) -> float:
    """Largest anomaly index among classes with a below-median norm (0 if none).

    Large norms mean the reconstruction found no shortcut, so only the small
    side counts as evidence of a backdoor.
    """
    n = np.asarray(norms, dtype=np.float64)
    low = n < np.median(n)
    return float(anomaly_index(n)[low].max()) if low.any() else 0.0


def neural_cleanse(model, learner, class_tokens: ClassTokenSet, images, config: NCConfig | None = None, classes: Sequence[int] | None = None) -> ReconstructedTrigger:
    classes = list(range(len(class_tokens))) if classes is None else list(classes)
    out = ReconstructedTrigger({}, {}, {})
    for c in classes:
        try:
            m, p, l1 = reconstruct_trigger(model, learner, class_tokens, images, c, config)
        except FloatingPointError as exc:
            log.warning("%s", exc)
            out.aborted.append(c)
            continue
        out.masks[c], out.patterns[c], out.norms[c] = m, p, l1
        log.info("class %d mask l1 %.2f", c, l1)
    keys = sorted(out.norms)
    if len(keys) >= 3:
        idx = anomaly_index([out.norms[k] for k in keys])
        out.anomaly = {k: float(v) for k, v in zip(keys, idx)}
        out.flagged = [keys[i] for i in flag_classes([out.norms[k] for k in keys])]
    return out


# --- patch-backdoor fixture -----------------------------------------------------------

def patch_mask(image_size: int, size: int = 4, margin: int = 1) -> np.ndarray:
    m = np.zeros((1, image_size, image_size))
    m[:, image_size - margin - size:image_size - margin, image_size - margin - size:image_size - margin] = 1.0
    return m


def apply_patch(images, mask: np.ndarray, value: float = 1.0) -> np.ndarray:
    return (1.0 - mask) * np.asarray(images) + mask * value


def patch_backdoor_fixture(model: TwoTowerModel, train: Corpus, classes: Sequence[int], target: int = 0, epochs: int = 20,
                           lr: float = 1e-3, size: int = 2, seed: int = 0) -> tuple[TwoTowerModel, ContextGenerator]:
    """A known-positive model for the reconstruction defense.

    A copy of the victim whose image tower is poisoned together with a fresh
    context generator: clean images keep their labels, images carrying a
    white ``size x size`` corner square go to ``target``. Returns the frozen
    poisoned model and its learner; ``model`` itself is not touched.
    """
    classes = list(classes)
    names = [train.class_names[c] for c in classes]
    poisoned = model.copy()
    tower = [t for k, t in poisoned.params.items() if k.startswith(("conv", "head"))]
    for t in tower:
        t.requires_grad = True
    poisoned.frozen = False
    tokens = ClassTokenSet.from_names(poisoned, names)
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[int(y)] for y in train.labels])
    mask = patch_mask(train.images.shape[-1], size)
    gen = ContextGenerator.init(poisoned, seed)
    params = gen.parameters() + tower
    opt = Adam(params, lr=lr)
    for ep in range(epochs):
        order = np.random.default_rng([seed, 31, ep]).permutation(len(train))
        for i in range(0, len(order), 8):
            idx = order[i:i + 8]
            x = train.images[idx]
            xp = apply_patch(x, mask).astype(x.dtype)
            loss = cross_entropy(prompt_logits(poisoned, gen, tokens, x), labels[idx]) + \
                cross_entropy(prompt_logits(poisoned, gen, tokens, xp), np.full(len(idx), target))
            backward(loss, params)
            opt.step()
    return poisoned.freeze(), gen


# --- channel Lipschitzness pruning ---------------------------------------------------------

def spectral_norm(mat: np.ndarray, steps: int = 50, tol: float = 1e-6, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``A^T A``."""
    a = np.asarray(mat, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if not np.any(a):
        return 0.0
    v = np.random.default_rng(seed).normal(size=a.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(steps):
        u = a @ v
        nu = np.linalg.norm(u)
        if nu == 0:
            return 0.0
        w = a.T @ (u / nu)
        new = np.linalg.norm(w)
        v = w / new
        if abs(new - sigma) <= tol * max(new, 1e-12):
            sigma = new
            break
        sigma = new
    return float(sigma)


def channel_lipschitz(model: TwoTowerModel) -> dict[str, np.ndarray]:
    """Per output channel of every conv layer: spectral norm of its ``(C_in, k*k)`` slice."""
    out = {}
    for name in model.conv_layers():
        w = model.params[name + ".w"].data
        out[name] = np.array([spectral_norm(w[c].reshape(w.shape[1], -1)) for c in range(w.shape[0])])
    return out


def clp_threshold(scores: Sequence[float], u: float) -> float:
    s = np.asarray(scores, dtype=np.float64)
    return float(s.mean() + u * s.std())


@dataclass
class PruneReport:
    u: float
    scores: dict[str, list[float]]
    pruned: dict[str, list[int]]
    acc_after: float | None = None
    asr_after: float | None = None

    @property
    def n_pruned(self) -> int:
        return sum(len(v) for v in self.pruned.values())

    def to_json(self) -> dict:
        return {"u": self.u, "pruned": self.pruned, "n_pruned": self.n_pruned, "scores": self.scores,
                "acc_after": self.acc_after, "asr_after": self.asr_after}


def clp_prune(model: TwoTowerModel, u: float, evaluate: Callable[[TwoTowerModel], tuple[float, float]] | None = None):
    """Zero channels scoring above ``mean + u * std`` in their layer, on a copy.

    ``evaluate(pruned) -> (acc, asr)`` fills the report's after-metrics.
    """
    if u < 0:
        raise ValueError("u must be non-negative")
    scores = channel_lipschitz(model)
    pruned_model = model.copy()
    pruned = {}
    for name, s in scores.items():
        thr = clp_threshold(s, u)
        idx = [int(i) for i in np.flatnonzero(s > thr)]
        pruned[name] = idx
        if idx:
            pruned_model.params[name + ".w"].data[idx] = 0
            pruned_model.params[name + ".b"].data[idx] = 0
    report = PruneReport(float(u), {k: v.tolist() for k, v in scores.items()}, pruned)
    if evaluate is not None:
        report.acc_after, report.asr_after = evaluate(pruned_model)
    return pruned_model, report


def clp_sweep(model: TwoTowerModel, us: Sequence[float], evaluate=None) -> list[PruneReport]:
    return [clp_prune(model, u, evaluate)[1] for u in us]


def write_defense_report(directory, nc: dict[str, ReconstructedTrigger] | None, sweep: Sequence[PruneReport] | None,
                         baseline: dict | None = None) -> tuple[Path, Path]:
    """``defense.json`` (reconstruction results keyed by learner, CLP sweep) and ``defense.csv`` (the sweep)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "neural_cleanse": {k: v.to_json() for k, v in nc.items()} if nc else None,
        "clp": [r.to_json() for r in sweep] if sweep else None,
        "baseline": baseline,
    }
    j = directory / "defense.json"
    j.write_text(json.dumps(payload, indent=2, sort_keys=True))
    lines = ["u,n_pruned,acc_after,asr_after"]
    for r in sweep or []:
        fmt = lambda v: "" if v is None else f"{v:.4f}"  # noqa: E731
        lines.append(f"{r.u:g},{r.n_pruned},{fmt(r.acc_after)},{fmt(r.asr_after)}")
    c = directory / "defense.csv"
    c.write_text("\n".join(lines) + "\n")
    return c, j


__all__ = [
    "ANOMALY_THRESHOLD", "MAD_SCALE", "NCConfig", "PruneReport", "ReconstructedTrigger", "anomaly_index", "apply_patch",
    "blend", "channel_lipschitz", "clp_prune", "clp_sweep", "clp_threshold", "flag_classes", "max_anomaly", "neural_cleanse",
    "patch_backdoor_fixture", "patch_mask", "reconstruct_trigger", "spectral_norm", "write_defense_report",
]
