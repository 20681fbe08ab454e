"""Measurement protocols: ACC / ASR / H, stealth, similarity decoupling, retrieval.

Every protocol goes through :func:`predict`, so seen/unseen, cross-dataset and
cross-domain evaluations differ only in the corpus and class list they pass.
Labels handed to the metric functions index the candidate ``class_tokens``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .attack import apply_trigger
from .numerics import Tensor, no_grad, normalize
from .promptengine import ClassTokenSet, candidate_classes, prompt_logits
from .synthcorpus import Corpus
from .twotower import TwoTowerModel

PSNR_CAP = 99.0
SSIM_WINDOW = 8


# --- classification metrics ---------------------------------------------------

def predict(model: TwoTowerModel, learner, class_tokens: ClassTokenSet, images, delta=None, batch_size: int = 256) -> np.ndarray:
    """Argmax class index under the prompt learner, optionally on ``x + delta``."""
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = images[i:i + batch_size]
            if delta is not None:
                x = apply_trigger(x, delta).data
            out.append(prompt_logits(model, learner, class_tokens, x).data.argmax(axis=1))
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def accuracy(model, learner, class_tokens, images, labels) -> float:
    if len(images) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(model, learner, class_tokens, images) == np.asarray(labels)) * 100.0)


def attack_success_rate(model, learner, class_tokens, delta, images, target: int, labels=None, exclude_target: bool = False) -> float:
    """Percentage of triggered images classified as ``target``.

    Target-class images count by default; ``exclude_target`` drops them
    (needs ``labels``).
    """
    images = np.asarray(images)
    if exclude_target:
        if labels is None:
            raise ValueError("exclude_target needs labels")
        images = images[np.asarray(labels) != target]
    if len(images) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(model, learner, class_tokens, images, delta) == target) * 100.0)


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise ValueError("harmonic mean needs non-negative inputs")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


# --- stealth -----------------------------------------------------------------

def psnr(clean, backdoor) -> float:
    """PSNR in dB on the 0-255 scale; identical inputs give the cap."""
    a = np.asarray(clean, dtype=np.float64) * 255.0
    b = np.asarray(backdoor, dtype=np.float64) * 255.0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * math.log10(255.0 ** 2 / mse), PSNR_CAP))


def _window_stats(x: np.ndarray, w: int) -> tuple[np.ndarray, np.ndarray]:
    win = np.lib.stride_tricks.sliding_window_view(x, (w, w), axis=(-2, -1))
    return win.mean(axis=(-2, -1)), win


def ssim(clean, backdoor, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` patches (stride 1) and channels.

    Inputs are ``(C, H, W)`` or ``(H, W)`` in [0, 1]. Images smaller than the
    window fall back to a single global window.
    """
    a = np.asarray(clean, dtype=np.float64) * 255.0
    b = np.asarray(backdoor, dtype=np.float64) * 255.0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    w = min(window, a.shape[-1], a.shape[-2])
    if w < window:
        w = None
    if w is None:
        mu_a, mu_b = a.mean(axis=(-2, -1)), b.mean(axis=(-2, -1))
        va, vb = a.var(axis=(-2, -1)), b.var(axis=(-2, -1))
        cov = ((a - mu_a[:, None, None]) * (b - mu_b[:, None, None])).mean(axis=(-2, -1))
    else:
        mu_a, wa = _window_stats(a, w)
        mu_b, wb = _window_stats(b, w)
        da = wa - mu_a[..., None, None]
        db = wb - mu_b[..., None, None]
        va = (da * da).mean(axis=(-2, -1))
        vb = (db * db).mean(axis=(-2, -1))
        cov = (da * db).mean(axis=(-2, -1))
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


def stealth(images, delta, limit: int = 100) -> tuple[float, float]:
    """Mean PSNR and SSIM between the first ``limit`` images and their triggered copies."""
    x = np.asarray(images)[:limit]
    y = apply_trigger(x, delta).data
    return (
        float(np.mean([psnr(a, b) for a, b in zip(x, y)])),
        float(np.mean([ssim(a, b) for a, b in zip(x, y)])),
    )


# --- similarity decoupling ------------------------------------------------------

PAIRINGS = ("clean_img/clean_txt", "clean_img/backdoor_txt", "backdoor_img/clean_txt", "backdoor_img/backdoor_txt")


@dataclass
class SimilarityProfile:
    means: dict[str, float]
    samples: dict[str, list[float]] = field(repr=False)

    def strongest(self) -> str:
        return max(self.means, key=self.means.get)


def similarity_decoupling(model: TwoTowerModel, learner, class_tokens: ClassTokenSet, delta, images, target: int) -> SimilarityProfile:
    """Cosine between image features f(x) / f(x+d) and the target prompt under h(x) / h(x+d)."""
    tgt = Tensor(class_tokens.embeddings.data[target:target + 1])
    with no_grad():
        f_clean = model.encode_image(images)
        f_bd = model.encode_image(apply_trigger(images, delta))
        t_clean = model.encode_prompts(learner.contexts(f_clean), tgt)
        t_bd = model.encode_prompts(learner.contexts(f_bd), tgt)
    b = f_clean.shape[0]

    def cos(f, t):
        fi = normalize(f).data
        tt = normalize(t).data
        tt = tt.reshape(b, -1) if tt.ndim == 3 else np.broadcast_to(tt.reshape(1, -1), fi.shape)
        return np.clip(np.sum(fi * tt, axis=1), -1.0, 1.0)

    raw = {
        PAIRINGS[0]: cos(f_clean, t_clean),
        PAIRINGS[1]: cos(f_clean, t_bd),
        PAIRINGS[2]: cos(f_bd, t_clean),
        PAIRINGS[3]: cos(f_bd, t_bd),
    }
    return SimilarityProfile({k: float(np.mean(v)) for k, v in raw.items()}, {k: v.astype(float).tolist() for k, v in raw.items()})


# --- retrieval ------------------------------------------------------------------

def retrieval_recall_at_1(model: TwoTowerModel, learner, class_tokens: ClassTokenSet, query_images, caption_ids, delta=None, target: int | None = None, gallery_size: int | None = None) -> tuple[float, float | None]:
    """R@1 and B-R@1 for image-to-caption retrieval.

    Captions are ``caption_template + class``: the learned context stands in
    for the template words, so each caption is encoded as ``{h(x), c}``.
    ``caption_ids[i]`` is the class (row of ``class_tokens``) of query ``i``'s
    caption. Queries are split into galleries of ``gallery_size`` pairs (all
    of them by default) and every caption in a gallery is a candidate.
    """
    caption_ids = np.asarray(caption_ids)
    n = len(caption_ids)
    size = gallery_size or n
    hits, bhits, total = 0, 0, 0
    for start in range(0, n, size):
        sl = slice(start, min(start + size, n))
        cls = caption_ids[sl]
        gallery = ClassTokenSet([class_tokens.names[c] for c in cls], Tensor(class_tokens.embeddings.data[cls]))
        pred = predict(model, learner, gallery, query_images[sl])
        hits += int(np.sum(pred == np.arange(len(cls))))
        if delta is not None:
            bpred = predict(model, learner, gallery, query_images[sl], delta)
            bhits += int(np.sum(cls[bpred] == target))
        total += len(cls)
    r1 = hits / total * 100.0
    return r1, (bhits / total * 100.0 if delta is not None else None)


def retrieval_galleries(corpus: Corpus, classes: Sequence[int], seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Order test samples into consecutive galleries holding one image per class.

    Returns the permuted sample indices and the gallery size. Each class
    contributes ``min count`` samples, so every gallery is complete.
    """
    rng = np.random.default_rng([seed, 23])
    per_class = [rng.permutation(np.flatnonzero(corpus.labels == c)) for c in classes]
    m = min(len(p) for p in per_class)
    order = np.stack([p[:m] for p in per_class], axis=1)  # (m, K)
    for row in order:
        rng.shuffle(row)
    return order.reshape(-1), len(classes)


# --- feature export ---------------------------------------------------------------

def export_features(model: TwoTowerModel, images, labels, delta, path) -> Path:
    """Write f(x) and f(x+delta) with labels; ``triggered`` marks the second half."""
    with no_grad():
        clean = model.encode_image(images).data
        bd = model.encode_image(apply_trigger(images, delta)).data
    labels = np.asarray(labels, dtype=np.float64)
    arrays = {
        "features": np.concatenate([clean, bd]),
        "labels": np.concatenate([labels, labels]),
        "triggered": np.concatenate([np.zeros(len(clean)), np.ones(len(bd))]),
    }
    return container.write_container(path, "features", arrays, {"n": len(clean)})


def load_features(path) -> dict[str, np.ndarray]:
    header, arrays = container.read_container(path)
    if header["kind"] != "features":
        raise container.ContainerError(f"{path}: not a feature export")
    return arrays


# --- split-level evaluation and reports -----------------------------------------------

def evaluate_classes(model, learner, corpus: Corpus, classes: Sequence[int], target_name: str, delta, exclude_target: bool = False) -> dict:
    """ACC and ASR on ``corpus`` restricted to ``classes``.

    The target class is added to the candidate set when ``classes`` lacks it,
    and the same candidate set is used for both metrics.
    """
    names = [corpus.class_names[c] for c in classes]
    tokens, t = candidate_classes(model, names, target_name)
    sub = corpus.restrict(classes)
    index = {n: i for i, n in enumerate(tokens.names)}
    labels = np.array([index[corpus.class_names[y]] for y in sub.labels])
    return {
        "acc": accuracy(model, learner, tokens, sub.images, labels),
        "asr": attack_success_rate(model, learner, tokens, delta, sub.images, t, labels, exclude_target),
        "n": int(len(labels)),
    }


@dataclass
class EvalRow:
    """Seen/unseen metrics for one dataset; H is derived from this row only."""

    dataset: str
    acc_seen: float
    asr_seen: float
    acc_unseen: float
    asr_unseen: float

    @property
    def h_acc(self) -> float:
        return harmonic_mean(self.acc_seen, self.acc_unseen)

    @property
    def h_asr(self) -> float:
        return harmonic_mean(self.asr_seen, self.asr_unseen)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["h_acc"], d["h_asr"] = self.h_acc, self.h_asr
        return d


@dataclass
class TransferRow:
    """ACC/ASR on a corpus the prompts were not trained on."""

    dataset: str
    acc: float
    asr: float


CSV_COLUMNS = ("dataset", "split", "acc", "asr")


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    transfer: list[TransferRow] = field(default_factory=list)
    stealth: tuple[float, float] | None = None
    similarity: dict[str, float] | None = None
    retrieval: dict[str, float] | None = None

    def row(self, dataset: str) -> EvalRow:
        for r in self.rows:
            if r.dataset == dataset:
                return r
        raise KeyError(dataset)

    def transfer_row(self, dataset: str) -> TransferRow:
        for r in self.transfer:
            if r.dataset == dataset:
                return r
        raise KeyError(dataset)

    def table(self) -> list[tuple[str, str, float, float]]:
        """Flat ``(dataset, split, acc, asr)`` rows, as written to CSV."""
        out = []
        for r in self.rows:
            out.append((r.dataset, "seen", r.acc_seen, r.asr_seen))
            out.append((r.dataset, "unseen", r.acc_unseen, r.asr_unseen))
            out.append((r.dataset, "h", r.h_acc, r.h_asr))
        for t in self.transfer:
            out.append((t.dataset, "all", t.acc, t.asr))
        if self.retrieval:
            out.append(("retrieval", "r@1", self.retrieval["r1"], self.retrieval["br1"]))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for ds, split, acc, asr in self.table():
            w.writerow([ds, split, f"{acc:.4f}", f"{asr:.4f}"])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "rows": [r.as_dict() for r in self.rows],
            "transfer": [asdict(t) for t in self.transfer],
            "stealth": None if self.stealth is None else {"psnr_db": self.stealth[0], "ssim": self.stealth[1]},
            "similarity": self.similarity,
            "retrieval": self.retrieval,
        }

    @classmethod
    def from_json(cls, d: dict) -> EvalReport:
        rows = [EvalRow(r["dataset"], r["acc_seen"], r["asr_seen"], r["acc_unseen"], r["asr_unseen"]) for r in d.get("rows", [])]
        transfer = [TransferRow(**t) for t in d.get("transfer", [])]
        st = d.get("stealth")
        return cls(rows, transfer, None if st is None else (st["psnr_db"], st["ssim"]), d.get("similarity"), d.get("retrieval"))

    def write(self, directory, stem: str = "metrics") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        c, j = directory / f"{stem}.csv", directory / f"{stem}.json"
        c.write_text(self.to_csv())
        j.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return c, j


__all__ = [
    "CSV_COLUMNS", "EvalReport", "EvalRow", "PAIRINGS", "PSNR_CAP", "SimilarityProfile", "accuracy", "attack_success_rate",
    "evaluate_classes", "export_features", "harmonic_mean", "load_features", "predict", "psnr",
    "retrieval_galleries", "retrieval_recall_at_1", "similarity_decoupling", "ssim", "stealth", "TransferRow",
]
