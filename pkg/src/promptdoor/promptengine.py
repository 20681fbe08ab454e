"""Learnable prompt contexts on top of a frozen two-tower model.

Two learners share one interface (``contexts``, ``parameters``):

* :class:`ContextGenerator` produces a context per image from its features,
  ``B + reshape(W2 relu(W1 f + b1) + b2)``, so a trigger that moves image
  features also moves the text features of every class prompt.
* :class:`StaticContext` is one context shared by all images.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import container
from .numerics import ShapeError, Tensor, matmul, no_grad, relu, reshape, softmax
from .twotower import HAND_CRAFTED, TwoTowerModel, cosine_logits


@dataclass
class ClassTokenSet:
    """Frozen class-name embeddings ``(K, e)`` looked up from the model's table."""

    names: list[str]
    embeddings: Tensor

    @classmethod
    def from_names(cls, model: TwoTowerModel, names: Sequence[str]) -> ClassTokenSet:
        ids = model.vocab.ids(list(names))
        emb = Tensor(model.params["tok_emb"].data[ids].copy())
        return cls(list(names), emb)

    def __len__(self) -> int:
        return len(self.names)


def candidate_classes(model: TwoTowerModel, names: Sequence[str], target_name: str | None) -> tuple[ClassTokenSet, int | None]:
    """Class tokens for evaluation; the target is prepended when ``names`` lacks it."""
    names = list(names)
    if target_name is None:
        return ClassTokenSet.from_names(model, names), None
    if target_name not in names:
        names = [target_name] + names
    return ClassTokenSet.from_names(model, names), names.index(target_name)


def _init_context(model: TwoTowerModel, n_ctx: int, rng: np.random.Generator) -> np.ndarray:
    words = HAND_CRAFTED.split()
    if n_ctx == len(words):
        return model.params["tok_emb"].data[model.vocab.encode(HAND_CRAFTED)].copy()
    return rng.normal(0, 0.02, (n_ctx, model.config.e)).astype(model.dtype)


class ContextGenerator:
    """Two-layer network mapping raw image features to an ``(N, e)`` context."""

    kind = "generator"

    def __init__(self, base: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        self.base, self.w1, self.b1, self.w2, self.b2 = base, w1, b1, w2, b2

    @classmethod
    def init(cls, model: TwoTowerModel, seed: int, n_ctx: int | None = None, hidden: int | None = None) -> ContextGenerator:
        cfg = model.config
        n = n_ctx or cfg.n_ctx
        hidden = hidden or max(cfg.d // 2, 1)
        rng = np.random.default_rng([seed, 17])
        dt = model.dtype

        def t(arr, name):
            return Tensor(np.asarray(arr, dtype=dt), requires_grad=True, name=name)

        return cls(
            t(_init_context(model, n, rng), "base"),
            t(rng.normal(0, 0.02, (cfg.d, hidden)), "w1"),
            t(np.zeros(hidden), "b1"),
            t(np.zeros((hidden, n * cfg.e)), "w2"),
            t(np.zeros(n * cfg.e), "b2"),
        )

    @property
    def n_ctx(self) -> int:
        return self.base.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.base, self.w1, self.b1, self.w2, self.b2]

    def contexts(self, image_features: Tensor) -> Tensor:
        """``(B, d)`` features -> ``(B, N, e)`` contexts."""
        return generate_context(self, image_features)

    def arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def copy(self) -> ContextGenerator:
        return ContextGenerator(*[Tensor(p.data.copy(), requires_grad=p.requires_grad, name=p.name) for p in self.parameters()])


class StaticContext:
    """One learned context ``V`` shared by every image."""

    kind = "static"

    def __init__(self, context: Tensor):
        self.context = context

    @classmethod
    def init(cls, model: TwoTowerModel, seed: int, n_ctx: int | None = None) -> StaticContext:
        rng = np.random.default_rng([seed, 19])
        ctx = _init_context(model, n_ctx or model.config.n_ctx, rng)
        return cls(Tensor(ctx, requires_grad=True, name="context"))

    @property
    def n_ctx(self) -> int:
        return self.context.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.context]

    def contexts(self, image_features: Tensor) -> Tensor:
        return self.context

    def arrays(self) -> dict[str, np.ndarray]:
        return {"context": self.context.data}

    def copy(self) -> StaticContext:
        return StaticContext(Tensor(self.context.data.copy(), requires_grad=self.context.requires_grad, name="context"))


def generate_context(gen: ContextGenerator, image_feature) -> Tensor:
    """Context for one ``(d,)`` feature or a ``(B, d)`` batch."""
    f = image_feature if isinstance(image_feature, Tensor) else Tensor(image_feature, dtype=gen.base.dtype)
    if f.shape[-1] != gen.w1.shape[0]:
        raise ShapeError(f"feature dimension {f.shape[-1]} does not match generator input {gen.w1.shape[0]}")
    single = f.ndim == 1
    if single:
        f = reshape(f, (1, -1))
    delta = matmul(relu(matmul(f, gen.w1) + gen.b1), gen.w2) + gen.b2
    out = reshape(delta, (f.shape[0],) + gen.base.shape) + gen.base
    return reshape(out, gen.base.shape) if single else out


def prompt_logits(model: TwoTowerModel, learner, class_tokens: ClassTokenSet, images) -> Tensor:
    """``(B, K)`` logits sim(f(x), g({ctx(x), c_k})) / tau."""
    feats = model.encode_image(images)
    text = model.encode_prompts(learner.contexts(feats), class_tokens.embeddings)
    return cosine_logits(feats, text, model.tau)


def trigger_aware_posterior(model: TwoTowerModel, gen: ContextGenerator, class_tokens: ClassTokenSet, images) -> np.ndarray:
    with no_grad():
        return softmax(prompt_logits(model, gen, class_tokens, images)).data


def static_posterior(model: TwoTowerModel, static: StaticContext, class_tokens: ClassTokenSet, images) -> np.ndarray:
    with no_grad():
        return softmax(prompt_logits(model, static, class_tokens, images)).data


def save_learner(learner, path, meta: dict | None = None) -> None:
    container.write_container(path, f"prompt-{learner.kind}", learner.arrays(), meta or {})


def load_learner(path, precision: int | None = None, allow_cast: bool = False):
    header, arrays = container.read_container(path, precision, allow_cast)
    kind = header["kind"]
    if kind == "prompt-generator":
        names = ("base", "w1", "b1", "w2", "b2")
        return ContextGenerator(*[Tensor(arrays[n], requires_grad=True, name=n) for n in names]), header["meta"]
    if kind == "prompt-static":
        return StaticContext(Tensor(arrays["context"], requires_grad=True, name="context")), header["meta"]
    raise container.ContainerError(f"{path}: not a prompt checkpoint ({kind!r})")
