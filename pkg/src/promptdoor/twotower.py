"""The frozen victim: a small image encoder and text encoder trained contrastively.

Image encoder: three stride-2 3x3 convolutions with ReLU and a linear head.
Text encoder: word + positional embeddings, a shared per-token ReLU layer,
mean pooling, then a two-layer MLP. The per-token nonlinearity applied after
adding positions is what makes the pooled encoder order-sensitive.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import container
from .numerics import (
    Adam, ShapeError, Tensor, backward, concatenate, conv2d, cross_entropy, exp, matmul, no_grad, normalize, relu, reshape,
    softmax, sum_, take_rows, transpose,
)
from .synthcorpus import Corpus, caption_for

log = logging.getLogger(__name__)

HAND_CRAFTED = "a photo of a"
# per-channel pixel standardisation applied inside the image tower
PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)
PRETRAIN_TEMPLATES = (
    "a photo of a",
    "a picture of a",
    "an image of the",
    "a rendering of a",
    "a synthetic photo of a",
    "this is a",
    "a close photo of the",
    "a small picture of one",
    "there is a photo of a",
    "a low resolution image of a",
)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    e: int = 64
    n_ctx: int = 4
    vocab_size: int = 0
    tau: float = 0.07
    image_size: int = 32
    channels: tuple[int, ...] = (16, 32, 64)
    text_hidden: int = 128
    max_len: int = 24

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if min(self.d, self.e, self.n_ctx) < 1:
            raise ValueError("d, e and n_ctx must be >= 1")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.image_size % (2 ** len(self.channels)):
            raise ValueError(f"image_size {self.image_size} not divisible by {2 ** len(self.channels)}")


class Vocabulary:
    """Fixed word list; class names are single tokens."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(dict.fromkeys(tokens))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def ids(self, words: Sequence[str]) -> list[int]:
        missing = [w for w in words if w not in self.index]
        if missing:
            raise KeyError(f"unknown tokens: {missing}")
        return [self.index[w] for w in words]

    def encode(self, text: str) -> list[int]:
        return self.ids(text.split())

    @classmethod
    def build(cls, class_names: Sequence[str]) -> Vocabulary:
        words = [w for t in PRETRAIN_TEMPLATES for w in t.split()]
        return cls(words + list(class_names))


@dataclass(frozen=True)
class HandCraftedPrompt:
    context_tokens: tuple[int, ...]
    class_token: int

    @property
    def length(self) -> int:
        return len(self.context_tokens) + 1


def hand_crafted_prompts(vocab: Vocabulary, class_names: Sequence[str], template: str = HAND_CRAFTED) -> list[HandCraftedPrompt]:
    ctx = tuple(vocab.encode(template))
    return [HandCraftedPrompt(ctx, vocab.index[name]) for name in class_names]


def _as_images(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class TwoTowerModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: dict[str, Tensor], frozen: bool = False):
        if config.vocab_size != len(vocab):
            raise ValueError(f"config.vocab_size={config.vocab_size} but vocabulary has {len(vocab)} tokens")
        self.config = config
        self.vocab = vocab
        self.params = params
        self.frozen = False
        if frozen:
            self.freeze()

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocabulary, seed: int = 0, dtype=np.float32) -> TwoTowerModel:
        rng = np.random.default_rng([seed, 3])

        def p(name, arr):
            return name, Tensor(arr.astype(dtype), requires_grad=True, name=name)

        params = []
        c_in = 3
        for i, c in enumerate(config.channels):
            fan_in = c_in * 9
            params.append(p(f"conv{i}.w", rng.normal(0, np.sqrt(2.0 / fan_in), (c, c_in, 3, 3))))
            params.append(p(f"conv{i}.b", np.zeros(c)))
            c_in = c
        side = config.image_size // 2 ** len(config.channels)
        flat = c_in * side * side
        params.append(p("head.w", rng.normal(0, np.sqrt(1.0 / flat), (flat, config.d))))
        params.append(p("head.b", np.zeros(config.d)))
        e, h = config.e, config.text_hidden
        params.append(p("tok_emb", rng.normal(0, 0.3, (config.vocab_size, e))))
        params.append(p("pos_emb", rng.normal(0, 0.1, (config.max_len, e))))
        params.append(p("txt.w1", rng.normal(0, np.sqrt(2.0 / e), (e, h))))
        params.append(p("txt.b1", np.zeros(h)))
        params.append(p("txt.w2", rng.normal(0, np.sqrt(2.0 / h), (h, h))))
        params.append(p("txt.b2", np.zeros(h)))
        params.append(p("txt.w3", rng.normal(0, np.sqrt(1.0 / h), (h, config.d))))
        params.append(p("txt.b3", np.zeros(config.d)))
        params.append(p("log_tau", np.array(np.log(config.tau))))
        return cls(config, vocab, dict(params))

    # --- state --------------------------------------------------------------

    @property
    def dtype(self):
        return self.params["head.w"].dtype

    @property
    def tau(self) -> float:
        return float(np.exp(self.params["log_tau"].data))

    def freeze(self) -> TwoTowerModel:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def checksum(self) -> str:
        return container.checksum(self.arrays())

    def copy(self) -> TwoTowerModel:
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.params.items()}
        return TwoTowerModel(self.config, self.vocab, params, frozen=self.frozen)

    def conv_layers(self) -> list[str]:
        return [f"conv{i}" for i in range(len(self.config.channels))]

    # --- image tower --------------------------------------------------------

    def encode_image(self, images) -> Tensor:
        """``(B, 3, S, S)`` (or a single ``(3, S, S)``) -> ``(B, d)`` features."""
        x = _as_images(images, self.dtype)
        s = self.config.image_size
        if x.ndim == 3:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"expected images of shape (B, 3, {s}, {s}), got {x.shape}")
        p = self.params
        mean_ = np.asarray(PIXEL_MEAN, dtype=self.dtype).reshape(3, 1, 1)
        inv_std = (1.0 / np.asarray(PIXEL_STD, dtype=np.float64)).astype(self.dtype).reshape(3, 1, 1)
        x = (x - mean_) * inv_std
        for name in self.conv_layers():
            x = relu(conv2d(x, p[name + ".w"], p[name + ".b"], stride=2, padding=1))
        x = reshape(x, (x.shape[0], -1))
        return matmul(x, p["head.w"]) + p["head.b"]

    # --- text tower ---------------------------------------------------------

    def embed(self, ids) -> Tensor:
        return take_rows(self.params["tok_emb"], ids)

    def _token_layer(self, x: Tensor, start: int) -> Tensor:
        p = self.params
        pos = p["pos_emb"][start:start + x.shape[-2]]
        return relu(matmul(x + pos, p["txt.w1"]) + p["txt.b1"])

    def _pooled_head(self, pooled: Tensor) -> Tensor:
        p = self.params
        return matmul(relu(matmul(pooled, p["txt.w2"]) + p["txt.b2"]), p["txt.w3"]) + p["txt.b3"]

    def encode_tokens(self, emb: Tensor) -> Tensor:
        """``(..., L, e)`` embedded token sequences -> ``(..., d)``."""
        if emb.shape[-1] != self.config.e or emb.shape[-2] > self.config.max_len:
            raise ShapeError(f"token embeddings {emb.shape} incompatible with e={self.config.e}, max_len={self.config.max_len}")
        h = self._token_layer(emb, 0)
        pooled = sum_(h, axis=-2) * (1.0 / emb.shape[-2])
        return self._pooled_head(pooled)

    def encode_text(self, context: Tensor, class_embedding: Tensor) -> Tensor:
        """One prompt ``{V, c}``: ``(N, e)`` context and ``(e,)`` class -> ``(d,)``."""
        context = context if isinstance(context, Tensor) else Tensor(context, dtype=self.dtype)
        class_embedding = class_embedding if isinstance(class_embedding, Tensor) else Tensor(class_embedding, dtype=self.dtype)
        if context.ndim != 2 or context.shape != (self.config.n_ctx, self.config.e):
            raise ShapeError(f"context must be ({self.config.n_ctx}, {self.config.e}), got {context.shape}")
        if class_embedding.shape != (self.config.e,):
            raise ShapeError(f"class embedding must be ({self.config.e},), got {class_embedding.shape}")
        seq = concatenate([context, reshape(class_embedding, (1, -1))], axis=0)
        seq = reshape(seq, (1, self.config.n_ctx + 1, self.config.e))
        return reshape(self.encode_tokens(seq), (self.config.d,))

    def encode_prompts(self, context: Tensor, class_embeddings: Tensor) -> Tensor:
        """All prompts ``{V_b, c_k}`` at once.

        ``context`` is ``(B, N, e)`` (image-conditioned) or ``(N, e)`` (shared);
        ``class_embeddings`` is ``(K, e)``. Returns ``(B, K, d)`` or ``(K, d)``.
        The context half of the pooled sum is computed once per image rather
        than once per (image, class) pair; the result equals stacking
        :meth:`encode_tokens` over every pair.
        """
        n = context.shape[-2]
        if context.shape[-1] != self.config.e or class_embeddings.shape[-1] != self.config.e:
            raise ShapeError(f"embedding width mismatch: {context.shape} / {class_embeddings.shape}")
        if n + 1 > self.config.max_len:
            raise ShapeError(f"context length {n} exceeds max_len {self.config.max_len}")
        hc = sum_(self._token_layer(context, 0), axis=-2)  # (B, H) or (H,)
        hk = self._token_layer(reshape(class_embeddings, (class_embeddings.shape[0], 1, -1)), n)
        hk = reshape(hk, (class_embeddings.shape[0], -1))  # (K, H)
        if context.ndim == 3:
            hc = reshape(hc, (hc.shape[0], 1, hc.shape[1]))
        pooled = (hc + hk) * (1.0 / (n + 1))
        return self._pooled_head(pooled)

    def prompt_embeddings(self, prompts: Sequence[HandCraftedPrompt]) -> tuple[Tensor, Tensor]:
        ctx = {p.context_tokens for p in prompts}
        if len(ctx) != 1:
            raise ValueError("hand-crafted prompts must share their context tokens")
        return self.embed(np.array(next(iter(ctx)))), self.embed(np.array([p.class_token for p in prompts]))


# --- similarity and zero-shot inference ---------------------------------------

def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def cosine_logits(image_features: Tensor, text_features: Tensor, tau: float) -> Tensor:
    """sim(f_b, g_bk) / tau for ``(B, d)`` images against ``(B, K, d)`` or ``(K, d)`` texts."""
    fi = normalize(image_features)
    ft = normalize(text_features)
    if ft.ndim == 2:
        sims = matmul(fi, transpose(ft, (1, 0)))
    else:
        b, d = fi.shape
        sims = reshape(matmul(ft, reshape(fi, (b, d, 1))), (b, ft.shape[1]))
    return sims * (1.0 / tau)


def zero_shot_posterior(model: TwoTowerModel, images, prompts: Sequence[HandCraftedPrompt]) -> np.ndarray:
    """Softmax over classes of cosine(image, prompt) / tau with fixed prompts."""
    if len(prompts) < 2:
        raise ValueError("need at least two class prompts")
    with no_grad():
        ctx, cls = model.prompt_embeddings(prompts)
        text = model.encode_prompts(ctx, cls)
        feats = model.encode_image(images)
        return softmax(cosine_logits(feats, text, model.tau)).data


# --- contrastive pre-training -------------------------------------------------

def _distinct_class_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle samples into batches in which no class repeats (no false negatives)."""
    pools = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in np.unique(labels)}
    batches = []
    while True:
        live = [c for c, idx in pools.items() if idx]
        if len(live) < 2:
            break
        weights = np.array([len(pools[c]) for c in live], dtype=np.float64)
        take = min(batch_size, len(live))
        chosen = rng.choice(len(live), size=take, replace=False, p=weights / weights.sum())
        batches.append(np.array([pools[live[i]].pop() for i in chosen]))
    return batches


def contrastive_loss(model: TwoTowerModel, images, caption_ids: np.ndarray) -> Tensor:
    """Symmetric InfoNCE over the in-batch similarity matrix."""
    feats = model.encode_image(images)
    text = model.encode_tokens(model.embed(caption_ids))
    fi, ft = normalize(feats), normalize(text)
    logits = matmul(fi, transpose(ft, (1, 0))) * exp(model.params["log_tau"] * -1.0)
    targets = np.arange(logits.shape[0])
    return (cross_entropy(logits, targets) + cross_entropy(transpose(logits, (1, 0)), targets)) * 0.5


@dataclass
class PretrainLog:
    losses: list[float] = field(default_factory=list)
    taus: list[float] = field(default_factory=list)
    seconds: float = 0.0


def contrastive_pretrain(
    model: TwoTowerModel,
    corpus: Corpus,
    epochs: int,
    batch_size: int,
    seed: int,
    lr: float = 2e-3,
    min_tau: float = 0.01,
) -> tuple[TwoTowerModel, PretrainLog]:
    """Train both towers and the temperature, then freeze and return the model.

    Batches never contain two captions of the same class. Each batch uses one
    caption template drawn at random, so every caption in it has equal length.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2 to have negatives")
    if model.frozen:
        raise RuntimeError("model is frozen")
    rng = np.random.default_rng([seed, 5])
    opt = Adam(model.parameters(), lr=lr)
    class_ids = np.array([model.vocab.index[n] for n in corpus.class_names])
    templates = [model.vocab.encode(t) for t in PRETRAIN_TEMPLATES]
    history = PretrainLog()
    start = time.perf_counter()
    total = 0
    plan = [_distinct_class_batches(corpus.labels, batch_size, np.random.default_rng([seed, 6, ep])) for ep in range(epochs)]
    n_steps = sum(len(b) for b in plan)
    for ep, batches in enumerate(plan):
        ep_loss = []
        for idx in batches:
            tmpl = templates[rng.integers(len(templates))]
            ids = np.array([tmpl + [class_ids[y]] for y in corpus.labels[idx]])
            loss = contrastive_loss(model, corpus.images[idx], ids)
            backward(loss)
            # cosine decay keeps the last epochs from bouncing
            opt.step(lr * 0.5 * (1 + np.cos(np.pi * total / n_steps)))
            total += 1
            lt = model.params["log_tau"]
            lt.data[...] = max(float(lt.data), np.log(min_tau))
            ep_loss.append(loss.item())
        history.losses.append(float(np.mean(ep_loss)))
        history.taus.append(model.tau)
        log.info("pretrain epoch %d loss %.4f tau %.4f", ep, history.losses[-1], model.tau)
    history.seconds = time.perf_counter() - start
    model.freeze()
    return model, history


def build_model(class_names: Sequence[str], config: ModelConfig | None = None, seed: int = 0, dtype=np.float32) -> TwoTowerModel:
    vocab = Vocabulary.build(class_names)
    base = config or ModelConfig()
    cfg = ModelConfig(**{**asdict(base), "vocab_size": len(vocab)})
    return TwoTowerModel.init(cfg, vocab, seed=seed, dtype=dtype)


# --- checkpoints ---------------------------------------------------------------

def save_model(model: TwoTowerModel, path) -> None:
    meta = {"config": asdict(model.config), "vocab": model.vocab.tokens, "frozen": model.frozen}
    container.write_container(path, "twotower", model.arrays(), meta)


def load_model(path, precision: int | None = None, allow_cast: bool = False) -> TwoTowerModel:
    header, arrays = container.read_container(path, precision, allow_cast)
    if header["kind"] != "twotower":
        raise container.ContainerError(f"{path}: expected a twotower checkpoint, found {header['kind']!r}")
    meta = header["meta"]
    cfg = ModelConfig(**meta["config"])
    params = {k: Tensor(v, requires_grad=not meta["frozen"], name=k) for k, v in arrays.items()}
    return TwoTowerModel(cfg, Vocabulary(meta["vocab"]), params, frozen=meta["frozen"])


def caption_token_ids(model: TwoTowerModel, class_names: Sequence[str]) -> np.ndarray:
    return np.array([model.vocab.encode(caption_for(n)) for n in class_names])
