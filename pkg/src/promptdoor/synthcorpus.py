"""Procedural corpus of shape images with templated captions.

Each class is an attribute triple (texture, color, shape) rendered at a
random position, scale and rotation over a gradient background. The scene
is compressed towards mid-grey by ``contrast`` and then overlaid with a
fixed-amplitude grain. Low contrast forces the encoder to resolve small
pixel differences, which is what makes an 8-bit-scale perturbation matter
at 32x32; the grain gives every local window real texture.

Domain variants re-render the same geometry with shifted statistics, so a
sample's label and layout are shared between ``base`` and every shift.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle", "cross", "ring", "diamond", "bar", "star")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.15),
    "cyan": (0.10, 0.85, 0.90),
    "magenta": (0.90, 0.20, 0.85),
    "orange": (1.00, 0.55, 0.10),
    "white": (0.95, 0.95, 0.95),
}
TEXTURES = ("solid", "striped", "dotted", "checkered")
DOMAINS = ("base", "noise-shift", "brightness-shift", "style-shift")

CAPTION_TEMPLATE = "a photo of a {}"


def default_vocab() -> list[tuple[str, str, str]]:
    """16 classes: four shapes x four colors, solid texture. Order is (texture, color, shape)."""
    return [("solid", c, s) for s in SHAPES[:4] for c in list(COLORS)[:4]]


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    image_size: int = 32
    class_vocab: tuple[tuple[str, str, str], ...] = field(default_factory=lambda: tuple(default_vocab()))
    samples_per_class: int = 40
    domain: str = "base"
    contrast: float = 0.25
    grain: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "class_vocab", tuple(tuple(v) for v in self.class_vocab))
        names = [class_name(v) for v in self.class_vocab]
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        if not 0 < self.contrast <= 1:
            raise ValueError(f"contrast must be in (0, 1], got {self.contrast}")
        if self.grain < 0:
            raise ValueError("grain must be non-negative")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        for texture, color, shape in self.class_vocab:
            if texture not in TEXTURES or color not in COLORS or shape not in SHAPES:
                raise ValueError(f"unknown attribute in class {(texture, color, shape)}")

    @property
    def num_classes(self) -> int:
        return len(self.class_vocab)

    @property
    def class_names(self) -> list[str]:
        return [class_name(v) for v in self.class_vocab]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_vocab"] = [list(v) for v in self.class_vocab]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CorpusSpec:
        d = dict(d)
        if "class_vocab" in d:
            d["class_vocab"] = tuple(tuple(v) for v in d["class_vocab"])
        return cls(**d)


def class_name(attrs: Sequence[str]) -> str:
    """Single class token, e.g. ``solid-red-circle``."""
    return "-".join(attrs)


def caption_for(name: str) -> str:
    return CAPTION_TEMPLATE.format(name)


@dataclass
class Sample:
    image: np.ndarray
    label: int
    class_name: tuple[str, ...]
    caption: str


@dataclass
class Corpus:
    """Stacked images ``(n, 3, S, S)`` in [0, 1] with integer labels into ``class_names``."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    spec: CorpusSpec | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        name = self.class_names[int(self.labels[i])]
        return Sample(self.images[i], int(self.labels[i]), (name,), caption_for(name))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def captions(self) -> list[str]:
        return [caption_for(self.class_names[int(y)]) for y in self.labels]

    def subset(self, index) -> Corpus:
        index = np.asarray(index, dtype=np.int64)
        return Corpus(self.images[index], self.labels[index], self.class_names, self.spec)

    def restrict(self, classes: Iterable[int]) -> Corpus:
        """Samples of the given classes only; labels keep their global meaning."""
        keep = np.isin(self.labels, np.asarray(list(classes)))
        return self.subset(np.flatnonzero(keep))


@dataclass(frozen=True)
class SplitPlan:
    seen: tuple[int, ...]
    unseen: tuple[int, ...]

    def __post_init__(self):
        if set(self.seen) & set(self.unseen):
            raise ValueError("seen and unseen classes overlap")


# --- rendering --------------------------------------------------------------

def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    rho = np.hypot(u, v)
    if shape == "circle":
        return rho < r
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) < 0.85 * r
    if shape == "triangle":
        # equilateral, apex up, inscribed in radius r
        return (v > -0.5 * r) & (np.sqrt(3) * u + v < r) & (-np.sqrt(3) * u + v < r)
    if shape == "cross":
        arm = r / 3.0
        return ((np.abs(u) < arm) & (np.abs(v) < r)) | ((np.abs(v) < arm) & (np.abs(u) < r))
    if shape == "ring":
        return (rho < r) & (rho > 0.55 * r)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) < r
    if shape == "bar":
        return (np.abs(u) < r) & (np.abs(v) < r / 3.5)
    if shape == "star":
        phi = np.arctan2(v, u)
        return rho < r * (0.55 + 0.45 * np.cos(5 * phi))
    raise ValueError(shape)


def _texture(texture: str, u: np.ndarray, v: np.ndarray, period: float) -> np.ndarray:
    if texture == "solid":
        return np.ones_like(u)
    if texture == "striped":
        return np.where(np.floor(u / period) % 2 == 0, 1.0, 0.45)
    if texture == "dotted":
        du = (u / period) % 1.0 - 0.5
        dv = (v / period) % 1.0 - 0.5
        return np.where(du * du + dv * dv < 0.09, 0.45, 1.0)
    if texture == "checkered":
        return np.where((np.floor(u / period) + np.floor(v / period)) % 2 == 0, 1.0, 0.45)
    raise ValueError(texture)


def _rotate_hue(rgb: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate colours about the grey axis (Rodrigues rotation in RGB space)."""
    a = np.deg2rad(degrees)
    k = np.ones(3) / np.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    rot = np.eye(3) + np.sin(a) * kx + (1 - np.cos(a)) * (kx @ kx)
    return np.einsum("ij,jhw->ihw", rot, rgb)


def _render(attrs, size: int, geo_rng: np.random.Generator, domain: str, dom_rng: np.random.Generator, contrast: float, grain: float) -> np.ndarray:
    texture, color, shape = attrs
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    bg_level = geo_rng.uniform(0.15, 0.4)
    gx, gy = geo_rng.uniform(-0.12, 0.12, size=2)
    background = bg_level + gx * (xx - 0.5) + gy * (yy - 0.5)
    img = np.repeat(background[None], 3, axis=0)

    r = geo_rng.uniform(0.24, 0.34)
    cx, cy = geo_rng.uniform(0.5 - (0.45 - r), 0.5 + (0.45 - r), size=2)
    angle = geo_rng.uniform(-np.pi / 6, np.pi / 6)
    du, dv = xx - cx, cy - yy
    u = np.cos(angle) * du + np.sin(angle) * dv
    v = -np.sin(angle) * du + np.cos(angle) * dv
    mask = _shape_mask(shape, u, v, r)
    shade = _texture(texture, u, v, period=r / 2.5)
    rgb = np.clip(np.asarray(COLORS[color]) + geo_rng.normal(0, 0.04, size=3), 0, 1)
    fill = rgb[:, None, None] * shade[None]
    img = np.where(mask[None], fill, img)
    img = 0.5 + contrast * (img - 0.5)
    # film-grain texture, added after the contrast compression
    img = img + geo_rng.normal(0, grain, size=img.shape)

    if domain == "noise-shift":
        img = img + dom_rng.normal(0, 0.08, size=img.shape)
    elif domain == "brightness-shift":
        img = 0.85 * img
    elif domain == "style-shift":
        img = _rotate_hue(img, 35.0)
    return np.clip(img, 0.0, 1.0)


def generate(spec: CorpusSpec) -> Corpus:
    """Render ``samples_per_class`` images for every class; pure in ``spec``."""
    if spec.image_size < 8:
        raise ValueError(f"image_size must be at least 8, got {spec.image_size}")
    if spec.num_classes < 2:
        raise ValueError("need at least two classes")
    if spec.samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    k, n = spec.num_classes, spec.samples_per_class
    images = np.empty((k * n, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.repeat(np.arange(k), n)
    dom_id = DOMAINS.index(spec.domain)
    for c, attrs in enumerate(spec.class_vocab):
        # geometry keyed by the class name, not its index, so a vocab reorder keeps images
        name_key = int.from_bytes(hashlib.sha256(class_name(attrs).encode()).digest()[:4], "little")
        for i in range(n):
            geo = np.random.default_rng([spec.seed, name_key, i])
            dom = np.random.default_rng([spec.seed, name_key, i, 1000 + dom_id])
            images[c * n + i] = _render(attrs, spec.image_size, geo, spec.domain, dom, spec.contrast, spec.grain)
    return Corpus(images, labels, spec.class_names, spec)


def split_seen_unseen(num_classes: int, seed: int) -> SplitPlan:
    """Random half/half partition; seen gets the extra class when K is odd."""
    if num_classes < 2:
        raise ValueError("need at least two classes to split")
    perm = np.random.default_rng([seed, 7]).permutation(num_classes)
    n_seen = (num_classes + 1) // 2
    return SplitPlan(tuple(sorted(int(c) for c in perm[:n_seen])), tuple(sorted(int(c) for c in perm[n_seen:])))


def sample_few_shot(corpus: Corpus, classes: Iterable[int], shots: int, seed: int) -> Corpus:
    """Exactly ``shots`` samples per class, drawn without replacement."""
    rng = np.random.default_rng([seed, 11])
    picked = []
    for c in classes:
        idx = np.flatnonzero(corpus.labels == c)
        if len(idx) < shots:
            raise ValueError(f"class {c} ({corpus.class_names[c]}) has {len(idx)} samples, {shots} requested")
        picked.append(np.sort(rng.choice(idx, size=shots, replace=False)))
    return corpus.subset(np.concatenate(picked))


def cross_dataset_variant(spec: CorpusSpec) -> CorpusSpec:
    """Same rendering parameters, every attribute replaced by one the source never uses."""
    used_t = sorted({v[0] for v in spec.class_vocab}, key=TEXTURES.index)
    used_c = sorted({v[1] for v in spec.class_vocab}, key=list(COLORS).index)
    used_s = sorted({v[2] for v in spec.class_vocab}, key=SHAPES.index)
    free_t = [t for t in TEXTURES if t not in used_t]
    free_c = [c for c in COLORS if c not in used_c]
    free_s = [s for s in SHAPES if s not in used_s]
    if len(free_t) < len(used_t) or len(free_c) < len(used_c) or len(free_s) < len(used_s):
        raise ValueError("attribute pools too small for a disjoint variant")
    mt = dict(zip(used_t, free_t))
    mc = dict(zip(used_c, free_c))
    ms = dict(zip(used_s, free_s))
    vocab = tuple((mt[t], mc[c], ms[s]) for t, c, s in spec.class_vocab)
    return replace(spec, seed=spec.seed + 1, class_vocab=vocab)


def with_domain(spec: CorpusSpec, domain: str) -> CorpusSpec:
    return replace(spec, domain=domain)


def union(corpora: Sequence[Corpus]) -> Corpus:
    """Concatenate corpora with disjoint class names into one label space."""
    names: list[str] = []
    images, labels = [], []
    for c in corpora:
        offset = len(names)
        if set(names) & set(c.class_names):
            raise ValueError("corpora share class names")
        names.extend(c.class_names)
        images.append(c.images)
        labels.append(c.labels + offset)
    return Corpus(np.concatenate(images), np.concatenate(labels), names, None)


# --- export / import --------------------------------------------------------

def _sha256(arr: np.ndarray) -> str:
    return hashlib.sha256(arr.tobytes()).hexdigest()


def export_corpus(corpus: Corpus, directory, split: SplitPlan | None = None) -> Path:
    """Write ``manifest.json``, ``images.f32`` and ``labels.f32`` (little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = corpus.images.astype("<f4")
    labels = corpus.labels.astype("<f4")
    (directory / "images.f32").write_bytes(images.tobytes())
    (directory / "labels.f32").write_bytes(labels.tobytes())
    manifest = {
        "format": "promptdoor-corpus",
        "version": 1,
        "spec": corpus.spec.to_dict() if corpus.spec else None,
        "class_names": corpus.class_names,
        "split": {"seen": list(split.seen), "unseen": list(split.unseen)} if split else None,
        "images": {"file": "images.f32", "dtype": "<f4", "shape": list(images.shape), "sha256": _sha256(images)},
        "labels": {"file": "labels.f32", "dtype": "<f4", "shape": list(labels.shape), "sha256": _sha256(labels)},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def import_corpus(directory) -> tuple[Corpus, SplitPlan | None]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {}
    for key in ("images", "labels"):
        entry = manifest[key]
        arr = np.frombuffer((directory / entry["file"]).read_bytes(), dtype=entry["dtype"])
        arr = arr.reshape(entry["shape"])
        if _sha256(arr) != entry["sha256"]:
            raise ValueError(f"checksum mismatch for {entry['file']}")
        arrays[key] = arr
    spec = CorpusSpec.from_dict(manifest["spec"]) if manifest["spec"] else None
    split = manifest.get("split")
    plan = SplitPlan(tuple(split["seen"]), tuple(split["unseen"])) if split else None
    corpus = Corpus(arrays["images"].astype(np.float32), arrays["labels"].astype(np.int64), manifest["class_names"], spec)
    return corpus, plan


__all__ = [
    "COLORS", "CAPTION_TEMPLATE", "Corpus", "CorpusSpec", "DOMAINS", "SHAPES", "Sample", "SplitPlan", "TEXTURES",
    "caption_for", "class_name", "cross_dataset_variant", "default_vocab", "export_corpus", "generate",
    "import_corpus", "sample_few_shot", "split_seen_unseen", "union", "with_domain",
]
