"""Run artifacts: directory layout, manifests, checkpoints and seed aggregation.

Layout of one run directory::

    manifest.json            experiment manifest (config, hash, artifacts)
    config.json              the config every step of this run used
    checkpoints/victim.pdck
    checkpoints/seed{s}/{generator,static,baseline}.{learner,trigger}.pdck
    reports/seed{s}/metrics.{csv,json}, manifest.json
    reports/aggregate.{csv,json}
    reports/defense/seed{s}/defense.{csv,json}
    reports/sweep_{axis}.csv
    reports/table.md
    images/seed{s}/*.png
"""

from __future__ import annotations

import csv
import io
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__, container
from ..attack import AttackResult, Trigger, load_trigger, save_trigger
from ..evalsuite import CSV_COLUMNS, EvalReport, harmonic_mean
from ..promptengine import ContextGenerator, StaticContext, load_learner, save_learner
from ..twotower import TwoTowerModel, load_model, save_model
from .config import ConfigError, ExperimentConfig, config_from_dict, config_hash


class Layout:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def victim(self) -> Path:
        return self.root / "checkpoints" / "victim.pdck"

    def learner(self, seed: int, name: str) -> Path:
        return self.root / "checkpoints" / f"seed{seed}" / f"{name}.learner.pdck"

    def trigger(self, seed: int, name: str) -> Path:
        return self.root / "checkpoints" / f"seed{seed}" / f"{name}.trigger.pdck"

    def seed_reports(self, seed: int) -> Path:
        return self.root / "reports" / f"seed{seed}"

    def defense(self, seed: int) -> Path:
        return self.root / "reports" / "defense" / f"seed{seed}"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def images(self, seed: int) -> Path:
        return self.root / "images" / f"seed{seed}"


# --- checkpoints ------------------------------------------------------------------------

def save_checkpoint(artifact, path, meta: dict | None = None) -> Path:
    """Write a model, prompt learner or trigger to a checksummed container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(artifact, TwoTowerModel):
        save_model(artifact, path)
    elif isinstance(artifact, (ContextGenerator, StaticContext)):
        save_learner(artifact, path, meta)
    elif isinstance(artifact, Trigger):
        save_trigger(artifact, path)
    else:
        raise TypeError(f"cannot checkpoint {type(artifact).__name__}")
    return path


def load_checkpoint(path, precision: int | None = None, allow_cast: bool = False):
    """Inverse of :func:`save_checkpoint`; dispatches on the container kind.

    Checksum failures, format-version mismatches and precision mismatches
    raise :class:`~promptdoor.container.ContainerError` subclasses.
    """
    kind = container.read_header(path)["kind"]
    if kind == "twotower":
        return load_model(path, precision, allow_cast)
    if kind.startswith("prompt-"):
        return load_learner(path, precision, allow_cast)[0]
    if kind == "trigger":
        return load_trigger(path, precision, allow_cast)
    raise container.ContainerError(f"{path}: unknown artifact kind {kind!r}")


def save_bundle(layout: Layout, seed: int, bundle: dict[str, AttackResult], cfg_hash: str) -> list[str]:
    paths = []
    for name, res in bundle.items():
        meta = {"config_hash": cfg_hash, "seed": seed, "manifest": res.manifest}
        paths.append(str(save_checkpoint(res.learner, layout.learner(seed, name), meta)))
        paths.append(str(save_checkpoint(res.trigger, layout.trigger(seed, name))))
    return paths


def load_bundle(layout: Layout, seed: int, cfg_hash: str, precision: int | None = None) -> dict[str, AttackResult]:
    """Reload a seed's learners and triggers; refuses checkpoints made under another config."""
    out = {}
    for name in ("generator", "static", "baseline"):
        lp = layout.learner(seed, name)
        if not lp.is_file():
            raise FileNotFoundError(f"{lp}: missing; run `attack` first")
        learner, meta = load_learner(lp, precision)
        if meta.get("config_hash") != cfg_hash:
            raise ConfigError(f"{lp}: produced by a different config (hash {str(meta.get('config_hash'))[:12]})")
        trig = load_trigger(layout.trigger(seed, name), precision)
        m = meta["manifest"]
        out[name] = AttackResult(learner, trig, m["class_names"], m["target_name"], m)
    return out


# --- manifests -----------------------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str
    config: str
    software_version: str
    seeds: list[int]
    wall_clock_s: float
    artifacts: dict[str, list[str]] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ExperimentConfig, seeds, wall_clock_s: float = 0.0, artifacts=None, metrics=None) -> RunManifest:
        env = {"python": platform.python_version(), "numpy": np.__version__}
        return cls(config_hash(cfg), cfg.to_json(), __version__, list(seeds), float(wall_clock_s), dict(artifacts or {}),
                   dict(metrics or {}), env)

    def experiment_config(self) -> ExperimentConfig:
        return config_from_dict(json.loads(self.config))

    def verify(self) -> None:
        """The stored hash must match the stored config byte-for-byte."""
        if config_hash(self.experiment_config()) != self.config_hash:
            raise ConfigError("manifest config hash does not match its serialized config")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def read(cls, path) -> RunManifest:
        m = cls(**json.loads(Path(path).read_text()))
        m.verify()
        return m


# --- aggregation --------------------------------------------------------------------------

@dataclass
class AggregateReport:
    """Per-metric means across seeds; H columns are per-run H values averaged."""

    n_runs: int
    table: list[tuple[str, str, float, float]]
    stealth: tuple[float, float] | None = None
    similarity: dict[str, float] | None = None

    def value(self, dataset: str, split: str) -> tuple[float, float]:
        for ds, sp, acc, asr in self.table:
            if ds == dataset and sp == split:
                return acc, asr
        raise KeyError((dataset, split))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for ds, split, acc, asr in self.table:
            w.writerow([ds, split, f"{acc:.4f}", f"{asr:.4f}"])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "table": [{"dataset": d, "split": s, "acc": a, "asr": b} for d, s, a, b in self.table],
            "stealth": None if self.stealth is None else {"psnr_db": self.stealth[0], "ssim": self.stealth[1]},
            "similarity": self.similarity,
        }

    @classmethod
    def from_json(cls, d: dict) -> AggregateReport:
        table = [(r["dataset"], r["split"], r["acc"], r["asr"]) for r in d["table"]]
        st = d.get("stealth")
        return cls(d["n_runs"], table, None if st is None else (st["psnr_db"], st["ssim"]), d.get("similarity"))

    def write(self, directory, stem: str = "aggregate") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        c, j = directory / f"{stem}.csv", directory / f"{stem}.json"
        c.write_text(self.to_csv())
        j.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        return c, j


def _mean(values) -> float:
    return float(np.mean(np.asarray(values, dtype=np.float64)))


def aggregate_reports(reports: list[EvalReport]) -> AggregateReport:
    """Average seed reports; ``h`` rows come from each run's own H, then the mean."""
    if not reports:
        raise ValueError("nothing to aggregate")
    keys = [t[:2] for t in reports[0].table()]
    for r in reports[1:]:
        if [t[:2] for t in r.table()] != keys:
            raise ValueError("reports have different row sets")
    cols = np.array([[t[2:] for t in r.table()] for r in reports], dtype=np.float64)  # (runs, rows, 2)
    if len(reports) == 1:
        table = [(d, s, float(a), float(b)) for (d, s), (a, b) in zip(keys, cols[0])]
    else:
        means = cols.mean(axis=0)
        table = [(d, s, float(a), float(b)) for (d, s), (a, b) in zip(keys, means)]
    stealth = None
    if all(r.stealth is not None for r in reports):
        stealth = (_mean([r.stealth[0] for r in reports]), _mean([r.stealth[1] for r in reports]))
    sim = None
    if all(r.similarity for r in reports):
        sim = {k: _mean([r.similarity[k] for r in reports]) for k in reports[0].similarity}
    return AggregateReport(len(reports), table, stealth, sim)


def aggregate_runs(manifests: list[RunManifest]) -> AggregateReport:
    """Average seed manifests sharing one config hash; mixed configs are rejected."""
    if not manifests:
        raise ValueError("nothing to aggregate")
    hashes = {m.config_hash for m in manifests}
    if len(hashes) != 1:
        raise ConfigError(f"cannot aggregate runs of different configs: {sorted(h[:12] for h in hashes)}")
    return aggregate_reports([EvalReport.from_json(m.metrics) for m in manifests])


def h_of_means(report: AggregateReport, dataset: str) -> tuple[float, float]:
    """H of the averaged seen/unseen values; differs from the reported per-run convention."""
    s, u = report.value(dataset, "seen"), report.value(dataset, "unseen")
    return harmonic_mean(s[0], u[0]), harmonic_mean(s[1], u[1])


# --- rendering ----------------------------------------------------------------------------

def render_table(report: AggregateReport) -> str:
    """Seen / unseen / H columns per dataset, ACC and ASR side by side; two decimals."""
    datasets = []
    for ds, split, _, _ in report.table:
        if split == "seen" and ds not in datasets:
            datasets.append(ds)
    lines = [
        f"Averaged over {report.n_runs} run(s).",
        "",
        "| Dataset | Seen ACC | Seen ASR | Unseen ACC | Unseen ASR | H ACC | H ASR |",
        "|---|---|---|---|---|---|---|",
    ]
    for ds in datasets:
        cells = []
        for split in ("seen", "unseen", "h"):
            acc, asr = report.value(ds, split)
            cells += [f"{acc:.2f}", f"{asr:.2f}"]
        lines.append(f"| {ds} | " + " | ".join(cells) + " |")
    transfer = [(d, a, b) for d, s, a, b in report.table if s == "all"]
    if transfer:
        lines += ["", "| Transfer target | ACC | ASR |", "|---|---|---|"]
        lines += [f"| {d} | {a:.2f} | {b:.2f} |" for d, a, b in transfer]
    extra = [(d, a, b) for d, s, a, b in report.table if s == "r@1"]
    if extra:
        lines += ["", "| Retrieval | R@1 | B-R@1 |", "|---|---|---|"]
        lines += [f"| {d} | {a:.2f} | {b:.2f} |" for d, a, b in extra]
    if report.stealth:
        lines += ["", f"Stealth: PSNR {report.stealth[0]:.2f} dB, SSIM {report.stealth[1]:.4f}"]
    if report.similarity:
        lines += ["", "| Similarity pairing | mean cosine |", "|---|---|"]
        lines += [f"| {k} | {v:.4f} |" for k, v in report.similarity.items()]
    return "\n".join(lines) + "\n"


SWEEP_COLUMNS = ("axis", "value", "acc_seen", "asr_seen", "acc_unseen", "asr_unseen", "h_acc", "h_asr")


def sweep_csv(axis: str, rows: list[tuple[object, list]]) -> str:
    """One line per axis value; each metric averaged over the seed rows (H per run first)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for value, seed_rows in rows:
        vals = [_mean([getattr(r, k) for r in seed_rows]) for k in SWEEP_COLUMNS[2:]]
        w.writerow([axis, value, *[f"{v:.4f}" for v in vals]])
    return buf.getvalue()
