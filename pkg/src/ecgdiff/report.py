"""Benchmark harness: method rows, stratified tables and the report bundle.

Every aggregate in ``tables.*`` is recomputed from the rows in
``per_sample.csv``; nothing timing-dependent is written to the bundle so a
rerun with the same inputs and seed is byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import baselines
from .checkpoint import file_sha256, load_checkpoint
from .dataset import DatasetSplit, load_manifest, prepare
from .diffusion import reverse_sample
from .errors import ConfigError, DataError
from .metrics import METRICS, SEGMENTS, evaluate_pair, segment_label, segment_of

TABLE_COLUMNS = ("method", "metric", "segment", "mean", "std", "n")
SAMPLE_COLUMNS = ("method", "record_id", "patch_index", "noise_factor", "ssd", "mad", "prd", "cosine")
DEFAULT_SHOTS = (1, 3, 5, 10)
# patches are 512 samples, so the benchmark FIR must be shorter than 1001 taps
BENCH_FIR_TAPS = 511


def _default_fir():
    return baselines.FilterSpec.fir(taps=BENCH_FIR_TAPS).to_dict()


def _default_iir():
    return baselines.FilterSpec.iir().to_dict()


@dataclass
class BenchmarkConfig:
    dataset: str                 # manifest JSON or a prepared dataset directory
    checkpoint: str | None = None
    shots: tuple = DEFAULT_SHOTS
    baselines: tuple = ("identity", "FIR", "IIR")
    out: str = "benchmark"
    seed: int = 0
    fir: dict = field(default_factory=_default_fir)
    iir: dict = field(default_factory=_default_iir)
    max_patches: int | None = None   # first N test patches only
    chunk: int = 64                  # patches per reverse-sampling batch
    plots: bool = True

    def __post_init__(self):
        self.shots = tuple(int(s) for s in self.shots)
        self.baselines = tuple(self.baselines)
        if any(s < 1 for s in self.shots):
            raise ConfigError(f"shots must all be >= 1, got {self.shots}")
        if len(set(self.shots)) != len(self.shots):
            raise ConfigError(f"duplicate shot counts {self.shots}")
        unknown = set(self.baselines) - {"identity", "FIR", "IIR"}
        if unknown:
            raise ConfigError(f"unknown baselines {sorted(unknown)}")
        if self.shots and not self.checkpoint:
            raise ConfigError("model rows requested but no checkpoint given")
        if self.chunk < 1:
            raise ConfigError("chunk must be >= 1")
        if self.max_patches is not None and self.max_patches < 1:
            raise ConfigError("max_patches must be >= 1")
        # validates the filter dictionaries early
        baselines.FilterSpec(**self.fir)
        baselines.FilterSpec(**self.iir)

    def to_dict(self):
        d = asdict(self)
        d["shots"], d["baselines"] = list(self.shots), list(self.baselines)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown benchmark config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from exc
        return cls.from_dict(d)


def load_test_set(dataset):
    """Test patches from a prepared directory or straight from a manifest."""
    p = Path(dataset)
    if p.is_dir():
        return DatasetSplit.load(p).test
    if not p.exists():
        raise ConfigError(f"dataset {p} does not exist")
    return prepare(load_manifest(p)).test


def patch_generator(seed, shot, chunk_index):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(shot), int(chunk_index)))
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0]))


def model_samples(model, schedule, noisy, shots, seed, chunk=64):
    """Reverse-process reconstructions, shape ``(shots, N, L)`` in float64.

    Each (shot, chunk) pair draws from its own stream, so the first ``k``
    shots are the same whatever the total shot count.
    """
    noisy = np.asarray(noisy, dtype=np.float64)
    out = np.empty((shots,) + noisy.shape)
    for c, start in enumerate(range(0, len(noisy), chunk)):
        cond = torch.tensor(noisy[start:start + chunk])
        for m in range(shots):
            y = reverse_sample(cond, schedule, model, patch_generator(seed, m, c))
            out[m, start:start + chunk] = y.double().numpy()
    return out


def method_rows(method, patches, estimates):
    rows = []
    for i in range(len(patches)):
        r = evaluate_pair(patches.clean[i], estimates[i], float(patches.noise_factor[i]),
                          patches.record_id[i], int(patches.patch_index[i]))
        rows.append({"method": method, **asdict(r)})
    return rows


def _summary(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return None, None, 0
    return float(v.mean()), float(v.std()), int(v.size)


def tables_from_rows(rows):
    """Overall plus per-segment mean/std/n for every method and metric."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    out = []
    for method in methods:
        mine = [r for r in rows if r["method"] == method]
        groups = [("overall", mine)]
        for k in range(len(SEGMENTS)):
            groups.append((segment_label(k), [r for r in mine if segment_of(r["noise_factor"]) == k]))
        for label, group in groups:
            for metric in METRICS:
                mean, std, n = _summary([r[metric] for r in group])
                out.append({"method": method, "metric": metric, "segment": label,
                            "mean": mean, "std": std, "n": n})
    return out


def rows_to_csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                    for c in columns])
    return buf.getvalue()


def read_per_sample(path):
    """Parse ``per_sample.csv`` back into row dicts."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "method": r["method"], "record_id": r["record_id"],
                "patch_index": int(r["patch_index"]),
                "noise_factor": float(r["noise_factor"]) if r["noise_factor"] else None,
                **{m: float(r[m]) for m in METRICS},
            })
    return rows


@dataclass
class BenchmarkResult:
    rows: list
    tables: list
    report: dict
    samples: np.ndarray | None = None   # (max_shots, N, L) model reconstructions
    patches: object = None
    estimates: dict = field(default_factory=dict)
    model: object = None
    schedule: object = None


def run_benchmark(config, progress=None):
    patches = load_test_set(config.dataset)
    if config.max_patches is not None:
        patches = patches.subset(range(min(config.max_patches, len(patches))))
    if len(patches) == 0:
        raise DataError("test split is empty")

    estimates = {}
    if "identity" in config.baselines:
        estimates["identity"] = np.array(patches.noisy)
    if "FIR" in config.baselines:
        spec = baselines.FilterSpec(**config.fir)
        estimates["FIR"] = np.stack([baselines.fir_highpass(x, spec) for x in patches.noisy])
    if "IIR" in config.baselines:
        spec = baselines.FilterSpec(**config.iir)
        estimates["IIR"] = np.stack([baselines.iir_highpass(x, spec) for x in patches.noisy])

    recorded = config.to_dict()
    recorded.pop("out")   # where the bundle lands is not part of its provenance
    report = {"config": recorded, "seed": config.seed, "n_test_patches": len(patches),
              "test_records": patches.record_ids, "patch_len": int(patches.clean.shape[1]),
              "software": {"python": platform.python_version(), "numpy": np.__version__,
                           "torch": torch.__version__}}
    samples = ck = None
    if config.shots:
        ck = load_checkpoint(config.checkpoint)
        report["checkpoint_sha256"] = file_sha256(config.checkpoint)
        report["schedule"] = ck.schedule.params()
        report["model_config"] = ck.model.config.to_dict()
        ck.model.eval()
        if progress:
            progress(f"sampling {max(config.shots)} shots for {len(patches)} patches")
        samples = model_samples(ck.model, ck.schedule, patches.noisy, max(config.shots),
                                config.seed, config.chunk)
        for m in sorted(config.shots):
            estimates[f"model@{m}"] = samples[:m].mean(axis=0)

    rows = []
    for method, est in estimates.items():
        rows.extend(method_rows(method, patches, est))
    report["methods"] = list(estimates)
    return BenchmarkResult(rows, tables_from_rows(rows), report, samples, patches, estimates,
                           ck.model if ck else None, ck.schedule if ck else None)


def write_bundle(result, out_dir):
    """Write per-sample rows, tables (CSV and JSON), report.json and figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "per_sample.csv").write_text(rows_to_csv(result.rows, SAMPLE_COLUMNS))
    (out / "tables.csv").write_text(rows_to_csv(result.tables, TABLE_COLUMNS))
    (out / "tables.json").write_text(json.dumps(result.tables, indent=2) + "\n")
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    written = [out / n for n in ("per_sample.csv", "tables.csv", "tables.json", "report.json")]
    if result.report["config"].get("plots", True):
        written += write_figures(result, out / "figures")
    return written


def write_figures(result, fig_dir):
    from . import plotting

    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    patches, est = result.patches, result.estimates
    rate = 360.0
    shown = {k: v for k, v in est.items() if k != "identity"}
    best = max((k for k in est if k.startswith("model@")), key=lambda k: int(k[6:]), default=None)

    paths = []
    i = int(np.argmax(patches.noise_factor))
    paths.append(plotting.plot_overlay(
        patches.clean[i], patches.noisy[i], {k: v[i] for k, v in shown.items()},
        rate, fig_dir / "overlay.png",
        title=f"{patches.record_id[i]} #{patches.patch_index[i]}, factor {patches.noise_factor[i]:.2f}"))

    picks = {}
    for k in range(len(SEGMENTS)):
        idx = [j for j in range(len(patches)) if segment_of(patches.noise_factor[j]) == k]
        if idx:
            picks[segment_label(k)] = idx[0]
    recon_key = best or next(iter(shown), None)
    if picks and recon_key:
        paths.append(plotting.plot_segments(
            {lab: (patches.clean[j], patches.noisy[j], est[recon_key][j]) for lab, j in picks.items()},
            rate, fig_dir / "segments.png", label=recon_key))
    if result.model is not None:
        snaps = trace_snapshots(result.model, result.schedule, patches.noisy[i], result.report["seed"])
        paths.append(plotting.plot_trace(snaps, patches.clean[i], patches.noisy[i], rate,
                                         fig_dir / "reverse_trace.png"))
    return paths


def trace_snapshots(model, schedule, condition, seed, steps=None):
    """Intermediate states of one reverse run, keyed by step index."""
    from .diffusion import shot_generator

    T = schedule.T
    if steps is None:
        steps = sorted({T, (3 * T) // 4, T // 2, T // 4, 0}, reverse=True)
    steps = set(int(s) for s in steps)
    if any(s < 0 or s > T for s in steps):
        raise ConfigError(f"trace steps must lie in 0..{T}")
    snaps = {}

    def keep(t, x):
        if t in steps:
            snaps[t] = x.double().numpy().copy()

    reverse_sample(torch.tensor(np.asarray(condition, dtype=np.float64)), schedule, model,
                   shot_generator(seed, 0), on_step=keep)
    return dict(sorted(snaps.items(), reverse=True))
