"""Record I/O, noise mixing, patching, splits and synthetic stand-in data.

On-disk record format: ``<name>.json`` sidecar
``{"id", "sample_rate_hz", "n_samples", "dtype": "f32le", "data", "source_tag"}``
next to a raw little-endian float32 blob named by ``data`` (default
``<name>.f32``).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, FormatError
from .metrics import SignalRecord

PATCH_LEN = 512
FACTOR_RANGE = (0.2, 2.0)
VAL_FRACTION = 0.3

# Held-out records, identical to the DeepFilter selection.
QT_TEST_IDS = (
    "sel123", "sel233", "sel302", "sel307", "sel820", "sel853", "sel16420",
    "sel16795", "sel0106", "sel0121", "sel32", "sel49", "sel14046", "sel15815",
)


# ----------------------------------------------------------------- record I/O

def _check_finite(samples, rid):
    if not np.all(np.isfinite(samples)):
        raise DataError(f"record {rid!r} contains NaN or Inf samples")


def load_record(path, format=None):
    """Read a record from a ``f32le`` sidecar (``.json``) or a ``csv`` export."""
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "f32le"
    if format == "csv":
        return load_csv_record(path)
    if format != "f32le":
        raise FormatError(f"unknown record format {format!r}")
    try:
        meta = json.loads(path.read_text())
        rid = str(meta["id"])
        rate = float(meta["sample_rate_hz"])
        n = int(meta["n_samples"])
        dtype = meta.get("dtype", "f32le")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad record sidecar ({exc})") from exc
    if dtype != "f32le":
        raise FormatError(f"{path}: unsupported dtype {dtype!r}")
    blob = path.parent / meta.get("data", path.with_suffix(".f32").name)
    try:
        raw = blob.read_bytes()
    except OSError as exc:
        raise FormatError(f"{blob}: {exc}") from exc
    if len(raw) != 4 * n:
        raise FormatError(f"{blob}: expected {4 * n} bytes, found {len(raw)}")
    samples = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    _check_finite(samples, rid)
    if rate <= 0 or n < 1:
        raise FormatError(f"{path}: need positive sample rate and length")
    return SignalRecord(rid, samples, rate, str(meta.get("source_tag", "")))


def save_record(record, path):
    """Write ``record`` as sidecar + float32 blob; returns the sidecar path."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = path.with_suffix(".f32")
    blob.write_bytes(np.asarray(record.samples, dtype="<f4").tobytes())
    meta = {
        "id": record.id,
        "sample_rate_hz": float(record.sample_rate_hz),
        "n_samples": len(record),
        "dtype": "f32le",
        "data": blob.name,
        "source_tag": record.source_tag,
    }
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_csv_record(path, sample_rate_hz=360.0, record_id=None):
    """Parse a PhysioNet-style CSV export with ``sample_index, value`` columns.

    A header row is optional; extra columns are ignored.
    """
    path = Path(path)
    values = []
    try:
        with path.open(newline="") as fh:
            for i, row in enumerate(csv.reader(fh)):
                if not row or row[0].lstrip().startswith("#"):
                    continue
                try:
                    values.append(float(row[1]))
                except (IndexError, ValueError):
                    if i == 0:
                        continue  # header
                    raise FormatError(f"{path}:{i + 1}: cannot parse {row!r}")
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not values:
        raise FormatError(f"{path}: no samples")
    samples = np.asarray(values, dtype=np.float64)
    rid = record_id or path.stem
    _check_finite(samples, rid)
    return SignalRecord(rid, samples, sample_rate_hz, "csv")


def csv_to_record(csv_path, out_path, sample_rate_hz=360.0, record_id=None):
    rec = load_csv_record(csv_path, sample_rate_hz, record_id)
    return save_record(rec, out_path)


# ------------------------------------------------------------------- mixing

def rescale_to_range(values, lo, hi):
    """Affinely map ``values`` so that its own [min, max] becomes [lo, hi]."""
    values = np.asarray(values, dtype=np.float64)
    vmin, vmax = float(values.min()), float(values.max())
    if vmax == vmin:
        raise DegenerateInputError("cannot rescale a constant noise window")
    return lo + (values - vmin) * ((hi - lo) / (vmax - vmin))


def noise_term(clean, noise_window, factor):
    """``factor * rescale(noise_window -> [min(clean), max(clean)])``."""
    clean = np.asarray(clean, dtype=np.float64)
    return factor * rescale_to_range(noise_window, float(clean.min()), float(clean.max()))


def mix_noise(clean, noise, factor, rng):
    """Corrupt ``clean`` with a randomly placed window of ``noise``.

    Returns ``(noisy, factor, offset)`` where ``offset`` is the window start in
    the noise record. ``rng`` is a ``numpy.random.Generator``.
    """
    c = np.asarray(getattr(clean, "samples", clean), dtype=np.float64)
    n = np.asarray(getattr(noise, "samples", noise), dtype=np.float64)
    if n.size < c.size:
        raise ValueError(f"noise record ({n.size}) shorter than clean segment ({c.size})")
    offset = int(rng.integers(0, n.size - c.size + 1))
    window = n[offset:offset + c.size]
    return c + noise_term(c, window, factor), factor, offset


# ---------------------------------------------------------------- patching

def patchify(record, patch_len=PATCH_LEN):
    """Non-overlapping windows; a short trailing remainder is dropped."""
    if patch_len < 1:
        raise ValueError("patch_len must be >= 1")
    samples = np.asarray(getattr(record, "samples", record), dtype=np.float64)
    n = samples.size // patch_len
    return [samples[i * patch_len:(i + 1) * patch_len].copy() for i in range(n)]


@dataclass(frozen=True)
class PatchPair:
    clean: np.ndarray
    noisy: np.ndarray
    noise_factor: float
    record_id: str
    patch_index: int


@dataclass
class PatchSet:
    """Column-wise storage for many PatchPairs of equal length."""

    clean: np.ndarray          # (N, L)
    noisy: np.ndarray          # (N, L)
    noise_factor: np.ndarray   # (N,)
    record_id: list
    patch_index: np.ndarray    # (N,)

    def __len__(self):
        return int(self.clean.shape[0])

    def __getitem__(self, i):
        return PatchPair(self.clean[i], self.noisy[i], float(self.noise_factor[i]),
                         self.record_id[i], int(self.patch_index[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def record_ids(self):
        return sorted(set(self.record_id))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return PatchSet(self.clean[idx], self.noisy[idx], self.noise_factor[idx],
                        [self.record_id[i] for i in idx], self.patch_index[idx])

    @classmethod
    def empty(cls, patch_len=PATCH_LEN):
        return cls(np.zeros((0, patch_len)), np.zeros((0, patch_len)), np.zeros(0), [],
                   np.zeros(0, dtype=np.int64))

    @classmethod
    def from_pairs(cls, pairs, patch_len=PATCH_LEN):
        pairs = list(pairs)
        if not pairs:
            return cls.empty(patch_len)
        return cls(
            np.stack([p.clean for p in pairs]),
            np.stack([p.noisy for p in pairs]),
            np.array([p.noise_factor for p in pairs], dtype=np.float64),
            [p.record_id for p in pairs],
            np.array([p.patch_index for p in pairs], dtype=np.int64),
        )

    def save(self, directory, name):
        directory = Path(directory)
        np.save(directory / f"{name}_clean.npy", self.clean.astype("<f8"))
        np.save(directory / f"{name}_noisy.npy", self.noisy.astype("<f8"))
        np.save(directory / f"{name}_factor.npy", self.noise_factor.astype("<f8"))
        np.save(directory / f"{name}_patch_index.npy", self.patch_index.astype("<i8"))
        (directory / f"{name}_record_id.json").write_text(json.dumps(self.record_id) + "\n")

    @classmethod
    def load(cls, directory, name):
        directory = Path(directory)
        try:
            return cls(
                np.load(directory / f"{name}_clean.npy"),
                np.load(directory / f"{name}_noisy.npy"),
                np.load(directory / f"{name}_factor.npy"),
                json.loads((directory / f"{name}_record_id.json").read_text()),
                np.load(directory / f"{name}_patch_index.npy"),
            )
        except (OSError, ValueError) as exc:
            raise FormatError(f"{directory}: cannot load split {name!r} ({exc})") from exc


def make_patch_pairs(record, noises, rng, patch_len=PATCH_LEN, factor_range=FACTOR_RANGE):
    """Patch a clean record and corrupt each patch independently.

    Per patch: pick a noise record uniformly, draw a factor uniformly in
    ``factor_range``, then mix at a random window offset.
    """
    lo, hi = factor_range
    pairs = []
    for i, patch in enumerate(patchify(record, patch_len)):
        noise = noises[int(rng.integers(0, len(noises)))]
        factor = float(rng.uniform(lo, hi))
        noisy, _, _ = mix_noise(patch, noise, factor, rng)
        pairs.append(PatchPair(patch, noisy, factor, record.id, i))
    return pairs


# ------------------------------------------------------------------ splits

@dataclass
class DatasetSplit:
    train: PatchSet
    val: PatchSet
    test: PatchSet
    seed: int
    assignment: dict = field(default_factory=dict)   # record id -> split name

    def summary(self):
        out = {"seed": self.seed}
        for name in ("train", "val", "test"):
            part = getattr(self, name)
            out[name] = {"patches": len(part), "records": part.record_ids}
        return out

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("train", "val", "test"):
            getattr(self, name).save(directory, name)
        meta = {"seed": self.seed, "assignment": self.assignment,
                "patch_len": int(self.train.clean.shape[1]) if len(self.train) else None}
        (directory / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        try:
            meta = json.loads((directory / "dataset.json").read_text())
        except (OSError, ValueError) as exc:
            raise FormatError(f"{directory}: not a prepared dataset ({exc})") from exc
        return cls(*(PatchSet.load(directory, n) for n in ("train", "val", "test")),
                   seed=meta["seed"], assignment=meta.get("assignment", {}))


def split_records(record_ids, test_ids, seed, val_fraction=VAL_FRACTION):
    """Assign record ids to train/val/test.

    Non-test ids are sorted, shuffled with ``seed`` and split
    ``ceil((1 - val_fraction) * n)`` / remainder.
    """
    ids = list(record_ids)
    missing = [t for t in test_ids if t not in ids]
    if missing:
        raise ConfigError(f"test ids not among records: {missing}")
    test = set(test_ids)
    rest = sorted(i for i in ids if i not in test)
    rng = np.random.default_rng(seed)
    order = [rest[i] for i in rng.permutation(len(rest))]
    n_train = math.ceil(round((1.0 - val_fraction) * len(order), 9))
    assignment = {rid: "test" for rid in sorted(test)}
    assignment.update({rid: "train" for rid in order[:n_train]})
    assignment.update({rid: "val" for rid in order[n_train:]})
    return assignment


def build_splits(records, test_ids=QT_TEST_IDS, seed=0, noises=None, patch_len=PATCH_LEN,
                 factor_range=FACTOR_RANGE, val_fraction=VAL_FRACTION):
    """Split records by id and turn each into corrupted patches.

    ``noises`` is a list of noise SignalRecords. Mixing uses a stream derived
    from ``seed`` and the record's position in id order, so it does not
    depend on which split a record lands in.
    """
    if not noises:
        raise ConfigError("at least one noise record is required")
    by_id = {r.id: r for r in records}
    if len(by_id) != len(records):
        raise ConfigError("duplicate record ids")
    assignment = split_records(by_id, test_ids, seed, val_fraction)
    parts = {"train": [], "val": [], "test": []}
    for k, rid in enumerate(sorted(by_id)):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        parts[assignment[rid]].extend(
            make_patch_pairs(by_id[rid], noises, rng, patch_len, factor_range)
        )
    return DatasetSplit(
        *(PatchSet.from_pairs(parts[n], patch_len) for n in ("train", "val", "test")),
        seed=seed, assignment=assignment,
    )


# --------------------------------------------------------------- synthetic

# P, Q, R, S, T waves: (offset from R in s, amplitude, width in s)
_BEAT_TEMPLATE = (
    (-0.20, 0.12, 0.025),
    (-0.035, -0.10, 0.010),
    (0.0, 1.00, 0.012),
    (0.035, -0.22, 0.011),
    (0.28, 0.30, 0.045),
)


def synth_ecg(beats, rate_hz=360.0, morphology_seed=0, heart_rate_bpm=None, record_id=None):
    """Synthetic single-lead ECG built from Gaussian P-QRS-T bumps.

    RR intervals are jittered by ~5%; wave amplitudes and widths are perturbed
    per record (not per beat) by ``morphology_seed``. Baseline is zero.
    """
    if beats < 1 or rate_hz <= 0:
        raise ValueError("beats and rate_hz must be positive")
    rng = np.random.default_rng(morphology_seed)
    bpm = heart_rate_bpm if heart_rate_bpm is not None else float(rng.uniform(55, 95))
    rr_mean = 60.0 / bpm
    waves = [(off, amp * rng.uniform(0.8, 1.2), w * rng.uniform(0.85, 1.15))
             for off, amp, w in _BEAT_TEMPLATE]
    rr = rr_mean * (1.0 + 0.05 * rng.standard_normal(beats))
    rr = np.clip(rr, 0.7 * rr_mean, 1.3 * rr_mean)
    lead = 0.4 * rr_mean
    r_times = lead + np.concatenate([[0.0], np.cumsum(rr[:-1])])
    duration = r_times[-1] + 0.6 * rr_mean
    n = int(round(duration * rate_hz))
    t = np.arange(n) / rate_hz
    x = np.zeros(n)
    for rt in r_times:
        for off, amp, w in waves:
            x += amp * np.exp(-0.5 * ((t - rt - off) / w) ** 2)
    rid = record_id or f"synth_ecg_{morphology_seed}"
    return SignalRecord(rid, x, rate_hz, "synthetic")


def synth_wander(length, components=3, seed=0, rate_hz=360.0, band=(0.5, 8.0),
                 band_level=0.5, record_id=None):
    """Baseline-wander-like noise record.

    ``components`` sinusoids with frequencies in 0.05-0.5 Hz and random phase
    plus a band-limited Gaussian process in ``band`` Hz whose RMS is
    ``band_level`` times the sinusoid mixture's RMS. ``band_level=0`` gives
    pure sinusoids.
    """
    if length < 1 or components < 1 or rate_hz <= 0:
        raise ValueError("length, components and rate_hz must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(length) / rate_hz
    freqs = rng.uniform(0.05, 0.5, components)
    amps = rng.uniform(0.5, 1.0, components)
    phases = rng.uniform(0, 2 * np.pi, components)
    x = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    if band_level > 0:
        spec = np.fft.rfft(rng.standard_normal(length))
        f = np.fft.rfftfreq(length, 1.0 / rate_hz)
        spec[(f < band[0]) | (f > band[1])] = 0.0
        bl = np.fft.irfft(spec, n=length)
        rms_bl = np.sqrt(np.mean(bl**2))
        if rms_bl > 0:
            x = x + bl * (band_level * np.sqrt(np.mean(x**2)) / rms_bl)
    rid = record_id or f"synth_wander_{seed}"
    return SignalRecord(rid, x, rate_hz, "synthetic")


def synth_corpus(n_records, seconds=60.0, rate_hz=360.0, seed=0, n_noise=3,
                 noise_seconds=None, band=(0.5, 8.0), band_level=0.5):
    """Clean records ``synth_000..`` and noise records ``noise_0..``."""
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(n_records + n_noise)
    clean = []
    for i in range(n_records):
        rec = synth_ecg(int(seconds * 2.5), rate_hz, int(seeds[i]), record_id=f"synth_{i:03d}")
        n = int(seconds * rate_hz)
        clean.append(SignalRecord(rec.id, rec.samples[:n], rate_hz, "synthetic"))
    noise_len = int((noise_seconds or max(4 * seconds, 300.0)) * rate_hz)
    noises = [
        synth_wander(noise_len, 3, int(seeds[n_records + j]), rate_hz, band, band_level,
                     record_id=f"noise_{j}")
        for j in range(n_noise)
    ]
    return clean, noises


# ---------------------------------------------------------------- manifest

def load_manifest(path):
    """Read a dataset manifest.

    ``{"seed", "records": [{"path", "role": "clean"|"noise", "format"?}],
    "test_ids", "patch_len"?, "factor_range"?, "val_fraction"?}``; relative
    paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        m = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read manifest ({exc})") from exc
    if not isinstance(m, dict) or "records" not in m or "test_ids" not in m:
        raise ConfigError(f"{path}: manifest needs 'records' and 'test_ids'")
    for entry in m["records"]:
        if entry.get("role") not in ("clean", "noise") or "path" not in entry:
            raise ConfigError(f"{path}: bad record entry {entry!r}")
    m.setdefault("seed", 0)
    m.setdefault("patch_len", PATCH_LEN)
    m.setdefault("factor_range", list(FACTOR_RANGE))
    m.setdefault("val_fraction", VAL_FRACTION)
    m["_base"] = str(path.parent)
    return m


def manifest_records(manifest):
    base = Path(manifest.get("_base", "."))
    clean, noise = [], []
    for entry in manifest["records"]:
        p = Path(entry["path"])
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise ConfigError(f"manifest references missing file {p}")
        rec = load_record(p, entry.get("format"))
        (clean if entry["role"] == "clean" else noise).append(rec)
    if not noise:
        raise ConfigError("manifest lists no noise record")
    if not clean:
        raise ConfigError("manifest lists no clean record")
    return clean, noise


def prepare(manifest, seed=None):
    """Manifest -> DatasetSplit."""
    clean, noise = manifest_records(manifest)
    seed = manifest["seed"] if seed is None else seed
    return build_splits(clean, manifest["test_ids"], int(seed), noise,
                        int(manifest["patch_len"]), tuple(manifest["factor_range"]),
                        float(manifest["val_fraction"]))


def write_synthetic_corpus(out_dir, n_records=10, seconds=60.0, seed=0, n_test=2, **kw):
    """Write synthetic records plus a manifest to ``out_dir``; returns the manifest path."""
    out_dir = Path(out_dir)
    clean, noises = synth_corpus(n_records, seconds, seed=seed, **kw)
    entries = []
    for rec in clean:
        save_record(rec, out_dir / "records" / f"{rec.id}.json")
        entries.append({"path": f"records/{rec.id}.json", "role": "clean"})
    for rec in noises:
        save_record(rec, out_dir / "records" / f"{rec.id}.json")
        entries.append({"path": f"records/{rec.id}.json", "role": "noise"})
    manifest = {
        "seed": seed,
        "records": entries,
        "test_ids": [r.id for r in clean[-n_test:]] if n_test else [],
        "patch_len": PATCH_LEN,
        "factor_range": list(FACTOR_RANGE),
        "val_fraction": VAL_FRACTION,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
