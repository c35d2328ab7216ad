"""Synthetic data, sample windows, the wet-pixel filter, splits,
normalization statistics and the on-disk dataset format.

Dataset directory layout::

    manifest.json     UTF-8 JSON, see :class:`DatasetManifest`
    <split>.nwc       one record file per split

Record file: magic ``NWC1``, format version (u32 LE), record count (u64 LE),
then per record a header (sequence id u32, window start u32, H u16, W u16),
``(4 + 4 + 20) * H * W`` little-endian float32 values in the order
rain_in, rain_target, aux, and a CRC32 (u32 LE) of header plus payload.
"""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .datamodel import (
    ALL_VARIABLES,
    AUX_VARIABLES,
    N_AUX_CHANNELS,
    N_INPUT_FRAMES,
    N_TARGET_FRAMES,
    NATIVE_UNITS,
    FrameSequence,
    Sample,
    Unit,
    Variable,
    VariableStats,
    accumulated_to_rate,
    denormalize_array,
    normalize_array,
)
from .exceptions import CorruptDatasetError, CountMismatchError, InvalidInputError

log = logging.getLogger(__name__)

MAGIC = b"NWC1"
FORMAT_VERSION = 1
_FILE_HEADER = struct.Struct("<4sIQ")
_RECORD_HEADER = struct.Struct("<IIHH")
_CRC = struct.Struct("<I")
FRAMES_PER_RECORD = N_INPUT_FRAMES + N_TARGET_FRAMES + N_AUX_CHANNELS


# --------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticConfig:
    seed: int = 0
    n_sequences: int = 16
    size: tuple = (64, 64)
    frames_per_sequence: int = 12
    step_hours: float = 1.0
    # blobs
    n_blobs: tuple = (1, 5)
    radius: tuple = (3.0, 8.0)  # Gaussian sigma in px
    intensity: tuple = (2.0, 12.0)  # peak mm/h
    growth: tuple = (-0.08, 0.08)  # relative intensity change per step
    # advection, px/step
    speed: tuple = (1.0, 3.0)
    direction: tuple = (0.0, 2 * np.pi)  # drift heading, rad (0 = +x)
    rotation: float = 0.01  # max angular velocity, rad/step
    shear: float = 0.01  # max shear rate, 1/step
    # auxiliary coupling
    wind_per_px: float = 0.7  # m/s per px/step (2.5 km pixels, hourly steps)
    wind_noise: float = 0.3  # m/s
    temp_base: float = 255.0  # K
    temp_per_rain: float = -0.4  # K per mm/h of smoothed rain
    pressure_base: float = 101325.0  # Pa
    pressure_per_rain: float = -40.0  # Pa per mm/h of smoothed rain
    humidity_base: float = 0.55
    humidity_per_growth: float = 3.0  # humidity offset per unit growth rate
    accumulation_noise: float = 0.002  # kg/m^2, lets differences go slightly negative
    sequence_gap_hours: float = 6.0

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        for name in ("n_blobs", "radius", "intensity", "growth", "speed", "direction"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise InvalidInputError(f"{name}: range ({lo}, {hi}) is inverted")
            setattr(self, name, (lo, hi))
        if self.n_sequences < 0:
            raise InvalidInputError("n_sequences must be >= 0")
        if self.frames_per_sequence < N_INPUT_FRAMES + N_TARGET_FRAMES:
            raise InvalidInputError("frames_per_sequence must be >= 8")
        if self.n_blobs[0] < 0 or self.radius[0] <= 0:
            raise InvalidInputError("blob count must be >= 0 and radius > 0")
        if self.speed[1] > min(self.size) / 8:
            raise InvalidInputError("speeds above size/8 px per step leave blobs unresolvable")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        for k, val in d.items():
            if isinstance(val, tuple):
                d[k] = list(val)
        return d


@dataclass
class RawSequence:
    """One simulation timeline: rain plus the five auxiliary variables."""

    sequence_id: int
    rain: FrameSequence
    aux: dict

    @property
    def start_hour(self) -> float:
        return self.rain.start_hour

    def __len__(self) -> int:
        return len(self.rain)


def _velocity(cfg, params, ys, xs):
    u0, v0, omega, shear, cy, cx = params
    dy, dx = ys - cy, xs - cx
    u = u0 - omega * dy + shear * dy
    v = v0 + omega * dx
    return u, v


def _gaussians(ys, xs, centers, sigmas, weights):
    out = np.zeros(np.broadcast(ys, xs).shape, dtype=np.float64)
    for (cy, cx), s, w in zip(centers, sigmas, weights):
        out += w * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * s * s))
    return out


def _generate_one(cfg: SyntheticConfig, rng: np.random.Generator, seq_id: int, start_hour: float) -> RawSequence:
    h, w = cfg.size
    n_rates = cfg.frames_per_sequence
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)

    speed = rng.uniform(*cfg.speed)
    angle = rng.uniform(*cfg.direction)
    params = (
        speed * np.cos(angle),
        speed * np.sin(angle),
        rng.uniform(-cfg.rotation, cfg.rotation),
        rng.uniform(-cfg.shear, cfg.shear),
        h / 2,
        w / 2,
    )
    n_blobs = int(rng.integers(cfg.n_blobs[0], cfg.n_blobs[1] + 1))
    # spawn upstream so blobs drift across the domain during the sequence
    travel_y = params[1] * n_rates / 2
    travel_x = params[0] * n_rates / 2
    pos = np.stack([
        rng.uniform(0, h, n_blobs) - travel_y,
        rng.uniform(0, w, n_blobs) - travel_x,
    ], axis=1)
    sigma = rng.uniform(*cfg.radius, n_blobs)
    peak = rng.uniform(*cfg.intensity, n_blobs)
    growth = rng.uniform(*cfg.growth, n_blobs)

    u_field, v_field = _velocity(cfg, params, ys, xs)
    rates, temp, pres, hum, wind_u, wind_v = ([] for _ in range(6))
    for t in range(n_rates):
        rain = _gaussians(ys, xs, pos, sigma, peak)
        rates.append(rain)
        smooth = ndimage.gaussian_filter(rain, 3.0, mode="nearest")
        footprint = _gaussians(ys, xs, pos, 2.0 * sigma, growth)
        temp.append(cfg.temp_base + cfg.temp_per_rain * smooth + 0.02 * (ys - h / 2))
        pres.append(cfg.pressure_base + cfg.pressure_per_rain * smooth + 2.0 * (xs - w / 2))
        hum.append(np.clip(cfg.humidity_base + cfg.humidity_per_growth * footprint, 0.0, 1.0))
        wind_u.append(cfg.wind_per_px * u_field + rng.normal(0, cfg.wind_noise, (h, w)))
        wind_v.append(cfg.wind_per_px * v_field + rng.normal(0, cfg.wind_noise, (h, w)))
        bu, bv = _velocity(cfg, params, pos[:, 0], pos[:, 1])
        pos = pos + np.stack([bv, bu], axis=1)
        peak = peak * (1 + growth)

    acc = np.concatenate([np.zeros((1, h, w)), np.cumsum(np.stack(rates), axis=0)])
    # gauge noise only where rain has fallen, so dry scenes stay exactly dry
    acc = acc + rng.normal(0, cfg.accumulation_noise, acc.shape) * (acc > 0)
    acc_seq = FrameSequence(Variable.RAIN, acc.astype(np.float32), Unit.KG_PER_M2_ACCUMULATED, cfg.step_hours, start_hour)
    rain_seq = accumulated_to_rate(acc_seq)
    aux_start = rain_seq.start_hour
    fields = dict(zip(AUX_VARIABLES, (temp, pres, hum, wind_u, wind_v)))
    aux = {
        var: FrameSequence(var, np.stack(fields[var]).astype(np.float32), NATIVE_UNITS[var], cfg.step_hours, aux_start)
        for var in AUX_VARIABLES
    }
    return RawSequence(seq_id, rain_seq, aux)


def synth_generate(cfg: SyntheticConfig) -> list[RawSequence]:
    """Generate ``cfg.n_sequences`` timelines of advecting Gaussian rain blobs.

    Each sequence draws a smooth velocity field (uniform drift plus rotation
    and shear), moves every blob's center along it, and grows or decays the
    blob intensity at a fixed per-blob rate. Rain is produced as hourly
    accumulations and differenced back to mm/h, like model output. Wind
    channels are the velocity field plus noise; temperature and pressure
    dip under smoothed rain; humidity is raised around growing blobs.

    Sequences are laid end to end on one timeline separated by
    ``sequence_gap_hours``, so a time split never cuts through a sequence.
    """
    rng = np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2 ** 63 - 1, size=cfg.n_sequences)
    period = (cfg.frames_per_sequence + 1) * cfg.step_hours + cfg.sequence_gap_hours
    return [
        _generate_one(cfg, np.random.default_rng(int(s)), i, i * period)
        for i, s in enumerate(seeds)
    ]


def sequences_from_arrays(rain: np.ndarray, aux: dict, sequence_id=0, start_hour=0.0, step_hours=1.0,
                          accumulated=False) -> RawSequence:
    """Wrap user-supplied ``(T, H, W)`` grids as a :class:`RawSequence`.

    ``aux`` maps each auxiliary variable to its grids in native units.
    Accumulated rain (kg/m^2) is differenced into mm/h, dropping the first
    timestep of every variable so the streams stay aligned.
    """
    missing = set(AUX_VARIABLES) - {Variable(k) for k in aux}
    if missing:
        raise InvalidInputError(f"missing auxiliary variables: {sorted(v.value for v in missing)}")
    aux = {Variable(k): np.asarray(v, dtype=np.float32) for k, v in aux.items()}
    if accumulated:
        acc = FrameSequence(Variable.RAIN, rain, Unit.KG_PER_M2_ACCUMULATED, step_hours, start_hour)
        rain_seq = accumulated_to_rate(acc)
        aux = {k: v[1:] for k, v in aux.items()}
    else:
        rain_seq = FrameSequence(Variable.RAIN, rain, Unit.MM_PER_H, step_hours, start_hour)
    aux_seqs = {}
    for var in AUX_VARIABLES:
        arr = aux[var]
        if arr.shape != rain_seq.frames.shape:
            raise InvalidInputError(f"{var.value}: shape {arr.shape} does not match rain {rain_seq.frames.shape}")
        aux_seqs[var] = FrameSequence(var, arr, NATIVE_UNITS[var], step_hours, rain_seq.start_hour)
    return RawSequence(sequence_id, rain_seq, aux_seqs)


# --------------------------------------------------------------------------
# samples, filter, split


def make_samples(sequences: Iterable[RawSequence], horizon: int = N_TARGET_FRAMES,
                 window: int = N_INPUT_FRAMES) -> tuple[list[Sample], int]:
    """Slide a ``window + horizon`` frame window with stride 1 over each
    sequence. Returns the samples and the number of sequences skipped for
    being too short."""
    if horizon != N_TARGET_FRAMES or window != N_INPUT_FRAMES:
        raise InvalidInputError("samples are fixed at 4 input and 4 target frames")
    samples, skipped = [], 0
    span = window + horizon
    for seq in sequences:
        n = len(seq)
        if n < span:
            skipped += 1
            continue
        rain = seq.rain.frames
        aux = np.stack([seq.aux[var].frames for var in AUX_VARIABLES])
        for start in range(n - span + 1):
            samples.append(Sample(
                rain_in=rain[start:start + window],
                rain_target=rain[start + window:start + span],
                aux_in=aux[:, start:start + window],
                sequence_id=seq.sequence_id,
                window_start=start,
                start_hour=seq.start_hour + start * seq.rain.step_hours,
                step_hours=seq.rain.step_hours,
            ))
    if skipped:
        log.warning("skipped %d sequence(s) shorter than %d frames", skipped, span)
    samples.sort(key=lambda s: (s.sequence_id, s.window_start))
    return samples, skipped


@dataclass(frozen=True)
class FilterRule:
    pixel_threshold: float = 0.1  # mm/h, strict >
    min_fraction: float = 0.2  # inclusive

    def __post_init__(self):
        if not self.pixel_threshold > 0:
            raise InvalidInputError("pixel_threshold must be > 0")
        if not 0 < self.min_fraction <= 1:
            raise InvalidInputError("min_fraction must be in (0, 1]")

    def keeps(self, sample: Sample) -> bool:
        first = sample.rain_in[0]
        wet = int(np.count_nonzero(first > self.pixel_threshold))
        # int / int is correctly rounded, so an exact 1/5 equals the literal 0.2
        return wet / first.size >= self.min_fraction

    def to_dict(self) -> dict:
        return {"pixel_threshold": self.pixel_threshold, "min_fraction": self.min_fraction}


@dataclass(frozen=True)
class FilterStats:
    total: int
    retained: int

    @property
    def fraction(self) -> float:
        return self.retained / self.total if self.total else 0.0


def apply_sample_filter(samples: Sequence[Sample], rule: FilterRule = FilterRule()) -> tuple[list[Sample], FilterStats]:
    """Keep samples whose first input frame is wet enough (physical units)."""
    kept = [s for s in samples if rule.keeps(s)]
    return kept, FilterStats(len(samples), len(kept))


def split_train_test(samples: Sequence[Sample], split_hour: float) -> tuple[list[Sample], list[Sample]]:
    """Samples starting at or after ``split_hour`` are test, samples ending
    before it are train; windows straddling the split are dropped."""
    if not samples:
        return [], []
    first = min(s.start_hour for s in samples)
    last = max(s.end_hour for s in samples)
    if split_hour < first or split_hour > last + samples[0].step_hours:
        raise InvalidInputError(f"split point {split_hour} h lies outside the data range [{first}, {last}] h")
    train = [s for s in samples if s.end_hour < split_hour]
    test = [s for s in samples if s.start_hour >= split_hour]
    dropped = len(samples) - len(train) - len(test)
    if dropped:
        log.info("dropped %d sample(s) straddling the split at %s h", dropped, split_hour)
    return train, test


def split_validation(train: Sequence[Sample], fraction: float = 0.1) -> tuple[list[Sample], list[Sample]]:
    """Hold out the last ``fraction`` of training sequences for validation."""
    ids = sorted({s.sequence_id for s in train})
    if len(ids) < 2:
        cut = max(1, int(round(len(train) * (1 - fraction))))
        return list(train[:cut]), list(train[cut:])
    n_val = max(1, int(round(len(ids) * fraction)))
    val_ids = set(ids[-n_val:])
    return [s for s in train if s.sequence_id not in val_ids], [s for s in train if s.sequence_id in val_ids]


def compute_stats(samples: Sequence[Sample]) -> dict:
    """Per-variable min/max over ``samples`` with 64-bit accumulation."""
    if not samples:
        raise InvalidInputError("cannot compute statistics from zero samples")
    lo = {v: np.inf for v in ALL_VARIABLES}
    hi = {v: -np.inf for v in ALL_VARIABLES}
    for s in samples:
        for arr in (s.rain_in, s.rain_target):
            a = arr.astype(np.float64)
            lo[Variable.RAIN] = min(lo[Variable.RAIN], a.min())
            hi[Variable.RAIN] = max(hi[Variable.RAIN], a.max())
        for i, var in enumerate(AUX_VARIABLES):
            a = s.aux_in[i].astype(np.float64)
            lo[var] = min(lo[var], a.min())
            hi[var] = max(hi[var], a.max())
    stats = {}
    for var in ALL_VARIABLES:
        if var is Variable.REL_HUMIDITY_2M:
            stats[var] = VariableStats.identity(var)
        else:
            stats[var] = VariableStats(var, float(lo[var]), float(hi[var]))
    return stats


def _map_sample(s: Sample, fn) -> Sample:
    return Sample(
        fn(s.rain_in, Variable.RAIN),
        fn(s.rain_target, Variable.RAIN),
        np.stack([fn(s.aux_in[i], var) for i, var in enumerate(AUX_VARIABLES)]),
        s.sequence_id, s.window_start, s.start_hour, s.step_hours,
    )


def normalize_samples(samples: Sequence[Sample], stats: dict) -> list[Sample]:
    return [_map_sample(s, lambda a, v: normalize_array(a, stats[v])) for s in samples]


def denormalize_samples(samples: Sequence[Sample], stats: dict) -> list[Sample]:
    return [_map_sample(s, lambda a, v: denormalize_array(a, stats[v])) for s in samples]


# --------------------------------------------------------------------------
# on-disk format


@dataclass
class DatasetManifest:
    counts: dict = field(default_factory=dict)
    variables: list = field(default_factory=lambda: [v.value for v in ALL_VARIABLES])
    stats: dict = field(default_factory=dict)  # Variable -> VariableStats
    filter_rule: FilterRule | None = None
    filter_stats: dict | None = None
    seed: int | None = None
    normalized: bool = False
    size: tuple | None = None
    step_hours: float = 1.0
    sequence_start_hours: dict = field(default_factory=dict)  # sequence id -> hour
    files: dict = field(default_factory=dict)
    synthetic: dict | None = None
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "magic": MAGIC.decode(),
            "format_version": self.format_version,
            "counts": dict(sorted(self.counts.items())),
            "variables": list(self.variables),
            "stats": {Variable(k).value: v.to_dict() for k, v in self.stats.items()},
            "filter_rule": self.filter_rule.to_dict() if self.filter_rule else None,
            "filter_stats": self.filter_stats,
            "seed": self.seed,
            "normalized": self.normalized,
            "size": list(self.size) if self.size else None,
            "step_hours": self.step_hours,
            "sequence_start_hours": {str(k): v for k, v in sorted(self.sequence_start_hours.items())},
            "files": dict(sorted(self.files.items())),
            "synthetic": self.synthetic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            counts={k: int(v) for k, v in d["counts"].items()},
            variables=list(d["variables"]),
            stats={Variable(k): VariableStats.from_dict(v) for k, v in d.get("stats", {}).items()},
            filter_rule=FilterRule(**d["filter_rule"]) if d.get("filter_rule") else None,
            filter_stats=d.get("filter_stats"),
            seed=d.get("seed"),
            normalized=bool(d.get("normalized", False)),
            size=tuple(d["size"]) if d.get("size") else None,
            step_hours=float(d.get("step_hours", 1.0)),
            sequence_start_hours={int(k): float(v) for k, v in d.get("sequence_start_hours", {}).items()},
            files=d.get("files", {}),
            synthetic=d.get("synthetic"),
            format_version=int(d["format_version"]),
        )


def _encode_records(samples: Sequence[Sample]) -> bytes:
    chunks = [_FILE_HEADER.pack(MAGIC, FORMAT_VERSION, len(samples))]
    for s in samples:
        h, w = s.shape
        header = _RECORD_HEADER.pack(s.sequence_id, s.window_start, h, w)
        payload = np.concatenate([s.rain_in.ravel(), s.rain_target.ravel(), s.aux_in.ravel()]).astype("<f4").tobytes()
        crc = zlib.crc32(payload, zlib.crc32(header))
        chunks.extend([header, payload, _CRC.pack(crc)])
    return b"".join(chunks)


def write_dataset(splits: dict, manifest: DatasetManifest, directory) -> DatasetManifest:
    """Write ``{split_name: samples}`` and the manifest to ``directory``.

    Samples are written in (sequence id, window start) order, so output is
    byte-deterministic. Returns the manifest with counts and file digests
    filled in.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest.counts, manifest.files = {}, {}
    for name, samples in sorted(splits.items()):
        samples = sorted(samples, key=lambda s: (s.sequence_id, s.window_start))
        for s in samples:
            manifest.sequence_start_hours.setdefault(s.sequence_id, s.start_hour - s.window_start * s.step_hours)
            if manifest.size is None:
                manifest.size = s.shape
        blob = _encode_records(samples)
        fname = f"{name}.nwc"
        (directory / fname).write_bytes(blob)
        manifest.counts[name] = len(samples)
        manifest.files[name] = {"file": fname, "bytes": len(blob), "sha256": hashlib.sha256(blob).hexdigest()}
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
    (directory / "manifest.json").write_text(text + "\n", encoding="utf-8")
    return manifest


def _decode_records(path: Path, blob: bytes, manifest: DatasetManifest) -> list[Sample]:
    if len(blob) < _FILE_HEADER.size:
        raise CorruptDatasetError("truncated file header", path, 0)
    magic, version, count = _FILE_HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptDatasetError(f"bad magic {magic!r}, expected {MAGIC!r}", path, 0)
    if version != FORMAT_VERSION:
        raise CorruptDatasetError(f"unsupported format version {version}", path, 4)
    offset = _FILE_HEADER.size
    samples = []
    for i in range(count):
        if offset + _RECORD_HEADER.size > len(blob):
            raise CorruptDatasetError(f"truncated header of record {i}", path, offset)
        seq_id, start, h, w = _RECORD_HEADER.unpack_from(blob, offset)
        n_bytes = FRAMES_PER_RECORD * h * w * 4
        end = offset + _RECORD_HEADER.size + n_bytes
        if end + _CRC.size > len(blob):
            raise CorruptDatasetError(f"truncated payload of record {i}", path, offset)
        payload = blob[offset + _RECORD_HEADER.size:end]
        (crc,) = _CRC.unpack_from(blob, end)
        if zlib.crc32(payload, zlib.crc32(blob[offset:offset + _RECORD_HEADER.size])) != crc:
            raise CorruptDatasetError(f"CRC mismatch in record {i}", path, offset)
        values = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(FRAMES_PER_RECORD, h, w)
        base = manifest.sequence_start_hours.get(seq_id, 0.0)
        samples.append(Sample(
            values[:N_INPUT_FRAMES],
            values[N_INPUT_FRAMES:N_INPUT_FRAMES + N_TARGET_FRAMES],
            values[N_INPUT_FRAMES + N_TARGET_FRAMES:].reshape(len(AUX_VARIABLES), N_INPUT_FRAMES, h, w),
            seq_id, start, base + start * manifest.step_hours, manifest.step_hours,
        ))
        offset = end + _CRC.size
    if offset != len(blob):
        raise CorruptDatasetError(f"{len(blob) - offset} trailing bytes after {count} records", path, offset)
    return samples


def read_manifest(directory) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptDatasetError(f"unreadable manifest: {exc}", path) from exc
    if d.get("magic") != MAGIC.decode():
        raise CorruptDatasetError(f"bad manifest magic {d.get('magic')!r}", path)
    if d.get("format_version") != FORMAT_VERSION:
        raise CorruptDatasetError(f"unsupported manifest version {d.get('format_version')!r}", path)
    try:
        return DatasetManifest.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptDatasetError(f"malformed manifest: {exc}", path) from exc


def read_dataset(directory, splits: Sequence[str] | None = None) -> tuple[dict, DatasetManifest]:
    """Read and validate a dataset directory; returns ``({split: samples}, manifest)``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    names = sorted(manifest.counts) if splits is None else list(splits)
    out = {}
    for name in names:
        if name not in manifest.files:
            raise CorruptDatasetError(f"split {name!r} is not listed in the manifest", directory / "manifest.json")
        info = manifest.files[name]
        path = directory / info["file"]
        blob = path.read_bytes()
        if len(blob) >= _FILE_HEADER.size and blob[:4] == MAGIC:
            (_, _, count) = _FILE_HEADER.unpack_from(blob, 0)
            if count != manifest.counts[name]:
                raise CountMismatchError(
                    f"manifest lists {manifest.counts[name]} records for split {name!r}, file holds {count}", path, 8
                )
        samples = _decode_records(path, blob, manifest)
        if hashlib.sha256(blob).hexdigest() != info.get("sha256"):
            raise CorruptDatasetError("file digest does not match the manifest", path)
        out[name] = samples
    return out, manifest
