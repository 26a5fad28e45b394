"""C-MAPSS ingestion, preprocessing, windowing, persistence and a synthetic generator."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .seeding import sub_rng

log = logging.getLogger(__name__)

N_SETTINGS = 3
N_RAW_SENSORS = 21
N_FIELDS = 2 + N_SETTINGS + N_RAW_SENSORS
# 1-based C-MAPSS sensor indices of the usual 14-sensor selection
DEFAULT_SENSORS = (2, 3, 4, 7, 8, 9, 11, 12, 13, 14, 15, 17, 20, 21)
DEFAULT_RUL_CAP = 125.0
DEFAULT_WINDOW = 30

TENSOR_MAGIC = b"TACD"
TENSOR_VERSION = 1


class CMAPSSParseError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


@dataclass
class UnitRecord:
    """All cycles of one engine unit, ordered by cycle (1, 2, ..., T)."""

    unit_id: int
    cycles: np.ndarray
    op_settings: np.ndarray
    sensors: np.ndarray

    @property
    def total_cycles(self) -> int:
        return int(self.cycles[-1])


@dataclass
class Dataset:
    """Fixed-length windows of shape ``(n, M, L)`` with per-window metadata.

    ``rul`` and ``life_fraction`` are None for unlabeled (target) data.
    """

    values: np.ndarray
    unit_ids: np.ndarray
    end_cycles: np.ndarray
    domain: str = "source"
    sensor_names: list = field(default_factory=list)
    rul: Optional[np.ndarray] = None
    life_fraction: Optional[np.ndarray] = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"windows must be 3-D (n, M, L), got {self.values.shape}")
        n = len(self.values)
        for name in ("unit_ids", "end_cycles", "rul", "life_fraction"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} has {len(arr)} entries for {n} windows")

    def __len__(self):
        return len(self.values)

    @property
    def n_sensors(self) -> int:
        return self.values.shape[1]

    @property
    def window(self) -> int:
        return self.values.shape[2]

    @property
    def labeled(self) -> bool:
        return self.rul is not None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return Dataset(self.values[idx], self.unit_ids[idx], self.end_cycles[idx], self.domain,
                       list(self.sensor_names), pick(self.rul), pick(self.life_fraction),
                       dict(self.manifest))

    def unlabeled(self) -> "Dataset":
        """Copy with labels stripped; ground truth stays with the caller."""
        return Dataset(self.values, self.unit_ids, self.end_cycles, "target",
                       list(self.sensor_names), None, None, dict(self.manifest))

    def save(self, directory) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        write_tensor(out / "windows.bin", self.values)
        nan = np.full(len(self), np.nan)
        meta = np.stack([
            self.unit_ids.astype(np.float64),
            self.end_cycles.astype(np.float64),
            nan if self.rul is None else self.rul,
            nan if self.life_fraction is None else self.life_fraction,
        ], axis=1)
        write_tensor(out / "meta.bin", meta)
        manifest = {**self.manifest, "domain": self.domain, "sensor_names": list(self.sensor_names),
                    "labeled": self.labeled, "n_windows": len(self)}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return out

    @classmethod
    def load(cls, directory) -> "Dataset":
        src = Path(directory)
        manifest_path = src / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json in {src}")
        manifest = json.loads(manifest_path.read_text())
        values = read_tensor(src / "windows.bin")
        meta = read_tensor(src / "meta.bin")
        labeled = manifest.get("labeled", False)
        return cls(
            values=values,
            unit_ids=meta[:, 0].astype(np.int64),
            end_cycles=meta[:, 1].astype(np.int64),
            domain=manifest.get("domain", "source"),
            sensor_names=manifest.get("sensor_names", []),
            rul=meta[:, 2].copy() if labeled else None,
            life_fraction=meta[:, 3].copy() if labeled else None,
            manifest=manifest,
        )


# ----------------------------------------------------------------------------
# binary tensor files
# ----------------------------------------------------------------------------

def write_tensor(path, arr) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated header")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported tensor version {version}")
    start = 12 + 8 * ndim
    if len(raw) < start:
        raise ValueError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{ndim}Q", raw, 12)
    count = int(np.prod(shape)) if ndim else 1
    if len(raw) != start + 8 * count:
        raise ValueError(f"{path}: payload has {len(raw) - start} bytes, expected {8 * count}")
    return np.frombuffer(raw, dtype="<f8", offset=start).reshape(shape).astype(np.float64)


# ----------------------------------------------------------------------------
# ingestion
# ----------------------------------------------------------------------------

def load_cmapss(path) -> list[UnitRecord]:
    """Parse a whitespace-separated C-MAPSS file (26 columns per line).

    Raises :class:`CMAPSSParseError` naming the offending line, and
    :class:`IntegrityError` when a unit's cycles are not 1, 2, ..., T.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != N_FIELDS:
                raise CMAPSSParseError(f"{path}:{lineno}: expected {N_FIELDS} fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise CMAPSSParseError(f"{path}:{lineno}: non-numeric field ({exc})") from None
    if not rows:
        raise CMAPSSParseError(f"{path}: no records")
    table = np.asarray(rows)
    units = []
    ids = table[:, 0].astype(np.int64)
    for uid in np.unique(ids):
        block = table[ids == uid]
        block = block[np.argsort(block[:, 1], kind="stable")]
        cycles = block[:, 1].astype(np.int64)
        if not np.array_equal(cycles, np.arange(1, len(cycles) + 1)):
            raise IntegrityError(f"{path}: unit {uid} cycles are not consecutive from 1")
        units.append(UnitRecord(int(uid), cycles, block[:, 2:5], block[:, 5:]))
    log.info("loaded %d units from %s (max cycles %d)", len(units), path,
             max(u.total_cycles for u in units))
    return units


@dataclass
class UnitSeries:
    unit_id: int
    cycles: np.ndarray
    values: np.ndarray  # (T, M), normalized
    rul: np.ndarray
    life_fraction: np.ndarray


def preprocess(units: Sequence[UnitRecord], sensor_subset=DEFAULT_SENSORS,
               rul_cap: float = DEFAULT_RUL_CAP, manifest: Optional[dict] = None):
    """Select sensors, min-max normalize, and attach capped normalized RUL labels.

    Statistics come from ``units`` unless a previous ``manifest`` is passed,
    in which case its min/max are reused verbatim.  Returns
    ``(list[UnitSeries], manifest)``.
    """
    subset = [int(s) for s in sensor_subset]
    if not subset:
        raise ValueError("sensor_subset is empty")
    if any(s < 1 or s > units[0].sensors.shape[1] for s in subset):
        raise ValueError(f"sensor indices must lie in 1..{units[0].sensors.shape[1]}: {subset}")
    if not rul_cap > 0:
        raise ValueError(f"rul_cap must be > 0, got {rul_cap}")
    cols = np.asarray(subset) - 1
    if manifest is None:
        stacked = np.concatenate([u.sensors[:, cols] for u in units])
        lo, hi = stacked.min(axis=0), stacked.max(axis=0)
    else:
        lo, hi = np.asarray(manifest["sensor_min"]), np.asarray(manifest["sensor_max"])
    span = hi - lo
    constant = span == 0
    safe = np.where(constant, 1.0, span)

    series = []
    for u in units:
        vals = (u.sensors[:, cols] - lo) / safe
        vals[:, constant] = 0.0
        total = u.total_cycles
        rul = np.minimum(total - u.cycles, rul_cap) / rul_cap
        series.append(UnitSeries(u.unit_id, u.cycles, vals, rul, u.cycles / total))
    out_manifest = {
        "sensor_subset": subset,
        "sensor_min": lo.tolist(),
        "sensor_max": hi.tolist(),
        "constant_sensors": [s for s, c in zip(subset, constant) if c],
        "rul_cap": float(rul_cap),
        "normalization": "per-domain min-max",
    }
    return series, out_manifest


def make_windows(series: Sequence[UnitSeries], window: int = DEFAULT_WINDOW, stride: int = 1,
                 domain: str = "source", labeled: bool = True, manifest: Optional[dict] = None,
                 sensor_names: Optional[list] = None) -> Dataset:
    """Slide a length-``window`` frame over every unit.

    Each window is labeled with the RUL and life fraction at its last cycle.
    Units shorter than the window are skipped and counted in the manifest.
    """
    if window < 1 or stride < 1:
        raise ValueError(f"window and stride must be >= 1 (got {window}, {stride})")
    vals, uids, ends, ruls, fracs = [], [], [], [], []
    skipped = []
    for s in series:
        t = len(s.cycles)
        if t < window:
            log.warning("unit %d has %d cycles < window %d; skipped", s.unit_id, t, window)
            skipped.append(s.unit_id)
            continue
        for start in range(0, t - window + 1, stride):
            end = start + window - 1
            vals.append(s.values[start:end + 1].T)
            uids.append(s.unit_id)
            ends.append(s.cycles[end])
            ruls.append(s.rul[end])
            fracs.append(s.life_fraction[end])
    m = series[0].values.shape[1] if series else 0
    values = np.asarray(vals, dtype=np.float64).reshape(len(vals), m, window)
    manifest = dict(manifest or {})
    manifest.update({"window": int(window), "stride": int(stride),
                     "skipped_units": skipped, "n_skipped": len(skipped)})
    names = sensor_names or [f"s{i}" for i in manifest.get("sensor_subset", range(1, m + 1))]
    return Dataset(
        values=values,
        unit_ids=np.asarray(uids, dtype=np.int64),
        end_cycles=np.asarray(ends, dtype=np.int64),
        domain=domain,
        sensor_names=list(names),
        rul=np.asarray(ruls, dtype=np.float64) if labeled else None,
        life_fraction=np.asarray(fracs, dtype=np.float64) if labeled else None,
        manifest=manifest,
    )


def ingest(path, sensor_subset=DEFAULT_SENSORS, rul_cap=DEFAULT_RUL_CAP, window=DEFAULT_WINDOW,
           stride=1, domain="source") -> Dataset:
    units = load_cmapss(path)
    series, manifest = preprocess(units, sensor_subset, rul_cap)
    manifest["source_file"] = str(path)
    return make_windows(series, window, stride, domain=domain, manifest=manifest)


# ----------------------------------------------------------------------------
# synthetic two-domain generator
# ----------------------------------------------------------------------------

@dataclass
class DomainShift:
    scale: float | list = 1.5
    offset: float | list = 0.0
    time_warp: float = 1.3


@dataclass
class SynthConfig:
    units_per_domain: int = 24
    sensors: int = 6
    mean_life: int = 120
    noise_scale: float = 0.15
    domain_shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0
    window: int = 20
    stride: int = 3
    rul_cap: float = 125.0
    life_spread: float = 0.1

    def __post_init__(self):
        if isinstance(self.domain_shift, dict):
            self.domain_shift = DomainShift(**self.domain_shift)
        if min(self.units_per_domain, self.sensors, self.mean_life, self.window, self.stride) < 1:
            raise ValueError("SynthConfig counts must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not 0 <= self.life_spread < 1:
            raise ValueError("life_spread must lie in [0, 1)")
        if self.domain_shift.time_warp <= 0:
            raise ValueError("time_warp must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _per_sensor(value, m):
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (m,))
    return arr.copy()


def synth_units(cfg: SynthConfig):
    """Raw (un-normalized) source and target units plus the shared physics.

    Each unit degrades along ``d(u) = u ** (p * w)`` over life fraction ``u``
    (``w`` = 1 in the source, the time-warp factor in the target), mixed into
    the sensors linearly and quadratically.  Unit lives and exponents are
    shared index-by-index across domains; noise is drawn per domain.  The
    target's affine shift scales the clean signal, not the measurement noise.
    Per-domain min-max normalization would erase a shift applied to both, so
    the noise level is what keeps the scaled target distinguishable.
    """
    m = cfg.sensors
    phys = sub_rng(cfg.seed, "synth/physics")
    base = phys.uniform(-1.0, 1.0, size=m)
    lin = phys.uniform(0.5, 1.5, size=m) * phys.choice([-1.0, 1.0], size=m)
    quad = phys.uniform(0.0, 0.5, size=m) * np.sign(lin)

    urng = sub_rng(cfg.seed, "synth/units")
    lives = np.maximum(np.round(cfg.mean_life * urng.uniform(1.0 - cfg.life_spread, 1.0 + cfg.life_spread,
                                                   size=cfg.units_per_domain)),
                       2).astype(int)
    exps = urng.uniform(1.5, 3.0, size=cfg.units_per_domain)

    shift = cfg.domain_shift
    scale, offset = _per_sensor(shift.scale, m), _per_sensor(shift.offset, m)
    domains = {}
    for domain, warp in (("source", 1.0), ("target", shift.time_warp)):
        nrng = sub_rng(cfg.seed, f"synth/noise/{domain}")
        units = []
        for i, (life, p) in enumerate(zip(lives, exps)):
            cycles = np.arange(1, life + 1)
            u = cycles / life
            d = u ** (p * warp)
            clean = base + np.outer(d, lin) + np.outer(d * d, quad)
            if domain == "target":
                clean = offset + scale * clean
            noise = cfg.noise_scale * (1.0 + d)[:, None] * nrng.standard_normal((life, m))
            units.append(UnitRecord(i + 1, cycles, np.zeros((life, N_SETTINGS)), clean + noise))
        domains[domain] = units
    return domains["source"], domains["target"]


def synth_generate(cfg: SynthConfig, stage_bounds=(0.33, 0.85)):
    """Labeled source and target datasets plus true stage labels for each.

    Both domains are normalized with their own sensor min/max.  The target
    dataset keeps its RUL labels for evaluation; strip them with
    :meth:`Dataset.unlabeled` before adaptation.
    """
    from .stages import stage_from_life_fraction

    src_units, tgt_units = synth_units(cfg)
    subset = list(range(1, cfg.sensors + 1))
    out = []
    for domain, units in (("source", src_units), ("target", tgt_units)):
        series, manifest = preprocess(units, subset, cfg.rul_cap)
        manifest["synth_config"] = cfg.to_dict()
        manifest["seed"] = cfg.seed
        ds = make_windows(series, cfg.window, cfg.stride, domain=domain, manifest=manifest)
        out.append(ds)
    source, target = out
    stages = {
        "source": stage_from_life_fraction(source.life_fraction, stage_bounds),
        "target": stage_from_life_fraction(target.life_fraction, stage_bounds),
    }
    return source, target, stages
