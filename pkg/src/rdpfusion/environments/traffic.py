"""NGSIM-style trajectory ingestion and the traffic density environment.

CSV columns (header required): ``vehicle_id, time_s, position_m, speed_mps``.
Files ending in ``.gz`` are read through gzip.
"""

from __future__ import annotations

import csv
import gzip
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import kernels
from ..errors import DataError, InvalidInputError, ParseError
from .base import Environment, EnvSpec, EnvStep

REQUIRED_COLUMNS = ("vehicle_id", "time_s", "position_m", "speed_mps")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass
class TrafficConfig:
    segment_start: float = 0.0
    segment_length: float = 400.0
    dt: float = 0.2
    horizon: int = 100
    max_reporters: int = 12
    v_max: float = 30.0

    def __post_init__(self):
        if not self.segment_length > 0:
            raise InvalidInputError("segment_length must be > 0")
        if not self.dt > 0:
            raise InvalidInputError("dt must be > 0")
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise InvalidInputError("horizon must be an integer >= 1")
        if int(self.max_reporters) != self.max_reporters or self.max_reporters < 1:
            raise InvalidInputError("max_reporters must be an integer >= 1")
        if not self.v_max > 0:
            raise InvalidInputError("v_max must be > 0")

    @property
    def segment_end(self):
        return self.segment_start + self.segment_length


def ground_truth_density(positions, cfg: TrafficConfig) -> float:
    """Vehicles per km inside the half-open segment."""
    p = np.asarray(positions, dtype=np.float64).reshape(1, -1)
    n = int(kernels.count_in_segment(p, cfg.segment_start, cfg.segment_end)[0]) if p.size else 0
    return n / (cfg.segment_length / 1000.0)


@dataclass
class Episode:
    index: int
    t_start: float
    density: np.ndarray  # (K,)
    measurements: np.ndarray  # (K, m, 2)
    active_mask: np.ndarray  # (K, m)
    slot_vehicle: np.ndarray  # (K, m) vehicle ids, -1 when empty


@dataclass
class EpisodeStream:
    config: TrafficConfig
    episodes: list
    splits: dict
    metadata: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.episodes)

    def __len__(self):
        return len(self.episodes)

    def split(self, name):
        return [self.episodes[i] for i in self.splits[name]]


def _open_text(source):
    if isinstance(source, (str, Path)):
        path = Path(source)
        if path.suffix == ".gz":
            return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
        return open(path, encoding="utf-8", newline="")
    return source


def read_trajectories(csv_source):
    """Parse rows into ``{vehicle_id: (times, positions, speeds)}``."""
    fh = _open_text(csv_source)
    try:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError("empty file (header required)", line=1) from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing columns {missing}", line=1)
        cols = [header.index(c) for c in REQUIRED_COLUMNS]
        rows = {}
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line)
            try:
                vid = int(row[cols[0]])
                t, pos, spd = (float(row[c]) for c in cols[1:])
            except ValueError as exc:
                raise ParseError(f"malformed value ({exc})", line=line) from None
            if not (math.isfinite(t) and math.isfinite(pos) and math.isfinite(spd)):
                raise ParseError("non-finite value", line=line)
            rec = rows.setdefault(vid, ([], [], [], []))
            if rec[0] and t <= rec[0][-1]:
                raise DataError(
                    f"vehicle {vid}: time {t} at line {line} is not after {rec[0][-1]} (line {rec[3][-1]})"
                )
            rec[0].append(t)
            rec[1].append(pos)
            rec[2].append(spd)
            rec[3].append(line)
    finally:
        if fh is not csv_source:
            fh.close()
    return {v: tuple(np.asarray(a, dtype=np.float64) for a in r[:3]) for v, r in rows.items()}


def resample(tracks, dt):
    """Linear interpolation of every vehicle onto a common grid.

    Returns (grid times (T,), vehicle ids (V,), positions (T, V), speeds (T, V))
    with NaN where a vehicle has no data. Samples lying on the grid (within
    1e-6 steps) are used verbatim.
    """
    if not tracks:
        raise DataError("no trajectories")
    ids = np.array(sorted(tracks), dtype=np.int64)
    t0 = min(float(tracks[v][0][0]) for v in ids)
    t1 = max(float(tracks[v][0][-1]) for v in ids)
    n_t = int(math.floor((t1 - t0) / dt + 1e-6)) + 1
    grid = t0 + dt * np.arange(n_t)
    P = np.full((n_t, len(ids)), np.nan)
    S = np.full((n_t, len(ids)), np.nan)
    for j, v in enumerate(ids):
        t, pos, spd = tracks[v]
        u = (t - t0) / dt
        near = np.abs(u - np.round(u)) < 1e-6
        u = np.where(near, np.round(u), u)
        lo = int(math.ceil(u[0]))
        hi = int(math.floor(u[-1]))
        if hi < lo:
            continue
        steps = np.arange(lo, hi + 1, dtype=np.float64)
        P[lo : hi + 1, j] = np.interp(steps, u, pos)
        S[lo : hi + 1, j] = np.interp(steps, u, spd)
    return grid, ids, P, S


def split_indices(n):
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    n_val = min(n_val, n - n_train)
    idx = list(range(n))
    return {
        "train": idx[:n_train],
        "validation": idx[n_train : n_train + n_val],
        "test": idx[n_train + n_val :],
    }


def ingest_trajectories(csv_source, cfg: TrafficConfig) -> EpisodeStream:
    """Resample, window into horizon-length episodes and assign reporter slots."""
    tracks = read_trajectories(csv_source)
    grid, ids, P, S = resample(tracks, cfg.dt)
    lo, hi = cfg.segment_start, cfg.segment_end
    counts = kernels.count_in_segment(P, lo, hi)
    density = counts / (cfg.segment_length / 1000.0)
    with np.errstate(invalid="ignore"):
        inside_all = (P >= lo) & (P < hi)

    K, m = cfg.horizon, cfg.max_reporters
    episodes = []
    for e in range(len(grid) // K):
        sl = slice(e * K, (e + 1) * K)
        inside = inside_all[sl]
        cols = np.flatnonzero(inside.any(axis=0))
        slots_local = kernels.assign_slots(inside[:, cols], m)
        active = slots_local >= 0
        slot_cols = np.where(active, cols[np.maximum(slots_local, 0)], 0)
        rows = np.arange(K)[:, None]
        pos = P[sl][rows, slot_cols]
        spd = S[sl][rows, slot_cols]
        meas = np.stack(
            [(pos - lo) / cfg.segment_length, np.clip(spd / cfg.v_max, 0.0, 1.0)], axis=-1
        )
        meas = np.where(active[..., None], meas, 0.0)
        episodes.append(
            Episode(
                index=e,
                t_start=float(grid[e * K]),
                density=density[sl].astype(np.float64),
                measurements=meas,
                active_mask=active,
                slot_vehicle=np.where(active, ids[slot_cols], -1),
            )
        )
    if not episodes:
        raise DataError(f"data covers {len(grid)} steps, fewer than one episode of {K}")
    metadata = {
        "config": asdict(cfg),
        "n_vehicles": int(len(ids)),
        "n_steps": int(len(grid)),
        "t0": float(grid[0]),
        "normalization": {
            "position": {"offset_m": lo, "scale_m": cfg.segment_length},
            "speed": {"v_max_mps": cfg.v_max},
        },
        "density_units": "veh/km",
    }
    return EpisodeStream(config=cfg, episodes=episodes, splits=split_indices(len(episodes)), metadata=metadata)


def bundled_data_path(name="synthetic_us101.csv.gz"):
    return Path(__file__).resolve().parent.parent / "data" / name


class TrafficDensityEnv(Environment):
    """Replays ingested episodes; the state is the segment density (veh/km)."""

    def __init__(self, stream: EpisodeStream, split="train"):
        super().__init__()
        self.stream = stream
        self.split_name = split
        self._pool = stream.split(split)
        if not self._pool:
            raise DataError(f"split {split!r} is empty")
        train = stream.split("train") or self._pool
        dens = np.concatenate([ep.density for ep in train])
        cfg = stream.config
        self.spec = EnvSpec(
            n_x=1,
            m=cfg.max_reporters,
            n_y=2,
            horizon=cfg.horizon,
            state_mean=np.array([dens.mean()]),
            state_std=np.array([max(dens.std(), 1e-6)]),
            metadata={"env": "traffic", "split": split, **stream.metadata},
        )

    @classmethod
    def from_csv(cls, csv_source=None, cfg: TrafficConfig | None = None, split="train"):
        cfg = cfg or TrafficConfig()
        return cls(ingest_trajectories(csv_source or bundled_data_path(), cfg), split)

    @property
    def pool_size(self):
        """Number of recorded episodes in this split."""
        return len(self._pool)

    def with_split(self, split):
        return TrafficDensityEnv(self.stream, split)

    def _reset(self, rng, batch, episodes=None, **kwargs):
        """Pick episodes uniformly at random, or cycle through ``episodes`` indices."""
        if episodes is None:
            pick = rng.integers(0, len(self._pool), size=batch)
        else:
            pick = np.resize(np.asarray(episodes, dtype=np.int64), batch)
        self._eps = [self._pool[i] for i in pick]
        self.current_episodes = [ep.index for ep in self._eps]

    def _step(self, rng, k):
        return EnvStep(
            state=np.array([[ep.density[k]] for ep in self._eps]),
            measurements=np.stack([ep.measurements[k] for ep in self._eps]),
            active_mask=np.stack([ep.active_mask[k] for ep in self._eps]),
        )
