"""Synthetic multi-lane highway trajectories in the NGSIM column layout.

Vehicles arrive by a Poisson process whose rate drifts slowly and carries
short platoon bursts; each relaxes toward the Greenshields equilibrium
speed of the traffic around it. Used to build the bundled CSV, which stands
in for the real US-101 recordings.
"""

from __future__ import annotations

import csv
import gzip
import io
from pathlib import Path

import numpy as np


def simulate(
    seed=101,
    duration_s=2700.0,
    dt=0.2,
    road=(-60.0, 460.0),
    lanes=4,
    v_free=29.0,
    rho_jam_lane=120.0,
    base_rate=(0.25, 1.3),
    burst_rate=0.03,
    burst_len_s=(4.0, 12.0),
    burst_extra=(0.8, 2.0),
):
    """Return a list of ``(vehicle_id, time_s, position_m, speed_mps)`` rows."""
    rng = np.random.default_rng(seed)
    n_t = int(round(duration_s / dt))
    times = dt * np.arange(n_t)
    # rate drift: two random-phase sinusoids mapped into base_rate, with periods
    # short enough that every chronological split sees whole cycles
    ph = rng.uniform(0, 2 * np.pi, 2)
    wave = 0.5 + 0.3 * np.sin(2 * np.pi * times / 47.0 + ph[0]) + 0.2 * np.sin(2 * np.pi * times / 17.0 + ph[1])
    rate = base_rate[0] + (base_rate[1] - base_rate[0]) * np.clip(wave, 0, 1)
    t = 0.0
    while t < duration_s:
        t += rng.exponential(1.0 / burst_rate)
        length = rng.uniform(*burst_len_s)
        mask = (times >= t) & (times < t + length)
        rate[mask] += rng.uniform(*burst_extra)

    x = np.empty(0)
    v = np.empty(0)
    vdes = np.empty(0)
    vid = np.empty(0, dtype=np.int64)
    next_id = 1
    rows = []
    for k in range(n_t):
        n_new = rng.poisson(rate[k] * dt)
        if n_new:
            x = np.concatenate([x, road[0] - rng.uniform(0, 2.0, n_new)])
            d = np.clip(rng.normal(v_free, 2.5, n_new), 18.0, 36.0)
            vdes = np.concatenate([vdes, d])
            v = np.concatenate([v, d * rng.uniform(0.7, 1.0, n_new)])
            vid = np.concatenate([vid, np.arange(next_id, next_id + n_new)])
            next_id += n_new
        if len(x):
            # local density (veh/km/lane) from vehicles within 100 m
            gap = np.abs(x[:, None] - x[None, :]) < 100.0
            rho = (gap.sum(axis=1) - 1) / 0.2 / lanes
            target = np.clip(vdes * (1.0 - rho / rho_jam_lane), 1.0, None)
            v = np.clip(v + 0.25 * (target - v) + 0.3 * rng.standard_normal(len(v)), 0.5, None)
            x = x + v * dt
            on_road = x >= road[0]
            for j in np.flatnonzero(on_road & (x <= road[1])):
                rows.append((int(vid[j]), round(times[k], 1), round(float(x[j]), 2), round(float(v[j]), 2)))
            keep = x <= road[1]
            x, v, vdes, vid = x[keep], v[keep], vdes[keep], vid[keep]
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def write_csv(rows, path):
    path = Path(path)
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["vehicle_id", "time_s", "position_m", "speed_mps"])
    for r in rows:
        w.writerow([r[0], f"{r[1]:.1f}", f"{r[2]:.2f}", f"{r[3]:.2f}"])
    data = buf.getvalue().encode("utf-8")
    if path.suffix == ".gz":
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(data)
    else:
        path.write_bytes(data)
    return path


if __name__ == "__main__":  # pragma: no cover
    import sys

    out = sys.argv[1] if len(sys.argv) > 1 else "synthetic_us101.csv.gz"
    write_csv(simulate(), out)
