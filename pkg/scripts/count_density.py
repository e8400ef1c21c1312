#!/usr/bin/env python3
"""Count vehicles on a road segment straight from a trajectory CSV.

Standalone cross-check for the package's ingestion: stdlib only, no shared
code. For every time on the common grid (first sample time plus multiples
of dt) a vehicle counts when its linearly interpolated position lies in
[start, start + length). Prints ``step,time_s,count,density_veh_per_km``.
"""

import argparse
import csv
import gzip
import io
import math
import sys


def load(path):
    raw = gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")
    with io.TextIOWrapper(raw, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    tracks = {}
    for r in rows:
        tracks.setdefault(int(r["vehicle_id"]), []).append((float(r["time_s"]), float(r["position_m"])))
    for v in tracks:
        tracks[v].sort()
    return tracks


def densities(tracks, dt, start, length):
    t0 = min(tr[0][0] for tr in tracks.values())
    t1 = max(tr[-1][0] for tr in tracks.values())
    n = int(math.floor((t1 - t0) / dt + 1e-6)) + 1
    counts = [0] * n
    for tr in tracks.values():
        # grid coordinates of the samples, snapped when within 1e-6 of a step
        us = []
        for t, _ in tr:
            u = (t - t0) / dt
            if abs(u - round(u)) < 1e-6:
                u = float(round(u))
            us.append(u)
        first, last = math.ceil(us[0]), math.floor(us[-1])
        j = 0
        for step in range(first, last + 1):
            while j + 1 < len(us) and us[j + 1] < step:
                j += 1
            if us[j] == step:
                pos = tr[j][1]
            elif j + 1 < len(us) and us[j + 1] == step:
                pos = tr[j + 1][1]
            else:
                w = (step - us[j]) / (us[j + 1] - us[j])
                pos = tr[j][1] + w * (tr[j + 1][1] - tr[j][1])
            if start <= pos < start + length:
                counts[step] += 1
    return t0, counts


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv")
    ap.add_argument("--dt", type=float, default=0.2)
    ap.add_argument("--start", type=float, default=0.0)
    ap.add_argument("--length", type=float, default=400.0)
    args = ap.parse_args(argv)
    t0, counts = densities(load(args.csv), args.dt, args.start, args.length)
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["step", "time_s", "count", "density_veh_per_km"])
    for k, c in enumerate(counts):
        out.writerow([k, f"{t0 + k * args.dt:.6f}", c, repr(c / (args.length / 1000.0))])


if __name__ == "__main__":
    main()
