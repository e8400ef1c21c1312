"""Independent re-check of logged trajectories against the privacy budget.

Only the logged clipped gains, the Rényi order, the output dimension and the
global budget are trusted. Leakage is recomputed from the gains; logged
leakages, remaining budgets and the ledger history must agree with it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .fusion import read_jsonl
from .kernels import audit_gains

TOTAL_TOL = 1e-9
CONSISTENCY_TOL = 1e-9


@dataclass
class AuditReport:
    passed: bool
    total_leakage: float
    budget: float
    n_steps: int
    first_bad_step: int | None = None  # 1-based
    reason: str = ""
    index: int = 0

    def line(self):
        verdict = "PASS" if self.passed else "FAIL"
        s = f"trajectory {self.index}: {verdict} sum={self.total_leakage:.12g} budget={self.budget:.12g} steps={self.n_steps}"
        if not self.passed:
            where = f" at step {self.first_bad_step}" if self.first_bad_step is not None else ""
            s += f"{where}: {self.reason}"
        return s

    def to_dict(self):
        return asdict(self)


def _close(a, b):
    return abs(a - b) <= CONSISTENCY_TOL * max(1.0, abs(a), abs(b))


def audit_trajectory(steps, footer, index=0) -> AuditReport:
    """Audit one trajectory given its step dicts and ledger footer."""
    if not steps and footer is None:
        return AuditReport(True, 0.0, 0.0, 0, index=index)
    if footer is None or "ledger" not in footer:
        return AuditReport(False, math.nan, math.nan, len(steps), reason="missing ledger footer", index=index)
    led = footer["ledger"]
    try:
        alpha = float(led["alpha"])
        budget = float(led["global_budget"])
        d = int(footer.get("d", 2))
    except (KeyError, TypeError, ValueError) as exc:
        return AuditReport(False, math.nan, math.nan, len(steps), reason=f"malformed footer ({exc})", index=index)
    if not steps:
        return AuditReport(True, 0.0, budget, 0, index=index)
    try:
        gains = np.array([np.asarray(s["gains"], dtype=np.float64) for s in steps])
    except (KeyError, ValueError) as exc:
        return AuditReport(False, math.nan, budget, len(steps), first_bad_step=1, reason=f"malformed gains ({exc})", index=index)
    if gains.ndim != 2:
        return AuditReport(False, math.nan, budget, len(steps), reason="gain vectors differ in length", index=index)
    if not np.all(np.isfinite(gains)):
        k = int(np.argmax(~np.all(np.isfinite(gains), axis=1))) + 1
        return AuditReport(False, math.nan, budget, len(steps), first_bad_step=k, reason="non-finite gain", index=index)

    totals, first_bad = audit_gains(gains[None], np.array([budget]), alpha, d)
    total = float(totals[0])
    losses = 0.5 * alpha * d * np.max(np.abs(gains), axis=1) ** 2
    if first_bad[0] >= 0:
        k = int(first_bad[0]) + 1
        return AuditReport(False, total, budget, len(steps), first_bad_step=k,
                           reason="step leakage exceeds the recomputed remaining budget (gain above clip bound)", index=index)
    if total > budget + TOTAL_TOL:
        over = int(np.argmax(np.cumsum(losses) > budget + TOTAL_TOL)) + 1
        return AuditReport(False, total, budget, len(steps), first_bad_step=over, reason="cumulative leakage exceeds budget", index=index)

    spent = 0.0
    for k, (s, loss) in enumerate(zip(steps, losses), 1):
        if "leakage" in s and not _close(float(s["leakage"]), loss):
            return AuditReport(False, total, budget, len(steps), first_bad_step=k,
                               reason=f"logged leakage {s['leakage']!r} disagrees with recomputed {loss!r}", index=index)
        if "remaining" in s and not _close(float(s["remaining"]), max(budget - spent, 0.0)):
            return AuditReport(False, total, budget, len(steps), first_bad_step=k,
                               reason="logged remaining budget disagrees with recomputed", index=index)
        spent += loss
    hist = led.get("history")
    if hist is not None:
        if len(hist) != len(steps):
            return AuditReport(False, total, budget, len(steps), reason="ledger history length differs from step count", index=index)
        for k, (h, loss) in enumerate(zip(hist, losses), 1):
            if not _close(float(h), loss):
                return AuditReport(False, total, budget, len(steps), first_bad_step=k,
                                   reason="ledger history disagrees with recomputed leakage", index=index)
    return AuditReport(True, total, budget, len(steps), index=index)


def audit_stream(fh):
    """Audit every trajectory in a JSON-lines stream; an empty stream yields one passing report."""
    reports = [audit_trajectory(steps, footer, i) for i, (steps, footer) in enumerate(read_jsonl(fh))]
    return reports or [AuditReport(True, 0.0, 0.0, 0)]


def audit_file(path):
    with open(path, encoding="utf-8") as fh:
        return audit_stream(fh)
