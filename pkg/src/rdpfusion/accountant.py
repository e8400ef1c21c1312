"""Rényi privacy accounting for the clipped Gaussian fusion mechanism.

Budgets are in nats. The fusion output is ``Z = sum_i g_i f_i + N`` with
``f_i in [0, 1]^d`` and ``N ~ N(0, I_d)``; its l2 sensitivity to one
sensor's record is ``sqrt(d) * max_i |g_i|`` and the order-``alpha`` loss of
a unit-variance Gaussian mechanism is ``alpha * sensitivity**2 / 2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import BudgetOverrunError, InvalidInputError, NumericalError

# Overshoot tolerated (and clamped) when charging the ledger.
FP_GUARD = 1e-12


@dataclass(frozen=True)
class MechanismShape:
    d: int
    m: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise InvalidInputError(f"d must be a positive integer, got {self.d!r}")
        if int(self.m) != self.m or self.m < 1:
            raise InvalidInputError(f"m must be a positive integer, got {self.m!r}")


def check_order(alpha: float) -> float:
    alpha = float(alpha)
    if not math.isfinite(alpha) or alpha <= 1.0:
        raise InvalidInputError(f"Renyi order must be finite and > 1, got {alpha!r}")
    return alpha


def gbar(fusion_vector) -> float:
    """Largest absolute gain in a fusion vector."""
    g = np.asarray(fusion_vector, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise InvalidInputError("fusion vector must be a non-empty 1-D array")
    if not np.all(np.isfinite(g)):
        raise InvalidInputError("fusion vector has non-finite entries")
    return float(np.max(np.abs(g)))


def gbar_batch(gains: np.ndarray) -> np.ndarray:
    """Row-wise ``gbar`` over the last axis."""
    gains = np.asarray(gains, dtype=np.float64)
    if not np.all(np.isfinite(gains)):
        raise InvalidInputError("fusion vectors have non-finite entries")
    return np.max(np.abs(gains), axis=-1)


def renyi_loss(gbar_value, shape: MechanismShape, alpha: float):
    """Per-step loss ``alpha * d / 2 * gbar**2`` (works elementwise on arrays)."""
    alpha = check_order(alpha)
    g = np.asarray(gbar_value, dtype=np.float64)
    if np.any(g < 0):
        raise InvalidInputError("gbar must be non-negative")
    out = 0.5 * alpha * shape.d * g * g
    return float(out) if out.ndim == 0 else out


def clip_bound(remaining, shape: MechanismShape, alpha: float):
    """Largest gbar whose loss fits in ``remaining``: sqrt(2 s / (alpha d))."""
    alpha = check_order(alpha)
    s = np.asarray(remaining, dtype=np.float64)
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise InvalidInputError(f"remaining budget must be finite and >= 0, got {remaining!r}")
    out = np.sqrt(2.0 * s / (alpha * shape.d))
    return float(out) if out.ndim == 0 else out


def clip_fusion_vector(fusion_vector, bound):
    """Elementwise clamp to ``[-bound, bound]``; ``bound`` may be per-row."""
    g = np.asarray(fusion_vector, dtype=np.float64)
    b = np.asarray(bound, dtype=np.float64)
    if np.any(b < 0):
        raise InvalidInputError("clip bound must be non-negative")
    if b.ndim and g.ndim > b.ndim:
        b = b.reshape(b.shape + (1,) * (g.ndim - b.ndim))
    return np.clip(g, -b, b)


@dataclass
class PrivacyLedger:
    """Append-only record of per-step leakage against a hard global budget."""

    alpha: float
    global_budget: float
    remaining: float = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.alpha = check_order(self.alpha)
        self.global_budget = float(self.global_budget)
        if not math.isfinite(self.global_budget) or self.global_budget < 0:
            raise InvalidInputError("global budget must be finite and >= 0")
        if self.remaining is None:
            self.remaining = self.global_budget - math.fsum(self.history)
        if self.remaining < 0:
            raise InvalidInputError("ledger history exceeds the global budget")

    @property
    def spent(self) -> float:
        return math.fsum(self.history)

    def clip_bound(self, shape: MechanismShape) -> float:
        return clip_bound(self.remaining, shape, self.alpha)

    def charge(self, gbar_post_clip: float, shape: MechanismShape) -> "PrivacyLedger":
        charge(self, gbar_post_clip, shape)
        return self

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "global_budget": self.global_budget,
            "remaining": self.remaining,
            "history": [float(x) for x in self.history],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "PrivacyLedger":
        return cls(
            alpha=obj["alpha"],
            global_budget=obj["global_budget"],
            remaining=obj["remaining"],
            history=list(obj["history"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "PrivacyLedger":
        return cls.from_dict(json.loads(text))


def charge(ledger: PrivacyLedger, gbar_post_clip: float, shape: MechanismShape) -> PrivacyLedger:
    """Charge one released output against the ledger, in place.

    Raises BudgetOverrunError when the gain exceeds the clip bound of the
    remaining budget by more than the floating-point guard.
    """
    g = float(gbar_post_clip)
    if not math.isfinite(g) or g < 0:
        raise InvalidInputError(f"gbar must be finite and >= 0, got {gbar_post_clip!r}")
    bound = clip_bound(ledger.remaining, shape, ledger.alpha)
    loss = renyi_loss(g, shape, ledger.alpha)
    if g > bound + FP_GUARD:
        raise BudgetOverrunError(
            f"leakage {loss:.6g} exceeds remaining budget {ledger.remaining:.6g} "
            f"(gbar {g:.6g} > clip bound {bound:.6g})"
        )
    remaining = ledger.remaining - loss
    if remaining < 0:
        if remaining < -FP_GUARD:
            raise BudgetOverrunError(
                f"leakage {loss:.6g} overshoots remaining budget {ledger.remaining:.6g}"
            )
        remaining = 0.0
    ledger.history.append(loss)
    ledger.remaining = remaining
    return ledger


def charge_batch(remaining: np.ndarray, gbars: np.ndarray, shape: MechanismShape, alpha: float):
    """Vectorised ``charge`` for a batch of independent ledgers.

    Returns ``(new_remaining, losses)``; raises if any ledger overruns.
    """
    remaining = np.asarray(remaining, dtype=np.float64)
    losses = renyi_loss(np.asarray(gbars, dtype=np.float64), shape, alpha)
    losses = np.asarray(losses)
    new = remaining - losses
    bad = new < -FP_GUARD
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise BudgetOverrunError(
            f"episode {i}: leakage {losses[i]:.6g} exceeds remaining budget {remaining[i]:.6g}"
        )
    return np.maximum(new, 0.0), losses


def numeric_renyi_divergence_gaussian(mean_shift, alpha: float, tol: float = 1e-11) -> float:
    """Order-``alpha`` divergence between N(shift, I) and N(0, I) by quadrature.

    Only the norm of the shift matters, so the integral is taken along that
    direction: ``log int phi(x - D)^alpha phi(x)^(1 - alpha) dx / (alpha - 1)``.
    Independent of the closed form used by ``renyi_loss``.
    """
    alpha = check_order(alpha)
    shift = np.atleast_1d(np.asarray(mean_shift, dtype=np.float64))
    if not np.all(np.isfinite(shift)):
        raise InvalidInputError("mean shift must be finite")
    delta = float(np.linalg.norm(shift))
    if delta == 0.0:
        return 0.0

    log_norm = -0.5 * math.log(2.0 * math.pi)
    # integrand peaks at alpha * delta; factor exp(c) out to keep values O(1)
    centre = alpha * delta
    log_peak = (
        alpha * (log_norm - 0.5 * (centre - delta) ** 2)
        + (1.0 - alpha) * (log_norm - 0.5 * centre**2)
    )

    def integrand(x):
        lp = alpha * (log_norm - 0.5 * (x - delta) ** 2) + (1.0 - alpha) * (log_norm - 0.5 * x * x)
        return math.exp(lp - log_peak)

    lo, hi = centre - 40.0, centre + 40.0
    val, err, info = integrate.quad(
        integrand, lo, hi, points=[centre], epsabs=0.0, epsrel=tol, limit=200, full_output=1
    )[:3]
    if not math.isfinite(val) or val <= 0 or err > 1e-9 * max(val, 1e-300):
        raise NumericalError(
            f"quadrature did not converge: value={val!r} abserr={err!r} "
            f"evaluations={info.get('neval')} alpha={alpha} |shift|={delta}"
        )
    return (math.log(val) + log_peak) / (alpha - 1.0)
