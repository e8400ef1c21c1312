"""Bounded random-walk traffic density with probe-vehicle style sensors."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from .base import Environment, EnvSpec, EnvStep


class DensityWalkEnv(Environment):
    """Reflected Gaussian random walk on [rho_min, rho_max] veh/km.

    Sensor slot i reports with probability ``rho / rho_max`` scaled by
    ``report_prob``; a report is (relative position, speed) where speed
    follows Greenshields' law ``v_free * (1 - rho / rho_jam)`` plus noise.
    """

    def __init__(
        self,
        m=6,
        horizon=50,
        rho_min=5.0,
        rho_max=120.0,
        rho_jam=150.0,
        step_std=4.0,
        v_free=30.0,
        speed_noise=2.0,
        report_prob=0.9,
        v_max=30.0,
    ):
        super().__init__()
        if not (0 <= rho_min < rho_max <= rho_jam):
            raise InvalidInputError("need 0 <= rho_min < rho_max <= rho_jam")
        if m < 1 or horizon < 1:
            raise InvalidInputError("m and horizon must be >= 1")
        self.rho_min, self.rho_max, self.rho_jam = rho_min, rho_max, rho_jam
        self.step_std, self.v_free, self.speed_noise = step_std, v_free, speed_noise
        self.report_prob, self.v_max = report_prob, v_max
        mid = 0.5 * (rho_min + rho_max)
        self.spec = EnvSpec(
            n_x=1,
            m=m,
            n_y=2,
            horizon=horizon,
            state_mean=np.array([mid]),
            state_std=np.array([(rho_max - rho_min) / np.sqrt(12.0)]),
            metadata={"env": "density_walk", "normalization": {"position": "unit", "speed_v_max": v_max}},
        )

    def _reflect(self, x):
        lo, hi = self.rho_min, self.rho_max
        span = hi - lo
        y = np.mod(x - lo, 2 * span)
        return lo + np.where(y > span, 2 * span - y, y)

    def _reset(self, rng, batch, **kwargs):
        self._rho = rng.uniform(self.rho_min, self.rho_max, size=batch)

    def _step(self, rng, k):
        n, m = self._batch, self.spec.m
        if k > 0:
            self._rho = self._reflect(self._rho + self.step_std * rng.standard_normal(n))
        rho = self._rho
        p = self.report_prob * rho / self.rho_max
        active = rng.random((n, m)) < p[:, None]
        pos = rng.random((n, m))
        speed = self.v_free * (1.0 - rho / self.rho_jam)[:, None] + self.speed_noise * rng.standard_normal((n, m))
        speed = np.clip(speed / self.v_max, 0.0, 1.0)
        meas = np.stack([pos, speed], axis=-1) * active[..., None]
        return EnvStep(state=rho[:, None].copy(), measurements=meas, active_mask=active)
