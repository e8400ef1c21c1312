from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import EndOfEpisode, UsageError


@dataclass
class EnvStep:
    """One batched transition.

    state (B, n_x); measurements (B, m, n_y) normalised to [0, 1];
    active_mask (B, m); raw holds unnormalised measurements when the
    environment has them.
    """

    state: np.ndarray
    measurements: np.ndarray
    active_mask: np.ndarray
    raw: np.ndarray | None = None


@dataclass
class EnvSpec:
    n_x: int
    m: int
    n_y: int
    horizon: int
    state_mean: np.ndarray
    state_std: np.ndarray
    metadata: dict = field(default_factory=dict)


class Environment:
    """Batched finite-horizon environment.

    ``reset(rng, batch)`` starts ``batch`` independent episodes; each call to
    ``step(rng)`` returns the next :class:`EnvStep`. Stepping past the
    horizon raises :class:`EndOfEpisode`.
    """

    spec: EnvSpec

    def __init__(self):
        self._k = None

    @property
    def horizon(self):
        return self.spec.horizon

    def reset(self, rng, batch=1, **kwargs):
        self._k = 0
        self._batch = batch
        self._reset(rng, batch, **kwargs)

    def step(self, rng) -> EnvStep:
        if self._k is None:
            raise UsageError("environment stepped before reset()")
        if self._k >= self.spec.horizon:
            raise EndOfEpisode(f"horizon {self.spec.horizon} reached")
        out = self._step(rng, self._k)
        self._k += 1
        return out

    def _reset(self, rng, batch, **kwargs):
        raise NotImplementedError

    def _step(self, rng, k) -> EnvStep:
        raise NotImplementedError

    def episode_metadata(self) -> dict:
        return dict(self.spec.metadata)
