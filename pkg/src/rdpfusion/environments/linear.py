"""Linear-Gaussian state space with scalar sensors, plus its exact filter."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from .base import Environment, EnvSpec, EnvStep


class LinearGaussianEnv(Environment):
    """x_{k+1} = A x_k + b + w_k,  y_k(i) = C_i x_k + v_k(i).

    ``b`` is chosen so that ``mean`` is the stationary mean. Measurements
    reach the policy affinely mapped to [0, 1] using ``norm_sigmas`` marginal
    standard deviations either side of their mean, then clamped.
    """

    def __init__(
        self,
        A=((0.98,),),
        Q=((0.04,),),
        C=((1.0,), (1.0,), (1.0,)),
        R=(0.5, 1.0, 2.0),
        mean=(2.0,),
        P0=((2.0,),),
        horizon=20,
        norm_sigmas=4.0,
    ):
        super().__init__()
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        self.C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        self.R = np.asarray(R, dtype=np.float64).reshape(-1)
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.P0 = np.atleast_2d(np.asarray(P0, dtype=np.float64))
        n_x = self.A.shape[0]
        m = self.C.shape[0]
        if self.A.shape != (n_x, n_x) or self.Q.shape != (n_x, n_x) or self.P0.shape != (n_x, n_x):
            raise InvalidInputError("A, Q, P0 must be square and agree in size")
        if self.C.shape[1] != n_x or self.R.shape != (m,) or self.mean.shape != (n_x,):
            raise InvalidInputError("C must be (m, n_x), R (m,), mean (n_x,)")
        if horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        if np.any(self.R < 0) or np.any(np.linalg.eigvalsh(self.Q) < -1e-12):
            raise InvalidInputError("noise covariances must be PSD")
        self.b = (np.eye(n_x) - self.A) @ self.mean
        self._Lq = _psd_sqrt(self.Q)
        self._L0 = _psd_sqrt(self.P0)

        # normalisation span from the widest marginal covariance over the horizon
        P = self.P0.copy()
        widest = np.diag(P).copy()
        for _ in range(horizon):
            P = self.A @ P @ self.A.T + self.Q
            widest = np.maximum(widest, np.diag(P))
        Pw = np.diag(widest)
        y_sd = np.sqrt(np.einsum("ij,jk,ik->i", self.C, Pw, self.C) + self.R)
        y_sd = np.where(y_sd > 0, y_sd, 1.0)  # noiseless sensors: unit span
        y_mu = self.C @ self.mean
        self.y_lo = y_mu - norm_sigmas * y_sd
        self.y_hi = y_mu + norm_sigmas * y_sd
        self.spec = EnvSpec(
            n_x=n_x,
            m=m,
            n_y=1,
            horizon=int(horizon),
            state_mean=self.mean.copy(),
            state_std=np.sqrt(widest),
            metadata={
                "env": "linear",
                "normalization": {
                    "measurement_lo": self.y_lo.tolist(),
                    "measurement_hi": self.y_hi.tolist(),
                },
            },
        )

    def _reset(self, rng, batch, **kwargs):
        n_x = self.spec.n_x
        self._x = self.mean + rng.standard_normal((batch, n_x)) @ self._L0.T

    def _step(self, rng, k):
        if k > 0:
            n_x = self.spec.n_x
            self._x = self._x @ self.A.T + self.b + rng.standard_normal((self._batch, n_x)) @ self._Lq.T
        x = self._x
        raw = x @ self.C.T + rng.standard_normal((self._batch, self.spec.m)) * np.sqrt(self.R)
        norm = np.clip((raw - self.y_lo) / (self.y_hi - self.y_lo), 0.0, 1.0)
        return EnvStep(
            state=x.copy(),
            measurements=norm[:, :, None],
            active_mask=np.ones((self._batch, self.spec.m), dtype=bool),
            raw=raw,
        )

    def state_covariances(self):
        """Marginal state covariance at each step (Lyapunov recursion)."""
        out = [self.P0.copy()]
        for _ in range(self.spec.horizon - 1):
            out.append(self.A @ out[-1] @ self.A.T + self.Q)
        return np.array(out)

    def kalman_filter(self, raw_measurements):
        """Conditional-mean estimates from raw measurements (B, K, m).

        Returns (estimates (B, K, n_x), posterior covariances (K, n_x, n_x)).
        """
        y = np.asarray(raw_measurements, dtype=np.float64)
        n_b, k_steps, _ = y.shape
        n_x = self.spec.n_x
        xhat = np.broadcast_to(self.mean, (n_b, n_x)).copy()
        P = self.P0.copy()
        Rm = np.diag(self.R)
        est = np.zeros((n_b, k_steps, n_x))
        covs = np.zeros((k_steps, n_x, n_x))
        for k in range(k_steps):
            if k > 0:
                xhat = xhat @ self.A.T + self.b
                P = self.A @ P @ self.A.T + self.Q
            S = self.C @ P @ self.C.T + Rm
            G = P @ self.C.T @ np.linalg.inv(S)
            xhat = xhat + (y[:, k] - xhat @ self.C.T) @ G.T
            P = (np.eye(n_x) - G @ self.C) @ P
            est[:, k] = xhat
            covs[k] = P
        return est, covs

    def kalman_mse(self):
        """Expected per-step squared error of the exact filter."""
        _, covs = self.kalman_filter(np.zeros((1, self.spec.horizon, self.spec.m)))
        return np.trace(covs, axis1=1, axis2=2)


def _psd_sqrt(M):
    w, V = np.linalg.eigh(M)
    return V @ np.diag(np.sqrt(np.clip(w, 0.0, None)))
