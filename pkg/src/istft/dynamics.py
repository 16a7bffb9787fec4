"""Benchmark trajectory generators: Lorenz-63 and the FitzHugh-Nagumo cable.

Both emit :class:`~istft.data.RawDataset` objects with group ids ``1..n_p``
and are pure functions of their config (including the seed).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import factorized

from .data import Group, RawDataset


class ConfigError(ValueError):
    """Invalid generator configuration."""


class GenerationError(RuntimeError):
    """The integrator blew up for some parameter sample."""


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ISTFT_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- Lorenz


@dataclass(frozen=True)
class Lorenz63Config:
    n_p: int = 4
    n_T: int = 64
    dt: float = 0.01
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    y12_range: tuple[float, float] = (-20.0, 20.0)
    y3_range: tuple[float, float] = (10.0, 40.0)
    seed: int = 0

    def validate(self) -> None:
        if self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.n_T < 2:
            raise ConfigError(f"n_T must be at least 2, got {self.n_T}")
        if self.n_p < 1:
            raise ConfigError(f"n_p must be at least 1, got {self.n_p}")


def lorenz_rhs(y: np.ndarray, sigma=10.0, rho=28.0, beta=8.0 / 3.0) -> np.ndarray:
    y1, y2, y3 = y[..., 0], y[..., 1], y[..., 2]
    return np.stack([sigma * (y2 - y1), y1 * (rho - y3) - y2, y1 * y2 - beta * y3], axis=-1)


def rk4_step(f, y: np.ndarray, dt: float) -> np.ndarray:
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def lorenz_trajectory(y0, n_T: int, dt: float, sigma=10.0, rho=28.0, beta=8.0 / 3.0) -> np.ndarray:
    """States at ``t = 0, dt, ..., (n_T-1) dt``; ``y0`` may carry leading batch axes."""
    f = lambda y: lorenz_rhs(y, sigma, rho, beta)  # noqa: E731
    y = np.asarray(y0, dtype=float)
    out = np.empty((n_T,) + y.shape)
    out[0] = y
    for k in range(1, n_T):
        y = rk4_step(f, y, dt)
        out[k] = y
    return out


def lorenz_initial_states(cfg: Lorenz63Config) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed)
    y12 = rng.uniform(*cfg.y12_range, size=(cfg.n_p, 2))
    y3 = rng.uniform(*cfg.y3_range, size=(cfg.n_p, 1))
    return np.hstack([y12, y3])


def lorenz_generate(cfg: Lorenz63Config) -> RawDataset:
    cfg.validate()
    y0 = lorenz_initial_states(cfg)
    traj = lorenz_trajectory(y0, cfg.n_T, cfg.dt, cfg.sigma, cfg.rho, cfg.beta)
    times = np.arange(cfg.n_T) * cfg.dt
    groups = [Group(k + 1, np.zeros(0), times, np.zeros((cfg.n_T, 0)), traj[:, k, :])
              for k in range(cfg.n_p)]
    return RawDataset(groups)


# ------------------------------------------------------- FitzHugh-Nagumo

FHN_EPS_BOX = (0.01, 0.04)
FHN_C_BOX = (0.025, 0.075)


def fhn_f(v):
    return v * (v - 0.1) * (1.0 - v)


def fhn_input(t):
    """Boundary stimulus i₀(t) = 5·10⁴ t³ e^(−15t)."""
    t = np.asarray(t, dtype=float)
    return 5e4 * t ** 3 * np.exp(-15.0 * t)


@dataclass(frozen=True)
class FhnConfig:
    n_p: int = 126
    n_x: int = 512           # grid intervals on [0, L]; nodes = n_x + 1
    length: float = 1.0
    dt_out: float = 0.01
    n_T: int = 500           # saved instants t = 0, dt_out, ...
    substeps: int = 10
    b: float = 0.5
    gamma: float = 2.0
    eps_range: tuple[float, float] = FHN_EPS_BOX
    c_range: tuple[float, float] = FHN_C_BOX
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.eps_range
        if not FHN_EPS_BOX[0] <= lo <= hi <= FHN_EPS_BOX[1]:
            raise ConfigError(f"eps range {self.eps_range} leaves the admissible box {FHN_EPS_BOX}")
        lo, hi = self.c_range
        if not FHN_C_BOX[0] <= lo <= hi <= FHN_C_BOX[1]:
            raise ConfigError(f"c range {self.c_range} leaves the admissible box {FHN_C_BOX}")
        if self.n_x < 32:
            raise ConfigError(f"n_x must be at least 32, got {self.n_x}")
        if self.n_p < 1 or self.n_T < 1 or self.substeps < 1 or self.dt_out <= 0:
            raise ConfigError("n_p, n_T, substeps and dt_out must be positive")


def fhn_solve(eps: float, c: float, n_x: int = 512, n_T: int = 500, dt_out: float = 0.01,
              substeps: int = 10, length: float = 1.0, b: float = 0.5,
              gamma: float = 2.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integrate the cable and return ``(times, v(0, t), w(0, t))`` at ``n_T`` instants.

    Second-order central differences in space with ghost nodes for the
    Neumann conditions ``v_x(0) = -i₀(t)``, ``v_x(L) = 0``. Each substep is
    Crank-Nicolson on the diffusion and forward Euler on the reaction terms.
    """
    h = length / n_x
    n = n_x + 1
    k = dt_out / substeps
    main = np.full(n, -2.0)
    upper = np.ones(n - 1)
    lower = np.ones(n - 1)
    upper[0] = 2.0      # ghost node on the left folds into v_1
    lower[-1] = 2.0     # and on the right into v_{n-2}
    lap = sp.diags([lower, main, upper], [-1, 0, 1], format="csc") / h ** 2
    eye = sp.identity(n, format="csc")
    solve = factorized((eye - 0.5 * k * lap).tocsc())
    explicit = (eye + 0.5 * k * lap).tocsr()

    v = np.zeros(n)
    w = np.zeros(n)
    times = np.arange(n_T) * dt_out
    v0 = np.empty(n_T)
    w0 = np.empty(n_T)
    v0[0], w0[0] = v[0], w[0]
    t = 0.0
    src = 2.0 / h
    for j in range(1, n_T):
        for _ in range(substeps):
            t_next = t + k
            rhs = explicit @ v + k * (fhn_f(v) - w + c) / eps
            rhs[0] += 0.5 * k * src * (fhn_input(t) + fhn_input(t_next))
            w = w + k * (b * v - gamma * w + c)
            v = solve(rhs)
            t = t_next
        if not (np.all(np.isfinite(v)) and np.abs(v).max() < 1e6):
            raise GenerationError(f"FitzHugh-Nagumo integration diverged at eps={eps}, c={c}")
        v0[j], w0[j] = v[0], w[0]
    return times, v0, w0


def lhs_sample(bounds, count: int, seed: int = 0) -> np.ndarray:
    """Latin hypercube design: one point per equal-width stratum per dimension."""
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    if count < 1:
        raise ConfigError("LHS needs at least one sample")
    rng = np.random.default_rng(seed)
    dim = bounds.shape[0]
    strata = np.stack([rng.permutation(count) for _ in range(dim)], axis=1)
    u = (strata + rng.random((count, dim))) / count
    return bounds[:, 0] + u * (bounds[:, 1] - bounds[:, 0])


def fhn_generate(cfg: FhnConfig) -> RawDataset:
    cfg.validate()
    mus = lhs_sample([cfg.eps_range, cfg.c_range], cfg.n_p, cfg.seed)

    def run(mu):
        return fhn_solve(mu[0], mu[1], cfg.n_x, cfg.n_T, cfg.dt_out, cfg.substeps,
                         cfg.length, cfg.b, cfg.gamma)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        results = list(pool.map(run, mus))
    groups = []
    for k, (mu, (times, v0, w0)) in enumerate(zip(mus, results)):
        groups.append(Group(k + 1, mu, times, fhn_input(times)[:, None], np.stack([v0, w0], axis=1)))
    return RawDataset(groups)
