"""Covariance Matrix Adaptation Evolution Strategy (minimization).

Ask/tell interface with log-rank recombination weights, cumulative step-size
adaptation and rank-one plus rank-mu covariance updates. Constants follow
the usual default settings (Hansen's tutorial):

    mu      = floor(lambda / 2)
    w_i     ~ ln(mu + 1/2) - ln(i),  sum w_i = 1
    mu_eff  = 1 / sum w_i^2
    c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
    d_sigma = 1 + 2 max(0, sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
    c_c     = (4 + mu_eff / n) / (n + 4 + 2 mu_eff / n)
    c_1     = 2 / ((n + 1.3)^2 + mu_eff)
    c_mu    = min(1 - c_1, 2 (mu_eff - 2 + 1 / mu_eff) / ((n + 2)^2 + mu_eff))
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError, SeededRng, sym_eigen

DEFAULT_POPULATION = 40
SIGMA_BOUNDS = (1e-12, 1e12)


class CMAError(RuntimeError):
    pass


class CMADivergence(CMAError):
    pass


@dataclass
class SearchState:
    mean: np.ndarray
    sigma: float
    cov: np.ndarray
    path_sigma: np.ndarray
    path_c: np.ndarray
    popsize: int
    weights: np.ndarray
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float
    generation: int = 0
    eigen_basis: np.ndarray | None = None
    eigen_values: np.ndarray | None = None
    eigen_generation: int = -1
    eigen_interval: int = 1
    best_fitness: float = math.inf
    best_solution: np.ndarray | None = None
    eigen_method: str = "lapack"
    clamped_eigenvalues: int = 0

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def mu(self) -> int:
        return self.weights.shape[0]


def init(d0: int, m0=None, sigma0: float = 1.0, popsize: int = DEFAULT_POPULATION,
         eigen_method: str = "lapack") -> SearchState:
    if d0 < 1:
        raise CMAError("dimension must be >= 1")
    if not sigma0 > 0:
        raise CMAError("sigma0 must be positive")
    if popsize < 4:
        raise CMAError("population size must be >= 4")
    m = np.zeros(d0) if m0 is None else np.array(m0, dtype=np.float64)
    if m.shape != (d0,):
        raise CMAError(f"m0 must have shape ({d0},)")
    n = float(d0)
    mu = popsize // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w = w / w.sum()
    mu_eff = 1.0 / np.sum(w ** 2)
    c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
    d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + c_sigma
    c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
    c_mu = min(1.0 - c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff))
    # E||N(0, I)||
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))
    return SearchState(
        mean=m, sigma=float(sigma0), cov=np.eye(d0), path_sigma=np.zeros(d0),
        path_c=np.zeros(d0), popsize=popsize, weights=w, mu_eff=float(mu_eff),
        c_sigma=c_sigma, d_sigma=d_sigma, c_c=c_c, c_1=c_1, c_mu=c_mu, chi_n=chi_n,
        eigen_basis=np.eye(d0), eigen_values=np.ones(d0), eigen_generation=0,
        eigen_interval=1 if d0 <= 64 else math.ceil(d0 / 10), eigen_method=eigen_method,
    )


def _refresh_eigen(state: SearchState) -> None:
    if state.generation - state.eigen_generation < state.eigen_interval:
        return
    try:
        b, d, clamped = sym_eigen(state.cov, method=state.eigen_method, return_clamped=True)
    except NumericsError as exc:
        raise CMAError(f"eigendecomposition failed: {exc}") from exc
    state.eigen_basis, state.eigen_values = b, d
    state.eigen_generation = state.generation
    state.clamped_eigenvalues += clamped


def ask(state: SearchState, rng: SeededRng) -> np.ndarray:
    """Sample ``popsize`` candidates ``m + sigma * B diag(sqrt(D)) y``; rows are solutions."""
    _refresh_eigen(state)
    if state.eigen_basis is None or not np.all(np.isfinite(state.eigen_values)):
        raise CMAError("eigen cache is invalid")
    y = rng.normal((state.popsize, state.dim))
    scaled = (y * np.sqrt(state.eigen_values)) @ state.eigen_basis.T
    z = state.mean + state.sigma * scaled
    return z


def mean(state: SearchState) -> np.ndarray:
    return state.mean.copy()


def tell(state: SearchState, solutions, fitnesses) -> SearchState:
    """Rank the candidates (ascending, stable on index) and update the distribution."""
    z = np.asarray(solutions, dtype=np.float64)
    f = np.asarray(fitnesses, dtype=np.float64)
    lam, n = state.popsize, state.dim
    if z.shape != (lam, n):
        raise CMAError(f"expected solutions of shape {(lam, n)}, got {z.shape}")
    if f.shape != (lam,):
        raise CMAError(f"expected {lam} fitness values, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise CMAError("non-finite fitness")

    order = np.argsort(f, kind="stable")
    best = order[0]
    if f[best] < state.best_fitness:
        state.best_fitness = float(f[best])
        state.best_solution = z[best].copy()

    selected = z[order[: state.mu]]
    old_mean = state.mean
    new_mean = state.weights @ selected
    # steps in the sampling coordinates, (z - m) / sigma
    y_sel = (selected - old_mean) / state.sigma
    y_w = (new_mean - old_mean) / state.sigma

    b, d = state.eigen_basis, state.eigen_values
    inv_sqrt = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    c_inv_sqrt_yw = b @ (inv_sqrt * (b.T @ y_w))

    cs = state.c_sigma
    state.path_sigma = (1 - cs) * state.path_sigma + math.sqrt(cs * (2 - cs) * state.mu_eff) * c_inv_sqrt_yw
    ps_norm = float(np.linalg.norm(state.path_sigma))
    g = state.generation + 1
    h_sigma = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * g)) < (1.4 + 2.0 / (n + 1)) * state.chi_n

    cc = state.c_c
    state.path_c = (1 - cc) * state.path_c
    if h_sigma:
        state.path_c += math.sqrt(cc * (2 - cc) * state.mu_eff) * y_w

    c1, cmu = state.c_1, state.c_mu
    delta_h = (1 - h_sigma) * cc * (2 - cc)
    rank_one = np.outer(state.path_c, state.path_c)
    rank_mu = (y_sel * state.weights[:, None]).T @ y_sel
    cov = (1 - c1 - cmu) * state.cov + c1 * (rank_one + delta_h * state.cov) + cmu * rank_mu
    state.cov = 0.5 * (cov + cov.T)

    step = (cs / state.d_sigma) * (ps_norm / state.chi_n - 1)
    if not math.isfinite(step) or step > 700:
        raise CMADivergence(f"step size update overflowed (log factor {step:.3g})")
    state.sigma *= math.exp(step)
    state.mean = new_mean
    state.generation = g
    if not (SIGMA_BOUNDS[0] <= state.sigma <= SIGMA_BOUNDS[1]) or not np.all(np.isfinite(state.cov)):
        raise CMADivergence(f"step size left the admissible range: sigma={state.sigma:.3g}")
    return state


def minimize(func, x0, sigma0: float = 1.0, popsize: int = 16, max_generations: int = 1000,
             target: float = -math.inf, seed: int = 0, trace=None):
    """Drive ask/tell on ``func`` until ``target`` or the generation cap.

    Returns the final :class:`SearchState`; ``trace`` (if given) is called
    with ``(state, fitnesses)`` after every generation.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    state = init(x0.shape[0], x0, sigma0, popsize)
    rng = SeededRng(seed)
    for _ in range(max_generations):
        pop = ask(state, rng)
        fit = np.array([func(x) for x in pop])
        tell(state, pop, fit)
        if trace is not None:
            trace(state, fit)
        if state.best_fitness < target:
            break
    return state
