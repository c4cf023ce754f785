"""Gaussian-process surrogate with a Matérn-5/2 kernel.

The state keeps both the Cholesky factor ``L`` of the Gram matrix and its
inverse.  Appending a point borders both matrices in O(n^2) (see
:func:`chol_append`), which is what lets the optimizer's late phase avoid
cubic refits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

from .solver import JITTER_LADDER, NumericalError

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_BOUNDS = ((1e-4, 1e4), (1e-3, 1e2), (1e-6, 1e1))


class FactorizationError(NumericalError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    alpha: float  # signal variance
    beta: float  # length scale
    eps: float  # noise standard deviation

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.eps >= 0):
            raise ValueError(f"invalid hyperparameters {self}")

    def as_log(self) -> np.ndarray:
        return np.log([self.alpha, self.beta, self.eps])

    @classmethod
    def from_log(cls, v) -> "Hyperparams":
        a, b, e = np.exp(np.asarray(v, dtype=float))
        return cls(float(a), float(b), float(e))


@dataclass(frozen=True)
class Posterior:
    mean: float
    variance: float

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)


def _matern(r: np.ndarray, eta: Hyperparams) -> np.ndarray:
    s = SQRT5 * r / eta.beta
    return eta.alpha * (1.0 + s + s * s / 3.0) * np.exp(-s)


def matern_kernel(eta: Hyperparams, xi, xj, same_index: bool = False) -> float:
    r = float(np.linalg.norm(np.atleast_1d(np.asarray(xi, float)) - np.atleast_1d(np.asarray(xj, float))))
    return float(_matern(np.array(r), eta)) + (eta.eps ** 2 if same_index else 0.0)


def cross_kernel(eta: Hyperparams, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Noise-free kernel matrix between two point sets."""
    return _matern(cdist(np.atleast_2d(xa), np.atleast_2d(xb)), eta)


def gram_matrix(x: np.ndarray, eta: Hyperparams) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k = cross_kernel(eta, x, x)
    k[np.diag_indices_from(k)] += eta.eps ** 2
    return k


def _cholesky(k: np.ndarray, allow_jitter: bool) -> tuple[np.ndarray, float]:
    scale = float(np.mean(np.diag(k)))
    ladder = JITTER_LADDER if allow_jitter else (0.0,)
    for jit in ladder:
        try:
            kk = k if jit == 0.0 else k + jit * scale * np.eye(k.shape[0])
            return np.linalg.cholesky(kk), jit * scale
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError("Gram matrix is not positive definite" + (" after max jitter" if allow_jitter else ""))


@dataclass
class GPState:
    """Training data, hyperparameters and the factor pair ``(L, L^-1)``.

    With ``standardize`` the targets are shifted/scaled to zero mean and unit
    variance before use; posteriors are reported back in the original units.
    """

    x: np.ndarray
    y: np.ndarray
    eta: Hyperparams
    l: np.ndarray
    l_inv: np.ndarray
    standardize: bool = False
    jitter: float = 0.0
    _alpha: np.ndarray | None = field(default=None, repr=False)
    _y_stats: tuple[float, float] | None = field(default=None, repr=False)
    _buf: tuple[np.ndarray, np.ndarray] | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def _stats(self) -> tuple[float, float]:
        if not self.standardize:
            return 0.0, 1.0
        if self._y_stats is None:
            sd = float(np.std(self.y))
            self._y_stats = (float(np.mean(self.y)), sd if sd > 0 else 1.0)
        return self._y_stats

    @property
    def y_mean(self) -> float:
        return self._stats()[0]

    @property
    def y_scale(self) -> float:
        return self._stats()[1]

    @property
    def z(self) -> np.ndarray:
        """Targets on the fitting scale."""
        return (self.y - self.y_mean) / self.y_scale

    def weights(self) -> np.ndarray:
        """``L^-1 z``, cached until the data changes."""
        if self._alpha is None:
            self._alpha = self.l_inv @ self.z
        return self._alpha

    def append(self, x_new, y_new: float) -> "GPState":
        """Add one observation in O(n^2) with frozen hyperparameters.

        The factors live in preallocated buffers that double when full, so an
        append writes one new row into each instead of copying both matrices.
        """
        x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
        k_vec = cross_kernel(self.eta, self.x, x_new).ravel()
        k_scalar = self.eta.alpha + self.eta.eps ** 2 + self.jitter
        row, l22, inv_row = _border(self.l_inv, k_vec, k_scalar)
        n = self.n
        if self._buf is None or self._buf[0].shape[0] < n + 1:
            cap = max(2 * n, 16)
            bl, bi = np.zeros((cap, cap)), np.zeros((cap, cap))
            bl[:n, :n], bi[:n, :n] = self.l, self.l_inv
            self._buf = (bl, bi)
        bl, bi = self._buf
        bl[n, :n], bl[n, n] = row, l22
        bi[n, :n], bi[n, n] = inv_row, 1.0 / l22
        self.l, self.l_inv = bl[: n + 1, : n + 1], bi[: n + 1, : n + 1]
        self.x = np.vstack([self.x, x_new])
        self.y = np.append(self.y, float(y_new))
        self._alpha = None
        self._y_stats = None
        return self

    def with_targets(self, y) -> "GPState":
        return GPState(self.x, np.asarray(y, dtype=float), self.eta, self.l, self.l_inv, self.standardize, self.jitter)

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "eta": {"alpha": self.eta.alpha, "beta": self.eta.beta, "eps": self.eta.eps},
            "standardize": self.standardize,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GPState":
        eta = Hyperparams(**data["eta"])
        return gp_fit(np.array(data["x"]), np.array(data["y"]), eta, standardize=bool(data.get("standardize", False)))


def gp_fit(x, y, eta: Hyperparams, standardize: bool = False) -> GPState:
    """Full factorization of the Gram matrix.

    A diagonal jitter ladder is tried only when ``eta.eps > 0``: an explicitly
    noise-free GP with a singular Gram matrix is reported, not regularized.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if x.shape[0] != y.size or y.size < 1:
        raise ValueError("x and y must be non-empty with matching length")
    k = gram_matrix(x, eta)
    l, jit = _cholesky(k, allow_jitter=eta.eps > 0)
    l_inv = linalg.solve_triangular(l, np.eye(l.shape[0]), lower=True)
    return GPState(x, y, eta, l, l_inv, standardize, jit)


def _border(l_inv: np.ndarray, k_vec: np.ndarray, k_scalar: float) -> tuple[np.ndarray, float, np.ndarray]:
    """New factor row ``L21``, pivot ``L22`` and new inverse row (without its diagonal)."""
    k_vec = np.asarray(k_vec, dtype=float).ravel()
    l21 = l_inv @ k_vec
    base = float(k_scalar) - float(l21 @ l21)
    for jit in JITTER_LADDER:
        schur = base + jit * abs(float(k_scalar))
        if schur > 0:
            break
    else:
        raise FactorizationError(f"non-positive Schur complement {base:.3e} after max jitter")
    l22 = math.sqrt(schur)
    return l21, l22, -(l21 @ l_inv) / l22


def chol_append(l: np.ndarray, l_inv: np.ndarray, k_vec: np.ndarray, k_scalar: float) -> tuple[np.ndarray, np.ndarray]:
    """Border ``L`` and ``L^-1`` with one new row for the Gram matrix ``[[K, k], [k', k_ss]]``.

    ``L21 = (L^-1 k)'``, ``L22 = sqrt(k_ss - |L21|^2)`` and the new inverse row is
    ``-L21 L^-1 / L22``; only matrix-vector products, so O(n^2).
    """
    n = l.shape[0]
    l21, l22, inv_row = _border(l_inv, k_vec, k_scalar)
    l_new = np.zeros((n + 1, n + 1))
    l_new[:n, :n] = l
    l_new[n, :n] = l21
    l_new[n, n] = l22
    inv_new = np.zeros((n + 1, n + 1))
    inv_new[:n, :n] = l_inv
    inv_new[n, :n] = inv_row
    inv_new[n, n] = 1.0 / l22
    return l_new, inv_new


def posterior_batch(state: GPState, points) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and latent (noise-free) variances at many points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    kx = cross_kernel(state.eta, state.x, pts)  # (n, m)
    v = state.l_inv @ kx
    mean = v.T @ state.weights()
    var = state.eta.alpha - np.einsum("ij,ij->j", v, v)
    var = np.maximum(var, 0.0)
    return state.y_mean + state.y_scale * mean, var * state.y_scale ** 2


def posterior(state: GPState, theta) -> Posterior:
    m, v = posterior_batch(state, np.atleast_2d(np.asarray(theta, dtype=float)))
    return Posterior(float(m[0]), float(v[0]))


# --- evidence and tuning --------------------------------------------------------

def log_marginal_likelihood(x, y, eta: Hyperparams) -> float:
    """Log evidence ``-0.5 y'K^-1 y - sum(log diag L) - n/2 log(2 pi)``, via Cholesky."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    l, _ = _cholesky(gram_matrix(x, eta), allow_jitter=False)
    a = linalg.solve_triangular(l, y, lower=True)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(l))) - 0.5 * y.size * LOG_2PI)


def _neg_lml_and_grad(logp: np.ndarray, x: np.ndarray, y: np.ndarray, dist: np.ndarray):
    alpha, beta, eps = np.exp(logp)
    n = y.size
    s = SQRT5 * dist / beta
    e = np.exp(-s)
    m = alpha * (1.0 + s + s * s / 3.0) * e
    k = m + (eps ** 2) * np.eye(n)
    try:
        cf = linalg.cho_factor(k, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return np.inf, np.zeros(3)
    diag = np.diag(cf[0])
    if np.any(diag <= 0):
        return np.inf, np.zeros(3)
    a = linalg.cho_solve(cf, y, check_finite=False)
    lml = -0.5 * y @ a - np.sum(np.log(diag)) - 0.5 * n * LOG_2PI
    kinv = linalg.cho_solve(cf, np.eye(n), check_finite=False)
    w = np.outer(a, a) - kinv
    d_alpha = m
    d_beta = alpha * (s * s / 3.0) * (1.0 + s) * e
    g = np.array([
        0.5 * np.sum(w * d_alpha),
        0.5 * np.sum(w * d_beta),
        0.5 * np.trace(w) * 2.0 * eps ** 2,
    ])
    return -lml, -g


def tune_hyperparameters(x, y, bounds=DEFAULT_BOUNDS, restarts: int = 8, rng: np.random.Generator | None = None,
                         init: Hyperparams | None = None) -> Hyperparams:
    """Best-of-restarts maximum of the log evidence, searched in log-parameter space."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.size < 2:
        raise ValueError("need at least two points to tune hyperparameters")
    rng = rng if rng is not None else np.random.default_rng(0)
    log_b = np.log(np.asarray(bounds, dtype=float))
    dist = cdist(x, x)
    starts = [rng.uniform(log_b[:, 0], log_b[:, 1]) for _ in range(max(restarts, 1))]
    if init is not None:
        starts.insert(0, np.clip(init.as_log(), log_b[:, 0], log_b[:, 1]))

    best_val, best_p = np.inf, None
    for p0 in starts:
        f0, _ = _neg_lml_and_grad(p0, x, y, dist)
        if f0 < best_val:
            best_val, best_p = f0, p0
        if not np.isfinite(f0):
            continue
        res = optimize.minimize(_neg_lml_and_grad, p0, args=(x, y, dist), jac=True, method="L-BFGS-B",
                                bounds=log_b, options={"maxiter": 200})
        if np.isfinite(res.fun) and res.fun < best_val:
            best_val, best_p = float(res.fun), np.clip(res.x, log_b[:, 0], log_b[:, 1])
    if best_p is None or not np.isfinite(best_val):
        raise FactorizationError("every hyperparameter restart failed to factorize the Gram matrix")
    return Hyperparams.from_log(best_p)
