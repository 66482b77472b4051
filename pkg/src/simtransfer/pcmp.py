"""Positive-constraint matching pursuit.

Greedy sparse approximation of a target vector by a nonnegative
combination of dictionary atoms.  Each greedy step adds the atom most
correlated with the current residual and refits all active coefficients
by nonnegative least squares.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import ConvergenceWarning, DimensionError, InvariantError


@dataclass(frozen=True)
class PcmpConfig:
    """Solver settings.

    ``lam`` is the sparsity weight.  Values of 1 or more never act as a
    stopping threshold on unit-norm data (a residual cannot improve by
    that much), so it only takes effect when below 1, as a minimum
    absolute residual improvement per added atom.  ``zero_tol`` is the
    residual, relative to the target norm, treated as an exact fit.
    """

    lam: float = 100.0
    max_support: int = 20
    min_rel_improvement: float = 1e-4
    max_refit_iters: int = 500
    zero_tol: float = 1e-12

    def __post_init__(self):
        if not (self.lam > 0 and self.max_support > 0 and self.min_rel_improvement > 0
                and self.max_refit_iters > 0 and self.zero_tol >= 0):
            raise InvariantError("PCMP settings must all be positive")


@dataclass(frozen=True)
class SparseCoeffs:
    support: tuple[int, ...]
    gamma: np.ndarray
    residual_norm: float

    def dense(self, n_atoms: int) -> np.ndarray:
        out = np.zeros(n_atoms)
        out[list(self.support)] = self.gamma
        return out


def _kkt_violation(gamma, grad):
    pg = np.where(gamma > 0, grad, np.minimum(grad, 0.0))
    return float(np.linalg.norm(pg))


def _projected_gradient(V, t, gamma, max_iters, tol):
    gram = V @ V.T
    corr = V @ t
    step = 1.0 / np.linalg.norm(V, 2) ** 2
    for _ in range(max_iters):
        grad = gram @ gamma - corr
        if _kkt_violation(gamma, grad) <= tol:
            return gamma, True
        gamma = np.maximum(gamma - step * grad, 0.0)
    return gamma, False


def nnls_refit(target, atoms, *, max_iters=500, tol=1e-10, warn=True) -> np.ndarray:
    """Minimise ``||target - gamma @ atoms||`` subject to ``gamma >= 0``.

    Projected gradient descent with step ``1/||atoms||_2^2`` from zero,
    stopped once the projected gradient norm is at most ``tol``.  Nearly
    collinear atoms can make that slow; when ``max_iters`` runs out the
    problem is handed to scipy's Lawson-Hanson active-set solver, which
    is exact.  A ConvergenceWarning is raised only if that fails too, and
    the gradient iterate is returned.
    """
    t = np.asarray(target, dtype=np.float64)
    V = np.atleast_2d(np.asarray(atoms, dtype=np.float64))
    if V.shape[0] == 0:
        raise DimensionError("active set is empty")
    if V.shape[1] != t.shape[0]:
        raise DimensionError(f"atom length {V.shape[1]} != target length {t.shape[0]}")
    if not np.any(V):
        return np.zeros(V.shape[0])

    gamma, converged = _projected_gradient(V, t, np.zeros(V.shape[0]), max_iters, tol)
    if converged:
        return gamma
    with warnings.catch_warnings():
        warnings.simplefilter("error", RuntimeWarning)
        try:
            exact, _ = optimize.nnls(V.T, t, maxiter=max(max_iters, 3 * V.shape[0]))
            return exact
        except (RuntimeError, RuntimeWarning):
            pass
    if warn:
        warnings.warn(
            f"nonnegative refit did not converge in {max_iters} iterations",
            ConvergenceWarning,
            stacklevel=2,
        )
    return gamma


def pcmp_solve(target, dictionary, cfg: PcmpConfig | None = None) -> SparseCoeffs:
    """Sparse nonnegative code of ``target`` over the rows of ``dictionary``.

    Atom indices in the result refer to dictionary rows.  Selection ties
    go to the lower index.
    """
    cfg = cfg or PcmpConfig()
    t = np.asarray(target, dtype=np.float64)
    V = np.asarray(dictionary, dtype=np.float64)
    if V.ndim != 2 or V.shape[0] == 0:
        raise DimensionError("dictionary must be a nonempty 2-D array")
    if t.ndim != 1 or V.shape[1] != t.shape[0]:
        raise DimensionError(f"dictionary width {V.shape[1]} != target length {t.shape[0]}")

    n_atoms = V.shape[0]
    max_support = min(cfg.max_support, n_atoms)
    support: list[int] = []
    gamma = np.zeros(0)
    residual = t.copy()
    res_norm = float(np.linalg.norm(residual))
    floor = cfg.zero_tol * res_norm

    # Pruning can shrink the support, so bound the loop independently.
    for _ in range(4 * n_atoms + 4):
        if len(support) >= max_support or res_norm <= floor:
            break
        scores = V @ residual
        scores[support] = -np.inf
        best = int(np.argmax(scores))
        if not scores[best] > 0:
            break

        trial = support + [best]
        g = nnls_refit(t, V[trial], max_iters=cfg.max_refit_iters)
        keep = g > 0
        trial = [a for a, k in zip(trial, keep) if k]
        g = g[keep]
        new_res = t - g @ V[trial] if trial else t.copy()
        new_norm = float(np.linalg.norm(new_res))

        gain = res_norm - new_norm
        if gain < cfg.min_rel_improvement * res_norm:
            break
        if cfg.lam < 1 and gain < cfg.lam:
            break
        support, gamma, residual, res_norm = trial, g, new_res, new_norm

    order = np.argsort(support, kind="stable")
    return SparseCoeffs(
        tuple(int(support[i]) for i in order),
        np.asarray(gamma, dtype=np.float64)[order],
        res_norm,
    )
