"""Sparse Levenberg-Marquardt solver, marginal covariance and marginalization.

The nonlinear system is a list of factors over a GraphValues map.  Each outer
iteration linearizes every factor (IRLS-weighted when a robust kernel is
attached), assembles the whitened Jacobian as a sparse matrix, and solves the
damped normal equations (H + lambda * diag(H)) dx = -g with a sparse LU.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .factors import (LinearMarginalFactor, canonical_factor_order,
                      canonical_key_order)


class SingularSystemError(RuntimeError):
    """The normal equations stayed singular even at maximum damping."""


@dataclass
class SolverOptions:
    max_iterations: int = 100
    rel_tol: float = 1e-8
    abs_tol: float = 1e-20       # keeps machine-zero costs from spinning
    init_lambda: float = 1e-4
    lambda_factor: float = 10.0
    lambda_min: float = 1e-12
    lambda_max: float = 1e8
    gradient_tol: float = 1e-12


@dataclass
class SolverReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    converged: bool = False
    gradient_norm: float = float("inf")
    lambda_final: float = 0.0
    status: str = "initialized"


def total_cost(factors, values):
    return float(sum(f.cost(values) for f in factors))


def gradient_norm(factors, values):
    """Infinity norm of the cost gradient at the given estimate."""
    factors = canonical_factor_order(factors)
    layout = _Layout(build_ordering(factors), values)
    A, r = _linearize(factors, values, layout)
    g = A.T @ r
    return float(np.max(np.abs(g))) if g.size else 0.0


def build_ordering(factors):
    """Deterministic column ordering over the union of factor keys."""
    keys = set()
    for f in factors:
        keys.update(f.keys)
    return sorted(keys, key=canonical_key_order)


class _Layout:
    """Column offsets for a fixed key ordering."""

    def __init__(self, ordering, values):
        self.ordering = list(ordering)
        self.offset = {}
        self.dims = {}
        n = 0
        for key in self.ordering:
            d = values.dim(key)
            self.offset[key] = n
            self.dims[key] = d
            n += d
        self.n = n

    def slice_of(self, key):
        o = self.offset[key]
        return slice(o, o + self.dims[key])

    def split(self, dx):
        return {key: dx[self.slice_of(key)] for key in self.ordering}


def _linearize(factors, values, layout):
    """Stack whitened (and IRLS-weighted) residuals/Jacobians into sparse A, vector r."""
    rows_list, cols_list, vals_list = [], [], []
    r_parts = []
    row0 = 0
    for f in factors:
        r = f.noise.whiten(f.residual(values))
        Js = f.jacobians(values)
        if f.kernel is not None:
            w = f.irls_weight(float(np.linalg.norm(r)))
            s = np.sqrt(w)
            r = r * s
        else:
            s = 1.0
        dim_r = r.size
        for key, J in zip(f.keys, Js):
            Jw = f.noise.whiten_jac(np.asarray(J, dtype=float))
            if s != 1.0:
                Jw = Jw * s
            col = layout.offset[key]
            d = Jw.shape[1]
            rows_list.append(np.repeat(np.arange(row0, row0 + dim_r), d))
            cols_list.append(np.tile(np.arange(col, col + d), dim_r))
            vals_list.append(Jw.ravel())
        r_parts.append(r)
        row0 += dim_r
    A = sp.coo_matrix(
        (np.concatenate(vals_list), (np.concatenate(rows_list), np.concatenate(cols_list))),
        shape=(row0, layout.n)).tocsr()
    return A, np.concatenate(r_parts)


def _solve_damped(H, g, lam):
    d = H.diagonal()
    damped = H + sp.diags(lam * d)
    try:
        return splu(damped.tocsc()).solve(-g)
    except RuntimeError:
        return None


def optimize(factors, values, options: SolverOptions | None = None):
    """Minimize the robustified nonlinear least squares; returns (values, report)."""
    options = options or SolverOptions()
    if not factors:
        report = SolverReport(converged=True, status="converged",
                              gradient_norm=0.0)
        return values, report
    factors = canonical_factor_order(factors)
    ordering = build_ordering(factors)
    layout = _Layout(ordering, values)
    report = SolverReport()
    cost = total_cost(factors, values)
    report.initial_cost = cost
    lam = options.init_lambda

    for it in range(options.max_iterations):
        report.iterations = it + 1
        A, r = _linearize(factors, values, layout)
        H = (A.T @ A).tocsr()
        g = A.T @ r
        report.gradient_norm = float(np.max(np.abs(g))) if g.size else 0.0
        if report.gradient_norm < options.gradient_tol:
            report.converged = True
            report.status = "converged"
            break

        accepted = False
        while True:
            dx = _solve_damped(H, g, lam)
            if dx is None or not np.all(np.isfinite(dx)):
                lam *= options.lambda_factor
                if lam > options.lambda_max:
                    raise SingularSystemError(
                        "normal equations singular at maximum damping")
                continue
            candidate = values.retracted(layout.split(dx))
            new_cost = total_cost(factors, candidate)
            # relative slack covers rotation-renormalization noise in the cost
            # near an optimum; absolute slack keeps machine-zero costs moving
            if np.isfinite(new_cost) and new_cost <= cost * (1.0 + 1e-13) + 1e-25:
                accepted = True
                break
            lam *= options.lambda_factor
            if lam > options.lambda_max:
                break

        if not accepted:
            report.status = "stalled"
            break
        decrease = cost - new_cost
        values = candidate
        cost = new_cost
        lam = max(lam / options.lambda_factor, options.lambda_min)
        # an uphill step inside the noise slack is not evidence of
        # convergence; let the next gradient check make the call
        if 0.0 <= decrease <= options.rel_tol * cost + options.abs_tol:
            report.converged = True
            report.status = "converged"
            break
    else:
        report.status = "max_iterations"

    report.final_cost = cost
    report.lambda_final = lam
    return values, report


# --------------------------------------------------------------------------
# marginal covariance
# --------------------------------------------------------------------------

def joint_marginal(factors, values, query_keys):
    """Joint covariance of query_keys at the current linearization point.

    Returns (cov, slices) where cov is the stacked covariance and slices maps
    each key to its block range.  Tangent-space for pose-valued variables.
    """
    factors = canonical_factor_order(factors)
    ordering = build_ordering(factors)
    layout = _Layout(ordering, values)
    A, _ = _linearize(factors, values, layout)
    H = (A.T @ A).tocsc()
    try:
        lu = splu(H)
    except RuntimeError as exc:
        raise SingularSystemError("information matrix is singular") from exc
    cols = []
    slices = {}
    n = 0
    for key in query_keys:
        s = layout.slice_of(key)
        cols.extend(range(s.start, s.stop))
        slices[key] = slice(n, n + (s.stop - s.start))
        n += s.stop - s.start
    E = np.zeros((layout.n, n))
    for j, c in enumerate(cols):
        E[c, j] = 1.0
    X = lu.solve(E)
    cov = X[cols, :]
    return 0.5 * (cov + cov.T), slices


def marginal_covariance(factors, values, query_keys):
    """Per-key marginal covariance blocks as {key: cov}."""
    cov, slices = joint_marginal(factors, values, query_keys)
    return {key: cov[s, s] for key, s in slices.items()}


# --------------------------------------------------------------------------
# marginalization (Schur complement)
# --------------------------------------------------------------------------

@dataclass
class MarginalizationResult:
    marginal_factor: LinearMarginalFactor | None
    removed_factors: list = field(default_factory=list)
    separator_keys: tuple = ()


def marginalize(factors, values, drop_keys):
    """Replace all factors touching drop_keys by a Gaussian prior on their
    neighbours (Schur complement at the current estimate).

    The caller removes `removed_factors` and the dropped values, and inserts
    `marginal_factor` (None when the dropped variables had no neighbours).
    """
    drop = set(drop_keys)
    affected = [f for f in factors if any(k in drop for k in f.keys)]
    if not affected:
        return MarginalizationResult(None, [], ())
    affected = canonical_factor_order(affected)
    sep = sorted({k for f in affected for k in f.keys if k not in drop},
                 key=canonical_key_order)
    present_drop = sorted({k for f in affected for k in f.keys if k in drop},
                          key=canonical_key_order)
    ordering = present_drop + sep
    layout = _Layout(ordering, values)
    A, r = _linearize(affected, values, layout)
    Ad = A.toarray()
    H = Ad.T @ Ad
    g = Ad.T @ r
    nd = sum(layout.dims[k] for k in present_drop)
    if not sep:
        return MarginalizationResult(None, affected, ())
    H_dd = H[:nd, :nd]
    H_dk = H[:nd, nd:]
    H_kk = H[nd:, nd:]
    g_d = g[:nd]
    g_k = g[nd:]
    try:
        L = np.linalg.cholesky(H_dd + 1e-14 * np.trace(H_dd) / max(nd, 1) * np.eye(nd))
        Hinv_dk = np.linalg.solve(L.T, np.linalg.solve(L, H_dk))
        Hinv_gd = np.linalg.solve(L.T, np.linalg.solve(L, g_d))
    except np.linalg.LinAlgError:
        Hinv = np.linalg.pinv(H_dd, hermitian=True)
        Hinv_dk = Hinv @ H_dk
        Hinv_gd = Hinv @ g_d
    H_t = H_kk - H_dk.T @ Hinv_dk
    g_t = g_k - H_dk.T @ Hinv_gd
    H_t = 0.5 * (H_t + H_t.T)

    w, V = np.linalg.eigh(H_t)
    w_max = float(w[-1]) if w.size else 0.0
    keep = w > max(w_max, 1.0) * 1e-12
    if not np.any(keep):
        return MarginalizationResult(None, affected, tuple(sep))
    sqrt_w = np.sqrt(w[keep])
    S = sqrt_w[:, None] * V[:, keep].T          # S^T S = H_t (restricted)
    b = (V[:, keep].T @ g_t) / sqrt_w           # S^T b = g_t
    blocks = []
    lin_points = {}
    col = 0
    for key in sep:
        d = layout.dims[key]
        blocks.append(S[:, col:col + d])
        lin_points[key] = values[key]
        col += d
    factor = LinearMarginalFactor(sep, blocks, b, lin_points)
    return MarginalizationResult(factor, affected, tuple(sep))
