"""Backstepping kernels on the triangle ``0 <= xi <= x <= L``.

Fields are stored as dense ``(n+1, n+1)`` arrays indexed ``[i_x, i_xi]``; the
entries above the diagonal (``xi > x``) are unused and kept at zero.

The forward kernels ``K = (k1, k2, k3)`` and ``M`` solve the heterodirectional
system (``mu`` is the upstream speed ``-lambda4``)::

    mu K_x - K_xi Lambda = K Sigma++(xi) + M Sigma-+(xi)
    mu (M_x + M_xi)      = K Sigma+-(xi)
    K(x, x)              = -Sigma-+(x) (Lambda + mu)^-1
    M(x, 0)              = K(x, 0) Lambda Q / mu

and are found by successive approximation on the integral form along
characteristics. The inverse kernels come from the resolvent identities

    N(x, s) = M(x, s) + int_s^x N(x, xi) M(xi, s) dxi
    L(x, s) = K(x, s) + int_s^x N(x, xi) K(xi, s) dxi

which make ``w- = beta + int_0^x (L alpha + N beta)`` the exact inverse of
``beta = w- - int_0^x (K w+ + M w-)``.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, gmres

from .exceptions import DomainError, GridMismatchError, KernelSolverError
from .model import LinearizedSystem

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
CACHE_MAGIC = b"ARZK"
CACHE_VERSION = 1


@dataclass(frozen=True, eq=False)
class KernelSet:
    grid_n: int
    length: float
    k: np.ndarray          # (3, n+1, n+1)
    m_kernel: np.ndarray   # (n+1, n+1)
    l: np.ndarray | None = None
    n_kernel: np.ndarray | None = None
    residual_norm: float = 0.0
    iterations: int = 0

    @property
    def dx(self):
        return self.length / self.grid_n

    @property
    def k1(self):
        return self.k[0]

    @property
    def k2(self):
        return self.k[1]

    @property
    def k3(self):
        return self.k[2]

    @property
    def l1(self):
        return self.l[0]

    @property
    def l2(self):
        return self.l[1]

    @property
    def l3(self):
        return self.l[2]

    @property
    def has_inverse(self):
        return self.l is not None

    def with_inverse(self, l, n_kernel, residual=None):
        return KernelSet(
            grid_n=self.grid_n, length=self.length, k=self.k, m_kernel=self.m_kernel,
            l=l, n_kernel=n_kernel,
            residual_norm=max(self.residual_norm, residual or 0.0),
            iterations=self.iterations,
        )

    def fields(self):
        out = {"k1": self.k[0], "k2": self.k[1], "k3": self.k[2], "m": self.m_kernel}
        if self.has_inverse:
            out.update({"l1": self.l[0], "l2": self.l[1], "l3": self.l[2], "n": self.n_kernel})
        return out


def zero_kernels(grid_n, length):
    n1 = grid_n + 1
    z = np.zeros((n1, n1))
    return KernelSet(grid_n=grid_n, length=float(length), k=np.zeros((3, n1, n1)),
                     m_kernel=z.copy(), l=np.zeros((3, n1, n1)), n_kernel=z.copy())


def trapezoid_weights(n, h):
    """``c[i, j]``: weight of node j in the trapezoid rule over ``[0, x_i]``."""
    c = np.tril(np.full((n + 1, n + 1), h))
    idx = np.arange(n + 1)
    c[idx, idx] = h / 2.0
    c[:, 0] = np.where(idx > 0, h / 2.0, 0.0)
    c[0, 0] = 0.0
    return c


def _lower_mask(n):
    return np.tril(np.ones((n + 1, n + 1), dtype=bool))


# --------------------------------------------------------------------------
# characteristic integration operators


def _diagonal_characteristic_operator(n, h, a, b):
    """Integration operator along characteristics that start on ``xi = x``.

    A field obeying ``a f_x - b f_xi = g`` (a, b > 0) satisfies
    ``f(x, xi) = f(x0, x0) + int_0^s* g ds`` along ``(x0 + a s, x0 - b s)``
    with ``x0 = (b x + a xi)/(a + b)`` and ``s* = (x - xi)/(a + b)``.

    Returns ``(A, x0)`` where ``A @ g.ravel()`` evaluates the integral at every
    node (trapezoid rule on the row crossings, ``g`` linearly interpolated in
    ``xi`` on each row and along the diagonal) and ``x0`` holds the foot point
    of every node.
    """
    n1 = n + 1
    xs = np.arange(n1) * h
    rows, cols, vals = [], [], []
    foot = np.zeros((n1, n1))
    for i in range(1, n1):
        j = np.arange(i)                      # nodes strictly below the diagonal
        x0 = (b * xs[i] + a * xs[j]) / (a + b)
        foot[i, j] = x0
        m = np.arange(n1)
        s = (xs[None, :] - x0[:, None]) / a   # param where char crosses row m
        valid = (s > 1e-12 * h / a) & (m[None, :] <= i)
        if not valid.any():
            continue
        s_masked = np.where(valid, s, np.nan)
        # neighbours along the characteristic: previous crossing or the foot (s = 0)
        prev = np.full_like(s, np.nan)
        prev[:, 1:] = s_masked[:, :-1]
        prev = np.where(np.isnan(prev), 0.0, prev)
        nxt = np.full_like(s, np.nan)
        nxt[:, :-1] = s_masked[:, 1:]
        nxt = np.where(np.isnan(nxt), s, nxt)
        w = np.where(valid, 0.5 * (nxt - prev), 0.0)

        jj, mm = np.nonzero(valid)
        target = i * n1 + j[jj]
        xi_m = x0[jj] - b * s[jj, mm]
        pos = np.clip(xi_m / h, 0.0, None)
        q = np.minimum(np.floor(pos).astype(int), mm)
        phi = pos - q
        q1 = np.minimum(q + 1, mm)
        ww = w[jj, mm]
        rows += [target, target]
        cols += [mm * n1 + q, mm * n1 + q1]
        vals += [ww * (1.0 - phi), ww * phi]

        # foot node on the diagonal: weight half of the first segment
        first = np.where(valid.any(axis=1), np.nanmin(s_masked, axis=1), 0.0)
        w0 = 0.5 * first
        p_pos = x0 / h
        p = np.minimum(np.floor(p_pos).astype(int), n)
        theta = p_pos - p
        p1 = np.minimum(p + 1, n)
        tgt = i * n1 + j
        rows += [tgt, tgt]
        cols += [p * n1 + p, p1 * n1 + p1]
        vals += [w0 * (1.0 - theta), w0 * theta]
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(n1 * n1, n1 * n1))
    return A, foot


def _shift_operator(n, h, from_left_edge=True):
    """Trapezoid integration along lines ``x - xi = const``.

    With ``from_left_edge`` the integral runs from the node ``(x - xi, 0)`` up
    to ``(x, xi)``; otherwise from ``(x, xi)`` up to the right edge
    ``x = L``. Nodes on these lines are grid nodes, so no interpolation is
    needed.
    """
    n1 = n + 1
    rows, cols, vals = [], [], []
    for i in range(n1):
        for j in range(i + 1):
            if from_left_edge:
                steps = j
                path = [(i - j + l, l) for l in range(steps + 1)]
            else:
                steps = n - i
                path = [(i + l, j + l) for l in range(steps + 1)]
            if steps == 0:
                continue
            wts = np.full(steps + 1, h)
            wts[0] = wts[-1] = h / 2.0
            for (pi, pj), wt in zip(path, wts):
                rows.append(i * n1 + j)
                cols.append(pi * n1 + pj)
                vals.append(wt)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n1 * n1, n1 * n1))


_OPERATOR_CACHE: dict = {}


def _cached(key, builder):
    if key not in _OPERATOR_CACHE:
        if len(_OPERATOR_CACHE) > 64:
            _OPERATOR_CACHE.clear()
        _OPERATOR_CACHE[key] = builder()
    return _OPERATOR_CACHE[key]


def _diag_interp(values_on_diag, x0, h):
    n = values_on_diag.shape[-1] - 1
    grid = np.arange(n + 1) * h
    return np.interp(x0, grid, values_on_diag)


# --------------------------------------------------------------------------
# forward kernels


def _require_congested(sys: LinearizedSystem):
    if not sys.lambda_minus > 0 or np.any(sys.lambda_plus <= 0):
        raise DomainError(
            "kernel design needs three downstream and one upstream characteristic "
            f"(got speeds {sys.lam})"
        )


def _picard(update, state, tol, max_iter, what):
    scale = 1.0
    diff = np.inf
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            new = update(state)
            diff = max(np.max(np.abs(a - b)) for a, b in zip(new, state))
            scale = max(1.0, max(np.max(np.abs(a)) for a in new))
        if not np.isfinite(diff) or not np.isfinite(scale):
            break
        state = new
        if diff <= tol * scale:
            return state, diff / scale, it
    raise KernelSolverError(
        f"{what}: successive approximation did not converge in {max_iter} iterations "
        f"(last relative change {diff / scale:.3e})",
        residual=diff / scale,
    )


def _affine_solve(update, template, tol, what):
    """Solve the fixed point ``X = update(X)`` of an affine map with GMRES.

    Used when successive approximation stalls: the discrete equations are the
    same, only the linear solver differs.
    """
    shapes = [a.shape for a in template]
    sizes = [a.size for a in template]

    def unpack(v):
        out, o = [], 0
        for sh, sz in zip(shapes, sizes):
            out.append(v[o:o + sz].reshape(sh))
            o += sz
        return tuple(out)

    def pack(t):
        return np.concatenate([a.ravel() for a in t])

    b = pack(update(tuple(np.zeros(sh) for sh in shapes)))
    n = b.size
    op = LinearOperator((n, n), matvec=lambda v: v - (pack(update(unpack(v))) - b), dtype=float)
    x, info = gmres(op, b, rtol=1e-13, atol=0.0, restart=400, maxiter=50)
    state = unpack(x)
    new = update(state)
    scale = max(1.0, float(np.max(np.abs(x))))
    resid = max(np.max(np.abs(a - c)) for a, c in zip(new, state)) / scale
    if info != 0 or not resid <= tol:
        raise KernelSolverError(f"{what}: direct solve failed (fixed-point residual {resid:.3e})",
                                residual=resid)
    return new, resid


def _solve_fixed_point(update, state, tol, max_iter, what):
    """Successive approximation with a GMRES fallback; returns ``(state, resid, iterations)``.

    ``iterations`` is 0 when the fallback produced the answer.
    """
    try:
        return _picard(update, state, tol, max_iter, what)
    except KernelSolverError as exc:
        log.info("%s; switching to a Krylov solve of the same equations", exc)
        new, resid = _affine_solve(update, state, tol, what)
        return new, resid, 0


def solve_control_kernels(sys: LinearizedSystem, grid_n=None, tol=DEFAULT_TOL,
                          max_iter=DEFAULT_MAX_ITER) -> KernelSet:
    """Forward kernels ``K`` and ``M`` by successive approximation."""
    _require_congested(sys)
    n = sys.nx if grid_n is None else int(grid_n)
    sys = sys.resample(n)
    h = sys.dx
    n1 = n + 1
    mu = sys.lambda_minus
    lam = sys.lambda_plus
    x = sys.x
    spp, spm, smp = sys.sigma_pp, sys.sigma_pm, sys.sigma_mp
    mask = _lower_mask(n)

    ops = []
    kbc = np.zeros((3, n1, n1))
    for i in range(3):
        A, foot = _cached(("diag", n, h, mu, lam[i]),
                          lambda i=i: _diagonal_characteristic_operator(n, h, mu, lam[i]))
        ops.append(A)
        bc_at_foot = -sys.coupling(foot)[..., 3, i] / (lam[i] + mu)
        kbc[i] = np.where(mask, bc_at_foot, 0.0)
        kbc[i][np.arange(n1), np.arange(n1)] = -smp[:, i] / (lam[i] + mu)
    S = _cached(("shift-left", n, h), lambda: _shift_operator(n, h, True))
    m_edge_gain = (lam * sys.q_bc) / mu        # M(x, 0) = K(x, 0) . (Lambda Q) / mu

    def rhs(K, M):
        # (K Sigma++)_i = sum_k K_k Sigma++_ki(xi), evaluated at column xi
        fk = np.einsum("kab,bki->iab", K, spp) + M[None] * smp.T[:, None, :]
        fm = np.einsum("kab,bk->ab", K, spm)
        return fk, fm

    def update(state):
        K, M = state
        fk, fm = rhs(K, M)
        K_new = np.empty_like(K)
        for i in range(3):
            K_new[i] = kbc[i] + (ops[i] @ fk[i].ravel()).reshape(n1, n1)
            K_new[i][~mask] = 0.0
        edge = np.einsum("kx,k->x", K_new[:, :, 0], m_edge_gain)
        # M(i, j) = M(i - j, 0) + (1/mu) int FM along the diagonal line
        ii, jj = np.nonzero(mask)
        M_new = np.zeros((n1, n1))
        M_new[ii, jj] = edge[ii - jj]
        M_new += (S @ (fm.ravel() / mu)).reshape(n1, n1)
        M_new[~mask] = 0.0
        return K_new, M_new

    state = (kbc.copy(), np.zeros((n1, n1)))
    (K, M), resid, iters = _solve_fixed_point(update, state, tol, max_iter, "control kernels")
    log.debug("control kernels converged in %d iterations (change %.2e)", iters, resid)
    return KernelSet(grid_n=n, length=sys.length, k=K, m_kernel=M,
                     residual_norm=resid, iterations=iters)


# --------------------------------------------------------------------------
# inverse kernels


def _resolvent_row_weights(i, n, h):
    """``W[xi, s]``: trapezoid weight of node xi in ``int_s^{x_i}``."""
    n1 = n + 1
    xi = np.arange(n1)[:, None]
    s = np.arange(n1)[None, :]
    inside = (s <= xi) & (xi <= i) & (s < i)
    W = np.where(inside, h, 0.0)
    return np.where(inside & ((xi == s) | (xi == i)), h / 2.0, W)


def _resolvent_apply(N, F, h):
    """Row-wise ``int_s^{x_i} N(x_i, xi) F(xi, s) dxi`` for a field F of shape (..., n+1, n+1)."""
    n = N.shape[0] - 1
    out = np.zeros(F.shape[:-2] + N.shape)
    for i in range(1, n + 1):
        W = _resolvent_row_weights(i, n, h)
        out[..., i, :] = np.einsum("x,xs,...xs->...s", N[i], W, F)
    return out


def solve_inverse_kernels(sys: LinearizedSystem, grid_n=None, forward: KernelSet | None = None,
                          tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> KernelSet:
    """Inverse kernels ``L`` and ``N``; returns a KernelSet carrying both families."""
    if forward is None:
        forward = solve_control_kernels(sys, grid_n=grid_n, tol=tol, max_iter=max_iter)
    n = forward.grid_n
    h = forward.dx
    K, M = forward.k, forward.m_kernel

    # Each row of the discrete resolvent equation N = M + int N M is a small
    # dense linear system, so it is solved directly rather than iterated.
    n1 = n + 1
    N = np.zeros((n1, n1))
    N[0] = M[0]
    for i in range(1, n1):
        G = _resolvent_row_weights(i, n, h) * M
        N[i] = np.linalg.solve(np.eye(n1) - G.T, M[i])
    resid = float(np.max(np.abs(N - M - _resolvent_apply(N, M, h)))) / max(1.0, float(np.max(np.abs(N))))
    iters = 1
    L = K + _resolvent_apply(N, K, h)
    mask = _lower_mask(n)
    L[:, ~mask] = 0.0
    N[~mask] = 0.0
    return forward.with_inverse(L, N, resid)


def solve_kernels(sys: LinearizedSystem, grid_n=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                  cache_dir=None) -> KernelSet:
    """Forward and inverse kernels, optionally through an on-disk cache."""
    n = sys.nx if grid_n is None else int(grid_n)
    if cache_dir is not None:
        path = Path(cache_dir) / f"{cache_key(sys.resample(n), n, tol)}.kern"
        if path.exists():
            return load_kernels(path)
    forward = solve_control_kernels(sys, grid_n=n, tol=tol, max_iter=max_iter)
    ks = solve_inverse_kernels(sys, forward=forward, tol=tol, max_iter=max_iter)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_kernels(ks, path)
    return ks


# --------------------------------------------------------------------------
# transforms


def _check_grid(w_plus, w_minus, kernels):
    n1 = kernels.grid_n + 1
    if np.shape(w_plus) != (3, n1) or np.shape(w_minus) != (n1,):
        raise GridMismatchError(
            f"state with shapes {np.shape(w_plus)}, {np.shape(w_minus)} does not match "
            f"kernels on {n1} nodes"
        )


def forward_transform(w_plus, w_minus, kernels: KernelSet):
    """``(alpha, beta)`` with ``alpha = w+`` and ``beta = w- - int_0^x (K w+ + M w-)``."""
    _check_grid(w_plus, w_minus, kernels)
    c = trapezoid_weights(kernels.grid_n, kernels.dx)
    integral = np.einsum("ij,kij,kj->i", c, kernels.k, w_plus) + (c * kernels.m_kernel) @ w_minus
    return np.array(w_plus, dtype=float, copy=True), np.asarray(w_minus) - integral


def inverse_transform(alpha, beta, kernels: KernelSet):
    """``(w+, w-)`` with ``w+ = alpha`` and ``w- = beta + int_0^x (L alpha + N beta)``."""
    if not kernels.has_inverse:
        raise DomainError("kernel set has no inverse kernels")
    _check_grid(alpha, beta, kernels)
    c = trapezoid_weights(kernels.grid_n, kernels.dx)
    integral = np.einsum("ij,kij,kj->i", c, kernels.l, alpha) + (c * kernels.n_kernel) @ beta
    return np.array(alpha, dtype=float, copy=True), np.asarray(beta) + integral


# --------------------------------------------------------------------------
# residuals


@dataclass(frozen=True)
class ResidualReport:
    max_abs: dict
    l2: dict
    scale: dict

    @property
    def worst(self):
        return max(self.max_abs.values())

    @property
    def worst_relative(self):
        return max(self.max_abs[k] / self.scale[k] for k in self.max_abs if self.scale[k] > 0)

    def passes(self, tol=1e-6):
        return self.worst <= tol


def _interior_derivatives(F, h):
    """Centered x- and xi-derivatives on nodes with all four neighbours inside the triangle."""
    n1 = F.shape[-1]
    fx = np.full(F.shape, np.nan)
    fxi = np.full(F.shape, np.nan)
    fx[..., 1:-1, :] = (F[..., 2:, :] - F[..., :-2, :]) / (2 * h)
    fxi[..., :, 1:-1] = (F[..., :, 2:] - F[..., :, :-2]) / (2 * h)
    i, j = np.meshgrid(np.arange(n1), np.arange(n1), indexing="ij")
    ok = (j >= 1) & (j <= i - 1) & (i <= n1 - 2)
    return fx, fxi, ok


def _summ(name, r, ok, h, scale, out_max, out_l2, out_scale):
    vals = np.abs(r[ok]) if ok is not None else np.abs(r)
    out_max[name] = float(np.max(vals)) if vals.size else 0.0
    out_l2[name] = float(np.sqrt(np.sum(vals ** 2) * h * h)) if vals.size else 0.0
    out_scale[name] = float(scale)


def kernel_residual(kernels: KernelSet, sys: LinearizedSystem) -> ResidualReport:
    """Finite-difference residuals of the kernel PDEs and boundary conditions.

    Forward kernels are checked against their PDEs; inverse kernels (when
    present) against the resolvent identities, which is the form they are
    defined by.
    """
    n = kernels.grid_n
    sys = sys.resample(n)
    h = kernels.dx
    mu = sys.lambda_minus
    lam = sys.lambda_plus
    spp, spm, smp = sys.sigma_pp, sys.sigma_pm, sys.sigma_mp
    K, M = kernels.k, kernels.m_kernel
    mx, ml2, msc = {}, {}, {}

    kx, kxi, ok = _interior_derivatives(K, h)
    src = np.einsum("kab,bki->iab", K, spp) + M[None] * smp.T[:, None, :]
    for i in range(3):
        r = mu * kx[i] - lam[i] * kxi[i] - src[i]
        _summ(f"k{i + 1}", r, ok, h, np.max(np.abs(mu * kx[i][ok])) if ok.any() else 0.0, mx, ml2, msc)
    m_x, m_xi, ok_m = _interior_derivatives(M, h)
    r = mu * (m_x + m_xi) - np.einsum("kab,bk->ab", K, spm)
    _summ("m", r, ok_m, h, np.max(np.abs(mu * m_x[ok_m])) if ok_m.any() else 0.0, mx, ml2, msc)

    d = np.arange(n + 1)
    bc_k = K[:, d, d] + (smp / (lam + mu)).T
    _summ("k_diagonal", bc_k, None, h, np.max(np.abs(K[:, d, d])), mx, ml2, msc)
    bc_m = M[:, 0] - np.einsum("kx,k->x", K[:, :, 0], lam * sys.q_bc) / mu
    _summ("m_edge", bc_m, None, h, np.max(np.abs(M[:, 0])), mx, ml2, msc)

    if kernels.has_inverse:
        rn = kernels.n_kernel - M - _resolvent_apply(kernels.n_kernel, M, h)
        rl = kernels.l - K - _resolvent_apply(kernels.n_kernel, K, h)
        mask = _lower_mask(n)
        _summ("n", rn, mask, h, np.max(np.abs(kernels.n_kernel)), mx, ml2, msc)
        for i in range(3):
            _summ(f"l{i + 1}", rl[i], mask, h, np.max(np.abs(kernels.l[i])), mx, ml2, msc)
    return ResidualReport(max_abs=mx, l2=ml2, scale=msc)


# --------------------------------------------------------------------------
# cache


def cache_key(sys: LinearizedSystem, grid_n, tol):
    digest = hashlib.sha256()
    digest.update(sys.fingerprint())
    digest.update(struct.pack("<id", int(grid_n), float(tol)))
    return digest.hexdigest()[:32]


def save_kernels(kernels: KernelSet, path):
    """Versioned header followed by row-major float64 dumps of every field."""
    names = ["k1", "k2", "k3", "m"] + (["l1", "l2", "l3", "n"] if kernels.has_inverse else [])
    flds = kernels.fields()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<HIdd I", CACHE_VERSION, kernels.grid_n, kernels.length,
                             kernels.residual_norm, len(names)))
        for name in names:
            fh.write(struct.pack("<8s", name.encode()))
            fh.write(np.ascontiguousarray(flds[name], dtype="<f8").tobytes(order="C"))


def load_kernels(path) -> KernelSet:
    with open(path, "rb") as fh:
        if fh.read(4) != CACHE_MAGIC:
            raise ValueError(f"{path} is not a kernel cache file")
        header = struct.calcsize("<HIdd I")
        version, n, length, resid, count = struct.unpack("<HIdd I", fh.read(header))
        if version != CACHE_VERSION:
            raise ValueError(f"unsupported kernel cache version {version}")
        n1 = n + 1
        data = {}
        for _ in range(count):
            name = struct.unpack("<8s", fh.read(8))[0].rstrip(b"\0").decode()
            data[name] = np.frombuffer(fh.read(8 * n1 * n1), dtype="<f8").reshape(n1, n1).copy()
    k = np.stack([data["k1"], data["k2"], data["k3"]])
    l = np.stack([data["l1"], data["l2"], data["l3"]]) if "l1" in data else None
    return KernelSet(grid_n=n, length=length, k=k, m_kernel=data["m"], l=l,
                     n_kernel=data.get("n"), residual_norm=resid)
