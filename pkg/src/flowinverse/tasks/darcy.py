"""Steady Darcy flow on the unit square with a log-normal permeability prior.

The log-permeability is a Gaussian random field with squared-exponential
covariance, reduced to its 16 leading Karhunen-Loeve modes; the inverse
problem recovers the mode coefficients from a handful of interior pressure
measurements. Pressure is driven by Gaussian bumps of opposite sign on the
x = 0 and x = 1 boundaries, centered at the design parameters (e1, e2).

Discretization: vertex-centered finite volumes on a uniform 65x65 grid with
harmonic-mean face transmissibilities (flux-conservative, second order on
smooth fields), homogeneous Neumann conditions on the y = 0, 1 sides, and a
conjugate-gradient solve to relative residual 1e-10.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

KL_CACHE_VERSION = 1


@dataclass(frozen=True)
class DarcyConstants:
    n_grid: int = 65            # nodes per side; h = 1/(n_grid-1)
    sigma_w: float = 0.05       # boundary bump width parameter
    sigma_v: float = 1.0        # kernel standard deviation
    ell2: float = 0.1           # kernel squared length-scale
    n_modes: int = 16

    @property
    def h(self):
        return 1.0 / (self.n_grid - 1)


CONST = DarcyConstants()


# ---------------------------------------------------------------------------
# Karhunen-Loeve basis of the log-permeability prior
# ---------------------------------------------------------------------------

class KLBasis:
    """Leading eigenpairs of the covariance operator on the solver grid.

    ``eigenvalues`` are those of the h^2-weighted kernel matrix (so they sum
    toward the integral-operator trace); ``modes`` holds eigenfunctions
    normalized to sum(phi^2) * h^2 = 1, flattened over grid nodes.
    """

    def __init__(self, eigenvalues, modes, const: DarcyConstants, trace: float):
        self.eigenvalues = eigenvalues          # (n_modes,) descending
        self.modes = modes                      # (n_modes, n_grid*n_grid)
        self.const = const
        self.trace = float(trace)
        self.scaled_modes = (modes * np.sqrt(eigenvalues)[:, None])

    @property
    def captured_fraction(self):
        return float(self.eigenvalues.sum() / self.trace)


def _grid_points(const):
    xs = np.linspace(0.0, 1.0, const.n_grid)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def kernel_matrix(const: DarcyConstants = CONST) -> np.ndarray:
    """Dense squared-exponential kernel on grid nodes, h^2 quadrature weighted."""
    pts = _grid_points(const)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    return (const.sigma_v ** 2) * np.exp(-d2 / (2.0 * const.ell2)) * const.h ** 2


def _cache_path(const, cache_dir):
    if cache_dir is None:
        cache_dir = os.environ.get(
            "FLOWINVERSE_CACHE",
            os.path.join(os.path.expanduser("~"), ".cache", "flowinverse"))
    tag = f"kl_n{const.n_grid}_sv{const.sigma_v:g}_l2{const.ell2:g}_m{const.n_modes}_v{KL_CACHE_VERSION}"
    return os.path.join(cache_dir, tag + ".npz")


def kl_basis_build(const: DarcyConstants = CONST, cache_dir=None) -> KLBasis:
    """Eigendecompose the covariance operator; results are disk-cached keyed
    by (grid, sigma_v, ell^2, n_modes) and the cache format version."""
    path = _cache_path(const, cache_dir)
    if os.path.exists(path):
        with np.load(path) as z:
            if int(z["version"]) == KL_CACHE_VERSION:
                return KLBasis(z["eigenvalues"], z["modes"], const, float(z["trace"]))
    K = kernel_matrix(const)
    trace = np.trace(K)
    n = K.shape[0]
    v0 = np.full(n, 1.0 / np.sqrt(n))
    try:
        vals, vecs = spla.eigsh(K, k=const.n_modes, which="LA", v0=v0)
    except spla.ArpackError as err:  # pragma: no cover
        raise RuntimeError(f"KL eigendecomposition failed: {err}") from err
    order = np.argsort(vals)[::-1]
    vals = np.maximum(vals[order], 0.0)
    modes = (vecs[:, order].T / const.h).astype(np.float64)   # sum(phi^2) h^2 = 1
    # fix sign convention so the basis is reproducible across LAPACK builds
    signs = np.sign(modes[np.arange(const.n_modes), np.argmax(np.abs(modes), axis=1)])
    modes *= signs[:, None]
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp.npz"
    np.savez(tmp, version=KL_CACHE_VERSION, eigenvalues=vals, modes=modes, trace=trace)
    os.replace(tmp, path)
    return KLBasis(vals, modes, const, trace)


def kl_expand(m, basis: KLBasis) -> np.ndarray:
    """Log-permeability field(s) from mode coefficients.

    m: (n_modes,) or (B, n_modes); returns (n, n) or (B, n, n).
    """
    m = np.asarray(m, dtype=np.float64)
    n = basis.const.n_grid
    single = m.ndim == 1
    field = np.atleast_2d(m) @ basis.scaled_modes
    field = field.reshape(-1, n, n)
    return field[0] if single else field


# ---------------------------------------------------------------------------
# finite-volume solver
# ---------------------------------------------------------------------------

class _StencilPattern:
    """Precomputed sparsity pattern of the FV system for one grid size."""

    def __init__(self, n):
        self.n = n
        idx = np.arange(n * n).reshape(n, n)
        ia, ja = np.meshgrid(np.arange(n - 1), np.arange(n), indexing="ij")
        self.xa = idx[ia, ja].ravel()
        self.xb = idx[ia + 1, ja].ravel()
        ia, ja = np.meshgrid(np.arange(n), np.arange(n - 1), indexing="ij")
        self.ya = idx[ia, ja].ravel()
        self.yb = idx[ia, ja + 1].ravel()
        self.rows = np.concatenate([self.xa, self.xb, self.xa, self.xb,
                                    self.ya, self.yb, self.ya, self.yb])
        self.cols = np.concatenate([self.xa, self.xb, self.xb, self.xa,
                                    self.ya, self.yb, self.yb, self.ya])
        dirichlet = np.zeros((n, n), dtype=bool)
        dirichlet[0, :] = True
        dirichlet[-1, :] = True
        self.free = ~dirichlet.ravel()
        # half-width faces for x-edges lying on the y = 0, 1 boundaries
        self.x_face_w = np.ones(n)
        self.x_face_w[0] = 0.5
        self.x_face_w[-1] = 0.5


_PATTERNS: dict[int, _StencilPattern] = {}


def _pattern(n):
    if n not in _PATTERNS:
        _PATTERNS[n] = _StencilPattern(n)
    return _PATTERNS[n]


def _assemble(kappa):
    n = kappa.shape[0]
    pat = _pattern(n)
    kf = kappa.ravel()
    tx = 2.0 * kf[pat.xa] * kf[pat.xb] / (kf[pat.xa] + kf[pat.xb])
    tx *= np.tile(pat.x_face_w, n - 1)
    ty = 2.0 * kf[pat.ya] * kf[pat.yb] / (kf[pat.ya] + kf[pat.yb])
    vals = np.concatenate([tx, tx, -tx, -tx, ty, ty, -ty, -ty])
    return sp.coo_matrix((vals, (pat.rows, pat.cols)), shape=(n * n, n * n)).tocsr(), pat


class SolverError(RuntimeError):
    pass


def _solve_dirichlet(kappa, left_vals, right_vals, rtol=1e-10, maxiter=100_000):
    """Solve the FV system with explicit Dirichlet data on x = 0 (left) and
    x = 1 (right); homogeneous Neumann on the y sides."""
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa <= 0) or not np.isfinite(kappa).all():
        raise SolverError("permeability must be positive and finite everywhere")
    n = kappa.shape[0]
    A, pat = _assemble(kappa)
    u = np.zeros(n * n)
    u[:n] = left_vals          # i = 0 row-major block
    u[-n:] = right_vals        # i = n-1
    free = pat.free
    Aff = A[free][:, free]
    b = -(A[free][:, ~free] @ u[~free])
    M = sp.diags(1.0 / Aff.diagonal())
    x, info = spla.cg(Aff, b, rtol=rtol, atol=0.0, M=M, maxiter=maxiter)
    if info != 0:
        raise SolverError(f"conjugate gradient failed to reach rtol={rtol} (info={info})")
    u[free] = x
    return u.reshape(n, n)


def boundary_profiles(e1, e2, const: DarcyConstants = CONST):
    ys = np.linspace(0.0, 1.0, const.n_grid)
    f = np.exp(-((ys - e1) ** 2) / (2.0 * const.sigma_w))
    g = -np.exp(-((ys - e2) ** 2) / (2.0 * const.sigma_w))
    return f, g


def darcy_solve(kappa, e1, e2, sigma_w=None, const: DarcyConstants = CONST):
    """Pressure field for permeability ``kappa`` and boundary designs (e1, e2)."""
    if sigma_w is not None and sigma_w != const.sigma_w:
        const = replace(const, sigma_w=sigma_w)
    if not (0.0 <= e1 <= 1.0 and 0.0 <= e2 <= 1.0):
        raise ValueError(f"design parameters must lie in [0, 1], got ({e1}, {e2})")
    f, g = boundary_profiles(e1, e2, const)
    return _solve_dirichlet(kappa, f, g)


def darcy_observe(u, points, eta=None):
    """Bilinear interpolation of the pressure field at interior points."""
    u = np.asarray(u)
    n = u.shape[0]
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if np.any(pts <= 0.0) or np.any(pts >= 1.0):
        raise ValueError("measurement points must lie strictly inside the unit square")
    h = 1.0 / (n - 1)
    fx = pts[:, 0] / h
    fy = pts[:, 1] / h
    i = np.minimum(fx.astype(int), n - 2)
    j = np.minimum(fy.astype(int), n - 2)
    wx = fx - i
    wy = fy - j
    vals = (u[i, j] * (1 - wx) * (1 - wy) + u[i + 1, j] * wx * (1 - wy)
            + u[i, j + 1] * (1 - wx) * wy + u[i + 1, j + 1] * wx * wy)
    if eta is not None:
        vals = vals + eta
    return vals


class DarcyTask:
    name = "darcy"
    task_id = 2
    dim_m = 16
    obs_token_dim = 3          # (d_i, x_i, y_i)
    design_token_dim = 2       # (e1, e2)

    def __init__(self, sigma_rel: float = 0.01, const: DarcyConstants = CONST,
                 cache_dir=None):
        self.sigma_rel = float(sigma_rel)   # noise sigma = sigma_rel * max|u|
        self.const = const
        self._basis = None
        self._cache_dir = cache_dir

    @property
    def basis(self) -> KLBasis:
        if self._basis is None:
            self._basis = kl_basis_build(self.const, self._cache_dir)
        return self._basis

    def e_width(self, n_obs):
        return 2 + 2 * n_obs    # (e1, e2, x1, y1, ..., xn, yn)

    def d_width(self, n_obs):
        return n_obs

    def default_n_obs_set(self):
        return (4, 5, 6, 7, 8)

    def sample_params(self, rng, size):
        return rng.normal(0.0, 1.0, (size, self.dim_m))

    prior_sample = sample_params

    def sample_design(self, rng, n_obs):
        h = self.const.h
        e12 = rng.uniform(0.0, 1.0, 2)
        pts = rng.uniform(h, 1.0 - h, (n_obs, 2))
        return np.concatenate([e12, pts.ravel()])

    def _solve_row(self, m, e_row):
        kappa = np.exp(kl_expand(np.asarray(m, dtype=np.float64), self.basis))
        return darcy_solve(kappa, float(e_row[0]), float(e_row[1]), const=self.const)

    def simulate_batch(self, m, e, n_obs):
        B = m.shape[0]
        d = np.empty((B, n_obs))
        scale = np.empty(B)
        for i in range(B):
            u = self._solve_row(m[i], e[i])
            pts = e[i, 2:].reshape(n_obs, 2)
            d[i] = darcy_observe(u, pts)
            scale[i] = self.sigma_rel * self._boundary_max(e[i])
        return d, scale

    def _boundary_max(self, e_row):
        f, g = boundary_profiles(float(e_row[0]), float(e_row[1]), self.const)
        return max(np.abs(f).max(), np.abs(g).max())

    def token_features(self, d, e):
        B, n = d.shape
        pts = e[:, 2:].reshape(B, n, 2)
        obs = np.concatenate([d[..., None], pts], axis=-1).astype(np.float32)
        design = e[:, None, :2].astype(np.float32)
        return obs, design

    def flat_features(self, d, e):
        return d.astype(np.float32), e.astype(np.float32)

    def de_solution(self, m, e_row=None):
        if e_row is None:
            raise ValueError("darcy solution evaluation requires the design row (e1, e2, ...)")
        return self._solve_row(m, e_row).reshape(-1)

    def forward_observed(self, m, e_row):
        n_obs = (len(e_row) - 2) // 2
        u = self._solve_row(m, e_row)
        return darcy_observe(u, e_row[2:].reshape(n_obs, 2))

    def in_support(self, m):
        return bool(np.isfinite(np.asarray(m)).all())

    def log_prior(self, m):
        m = np.asarray(m, dtype=np.float64)
        return float(-0.5 * np.dot(m, m))

    def sigma_for(self, e_row, d_row):
        """Noise scale consistent with generation: sigma_rel * max|u|.

        By the discrete maximum principle max|u| equals the largest boundary
        magnitude, which depends only on the design, not on the field.
        """
        return self.sigma_rel * self._boundary_max(e_row)
