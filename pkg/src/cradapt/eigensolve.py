"""Smallest eigenpairs of the symmetric pencil ``A x = lambda M x``.

Shift-inverted block subspace iteration (shift 0) with a Rayleigh-Ritz step
in every sweep.  The block carries ``guard`` extra vectors beyond ``nev``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "EigenPair",
    "SpectralSet",
    "EigenSolverError",
    "smallest_eigenpairs",
    "fix_signs",
]

# below this size a dense solve is cheaper and exact
_DENSE_LIMIT = 200


class EigenSolverError(RuntimeError):
    """Iteration cap reached; ``residuals`` holds the best relative residuals."""

    def __init__(self, msg, residuals=None):
        super().__init__(msg)
        self.residuals = residuals


@dataclass(frozen=True)
class EigenPair:
    value: float
    vector: np.ndarray
    residual: float
    space: str = ""


@dataclass
class SpectralSet:
    """Ascending eigenvalues with M-orthonormal eigenvectors stored columnwise."""

    values: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    space: str = ""
    seed: int = 0
    iterations: int = 0
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, k) -> EigenPair:
        return EigenPair(float(self.values[k]), self.vectors[:, k],
                         float(self.residuals[k]), self.space)

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    def orthogonality(self, M) -> np.ndarray:
        """``V^T M V``; should be the identity."""
        return self.vectors.T @ (M @ self.vectors)

    def take(self, idx) -> "SpectralSet":
        idx = np.atleast_1d(idx)
        return SpectralSet(self.values[idx], self.vectors[:, idx], self.residuals[idx],
                           self.space, self.seed, self.iterations, dict(self.info))


def _residuals(A, M, X, theta, dinv):
    R = A @ X - (M @ X) * theta
    return np.sqrt(np.einsum("ij,ij,i->j", R, R, dinv))


def _dense(A, M, nev):
    w, V = la.eigh(A.toarray() if sp.issparse(A) else A,
                   M.toarray() if sp.issparse(M) else M)
    return w[:nev], V[:, :nev]


def smallest_eigenpairs(A, M, nev: int, tol: float = 1e-9, seed: int = 0,
                        maxiter: int = 500, guard: int = 5, x0=None,
                        factor=None, space: str = "") -> SpectralSet:
    """Compute the ``nev`` smallest eigenpairs of ``A x = lambda M x``.

    Parameters
    ----------
    A, M : symmetric positive definite sparse (or dense) matrices.
    nev : number of eigenpairs.
    tol : relative residual tolerance, ``||A x - lambda M x||_* <= tol * lambda``
        where ``||.||_*`` is the dual norm induced by the diagonal of ``M``.
    seed : seed of the random starting block.
    x0 : optional starting vectors (columns), completed with random ones.
    factor : optional object with ``solve`` for ``A``, e.g. a cached LU.

    Returns
    -------
    SpectralSet with M-orthonormal eigenvectors.
    """
    n = A.shape[0]
    if nev < 1 or nev > n:
        raise ValueError(f"nev={nev} must lie in [1, {n}]")
    Ad = A if sp.issparse(A) else np.asarray(A, float)
    Md = M if sp.issparse(M) else np.asarray(M, float)
    dinv = 1.0 / np.asarray(Md.diagonal(), float)

    if n <= _DENSE_LIMIT:
        w, V = _dense(Ad, Md, nev)
        res = _residuals(Ad, Md, V, w, dinv)
        return fix_signs(SpectralSet(w, V, res / w, space, seed, 0, {"method": "dense"}))

    if factor is None:
        factor = spla.splu(sp.csc_matrix(Ad), permc_spec="MMD_AT_PLUS_A",
                           diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    b = min(nev + guard, n)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, b))
    if x0 is not None:
        x0 = np.asarray(x0, float).reshape(n, -1)[:, :b]
        X[:, :x0.shape[1]] = x0

    best = None
    for it in range(1, maxiter + 1):
        Y = factor.solve(np.asfortranarray(Md @ X))
        Y, _ = la.qr(Y, mode="economic")
        As = Y.T @ (Ad @ Y)
        Ms = Y.T @ (Md @ Y)
        theta, C = la.eigh(0.5 * (As + As.T), 0.5 * (Ms + Ms.T))
        X = Y @ C
        res = _residuals(Ad, Md, X[:, :nev], theta[:nev], dinv) / theta[:nev]
        if best is None or res.max() < best.max():
            best = res
        if np.all(res <= tol):
            S = SpectralSet(theta[:nev].copy(), X[:, :nev].copy(), res, space, seed, it,
                            {"method": "subspace", "block": b})
            return fix_signs(S)
    raise EigenSolverError(f"no convergence in {maxiter} sweeps "
                           f"(worst relative residual {best.max():.2e})", best)


def fix_signs(S: SpectralSet) -> SpectralSet:
    """Scale every vector by +-1 so that its largest-magnitude entry is positive.

    Ties on magnitude are resolved by the lowest index.
    """
    V = S.vectors.copy()
    if V.size:
        mag = np.abs(V)
        # first index attaining the max, with a relative tolerance for ties
        top = mag >= mag.max(axis=0, keepdims=True) * (1 - 1e-12)
        pivot = np.argmax(top, axis=0)
        s = np.sign(V[pivot, np.arange(V.shape[1])])
        s[s == 0] = 1.0
        V *= s
    return SpectralSet(S.values, V, S.residuals, S.space, S.seed, S.iterations, S.info)
