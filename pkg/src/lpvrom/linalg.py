"""Deterministic linear-algebra helpers used by every fitter.

All SVD-based routines share one sign convention and one numerical-rank rule
so that fitted models are bit-stable across runs and platforms.
"""

import numpy as np
import scipy.linalg

from .errors import GramianError, NumericalError, RankError

EPS = np.finfo(float).eps


def fix_svd_signs(U, Vt=None):
    """Normalize singular-vector signs in place-free fashion.

    Each column of ``U`` is flipped so that its largest-magnitude entry is
    positive (first such entry on exact ties); the matching row of ``Vt`` is
    flipped with it so the product is unchanged.
    """
    U = np.array(U, copy=True)
    if Vt is not None:
        Vt = np.array(Vt, copy=True)
    for j in range(U.shape[1]):
        col = U[:, j]
        i = int(np.argmax(np.abs(col)))
        if col[i] < 0:
            U[:, j] = -col
            if Vt is not None and j < Vt.shape[0]:
                Vt[j, :] = -Vt[j, :]
    if Vt is None:
        return U
    return U, Vt


def deterministic_svd(M):
    """Thin SVD with the shared sign convention. Returns ``(U, s, Vt)``."""
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    U, Vt = fix_svd_signs(U, Vt)
    return U, s, Vt


def default_rank_tol(shape):
    """Standard numerical-rank rule: ``max(m, n) * eps`` relative to sigma_max."""
    return max(shape) * EPS


def numerical_rank(s, shape, rtol=None):
    """Count singular values above ``rtol * s[0]``."""
    if s.size == 0 or s[0] == 0.0:
        return 0
    if rtol is None:
        rtol = default_rank_tol(shape)
    return int(np.count_nonzero(s > rtol * s[0]))


def truncated_svd(M, order, rtol=1e-12, label="matrix"):
    """Thin SVD truncated to ``order``, rejecting ranks the data cannot support.

    Raises
    ------
    RankError
        If any of the first ``order`` singular values falls below
        ``rtol * sigma_max``; the error names the offending index.
    """
    U, s, Vt = deterministic_svd(M)
    if order > s.size:
        raise RankError(
            f"requested order {order} exceeds {label} dimensions "
            f"{M.shape[0]}x{M.shape[1]}",
            index=s.size,
        )
    smax = s[0] if s.size else 0.0
    for i in range(order):
        if s[i] <= rtol * smax:
            raise RankError(
                f"requested order {order} exceeds numerical rank of {label}: "
                f"singular value {i} is {s[i]:.3e} <= {rtol:.1e} * {smax:.3e}",
                index=i,
            )
    return U[:, :order], s[:order], Vt[:order, :]


def pinv_solve(Y, Z, rtol=None):
    """Least-squares solution ``Theta = Y @ pinv(Z)`` via truncated SVD.

    Singular values of ``Z`` below ``rtol * sigma_max`` (default: the standard
    ``max(m, n) * eps`` rule) are treated as zero, yielding the minimum-norm
    solution on rank-deficient regressors.

    Returns
    -------
    Theta : ndarray
    rank : int
        Numerical rank of ``Z``.
    """
    U, s, Vt = deterministic_svd(Z)
    rank = numerical_rank(s, Z.shape, rtol)
    U = U[:, :rank]
    s = s[:rank]
    Vt = Vt[:rank, :]
    Theta = (Y @ Vt.T) / s @ U.T
    return Theta, rank


def psd_factor(W, clamp_tol=1e-10):
    """Factor a (nominally) PSD matrix as ``L @ L.T``.

    Tries a Cholesky factorization first; on failure falls back to a symmetric
    eigendecomposition square root. Eigenvalues in ``[-clamp_tol * scale, 0)``
    are clamped to zero; anything more negative raises, because that is data
    corruption rather than roundoff. ``scale`` is ``max(|lambda|, 1)``.

    Raises
    ------
    GramianError
        If the matrix is indefinite beyond the clamp tolerance.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise GramianError(f"expected a square matrix, got shape {W.shape}")
    asym = np.max(np.abs(W - W.T)) if W.size else 0.0
    scale = max(np.max(np.abs(W)) if W.size else 0.0, 1.0)
    if asym > 1e-12 * scale:
        raise GramianError(f"matrix is not symmetric: max asymmetry {asym:.3e}")
    Ws = 0.5 * (W + W.T)
    try:
        return np.linalg.cholesky(Ws)
    except np.linalg.LinAlgError:
        pass
    lam, E = np.linalg.eigh(Ws)
    floor = -clamp_tol * max(lam.max(initial=0.0), 1.0)
    if lam.min(initial=0.0) < floor:
        raise GramianError(
            f"matrix is indefinite beyond the clamp tolerance: "
            f"min eigenvalue {lam.min():.3e} < {floor:.3e}"
        )
    lam = np.clip(lam, 0.0, None)
    E = fix_svd_signs(E)
    # descending eigenvalue order gives a deterministic, energy-ordered factor
    order = np.argsort(lam)[::-1]
    return E[:, order] * np.sqrt(lam[order])


def check_psd(W, tol=1e-10, label="matrix"):
    """Validate symmetry (1e-12) and eigenvalue floor of a PSD candidate."""
    W = np.asarray(W, dtype=float)
    scale = max(np.max(np.abs(W)) if W.size else 0.0, 1.0)
    asym = np.max(np.abs(W - W.T)) if W.size else 0.0
    if asym > 1e-12 * scale:
        raise NumericalError(f"{label} is not symmetric to 1e-12: {asym:.3e}")
    lam_min = np.linalg.eigvalsh(0.5 * (W + W.T)).min()
    if lam_min < -tol * scale:
        raise NumericalError(
            f"{label} is indefinite: min eigenvalue {lam_min:.3e} "
            f"(floor {-tol * scale:.3e})"
        )


def spectral_radius(A):
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def markov_parameters(F, G, H, D, count):
    """First ``count`` Markov parameters ``[D, H G, H F G, H F^2 G, ...]``.

    Returns an array of shape ``(count, n_y, n_u)``. The sequence is the
    similarity-invariant impulse-response fingerprint used for model
    equivalence checks.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n_y, n_u = H.shape[0], G.shape[1]
    out = np.zeros((count, n_y, n_u))
    if count == 0:
        return out
    out[0] = 0.0 if D is None else np.atleast_2d(np.asarray(D, dtype=float))
    X = G
    for k in range(1, count):
        out[k] = H @ X
        X = F @ X
    return out


def principal_angles(A, B):
    """Principal angles (radians, ascending) between ``span(A)`` and ``span(B)``."""
    Qa, _ = np.linalg.qr(np.atleast_2d(A))
    Qb, _ = np.linalg.qr(np.atleast_2d(B))
    s = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
    return np.arccos(np.clip(s, -1.0, 1.0))[::-1]


def solve_discrete_lyapunov(A, Q):
    """Exact solution of ``A X A^T - X + Q = 0`` for stable ``A``.

    Thin wrapper over SciPy's direct (bilinear-transform) method; kept here so
    every caller shares one entry point.
    """
    return scipy.linalg.solve_discrete_lyapunov(np.asarray(A, dtype=float),
                                                np.asarray(Q, dtype=float),
                                                method="bilinear")
