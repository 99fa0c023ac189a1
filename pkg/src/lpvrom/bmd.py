"""Balanced mode decomposition: oblique projections built from Gramians.

The orthogonal POD projection of the DMD family is replaced by an oblique
projector ``Pi = V W^T`` with ``W^T V = I``: a fixed basis space ``V`` shared
by every grid point (so reduced states stay in one common basis and matrices
can be interpolated entrywise) and a parameter-varying test space ``W`` built
from the local controllability/observability Gramian factors. At a single
grid point with exact Gramians the construction reproduces the square-root
balanced-truncation projector.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import matio
from .errors import DimensionError, ProjectionError
from .iorom import _projected_lstsq
from .linalg import deterministic_svd, fix_svd_signs, psd_factor, truncated_svd

TIE_RTOL = 1e-10


@dataclass(frozen=True)
class ObliqueProjector:
    """Fixed basis space plus per-grid-point test spaces and Hankel spectra.

    Invariants (validated on construction): ``V^T V = I`` to 1e-12,
    ``||W_j^T V - I||_F <= 1e-8`` for every grid point, and each Hankel vector
    nonnegative and non-increasing.
    """

    grid_rhos: np.ndarray
    V: np.ndarray
    W: tuple
    hankel: tuple

    def __post_init__(self):
        object.__setattr__(self, "grid_rhos", np.asarray(self.grid_rhos, dtype=float))
        object.__setattr__(self, "V", np.asarray(self.V, dtype=float))
        object.__setattr__(self, "W", tuple(np.asarray(w, dtype=float) for w in self.W))
        object.__setattr__(self, "hankel", tuple(np.asarray(h, dtype=float) for h in self.hankel))
        n_z = self.V.shape[1]
        if len(self.W) != self.grid_rhos.size or len(self.hankel) != self.grid_rhos.size:
            raise DimensionError("W and hankel must have one entry per grid point")
        defect = np.linalg.norm(self.V.T @ self.V - np.eye(n_z))
        if defect > 1e-12 * max(1.0, n_z):
            raise ProjectionError(f"basis space is not orthonormal (defect {defect:.3e})")
        for j, w in enumerate(self.W):
            bi = np.linalg.norm(w.T @ self.V - np.eye(n_z))
            if bi > 1e-8:
                raise ProjectionError(
                    f"test space at grid point {j} is not bi-orthogonal to V "
                    f"(defect {bi:.3e})",
                    grid_index=j,
                )
        for j, h in enumerate(self.hankel):
            if h.size == 0 or np.any(h < 0) or np.any(np.diff(h) > 0):
                raise ProjectionError(
                    f"Hankel vector at grid point {j} must be nonnegative and non-increasing",
                    grid_index=j,
                )

    @property
    def n_z(self):
        return self.V.shape[1]

    @property
    def n_g(self):
        return self.grid_rhos.size

    def projector(self, j):
        """Oblique projector ``Pi = V W_j^T`` at grid point ``j``."""
        return self.V @ self.W[j].T


def bmd_spaces(pairs, grid_rhos, n_z):
    """Construct the fixed basis space and per-grid test spaces from Gramians.

    Per grid point: factor both Gramians, take the SVD of
    ``H = L_c^T L_o`` (its singular values are the Hankel singular values),
    and collect an orthonormal basis of ``L_c @ U[:, :n_z]``. The fixed basis
    ``V`` is the dominant left subspace of all those bases stacked. Each test
    space is then ``W_j = L_o Q (R^T)^{-1}`` from the thin QR factorization
    ``Q R = L_o^T V``, computed with a triangular solve rather than an
    explicit inverse.

    Parameters
    ----------
    pairs : sequence of GramianPair
    grid_rhos : array_like
        Grid values matching ``pairs``.
    n_z : int
        Desired order; must not exceed the numerical rank of any grid point's
        Hankel matrix.

    Returns
    -------
    ObliqueProjector

    Raises
    ------
    ProjectionError
        If the triangular factor at some grid point is rank-deficient.
    """
    grid_rhos = np.asarray(grid_rhos, dtype=float)
    if len(pairs) == 0 or len(pairs) != grid_rhos.size:
        raise DimensionError("need one GramianPair per grid value")
    n_x = pairs[0].Wc.shape[0]
    if n_z > n_x:
        raise DimensionError(f"n_z={n_z} exceeds state dimension {n_x}")

    Lo_list = []
    hankel = []
    Qbar = np.zeros((n_x, n_z * len(pairs)))
    for j, pair in enumerate(pairs):
        Lc = psd_factor(pair.Wc)
        Lo = psd_factor(pair.Wo)
        Lo_list.append(Lo)
        Hj = Lc.T @ Lo
        sv = np.linalg.svd(Hj, compute_uv=False)
        hankel.append(sv)
        if n_z < sv.size and sv[n_z - 1] > 0 and abs(sv[n_z - 1] - sv[n_z]) <= TIE_RTOL * sv[0]:
            warnings.warn(
                f"Hankel singular values {n_z - 1} and {n_z} at grid point {j} are "
                f"tied at the truncation boundary; keeping index order",
                RuntimeWarning,
                stacklevel=2,
            )
        Utilde, _, _ = truncated_svd(Hj, n_z, rtol=1e-12, label=f"Hankel matrix at grid point {j}")
        Ubar, _, _ = deterministic_svd(Lc @ Utilde)
        Qbar[:, j * n_z : (j + 1) * n_z] = Ubar[:, :n_z]

    UV, _, _ = deterministic_svd(Qbar)
    V = UV[:, :n_z]

    W = []
    for j, Lo in enumerate(Lo_list):
        Qj, Rj = np.linalg.qr(Lo.T @ V)
        diag = np.abs(np.diag(Rj))
        dmax = float(diag.max()) if diag.size else 0.0
        if dmax == 0.0 or float(diag.min()) < 1e-10 * dmax:
            raise ProjectionError(
                f"rank-deficient L_o^T V at grid point {j} "
                f"(min |R_ii| = {float(diag.min()) if diag.size else 0.0:.3e})",
                grid_index=j,
            )
        # W = L_o Q (R^T)^{-1}  via  R W^T = (L_o Q)^T
        Wt = scipy.linalg.solve_triangular(Rj, (Lo @ Qj).T, lower=False)
        W.append(Wt.T)
    return ObliqueProjector(grid_rhos=grid_rhos, V=V, W=tuple(W), hankel=tuple(hankel))


def bmd_fit(snap, V, W, algebraic=False, rtol=None):
    """Balanced regression at one grid point.

    Solves ``[F G; H D] = [W^T X1; Y0] pinv([W^T X0; U0])`` (with the ``U1``
    block and ``(L, P)`` extraction in algebraic mode); ``lift`` is the fixed
    basis space ``V``.

    ``(V, W)`` must be bi-orthogonal to 1e-8.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    W = np.atleast_2d(np.asarray(W, dtype=float))
    if V.shape != W.shape:
        raise DimensionError(f"V shape {V.shape} != W shape {W.shape}")
    defect = np.linalg.norm(W.T @ V - np.eye(V.shape[1]))
    if defect > 1e-8:
        raise ProjectionError(f"(V, W) are not bi-orthogonal (defect {defect:.3e})")
    return _projected_lstsq(snap, W.T, V, algebraic, rtol)


def select_order_from_hankel(hankel_vectors, threshold_fraction):
    """Order selection from a threshold on the Hankel singular values.

    At each grid point, count the values at or above
    ``threshold_fraction * sigma_1`` of that grid point; the returned order is
    the maximum count across the grid, so every local model keeps at least the
    values its own spectrum requires.
    """
    if not 0.0 < threshold_fraction < 1.0:
        raise DimensionError(f"threshold_fraction must lie in (0, 1), got {threshold_fraction}")
    counts = []
    for j, h in enumerate(hankel_vectors):
        h = np.asarray(h, dtype=float)
        if h.size == 0:
            raise DimensionError(f"empty Hankel vector at grid point {j}")
        counts.append(int(np.count_nonzero(h >= threshold_fraction * h[0])))
    return max(counts)


def export_projector(proj, path):
    """Write ``V``, every ``W(rho_j)``, and the Hankel vectors to a block file
    for inspection; these modes are the spatio-temporal structures the
    reduction keeps."""
    manifest = {"kind": "projector", "n_g": proj.n_g, "n_z": proj.n_z}
    blocks = {"grid_rhos": proj.grid_rhos, "V": proj.V}
    for j in range(proj.n_g):
        blocks[f"W{j}"] = proj.W[j]
        blocks[f"hankel{j}"] = proj.hankel[j]
    matio.save_blocks(path, manifest, blocks)


def load_projector(path):
    manifest, blocks = matio.load_blocks(path)
    if manifest.get("kind") != "projector":
        raise ProjectionError(f"{path} is not a projector file")
    n_g = int(manifest["n_g"])
    return ObliqueProjector(
        grid_rhos=blocks["grid_rhos"],
        V=blocks["V"],
        W=tuple(blocks[f"W{j}"] for j in range(n_g)),
        hankel=tuple(blocks[f"hankel{j}"] for j in range(n_g)),
    )
