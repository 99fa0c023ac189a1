"""Input-output reduced-order model fits with a shared POD basis.

The basis is the set of leading left singular vectors of the column-stacked
state snapshot matrices of all grid points (the "fat" matrix strategy), so
every grid model expresses its reduced state in the same coordinates and the
state-space matrices can be interpolated entrywise. The fit itself is a plain
least-squares problem solved through the pseudo-inverse; the algebraic
variant appends the next-step input block to the regressor and extracts the
extra matrices ``(L, P)``.
"""

import numpy as np

from .errors import DimensionError
from .linalg import deterministic_svd, numerical_rank, pinv_solve, truncated_svd
from .reduced import ReducedModel


def build_shared_pod_basis(snaps, n_z, rtol=1e-12):
    """Leading POD modes of the column-stacked ``X0`` blocks.

    Parameters
    ----------
    snaps : sequence of SnapshotSet
        One entry per grid point; column counts may differ.
    n_z : int
        Number of modes requested; must not exceed the numerical rank of the
        stacked matrix.

    Returns
    -------
    Q : ndarray, shape (n_x, n_z)
        Orthonormal, sign-normalized basis.
    """
    if not snaps:
        raise DimensionError("need at least one snapshot set")
    stacked = np.hstack([s.X0 for s in snaps])
    if stacked.shape[1] < n_z:
        raise DimensionError(
            f"n_z={n_z} exceeds the {stacked.shape[1]} stacked snapshot columns"
        )
    Q, _, _ = truncated_svd(stacked, n_z, rtol=rtol, label="stacked X0")
    return Q


def iorom_fit(snap, Q, algebraic=False, rtol=None):
    """Least-squares reduced model on the projected snapshots.

    Solves ``[F G; H D] = [Q^T X1; Y0] pinv([Q^T X0; U0])``; with
    ``algebraic=True`` the regressor gains the ``U1`` block and the solution
    the columns ``(L, P)``.
    """
    if snap.n_columns == 0:
        raise DimensionError("empty snapshot set")
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    if Q.shape[0] != snap.n_x:
        raise DimensionError(f"basis has {Q.shape[0]} rows, snapshots have {snap.n_x}")
    ortho = np.linalg.norm(Q.T @ Q - np.eye(Q.shape[1]))
    if ortho > 1e-8:
        raise DimensionError(f"basis columns are not orthonormal (defect {ortho:.3e})")
    return _projected_lstsq(snap, Q.T, Q, algebraic, rtol)


def _projected_lstsq(snap, proj, lift, algebraic, rtol):
    """Shared core of the IOROM and balanced regressions.

    ``proj`` maps full states to reduced coordinates (``Q^T`` or ``W^T``);
    ``lift`` is stored on the model for recovering full states.
    """
    n_z, n_u = proj.shape[0], snap.n_u
    rows = [proj @ snap.X0, snap.U0]
    if algebraic:
        rows.append(snap.U1)
    Z = np.vstack(rows)
    Y = np.vstack([proj @ snap.X1, snap.Y0])
    Theta, rank = pinv_solve(Y, Z, rtol=rtol)
    flags = ()
    if rank < min(Z.shape):
        flags = ("rank_deficient_regressor",)
    F = Theta[:n_z, :n_z]
    G = Theta[:n_z, n_z : n_z + n_u]
    H = Theta[n_z:, :n_z]
    D = Theta[n_z:, n_z : n_z + n_u]
    L = P = None
    if algebraic:
        L = Theta[:n_z, n_z + n_u :]
        P = Theta[n_z:, n_z + n_u :]
    return ReducedModel(F=F, G=G, H=H, D=D, L=L, P=P, lift=lift, rho=snap.rho, flags=flags)


def regression_objective(snap, model, test_basis=None):
    """Frobenius-norm objective of the projected least-squares problem.

    Used by optimality checks: any perturbation of the returned matrices must
    not decrease this value.
    """
    basis = model.lift if test_basis is None else test_basis
    proj = basis.T
    rows = [proj @ snap.X0, snap.U0]
    algebraic = model.L is not None
    if algebraic:
        rows.append(snap.U1)
    Z = np.vstack(rows)
    blocks = [np.hstack([model.F, model.G] + ([model.L] if algebraic else [])),
              np.hstack([model.H, model.D] + ([model.P] if algebraic else []))]
    Theta = np.vstack(blocks)
    target = np.vstack([proj @ snap.X1, snap.Y0])
    return float(np.linalg.norm(target - Theta @ Z))


def pod_rank(snaps, rtol=None):
    """Numerical rank of the stacked snapshot matrix (diagnostic helper)."""
    stacked = np.hstack([s.X0 for s in snaps])
    s = deterministic_svd(stacked)[1]
    return numerical_rank(s, stacked.shape, rtol)
