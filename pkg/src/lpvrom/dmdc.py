"""Dynamic mode decomposition with control, its algebraic variant, and the
parallel-model parameter-varying predictor.

Both fitters approximate the state equation only: two truncated SVDs, one of
the stacked regressor (order ``r``) and one of the shifted states (order
``n_z``), followed by projection onto the second decomposition's POD modes.
The heuristic default ``r = n_z + 10`` is used when no explicit ``r`` is
given, clipped to the numerical rank of the regressor; an explicit ``r``
beyond that rank is an error.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, RangeError
from .linalg import default_rank_tol, deterministic_svd, numerical_rank, truncated_svd
from .reduced import ReducedModel

R_POLICY_MARGIN = 10


def _dmdc_core(snap, n_z, r, with_u1, rtol):
    X0, X1, U0 = snap.X0, snap.X1, snap.U0
    n_x, n_u = snap.n_x, snap.n_u
    if n_z > n_x:
        raise DimensionError(f"n_z={n_z} exceeds state dimension {n_x}")
    Z = np.vstack([X0, U0, snap.U1]) if with_u1 else np.vstack([X0, U0])
    flags = ()
    full_svd = deterministic_svd(Z)
    rank = numerical_rank(full_svd[1], Z.shape, rtol)
    if rank < min(Z.shape):
        flags = ("rank_deficient_regressor",)
    if r is None:
        r = min(n_z + R_POLICY_MARGIN, rank)
    if r <= n_z:
        raise DimensionError(f"r={r} must exceed n_z={n_z}")
    Ur, sr, Vrt = truncated_svd(Z, r, rtol=1e-12, label="[X0; U0" + ("; U1]" if with_u1 else "]"))
    Uhat, _, _ = truncated_svd(X1, n_z, rtol=1e-12, label="X1")
    # [A B (R)] = X1 Vr Sr^-1 Ur^T, projected onto the X1 POD modes without
    # ever forming the full-order operator
    core = (X1 @ Vrt.T) / sr
    proj = Uhat.T @ core
    Ux = Ur[:n_x, :]
    Uu = Ur[n_x : n_x + n_u, :]
    F = proj @ (Ux.T @ Uhat)
    G = proj @ Uu.T
    L = None
    if with_u1:
        L = proj @ Ur[n_x + n_u :, :].T
    return F, G, L, Uhat, flags


def dmdc_fit(snap, n_z, r=None, rtol=None):
    """Fit a DMDc state-equation model of order ``n_z``.

    Parameters
    ----------
    snap : SnapshotSet
    n_z : int
        Reduced order (defines the POD modes of ``X1`` used for projection).
    r : int, optional
        Truncation order of the regressor SVD; must satisfy ``r > n_z``.
        Defaults to ``min(n_z + 10, rank)``.
    rtol : float, optional
        Numerical-rank tolerance for the rank-deficiency diagnostic
        (``max(m, n) * eps`` by default).

    Returns
    -------
    ReducedModel
        With ``H = D = None`` (state equation only) and ``lift`` holding the
        POD modes of ``X1``.
    """
    if rtol is None:
        rtol = default_rank_tol((snap.n_x + snap.n_u, snap.n_columns))
    F, G, _, Uhat, flags = _dmdc_core(snap, n_z, r, with_u1=False, rtol=rtol)
    return ReducedModel(F=F, G=G, lift=Uhat, rho=snap.rho, flags=flags)


def admdc_fit(snap, n_z, r=None, rtol=None):
    """Fit an algebraic-DMDc model: the regressor gains the next-step input
    block ``U1`` and the fit extracts the algebraic input matrix ``L``.

    Collinear ``U0``/``U1`` rows (e.g. constant inputs) leave the regressor
    rank-deficient; the pseudo-inverse then returns the minimum-norm solution
    and the model is flagged ``"rank_deficient_regressor"``.
    """
    if rtol is None:
        rtol = default_rank_tol((snap.n_x + 2 * snap.n_u, snap.n_columns))
    F, G, L, Uhat, flags = _dmdc_core(snap, n_z, r, with_u1=True, rtol=rtol)
    return ReducedModel(F=F, G=G, L=L, lift=Uhat, rho=snap.rho, flags=flags)


@dataclass(frozen=True)
class ParallelPrediction:
    """Output of the parallel-model predictor.

    ``states`` holds the interpolated absolute full-order states,
    ``outputs`` the read-out applied to them (``None`` without a read-out
    map), and ``model_steps`` counts frozen-model step evaluations
    (``n_g * n_s``), which is the cost driver of this scheme.
    """

    states: np.ndarray
    outputs: np.ndarray
    model_steps: int


def _readout_matrix(readout, rho, n_x):
    if readout is None:
        return None
    if callable(readout):
        return np.atleast_2d(np.asarray(readout(rho), dtype=float))
    return np.atleast_2d(np.asarray(readout, dtype=float))


def admdc_lpv_predict(models, trims, u, rho_traj, x0, readout=None):
    """Parameter-varying prediction by simultaneous frozen-model simulation.

    Every grid model advances from its own projected initial condition
    ``z0_j = lift_j^T (x0 - x_bar_j)`` using its own trim-deviation inputs;
    at each step the lifted absolute states of the two bracketing grid models
    are linearly interpolated. Outputs, if requested, come from a read-out map
    applied to the interpolated full state.

    Parameters
    ----------
    models : sequence of ReducedModel
        Frozen models over the grid, ascending in ``rho``. They need not share
        a state basis (they do not, for aDMDc).
    trims : sequence of Trim
        Matching trim records (full-order).
    u : ndarray, shape (n_u, n_s + 1)
        Absolute input samples.
    rho_traj : float or ndarray
        Scheduling values, all within the grid range.
    x0 : ndarray
        Absolute full-order initial state.
    readout : None, ndarray, or callable
        Map from the full state to outputs; a callable receives ``rho`` and
        returns the matrix.

    Returns
    -------
    ParallelPrediction
    """
    n_g = len(models)
    if n_g == 0 or n_g != len(trims):
        raise DimensionError("models and trims must be equal-length, non-empty sequences")
    grid = np.array([m.rho for m in models], dtype=float)
    if np.any(np.diff(grid) < 0):
        raise DimensionError("models must be sorted by rho")
    u = np.atleast_2d(np.asarray(u, dtype=float))
    n_steps = u.shape[1] - 1
    rho = np.full(n_steps + 1, float(rho_traj)) if np.ndim(rho_traj) == 0 else np.asarray(rho_traj, dtype=float).ravel()
    if rho.size != n_steps + 1:
        raise DimensionError(f"rho trajectory has {rho.size} samples, expected {n_steps + 1}")
    if rho.min() < grid[0] or rho.max() > grid[-1]:
        raise RangeError(
            f"rho range [{rho.min()}, {rho.max()}] not covered by grid "
            f"[{grid[0]}, {grid[-1]}]"
        )
    x0 = np.asarray(x0, dtype=float).ravel()
    n_x = x0.size

    Z = [m.lift.T @ (x0 - t.x) for m, t in zip(models, trims)]
    u_dev = [u - t.u[:, None] for t in trims]
    u_dev_next = [np.column_stack([ud[:, 1:], ud[:, -1]]) for ud in u_dev]

    def lifted(j):
        return models[j].lift @ Z[j] + trims[j].x

    states = np.zeros((n_x, n_steps + 1))
    model_steps = 0
    for k in range(n_steps + 1):
        if n_g == 1:
            j0, j1, th = 0, 0, 0.0
        else:
            i = int(np.searchsorted(grid, rho[k], side="left"))
            if i < n_g and grid[i] == rho[k]:
                j0, j1, th = i, i, 0.0
            else:
                j0, j1 = i - 1, i
                th = (rho[k] - grid[j0]) / (grid[j1] - grid[j0])
        xa = lifted(j0)
        states[:, k] = xa if j0 == j1 else (1.0 - th) * xa + th * lifted(j1)
        if k < n_steps:
            for j, m in enumerate(models):
                step = m.F @ Z[j] + m.G @ u_dev[j][:, k]
                if m.L is not None:
                    step = step + m.L @ u_dev_next[j][:, k]
                Z[j] = step
            model_steps += n_g

    outputs = None
    if readout is not None:
        rows = []
        for k in range(n_steps + 1):
            Theta = _readout_matrix(readout, rho[k], n_x)
            rows.append(Theta @ states[:, k])
        outputs = np.column_stack(rows)
    return ParallelPrediction(states=states, outputs=outputs, model_steps=model_steps)
