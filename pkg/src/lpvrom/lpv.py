"""Grid-LPV model container, matrix interpolation, and LPV simulation.

A :class:`GridROM` is the deliverable of every fitting pipeline: frozen
reduced models at the grid points, reduced trim vectors, and the entrywise
linear interpolation rule. The parameter-varying recursion carries the trim
correction term ``zbar(rho_k) - zbar(rho_{k+1})``, which accounts for the
equilibrium moving with the scheduling parameter; it vanishes identically for
frozen parameters.

Reduced trims are evaluated at the grid points (through each grid point's own
projection) and then interpolated as plain vectors; the test spaces themselves
are never interpolated, since they are only defined on the grid.
"""

from dataclasses import dataclass

import numpy as np

from . import matio
from .errors import DimensionError, RangeError
from .reduced import ReducedModel

STATE_CONSISTENT = ("iorom", "bmd", "exact")
KNOWN_ALGORITHMS = ("dmdc", "admdc") + STATE_CONSISTENT


@dataclass(frozen=True)
class GridROM:
    """Frozen reduced models over a parameter grid plus reduced trims.

    ``zbar``/``ubar``/``ybar`` are stacked per-grid trim vectors. ``proj``
    stacks the per-grid reduced-state projections (``Q^T``, ``W_j^T``, or the
    identity for the exact model); it is what closed-loop state feedback uses.
    ``xbar`` (full-order trims) is optional and enables lifting back to
    absolute full states.
    """

    grid_rhos: np.ndarray
    models: tuple
    zbar: np.ndarray
    ubar: np.ndarray
    ybar: np.ndarray
    algorithm: str
    dt: float
    proj: np.ndarray = None
    xbar: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "grid_rhos", np.asarray(self.grid_rhos, dtype=float))
        object.__setattr__(self, "models", tuple(self.models))
        for name in ("zbar", "ubar", "ybar"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if self.proj is not None:
            object.__setattr__(self, "proj", np.asarray(self.proj, dtype=float))
        if self.xbar is not None:
            object.__setattr__(self, "xbar", np.atleast_2d(np.asarray(self.xbar, dtype=float)))
        g = self.grid_rhos
        if g.ndim != 1 or g.size < 1:
            raise DimensionError("grid_rhos must be a non-empty 1-D array")
        if np.any(np.diff(g) <= 0):
            raise DimensionError("grid_rhos must be strictly increasing")
        if len(self.models) != g.size:
            raise DimensionError(f"{len(self.models)} models for {g.size} grid values")
        if self.algorithm not in KNOWN_ALGORITHMS:
            raise DimensionError(f"unknown algorithm tag {self.algorithm!r}")
        n_z = self.models[0].n_z
        n_u = self.models[0].n_u
        for m in self.models:
            if m.n_z != n_z or m.n_u != n_u:
                raise DimensionError("grid models must share (n_z, n_u)")
        if self.algorithm in STATE_CONSISTENT:
            lift0 = self.models[0].lift
            for j, m in enumerate(self.models[1:], start=1):
                if not np.array_equal(m.lift, lift0):
                    raise DimensionError(
                        f"state-consistent algorithm {self.algorithm!r} requires "
                        f"identical lift matrices; grid point {j} differs"
                    )
        if self.zbar.shape != (g.size, n_z):
            raise DimensionError(f"zbar has shape {self.zbar.shape}, expected {(g.size, n_z)}")
        if self.ubar.shape[0] != g.size or self.ybar.shape[0] != g.size:
            raise DimensionError("ubar/ybar must have one row per grid point")

    @property
    def n_g(self):
        return self.grid_rhos.size

    @property
    def n_z(self):
        return self.models[0].n_z

    @property
    def n_u(self):
        return self.models[0].n_u

    @property
    def n_y(self):
        return self.ybar.shape[1]

    @property
    def has_output(self):
        return self.models[0].H is not None

    @property
    def has_algebraic(self):
        return self.models[0].L is not None

    def bracket(self, rho):
        g = self.grid_rhos
        rho = float(rho)
        if rho < g[0] or rho > g[-1]:
            raise RangeError(f"rho={rho} outside grid range [{g[0]}, {g[-1]}]")
        i = int(np.searchsorted(g, rho, side="left"))
        if i < g.size and g[i] == rho:
            return i, i, 0.0
        return i - 1, i, (rho - g[i - 1]) / (g[i] - g[i - 1])

    def project_state(self, x_abs, rho):
        """Reduced deviation state from an absolute full-order state.

        Projects at the two bracketing grid points (each through its own
        projection and trim) and interpolates the resulting reduced vectors;
        no off-grid test space is ever formed.
        """
        if self.proj is None:
            raise DimensionError("this GridROM carries no state projections")
        j0, j1, th = self.bracket(rho)
        za = self.proj[j0] @ x_abs - self.zbar[j0]
        if j0 == j1:
            return za
        zb = self.proj[j1] @ x_abs - self.zbar[j1]
        return (1.0 - th) * za + th * zb

    def project_matrix(self, M, rho):
        """Full-order matrix pushed through the interpolated projections:
        ``interp_j(proj_j @ M)``. Used for the algebraic input kick of the
        measured state."""
        if self.proj is None:
            raise DimensionError("this GridROM carries no state projections")
        j0, j1, th = self.bracket(rho)
        Ka = self.proj[j0] @ M
        if j0 == j1:
            return Ka
        return (1.0 - th) * Ka + th * (self.proj[j1] @ M)


@dataclass(frozen=True)
class InstantModel:
    """Interpolated matrices and trims at one parameter value."""

    rho: float
    F: np.ndarray
    G: np.ndarray
    H: np.ndarray
    D: np.ndarray
    L: np.ndarray
    P: np.ndarray
    zbar: np.ndarray
    ubar: np.ndarray
    ybar: np.ndarray
    xbar: np.ndarray = None
    lift: np.ndarray = None


def interpolate_at(grm, rho):
    """Entrywise-linear interpolation of every matrix and trim vector.

    At a grid knot the stored arrays themselves are returned (bit-equal, no
    arithmetic); treat them as read-only.
    """
    j0, j1, th = grm.bracket(rho)
    m0 = grm.models[j0]
    if j0 == j1:
        return InstantModel(
            rho=float(rho), F=m0.F, G=m0.G, H=m0.H, D=m0.D, L=m0.L, P=m0.P,
            zbar=grm.zbar[j0], ubar=grm.ubar[j0], ybar=grm.ybar[j0],
            xbar=None if grm.xbar is None else grm.xbar[j0], lift=m0.lift,
        )
    m1 = grm.models[j1]
    w0, w1 = 1.0 - th, th

    def mix(a, b):
        return None if a is None else w0 * a + w1 * b

    return InstantModel(
        rho=float(rho),
        F=mix(m0.F, m1.F), G=mix(m0.G, m1.G), H=mix(m0.H, m1.H), D=mix(m0.D, m1.D),
        L=mix(m0.L, m1.L), P=mix(m0.P, m1.P),
        zbar=mix(grm.zbar[j0], grm.zbar[j1]),
        ubar=mix(grm.ubar[j0], grm.ubar[j1]),
        ybar=mix(grm.ybar[j0], grm.ybar[j1]),
        xbar=None if grm.xbar is None else mix(grm.xbar[j0], grm.xbar[j1]),
        lift=m0.lift,
    )


@dataclass(frozen=True)
class LpvSimResult:
    """Reduced states, deviation and absolute outputs, and (optionally) lifted
    absolute full states of one LPV simulation."""

    z: np.ndarray
    y_dev: np.ndarray
    y_abs: np.ndarray
    x_abs: np.ndarray = None


def simulate_lpv(grm, u_dev, rho_traj, z0=None):
    """Step the interpolated LPV recursion with the trim correction term.

    ``z_{k+1} = F_k z_k + G_k u_k (+ L_k u_{k+1}) + (zbar(rho_k) -
    zbar(rho_{k+1}))`` and ``y_k = H_k z_k + D_k u_k (+ P_k u_{k+1})``, with
    the final parameter and input samples held one extra step so the last
    transition is well defined.

    Parameters
    ----------
    grm : GridROM
        Must be state-consistent (IOROM/BMD/exact); the parallel aDMDc scheme
        has its own predictor.
    u_dev : ndarray, shape (n_u, n_s + 1)
        Trim-deviation inputs ``u_k - ubar(rho_k)``.
    rho_traj : float or ndarray, shape (n_s + 1,)
    z0 : ndarray, optional
        Initial reduced deviation state (zeros by default).

    Returns
    -------
    LpvSimResult
        Absolute outputs are ``y_dev + ybar(rho_k)``; lifted absolute states
        are attached when the GridROM carries full-order trims.
    """
    if grm.algorithm not in STATE_CONSISTENT:
        raise DimensionError(
            f"simulate_lpv needs a state-consistent model, got {grm.algorithm!r}"
        )
    u = np.atleast_2d(np.asarray(u_dev, dtype=float))
    if u.shape[0] != grm.n_u:
        raise DimensionError(f"input has {u.shape[0]} channels, model expects {grm.n_u}")
    n_steps = u.shape[1] - 1
    rho = np.full(n_steps + 1, float(rho_traj)) if np.ndim(rho_traj) == 0 else np.asarray(rho_traj, dtype=float).ravel()
    if rho.size != n_steps + 1:
        raise DimensionError(f"rho trajectory has {rho.size} samples, expected {n_steps + 1}")

    z = np.zeros((grm.n_z, n_steps + 1))
    if z0 is not None:
        z[:, 0] = np.asarray(z0, dtype=float).ravel()
    u_next = np.column_stack([u[:, 1:], u[:, -1]])

    has_output = grm.has_output
    y_dev = np.zeros((grm.n_y, n_steps + 1)) if has_output else None
    y_abs = np.zeros((grm.n_y, n_steps + 1)) if has_output else None
    lift = grm.models[0].lift
    x_abs = np.zeros((lift.shape[0], n_steps + 1)) if grm.xbar is not None else None

    inst = interpolate_at(grm, rho[0])
    for k in range(n_steps + 1):
        # final parameter sample is held, so the correction term vanishes at
        # the horizon end
        inst_next = inst if (k == n_steps or rho[k + 1] == rho[k]) else interpolate_at(grm, rho[k + 1])
        if has_output:
            yk = inst.H @ z[:, k] + inst.D @ u[:, k]
            if inst.P is not None:
                yk = yk + inst.P @ u_next[:, k]
            y_dev[:, k] = yk
            y_abs[:, k] = yk + inst.ybar
        if x_abs is not None:
            x_abs[:, k] = lift @ z[:, k] + inst.xbar
        if k < n_steps:
            step = inst.F @ z[:, k] + inst.G @ u[:, k] + (inst.zbar - inst_next.zbar)
            if inst.L is not None:
                step = step + inst.L @ u_next[:, k]
            z[:, k + 1] = step
        inst = inst_next
    return LpvSimResult(z=z, y_dev=y_dev, y_abs=y_abs, x_abs=x_abs)


def build_grid_rom(models, trims, algorithm, dt, projections=None, attach_xbar=True):
    """Assemble a :class:`GridROM` from per-grid fits and full-order trims.

    ``projections`` are the per-grid reduced-state maps (``n_z x n_x``); they
    default to ``lift.T``, which is correct for orthonormal lifts (POD
    families); balanced fits must pass their test spaces.
    """
    if len(models) != len(trims) or not models:
        raise DimensionError("models and trims must be equal-length, non-empty sequences")
    grid = np.array([m.rho for m in models], dtype=float)
    if projections is None:
        projections = [m.lift.T for m in models]
    proj = np.stack([np.asarray(p, dtype=float) for p in projections])
    zbar = np.stack([proj[j] @ trims[j].x for j in range(len(models))])
    return GridROM(
        grid_rhos=grid,
        models=tuple(models),
        zbar=zbar,
        ubar=np.stack([t.u for t in trims]),
        ybar=np.stack([t.y for t in trims]),
        algorithm=algorithm,
        dt=dt,
        proj=proj,
        xbar=np.stack([t.x for t in trims]) if attach_xbar else None,
    )


def exact_grid_rom(plant, trims):
    """Full-order 'reduction' of the plant itself (lift = identity).

    Serves as the floor model in closed-loop comparisons: a GridROM whose
    frozen models are the plant's own grid matrices.
    """
    eye = np.eye(plant.n_x)
    has_alg = plant.has_algebraic
    models = [
        ReducedModel(
            F=plant.A[j], G=plant.B[j], H=plant.C[j], D=plant.D[j],
            L=plant.R[j] if has_alg else None,
            P=plant.P[j] if has_alg else None,
            lift=eye, rho=float(plant.grid_rhos[j]),
        )
        for j in range(plant.n_g)
    ]
    return build_grid_rom(models, trims, algorithm="exact", dt=plant.dt)


# ---------------------------------------------------------------------------
# Serialization (same block format as the plant, plus provenance manifest)


def save_grid_rom(grm, path, provenance=None):
    manifest = {
        "kind": "grid_rom",
        "algorithm": grm.algorithm,
        "dt": matio.fmt(grm.dt),
        "n_g": grm.n_g,
        "n_z": grm.n_z,
        "has_output": int(grm.has_output),
        "has_algebraic": int(grm.has_algebraic),
        "has_proj": int(grm.proj is not None),
        "has_xbar": int(grm.xbar is not None),
    }
    if provenance:
        for key, val in provenance.items():
            manifest[f"prov_{key}"] = val
    blocks = {
        "grid_rhos": grm.grid_rhos,
        "zbar": grm.zbar,
        "ubar": grm.ubar,
        "ybar": grm.ybar,
    }
    if grm.xbar is not None:
        blocks["xbar"] = grm.xbar
    for j, m in enumerate(grm.models):
        blocks[f"F{j}"] = m.F
        blocks[f"G{j}"] = m.G
        blocks[f"lift{j}"] = m.lift
        if m.H is not None:
            blocks[f"H{j}"] = m.H
            blocks[f"D{j}"] = m.D
        if m.L is not None:
            blocks[f"L{j}"] = m.L
        if m.P is not None:
            blocks[f"P{j}"] = m.P
        if grm.proj is not None:
            blocks[f"proj{j}"] = grm.proj[j]
    matio.save_blocks(path, manifest, blocks)


def load_grid_rom(path):
    manifest, blocks = matio.load_blocks(path)
    if manifest.get("kind") != "grid_rom":
        raise DimensionError(f"{path} is not a grid ROM file")
    n_g = int(manifest["n_g"])
    grid = blocks["grid_rhos"]
    models = []
    for j in range(n_g):
        models.append(
            ReducedModel(
                F=blocks[f"F{j}"],
                G=blocks[f"G{j}"],
                H=blocks.get(f"H{j}"),
                D=blocks.get(f"D{j}"),
                L=blocks.get(f"L{j}"),
                P=blocks.get(f"P{j}"),
                lift=blocks[f"lift{j}"],
                rho=float(grid[j]),
            )
        )
    proj = None
    if int(manifest["has_proj"]):
        proj = np.stack([blocks[f"proj{j}"] for j in range(n_g)])
    return GridROM(
        grid_rhos=grid,
        models=tuple(models),
        zbar=blocks["zbar"],
        ubar=blocks["ubar"],
        ybar=blocks["ybar"],
        algorithm=manifest["algorithm"],
        dt=float(manifest["dt"]),
        proj=proj,
        xbar=blocks.get("xbar"),
    )
