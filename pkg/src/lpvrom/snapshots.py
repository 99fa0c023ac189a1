"""Trajectory recordings, trim points, and snapshot-matrix construction.

A trajectory stores ``n_s + 1`` samples of states, inputs, and outputs so that
both time-shifted snapshot matrices come from a single recording. All five
snapshot matrices are trim-deviation data: the regression modules never see
absolute signals.
"""

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionError, TrimNotSettledError
from .matio import fmt


@dataclass(frozen=True)
class Trim:
    """Equilibrium tuple ``(x_bar, u_bar, y_bar)`` at one frozen parameter value."""

    x: np.ndarray
    u: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        for name in ("x", "u", "y"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))


@dataclass(frozen=True)
class TrajectorySet:
    """Recorded state/input/output sequences with parameter value and trim.

    ``states`` is ``(n_x, n_s + 1)``, ``inputs`` ``(n_u, n_s + 1)``,
    ``outputs`` ``(n_y, n_s + 1)``. ``rho`` is a scalar for frozen-parameter
    recordings (the only kind snapshot construction accepts) or an
    ``(n_s + 1,)`` sequence for manoeuvre recordings. ``trim`` may be ``None``
    for raw recordings that are not used for fitting.
    """

    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    dt: float
    rho: object
    trim: Trim = None

    def __post_init__(self):
        for name in ("states", "inputs", "outputs"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        n_cols = self.states.shape[1]
        if n_cols < 2:
            raise DimensionError("a trajectory needs at least two samples")
        if self.inputs.shape[1] != n_cols or self.outputs.shape[1] != n_cols:
            raise DimensionError(
                f"sample counts differ: states {n_cols}, inputs "
                f"{self.inputs.shape[1]}, outputs {self.outputs.shape[1]}"
            )
        if not self.dt > 0:
            raise DimensionError(f"dt must be positive, got {self.dt}")
        if np.ndim(self.rho) > 0:
            rho = np.asarray(self.rho, dtype=float).ravel()
            if rho.size != n_cols:
                raise DimensionError(
                    f"parameter trajectory has {rho.size} samples, expected {n_cols}"
                )
            object.__setattr__(self, "rho", rho)
        else:
            object.__setattr__(self, "rho", float(self.rho))
        if self.trim is not None:
            dims = (self.states.shape[0], self.inputs.shape[0], self.outputs.shape[0])
            got = (self.trim.x.size, self.trim.u.size, self.trim.y.size)
            if dims != got:
                raise DimensionError(f"trim dimensions {got} do not match trajectory {dims}")

    @property
    def n_x(self):
        return self.states.shape[0]

    @property
    def n_u(self):
        return self.inputs.shape[0]

    @property
    def n_y(self):
        return self.outputs.shape[0]

    @property
    def n_steps(self):
        """Number of transitions ``n_s`` (one less than the sample count)."""
        return self.states.shape[1] - 1

    def is_frozen(self):
        return np.ndim(self.rho) == 0

    def with_trim(self, trim):
        return replace(self, trim=trim)


@dataclass(frozen=True)
class SnapshotSet:
    """The five shifted, trim-deviation data matrices of one recording."""

    X0: np.ndarray
    X1: np.ndarray
    U0: np.ndarray
    U1: np.ndarray
    Y0: np.ndarray
    rho: float
    trim: Trim

    @property
    def n_x(self):
        return self.X0.shape[0]

    @property
    def n_u(self):
        return self.U0.shape[0]

    @property
    def n_y(self):
        return self.Y0.shape[0]

    @property
    def n_columns(self):
        return self.X0.shape[1]


def build_snapshots(traj):
    """Form ``(X0, X1, U0, U1, Y0)`` from a frozen-parameter trajectory.

    Column ``k`` of ``X0`` is ``x_k - x_bar`` and of ``X1`` is
    ``x_{k+1} - x_bar`` for ``k = 0 .. n_s - 1``; inputs and outputs likewise.

    Raises
    ------
    DimensionError
        If the trajectory has no trim or a time-varying parameter.
    """
    if traj.trim is None:
        raise DimensionError("snapshot construction needs a trajectory with a trim record")
    if not traj.is_frozen():
        raise DimensionError("snapshot construction needs a frozen-parameter trajectory")
    xb = traj.trim.x[:, None]
    ub = traj.trim.u[:, None]
    yb = traj.trim.y[:, None]
    Xdev = traj.states - xb
    Udev = traj.inputs - ub
    Ydev = traj.outputs - yb
    return SnapshotSet(
        X0=Xdev[:, :-1],
        X1=Xdev[:, 1:],
        U0=Udev[:, :-1],
        U1=Udev[:, 1:],
        Y0=Ydev[:, :-1],
        rho=traj.rho,
        trim=traj.trim,
    )


def compute_trim(plant, rho, settle_steps, u_hold=None, tol=1e-10):
    """Find the equilibrium ``(x_bar, u_bar, y_bar)`` by settling simulation.

    The plant is stepped at constant ``rho`` with the input held at ``u_hold``
    (zeros by default) until the per-step state increment norm falls below
    ``tol``. Settling is used instead of an analytic solve so the same code
    path works if the plant is a black box.

    Parameters
    ----------
    plant : object
        Anything exposing ``at_rho(rho)`` returning a frozen-parameter view
        with ``step(x, u, u_next)`` and ``output(x, u, u_next)`` methods.
    settle_steps : int
        Step budget; at least 1.
    u_hold : array_like, optional
        Constant held input, length ``n_u``.
    tol : float
        Threshold on ``norm(x_next - x)``.

    Raises
    ------
    TrimNotSettledError
        If the increment norm is still above ``tol`` after ``settle_steps``,
        carrying the residual norm.
    """
    if settle_steps < 1:
        raise DimensionError("settle_steps must be >= 1")
    fp = plant.at_rho(rho)
    u = np.zeros(fp.n_u) if u_hold is None else np.asarray(u_hold, dtype=float).ravel()
    if u.size != fp.n_u:
        raise DimensionError(f"u_hold has {u.size} entries, plant expects {fp.n_u}")
    x = np.zeros(fp.n_x)
    residual = np.inf
    for _ in range(settle_steps):
        x_next = fp.step(x, u, u)
        residual = float(np.linalg.norm(x_next - x))
        x = x_next
        if residual < tol:
            break
    else:
        raise TrimNotSettledError(
            f"trim at rho={rho} did not settle within {settle_steps} steps "
            f"(residual {residual:.3e})",
            residual=residual,
        )
    return Trim(x=x, u=u, y=fp.output(x, u, u))


# ---------------------------------------------------------------------------
# CSV import/export. One row per time step, header row mandatory, with the
# trim stored in a JSON sidecar next to the data file.


def sidecar_path(path):
    return str(path) + ".meta.json"


def save_trajectory_csv(traj, path):
    """Write ``t, x_1.., u_1.., y_1..`` rows plus a JSON metadata sidecar."""
    header = (
        ["t"]
        + [f"x_{i + 1}" for i in range(traj.n_x)]
        + [f"u_{i + 1}" for i in range(traj.n_u)]
        + [f"y_{i + 1}" for i in range(traj.n_y)]
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for k in range(traj.n_steps + 1):
            row = [fmt(k * traj.dt)]
            row += [fmt(v) for v in traj.states[:, k]]
            row += [fmt(v) for v in traj.inputs[:, k]]
            row += [fmt(v) for v in traj.outputs[:, k]]
            writer.writerow(row)
    meta = {
        "dt": traj.dt,
        "rho": traj.rho if np.ndim(traj.rho) == 0 else list(map(float, traj.rho)),
        "n_x": traj.n_x,
        "n_u": traj.n_u,
        "n_y": traj.n_y,
        "trim": None
        if traj.trim is None
        else {
            "x": list(map(float, traj.trim.x)),
            "u": list(map(float, traj.trim.u)),
            "y": list(map(float, traj.trim.y)),
        },
    }
    with open(sidecar_path(path), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_trajectory_csv(path):
    """Inverse of :func:`save_trajectory_csv`."""
    with open(sidecar_path(path), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    n_x, n_u, n_y = meta["n_x"], meta["n_u"], meta["n_y"]
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = 1 + n_x + n_u + n_y
        if len(header) != expected or header[0] != "t":
            raise DimensionError(
                f"trajectory CSV header has {len(header)} columns, expected {expected}"
            )
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.asarray(rows).T
    trim = meta["trim"]
    return TrajectorySet(
        states=data[1 : 1 + n_x],
        inputs=data[1 + n_x : 1 + n_x + n_u],
        outputs=data[1 + n_x + n_u :],
        dt=meta["dt"],
        rho=meta["rho"],
        trim=None if trim is None else Trim(x=trim["x"], u=trim["u"], y=trim["y"]),
    )
