"""Synthetic high-order parameter-varying plant.

The plant is linear at every frozen parameter value by construction, so the
local-LTI assumption behind all the fitters holds exactly and any prediction
error is attributable to the reduction algorithms. Between grid points all
matrices are interpolated entrywise-linearly.

The benchmark generator builds, per grid point, a block-diagonal core of 2x2
discrete oscillators whose radius and angle drift affinely with the parameter,
couples them through a strictly block-upper-triangular perturbation (which
leaves the spectrum untouched but makes the dynamics non-normal), and applies
a per-mode diagonal similarity so that state energy and input-output relevance
rank the modes differently. That last step is what separates energy-optimal
projections from balanced ones at low orders.
"""

from dataclasses import dataclass

import numpy as np

from . import matio
from .errors import ConstructionError, DimensionError, NumericalError, RangeError
from .linalg import (
    check_psd,
    deterministic_svd,
    psd_factor,
    solve_discrete_lyapunov,
    spectral_radius,
    truncated_svd,
)
from .reduced import ReducedModel
from .snapshots import TrajectorySet


@dataclass(frozen=True)
class FrozenPlant:
    """Frozen-parameter (LTI) view of the plant, the unit every simulation uses."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    R: np.ndarray
    P: np.ndarray
    dt: float
    rho: float

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    @property
    def n_y(self):
        return self.C.shape[0]

    @property
    def has_algebraic(self):
        return bool(np.any(self.R) or np.any(self.P))

    def step(self, x, u, u_next):
        return self.A @ x + self.B @ u + self.R @ u_next

    def output(self, x, u, u_next):
        return self.C @ x + self.D @ u + self.P @ u_next

    def simulate(self, u, x0=None):
        """LTI rollout. ``u`` is ``(n_u, n_s + 1)``; the last input is held
        one extra step for the algebraic terms. Returns ``(states, outputs)``.
        """
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape[0] != self.n_u:
            raise DimensionError(f"input has {u.shape[0]} channels, plant expects {self.n_u}")
        n_steps = u.shape[1] - 1
        x = np.zeros((self.n_x, n_steps + 1))
        if x0 is not None:
            x[:, 0] = np.asarray(x0, dtype=float).ravel()
        u_next = np.column_stack([u[:, 1:], u[:, -1]])
        for k in range(n_steps):
            x[:, k + 1] = self.A @ x[:, k] + self.B @ u[:, k] + self.R @ u_next[:, k]
        y = self.C @ x + self.D @ u + self.P @ u_next
        return x, y

    def adjoint(self):
        """Adjoint system ``(A^T, C^T)`` used for the observability Gramian."""
        return FrozenPlant(
            A=self.A.T,
            B=self.C.T,
            C=self.B.T,
            D=np.zeros((self.n_u, self.n_y)),
            R=np.zeros((self.n_x, self.n_y)),
            P=np.zeros((self.n_u, self.n_y)),
            dt=self.dt,
            rho=self.rho,
        )


class HighOrderPlant:
    """Grid of frozen LTI systems plus entrywise-linear interpolation.

    Matrices are stored stacked over the grid: ``A`` is ``(n_g, n_x, n_x)``
    and so on. Every grid point must be discrete-time stable and the grid
    strictly increasing.
    """

    def __init__(self, grid_rhos, A, B, C, D, R, P, dt, validate=True):
        self.grid_rhos = np.asarray(grid_rhos, dtype=float)
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.C = np.asarray(C, dtype=float)
        self.D = np.asarray(D, dtype=float)
        self.R = np.asarray(R, dtype=float)
        self.P = np.asarray(P, dtype=float)
        self.dt = float(dt)
        if validate:
            self._validate()

    def _validate(self):
        g = self.grid_rhos
        if g.ndim != 1 or g.size < 2:
            raise DimensionError("grid needs at least two parameter values")
        if np.any(np.diff(g) <= 0):
            raise DimensionError("grid parameter values must be strictly increasing")
        n_g = g.size
        n_x, n_u, n_y = self.n_x, self.n_u, self.n_y
        shapes = {
            "A": (n_g, n_x, n_x),
            "B": (n_g, n_x, n_u),
            "C": (n_g, n_y, n_x),
            "D": (n_g, n_y, n_u),
            "R": (n_g, n_x, n_u),
            "P": (n_g, n_y, n_u),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        if not self.dt > 0:
            raise DimensionError("dt must be positive")
        for j in range(n_g):
            sr = spectral_radius(self.A[j])
            if sr >= 1.0:
                raise ConstructionError(
                    f"grid point {j} (rho={g[j]}) is unstable: spectral radius {sr:.6f}"
                )

    @property
    def n_g(self):
        return self.grid_rhos.size

    @property
    def n_x(self):
        return self.A.shape[1]

    @property
    def n_u(self):
        return self.B.shape[2]

    @property
    def n_y(self):
        return self.C.shape[1]

    @property
    def has_algebraic(self):
        return bool(np.any(self.R) or np.any(self.P))

    def bracket(self, rho):
        """Locate ``rho`` on the grid: ``(j, j1, theta)`` with ``theta`` in [0, 1].

        At a knot both indices coincide and ``theta`` is 0. Raises
        :class:`RangeError` outside the grid; no extrapolation.
        """
        g = self.grid_rhos
        rho = float(rho)
        if rho < g[0] or rho > g[-1]:
            raise RangeError(f"rho={rho} outside grid range [{g[0]}, {g[-1]}]")
        i = int(np.searchsorted(g, rho, side="left"))
        if i < g.size and g[i] == rho:
            return i, i, 0.0
        return i - 1, i, (rho - g[i - 1]) / (g[i] - g[i - 1])

    def matrices_at(self, rho):
        """Entrywise-linear interpolation of all six matrices at ``rho``.

        At a grid knot the stored arrays themselves are returned (bit-equal,
        no arithmetic); treat them as read-only.
        """
        j, j1, th = self.bracket(rho)
        if j == j1:
            return self.A[j], self.B[j], self.C[j], self.D[j], self.R[j], self.P[j]
        w0, w1 = 1.0 - th, th
        return tuple(
            w0 * M[j] + w1 * M[j1] for M in (self.A, self.B, self.C, self.D, self.R, self.P)
        )

    def at_rho(self, rho):
        A, B, C, D, R, P = self.matrices_at(rho)
        return FrozenPlant(A=A, B=B, C=C, D=D, R=R, P=P, dt=self.dt, rho=float(rho))

    def simulate(self, u, rho_traj, x0=None, trim=None):
        """Step the parameter-varying plant.

        Parameters
        ----------
        u : ndarray, shape (n_u, n_s + 1)
            Absolute input samples; the final algebraic step holds the last
            value (``u_{n_s+1} := u_{n_s}``).
        rho_traj : float or ndarray, shape (n_s + 1,)
            Scheduling-parameter value(s); every value must lie on the grid
            range.
        x0 : ndarray, optional
            Initial state, zeros by default.
        trim : Trim, optional
            Attached verbatim to the returned trajectory.

        Returns
        -------
        TrajectorySet
        """
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape[0] != self.n_u:
            raise DimensionError(f"input has {u.shape[0]} channels, plant expects {self.n_u}")
        n_steps = u.shape[1] - 1
        if np.ndim(rho_traj) == 0:
            fp = self.at_rho(float(rho_traj))
            x, y = fp.simulate(u, x0=x0)
            return TrajectorySet(states=x, inputs=u, outputs=y, dt=self.dt,
                                 rho=float(rho_traj), trim=trim)
        rho = np.asarray(rho_traj, dtype=float).ravel()
        if rho.size != n_steps + 1:
            raise DimensionError(
                f"rho trajectory has {rho.size} samples, expected {n_steps + 1}"
            )
        x = np.zeros((self.n_x, n_steps + 1))
        if x0 is not None:
            x[:, 0] = np.asarray(x0, dtype=float).ravel()
        y = np.zeros((self.n_y, n_steps + 1))
        u_next = np.column_stack([u[:, 1:], u[:, -1]])
        for k in range(n_steps + 1):
            A, B, C, D, R, P = self.matrices_at(rho[k])
            y[:, k] = C @ x[:, k] + D @ u[:, k] + P @ u_next[:, k]
            if k < n_steps:
                x[:, k + 1] = A @ x[:, k] + B @ u[:, k] + R @ u_next[:, k]
        return TrajectorySet(states=x, inputs=u, outputs=y, dt=self.dt, rho=rho, trim=trim)


# ---------------------------------------------------------------------------
# Benchmark construction


@dataclass(frozen=True)
class PlantConfig:
    """Knobs of the synthetic benchmark plant.

    ``modal_damping_range`` bounds the discrete pole radii of the oscillator
    blocks; ``core_damping_range`` and ``core_angle_range`` override radius
    and angle for the bright core, keeping the output-relevant response well
    damped, low-frequency, and inside a short control horizon (physical
    structural-mode scales relative to the sampling rate).
    ``nonnormal_coupling_strength`` scales the block-upper-triangular
    coupling; zero gives a normal (block-diagonal) system.

    Modes fall into three classes. A bright core (``core_fraction`` of the
    modes, always including the output mode) carries the input-output
    behaviour. Decoy modes (``decoy_fraction``) are inflated by a diagonal
    similarity with factors from ``decoy_scale_range``: they carry large state
    energy but, since the similarity shrinks their coupling into the output
    mode by the same factor, little input-output relevance; they are what
    separates energy-ranked projections from balanced ones at low orders
    without changing the transfer behaviour. All remaining modes are dark
    (input rows and coupling scaled by ``dark_scale``), keeping the effective
    input-output rank of the benchmark near twice the bright mode count.

    ``response_scale`` normalizes the input matrices so unit impulses produce
    order-one state responses (state and input rows of the snapshot matrices
    then live on comparable scales). Mimicking the channel convention
    ``[alpha, p, q, r, Fs, Fas]``, the first channel acts as the gust path and
    the actuation channel defaults to index 4: the first channel's column is
    rescaled so its static gain to the first output is
    ``disturbance_gain_ratio`` times the actuation channel's, keeping
    unit-amplitude gusts rejectable within the actuation bounds. The drift
    knobs control how strongly poles and input gains move across the
    parameter range.
    """

    n_x: int = 200
    n_u: int = 6
    n_y: int = 1
    grid_rhos: tuple = tuple(float(v) for v in range(20, 52, 2))
    dt: float = 0.006
    modal_damping_range: tuple = (0.55, 0.96)
    core_damping_range: tuple = (0.35, 0.65)
    core_angle_range: tuple = (0.05, 0.50)
    nonnormal_coupling_strength: float = 0.6
    core_fraction: float = 0.12
    decoy_fraction: float = 0.04
    decoy_scale_range: tuple = (4.0, 16.0)
    dark_scale: float = 1e-3
    response_scale: float = 1.0
    disturbance_gain_ratio: float = 1.2
    gust_channel: int = 0
    actuation_channel: int = 4
    actuation_direct: float = 5.0
    algebraic: bool = False
    seed: int = 0
    radius_drift: float = 0.02
    freq_drift: float = 0.08
    input_gain_drift: float = 0.20


def make_benchmark_plant(cfg):
    """Build the synthetic benchmark plant from a :class:`PlantConfig`.

    The first output channel reads the first oscillator's amplitude (mode-0
    state), mirroring a "first bending mode" measurement. With the algebraic
    flag set, ``R`` is a random matrix rescaled to 10% of the Frobenius norm
    of ``B`` at each grid point and ``P`` stays zero.

    Raises
    ------
    ConstructionError
        If any grid point remains unstable after the rescue rescales.
    """
    if cfg.n_x < 2 or cfg.n_x % 2 != 0:
        raise DimensionError(f"n_x must be even and >= 2, got {cfg.n_x}")
    grid = np.asarray(cfg.grid_rhos, dtype=float)
    if grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise DimensionError("grid_rhos must be strictly increasing with length >= 2")
    n_x, n_u, n_y, n_g = cfg.n_x, cfg.n_u, cfg.n_y, grid.size
    m = n_x // 2
    rng = np.random.default_rng(cfg.seed)

    for name in ("modal_damping_range", "core_damping_range"):
        lo, hi = getattr(cfg, name)
        if not (0.0 < lo < hi < 1.0):
            raise DimensionError(f"{name} must lie inside (0, 1), got {(lo, hi)}")
    lo, hi = cfg.modal_damping_range
    radius0 = rng.uniform(lo, hi, m)
    radius_dir = rng.uniform(-1.0, 1.0, m)
    angle0 = rng.uniform(0.05, 2.6, m)

    # coupling only from later mode blocks into earlier ones: the assembled
    # matrix stays block upper triangular, so its spectrum is exactly the
    # designed oscillator poles no matter how strong the coupling is
    blk = np.repeat(np.arange(m), 2)
    mask = blk[:, None] < blk[None, :]
    N = rng.standard_normal((n_x, n_x)) / np.sqrt(n_x) * mask

    # mode classes: bright core (incl. output mode 0), bright decoys, dark rest
    n_core = max(1, int(round(cfg.core_fraction * m)))
    n_decoy = int(round(cfg.decoy_fraction * m))
    shuffled = 1 + rng.permutation(m - 1) if m > 1 else np.zeros(0, dtype=int)
    core = np.concatenate([[0], shuffled[: n_core - 1]]).astype(int)
    decoys = shuffled[n_core - 1 : n_core - 1 + n_decoy]
    scales = np.ones(m)
    if decoys.size:
        lo_s, hi_s = cfg.decoy_scale_range
        scales[decoys] = np.exp(rng.uniform(np.log(lo_s), np.log(hi_s), decoys.size))
    bright = np.zeros(m, dtype=bool)
    bright[core] = True
    bright[decoys] = True
    lo_c, hi_c = cfg.core_damping_range
    radius0[core] = lo_c + (radius0[core] - lo) / (hi - lo) * (hi_c - lo_c)
    lo_a, hi_a = cfg.core_angle_range
    angle0[core] = lo_a + (angle0[core] - 0.05) / (2.6 - 0.05) * (hi_a - lo_a)
    coupling_gain = np.where(bright, 1.0, cfg.dark_scale)
    t = np.repeat(scales, 2)
    wcol = np.repeat(coupling_gain, 2)
    N_scaled = (t[:, None] / t[None, :]) * (wcol[:, None] * wcol[None, :]) * N

    B0 = rng.standard_normal((n_x, n_u)) / np.sqrt(n_x)
    B0 = B0 * wcol[:, None]
    # the actuation channel drives the output oscillator directly (think
    # flap-to-bending-mode), giving a fast, consistently-signed control path
    ch_c = min(cfg.actuation_channel, n_u - 1)
    B0[0, ch_c] += cfg.actuation_direct / np.sqrt(n_x)
    C0 = np.zeros((n_y, n_x))
    C0[0, 0] = 1.0
    if n_y > 1:
        C0[1:] = rng.standard_normal((n_y - 1, n_x)) / np.sqrt(n_x)
    C_full = C0 / t[None, :]
    # R0 is drawn unconditionally so a given seed yields identical A/B/C with
    # and without the algebraic flag
    R0 = rng.standard_normal((n_x, n_u)) / np.sqrt(n_x)
    R0 = t[:, None] * R0

    A = np.zeros((n_g, n_x, n_x))
    B = np.zeros((n_g, n_x, n_u))
    C = np.tile(C_full, (n_g, 1, 1))
    D = np.zeros((n_g, n_y, n_u))
    R = np.zeros((n_g, n_x, n_u))
    P = np.zeros((n_g, n_y, n_u))

    span = grid[-1] - grid[0]
    for j in range(n_g):
        s = (grid[j] - grid[0]) / span
        radius = np.clip(radius0 + cfg.radius_drift * (s - 0.5) * radius_dir, 0.05, 0.985)
        angle = np.clip(angle0 * (1.0 + cfg.freq_drift * (s - 0.5)), 0.01, np.pi - 0.05)
        Aj = np.zeros((n_x, n_x))
        cos_t, sin_t = radius * np.cos(angle), radius * np.sin(angle)
        for i in range(m):
            Aj[2 * i, 2 * i] = cos_t[i]
            Aj[2 * i, 2 * i + 1] = sin_t[i]
            Aj[2 * i + 1, 2 * i] = -sin_t[i]
            Aj[2 * i + 1, 2 * i + 1] = cos_t[i]
        Aj = Aj + cfg.nonnormal_coupling_strength * N_scaled
        for attempt in range(4):
            sr = spectral_radius(Aj)
            if sr < 1.0:
                break
            Aj = Aj * (0.995 / sr)
        else:
            raise ConstructionError(
                f"grid point {j} still unstable after rescales (spectral radius {sr:.4f})"
            )
        A[j] = Aj

    # pin the gust channel's static output gain relative to the actuation
    # channel's, so unit-amplitude gusts stay rejectable within input bounds;
    # the algebraic column scales along with it, so the pin is exact
    mid = n_g // 2
    ch_d = cfg.gust_channel
    if ch_d != ch_c:
        BR = t[:, None] * B0
        if cfg.algebraic:
            BR = BR + R0 * (0.1 * np.linalg.norm(t[:, None] * B0) / np.linalg.norm(R0))
        K = np.linalg.solve(np.eye(n_x) - A[mid], BR)
        g_d = float((C_full @ K[:, ch_d])[0])
        g_c = float((C_full @ K[:, ch_c])[0])
        if abs(g_d) > 0 and abs(g_c) > 0:
            beta = cfg.disturbance_gain_ratio * abs(g_c) / abs(g_d)
            B0[:, ch_d] *= beta
            R0[:, ch_d] *= beta

    # one global input normalization (mid-grid impulse-response energy) so
    # unit impulses drive order-response_scale states at every grid point
    alpha = cfg.response_scale / _impulse_rms(A[n_g // 2], t[:, None] * B0)
    for j in range(n_g):
        s = (grid[j] - grid[0]) / span
        gain = 1.0 + cfg.input_gain_drift * (s - 0.5)
        Bj = alpha * gain * (t[:, None] * B0)
        B[j] = Bj
        if cfg.algebraic:
            R[j] = R0 * (0.1 * np.linalg.norm(Bj) / np.linalg.norm(R0))
    return HighOrderPlant(grid_rhos=grid, A=A, B=B, C=C, D=D, R=R, P=P, dt=cfg.dt)


def _impulse_rms(A, B, max_steps=2000, decay=1e-6):
    """Root-mean-square per-channel impulse-response energy of ``(A, B)``."""
    X = B.copy()
    total = float(np.sum(X * X))
    peak = total
    for _ in range(max_steps):
        X = A @ X
        inc = float(np.sum(X * X))
        total += inc
        peak = max(peak, inc)
        if inc < decay * peak:
            break
    return np.sqrt(total / B.shape[1])


# ---------------------------------------------------------------------------
# Model-based balanced-truncation reference


def exact_gramians(fp):
    """Infinite-horizon Gramians of a frozen plant from the Lyapunov equations.

    Returns ``(Wc, Wo)`` solving ``A Wc A^T - Wc + B B^T = 0`` and
    ``A^T Wo A - Wo + C^T C = 0`` exactly.
    """
    Wc = solve_discrete_lyapunov(fp.A, fp.B @ fp.B.T)
    Wo = solve_discrete_lyapunov(fp.A.T, fp.C.T @ fp.C)
    check_psd(Wc, tol=1e-10, label="controllability Gramian")
    check_psd(Wo, tol=1e-10, label="observability Gramian")
    return 0.5 * (Wc + Wc.T), 0.5 * (Wo + Wo.T)


def balanced_truncation_oracle(plant, rho_grid_index, n_z):
    """Square-root balanced truncation at one grid point, solved exactly.

    This is the model-based reference the data-driven balanced fits are
    checked against.

    Returns
    -------
    model : ReducedModel
        Balanced reduced model; ``lift`` holds the balancing map back to full
        coordinates.
    hankel : ndarray
        Full ordered Hankel singular value list of the grid point.

    Raises
    ------
    NumericalError
        If either Gramian is indefinite beyond the eigenvalue tolerance.
    RankError
        If ``n_z`` exceeds the numerical rank of the Hankel spectrum.
    """
    j = int(rho_grid_index)
    fp = plant.at_rho(plant.grid_rhos[j])
    if n_z > fp.n_x:
        raise DimensionError(f"n_z={n_z} exceeds the state dimension {fp.n_x}")
    Wc, Wo = exact_gramians(fp)
    Lc = psd_factor(Wc)
    Lo = psd_factor(Wo)
    hankel = np.linalg.svd(Lc.T @ Lo, compute_uv=False)
    U, s, Vt = truncated_svd(Lc.T @ Lo, n_z, rtol=1e-12, label="Hankel matrix")
    inv_sqrt = 1.0 / np.sqrt(s)
    T = Lc @ U * inv_sqrt
    S = Lo @ Vt.T * inv_sqrt
    model = ReducedModel(
        F=S.T @ fp.A @ T,
        G=S.T @ fp.B,
        H=fp.C @ T,
        D=fp.D,
        lift=T,
        rho=float(plant.grid_rhos[j]),
    )
    return model, hankel


# ---------------------------------------------------------------------------
# Serialization


def plant_to_text(plant):
    manifest = {
        "kind": "plant",
        "dt": matio.fmt(plant.dt),
        "n_g": plant.n_g,
        "n_x": plant.n_x,
        "n_u": plant.n_u,
        "n_y": plant.n_y,
    }
    blocks = {"grid_rhos": plant.grid_rhos}
    for j in range(plant.n_g):
        for name in ("A", "B", "C", "D", "R", "P"):
            blocks[f"{name}{j}"] = getattr(plant, name)[j]
    return matio.dump_blocks(manifest, blocks)


def save_plant(plant, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(plant_to_text(plant))


def load_plant(path):
    manifest, blocks = matio.load_blocks(path)
    if manifest.get("kind") != "plant":
        raise NumericalError(f"{path} is not a plant file")
    n_g = int(manifest["n_g"])
    stacks = {
        name: np.stack([blocks[f"{name}{j}"] for j in range(n_g)])
        for name in ("A", "B", "C", "D", "R", "P")
    }
    return HighOrderPlant(grid_rhos=blocks["grid_rhos"], dt=float(manifest["dt"]), **stacks)
