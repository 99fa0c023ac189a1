"""Finite-horizon MPC on reduced models and closed-loop evaluation.

The horizon prediction is condensed: the LPV-ROM recursion is rolled forward
symbolically so the stacked deviation outputs are affine in the stacked
controlled inputs, giving a dense box-constrained quadratic program solved by
accelerated projected gradient to a hard stationarity tolerance. Only the
configured channels are optimization variables; the remaining channels stay at
trim plus whatever exogenous disturbance the scenario injects.

State feedback is idealized: the true plant state is projected through the
model's own reduced-state map (test space, POD basis, or identity). For the
parallel aDMDc scheme the reduced states are instead advanced from the applied
inputs, since its grid models do not share a basis. With an algebraic plant
the current state's next-step-input kick is estimated by holding the previous
input; the estimate only enters the measurement used by one solve, never the
propagated state, so no error accumulates. All of these choices are shared by
every algorithm under comparison.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigError, ConvergenceError, DimensionError
from .lpv import STATE_CONSISTENT, interpolate_at


def _weight_matrix(w, dim, name):
    W = np.asarray(w, dtype=float)
    if W.ndim == 0:
        W = float(W) * np.eye(dim)
    if W.shape != (dim, dim):
        raise ConfigError(f"{name} must be scalar or {dim}x{dim}, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ConfigError(f"{name} contains non-finite entries")
    if np.max(np.abs(W - W.T)) > 1e-12 * max(1.0, np.max(np.abs(W))):
        raise ConfigError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(0.5 * (W + W.T)).min() < -1e-12 * max(1.0, np.max(np.abs(W))):
        raise ConfigError(f"{name} must be positive semidefinite")
    return 0.5 * (W + W.T)


@dataclass(frozen=True)
class MpcConfig:
    """Horizon length, cost weights, and input box for the tracking problem.

    ``weight_output`` weighs the deviation-output tracking error,
    ``weight_input`` the controlled deviation inputs, ``weight_input_rate``
    their step-to-step changes. Bounds apply to the absolute controlled
    inputs. Scalars broadcast to diagonal matrices.

    With ``reference_preview`` off (default), each solve holds the current
    reference sample over the horizon, matching the frozen scheduling
    forecast; with it on, the future reference slice is previewed.
    """

    horizon: int
    weight_output: object
    weight_input: object
    weight_input_rate: object
    u_min: object
    u_max: object
    controlled_channels: tuple
    stationarity_tol: float = 1e-8
    max_iterations: int = 500000
    reference_preview: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        object.__setattr__(self, "controlled_channels", tuple(int(c) for c in self.controlled_channels))
        if len(self.controlled_channels) == 0:
            raise ConfigError("at least one controlled channel is required")
        n_c = len(self.controlled_channels)
        lo = np.broadcast_to(np.asarray(self.u_min, dtype=float), (n_c,)).copy()
        hi = np.broadcast_to(np.asarray(self.u_max, dtype=float), (n_c,)).copy()
        if np.any(lo >= hi):
            raise ConfigError("u_min must be strictly below u_max")
        object.__setattr__(self, "u_min", lo)
        object.__setattr__(self, "u_max", hi)

    @property
    def n_controlled(self):
        return len(self.controlled_channels)

    def weights(self, n_y):
        N = _weight_matrix(self.weight_output, n_y, "weight_output")
        M = _weight_matrix(self.weight_input, self.n_controlled, "weight_input")
        Md = _weight_matrix(self.weight_input_rate, self.n_controlled, "weight_input_rate")
        return N, M, Md


def solve_box_qp(Hq, g, lo, hi, tol=1e-8, max_iterations=500000):
    """Minimize ``0.5 x^T Hq x + g^T x`` subject to ``lo <= x <= hi``.

    Accelerated projected gradient with the strongly-convex momentum constant
    when available; the returned iterate is a projection output, so the bounds
    hold exactly. Stationarity is the natural residual
    ``||x - clip(x - (Hq x + g))||_inf``.

    Raises
    ------
    ConvergenceError
        If the residual is still above ``tol`` after ``max_iterations``,
        carrying the last residual.
    """
    n = g.size
    x = np.clip(np.zeros(n), lo, hi)
    lam = np.linalg.eigvalsh(Hq)
    L, mu = float(lam[-1]), float(lam[0])
    if L <= 0.0:
        # linear objective: each coordinate rides to its bound
        x = np.where(g > 0, lo, np.where(g < 0, hi, x))
        return x, 0.0, 0
    step = 1.0 / L
    beta = 0.0
    if mu > 0.0:
        q = np.sqrt(mu / L)
        beta = (1.0 - q) / (1.0 + q)
    y = x.copy()
    grad = Hq @ x + g
    residual = float(np.max(np.abs(x - np.clip(x - grad, lo, hi)))) if n else 0.0
    if residual <= tol:
        return x, residual, 0
    for it in range(1, max_iterations + 1):
        x_new = np.clip(y - step * (Hq @ y + g), lo, hi)
        if mu > 0.0:
            y = x_new + beta * (x_new - x)
        else:
            # FISTA with gradient-mapping restart
            if np.dot(y - x_new, x_new - x) > 0:
                y = x_new.copy()
            else:
                y = x_new + (it / (it + 3.0)) * (x_new - x)
        x = x_new
        grad = Hq @ x + g
        residual = float(np.max(np.abs(x - np.clip(x - grad, lo, hi))))
        if residual <= tol:
            return x, residual, it
    raise ConvergenceError(
        f"box QP did not reach stationarity {tol:.1e} in {max_iterations} iterations "
        f"(residual {residual:.3e})",
        residual=residual,
    )


@dataclass(frozen=True)
class HorizonModel:
    """Per-step matrices of the horizon prediction in deviation coordinates.

    ``steps`` entries are ``(F, G, L, H, D, P, corr)`` with ``corr`` the trim
    correction vector entering the state update; ``y_off`` is a constant
    output offset (zero for direct ROM predictions); ``u_off`` an input-trim
    offset folded into every full input vector.

    ``z0_coupling`` (optional) makes the initial state affine in the first
    input: with an algebraic plant the measured state carries a
    next-step-input kick that is decided by this very solve, so the horizon
    problem owns it instead of the measurement estimating it.
    """

    steps: tuple
    y_off: np.ndarray
    u_off: np.ndarray
    n_u: int
    n_y: int
    z0_coupling: np.ndarray = None


def _selector(n_u, channels):
    S = np.zeros((n_u, len(channels)))
    for i, c in enumerate(channels):
        if not 0 <= c < n_u:
            raise ConfigError(f"controlled channel {c} outside 0..{n_u - 1}")
        S[c, i] = 1.0
    return S


def condense(hm, z0, channels):
    """Stack the horizon outputs as an affine map of the controlled inputs.

    Returns ``(Phi, psi)`` with ``y_stack = Phi @ u_stack + psi`` where
    ``u_stack`` holds the controlled-channel deviation inputs over the
    horizon; the final algebraic step reuses the last input.
    """
    N_c = len(hm.steps)
    S = _selector(hm.n_u, channels)
    n_c = S.shape[1]
    n_dec = N_c * n_c
    sel = []
    for i in range(N_c):
        E = np.zeros((hm.n_u, n_dec))
        E[:, i * n_c : (i + 1) * n_c] = S
        sel.append(E)
    sel.append(sel[-1])  # held last input

    n_z = hm.steps[0][0].shape[0]
    Zm = np.zeros((n_z, n_dec))
    if hm.z0_coupling is not None:
        Zm = hm.z0_coupling @ sel[0]
    zv = np.asarray(z0, dtype=float).ravel().copy()
    if hm.z0_coupling is not None:
        zv = zv + hm.z0_coupling @ hm.u_off
    Phi = np.zeros((N_c * hm.n_y, n_dec))
    psi = np.zeros(N_c * hm.n_y)
    for i, (F, G, L, H, D, P, corr) in enumerate(hm.steps):
        rows = slice(i * hm.n_y, (i + 1) * hm.n_y)
        Ym = H @ Zm + (0.0 if D is None else D @ sel[i])
        yv = H @ zv + hm.y_off
        if D is not None:
            yv = yv + D @ hm.u_off
        if P is not None:
            Ym = Ym + P @ sel[i + 1]
            yv = yv + P @ hm.u_off
        Phi[rows] = Ym
        psi[rows] = yv
        Zm_next = F @ Zm + G @ sel[i]
        zv_next = F @ zv + G @ hm.u_off + corr
        if L is not None:
            Zm_next = Zm_next + L @ sel[i + 1]
            zv_next = zv_next + L @ hm.u_off
        Zm, zv = Zm_next, zv_next
    return Phi, psi


def rollout_cost(hm, z0, channels, u_seq, r_dev, u_prev, weights):
    """Direct simulation of the horizon model; used to verify condensation."""
    N_c = len(hm.steps)
    S = _selector(hm.n_u, channels)
    Nw, Mw, Mdw = weights
    z = np.asarray(z0, dtype=float).ravel().copy()
    u_full = [S @ u_seq[:, i] + hm.u_off for i in range(N_c)]
    u_full.append(u_full[-1])
    if hm.z0_coupling is not None:
        z = z + hm.z0_coupling @ u_full[0]
    cost = 0.0
    prev = u_prev
    for i, (F, G, L, H, D, P, corr) in enumerate(hm.steps):
        y = H @ z + hm.y_off
        if D is not None:
            y = y + D @ u_full[i]
        if P is not None:
            y = y + P @ u_full[i + 1]
        err = y - r_dev[:, i]
        du = u_seq[:, i] - prev
        cost += err @ Nw @ err + u_seq[:, i] @ Mw @ u_seq[:, i] + du @ Mdw @ du
        prev = u_seq[:, i]
        z_next = F @ z + G @ u_full[i] + corr
        if L is not None:
            z_next = z_next + L @ u_full[i + 1]
        z = z_next
    return float(cost)


def _gridrom_horizon(grm, rho_forecast, N_c, z0_coupling=None, u_held=None):
    rho = np.asarray(rho_forecast, dtype=float).ravel()
    if rho.size == 1:
        rho = np.full(N_c, rho[0])
    if rho.size != N_c:
        raise DimensionError(f"rho forecast has {rho.size} samples, expected {N_c}")
    if not grm.has_output:
        raise DimensionError("horizon prediction needs a model with an output equation")
    steps = []
    inst = interpolate_at(grm, rho[0])
    for i in range(N_c):
        inst_next = inst if (i + 1 >= N_c or rho[i + 1] == rho[i]) else interpolate_at(grm, rho[i + 1])
        corr = inst.zbar - inst_next.zbar
        steps.append((inst.F, inst.G, inst.L, inst.H, inst.D, inst.P, corr))
        inst = inst_next
    n_y = steps[0][3].shape[0]
    u_off = np.zeros(grm.n_u) if u_held is None else np.asarray(u_held, dtype=float).ravel()
    return HorizonModel(
        steps=tuple(steps),
        y_off=np.zeros(n_y),
        u_off=u_off,
        n_u=grm.n_u,
        n_y=n_y,
        z0_coupling=z0_coupling,
    )


@dataclass(frozen=True)
class HorizonSolution:
    """Optimal controlled-input sequence (deviation units) plus diagnostics."""

    u_seq: np.ndarray
    cost: float
    kkt_residual: float
    iterations: int
    condensation_gap: float


def _solve_condensed(hm, z0, u_prev, r_dev, cfg, ubar_c):
    N_c = cfg.horizon
    n_c = cfg.n_controlled
    Nw, Mw, Mdw = cfg.weights(hm.n_y)
    Phi, psi = condense(hm, z0, cfg.controlled_channels)
    r_stack = np.asarray(r_dev, dtype=float).reshape(hm.n_y * N_c, order="F")
    e = psi - r_stack

    Nblk = np.kron(np.eye(N_c), Nw)
    Mblk = np.kron(np.eye(N_c), Mw)
    Tdiff = np.kron(np.eye(N_c), np.eye(n_c))
    for i in range(1, N_c):
        Tdiff[i * n_c : (i + 1) * n_c, (i - 1) * n_c : i * n_c] = -np.eye(n_c)
    Mdblk = np.kron(np.eye(N_c), Mdw)
    b = np.zeros(N_c * n_c)
    b[:n_c] = np.asarray(u_prev, dtype=float).ravel()

    Hq = 2.0 * (Phi.T @ Nblk @ Phi + Mblk + Tdiff.T @ Mdblk @ Tdiff)
    Hq = 0.5 * (Hq + Hq.T)
    g = 2.0 * (Phi.T @ (Nblk @ e) - Tdiff.T @ (Mdblk @ b))
    const = float(e @ Nblk @ e + b @ Mdblk @ b)
    if not (np.all(np.isfinite(Hq)) and np.all(np.isfinite(g))):
        raise ConfigError("non-finite cost matrices in the condensed QP")

    lo = np.tile(cfg.u_min - ubar_c, N_c)
    hi = np.tile(cfg.u_max - ubar_c, N_c)
    x, residual, iters = solve_box_qp(
        Hq, g, lo, hi, tol=cfg.stationarity_tol, max_iterations=cfg.max_iterations
    )
    cost = float(0.5 * x @ Hq @ x + g @ x + const)
    u_seq = x.reshape(n_c, N_c, order="F")
    direct = rollout_cost(hm, z0, cfg.controlled_channels, u_seq,
                          np.asarray(r_dev, dtype=float), b[:n_c], (Nw, Mw, Mdw))
    gap = abs(direct - cost) / max(1.0, abs(direct))
    return HorizonSolution(u_seq=u_seq, cost=cost, kkt_residual=residual,
                           iterations=iters, condensation_gap=gap)


def solve_horizon(grm, z_now, u_prev, rho_forecast, r_dev, cfg, z0_coupling=None,
                  u_held=None):
    """One MPC solve on a state-consistent GridROM.

    Parameters
    ----------
    grm : GridROM
    z_now : ndarray
        Current reduced deviation state. With an algebraic plant this is the
        input-independent part; ``z0_coupling`` supplies the current-input
        kick.
    u_prev : ndarray
        Previously applied controlled-channel deviation input (for the rate
        penalty).
    rho_forecast : float or ndarray
        Scheduling forecast over the horizon; a scalar freezes it.
    r_dev : ndarray, shape (n_y, N_c)
        Deviation-output reference over the horizon.
    cfg : MpcConfig
    z0_coupling : ndarray, optional
        ``n_z x n_u`` map adding the first full input's algebraic kick to the
        initial state.
    u_held : ndarray, optional
        Measured uncontrolled-channel deviations (e.g. the current gust
        angle), held constant over the horizon as known model inputs.

    Returns
    -------
    HorizonSolution
        ``u_seq`` holds the full optimal sequence; a receding-horizon loop
        applies its first column. ``condensation_gap`` is the relative
        mismatch between the QP objective and a direct rollout of the horizon
        model with the returned inputs.
    """
    hm = _gridrom_horizon(grm, rho_forecast, cfg.horizon, z0_coupling=z0_coupling,
                          u_held=u_held)
    rho0 = float(np.ravel(rho_forecast)[0])
    inst = interpolate_at(grm, rho0)
    ubar_c = inst.ubar[list(cfg.controlled_channels)]
    return _solve_condensed(hm, z_now, u_prev, r_dev, cfg, ubar_c)


# ---------------------------------------------------------------------------
# Parallel-model (aDMDc) horizon prediction


class ParallelPredictor:
    """Receding-horizon predictor for grid models without a shared basis.

    Keeps one reduced state per grid model, advanced from the actually applied
    inputs; the horizon map interpolates the two bracketing models' lifted
    states through a full-state read-out.

    Because the algebraic term couples each state to the *next* input, the
    update is committed lazily: :meth:`commit` stores the input-independent
    part, and :meth:`estimate_states` completes it with a held-input estimate
    when the next solve needs a measurement. The committed recursion itself
    always uses actual inputs, so the estimate never accumulates.
    """

    def __init__(self, grm, readout):
        self.grm = grm
        self.readout = readout
        self.Z = None
        self._partial = None

    def reset(self, x0_abs):
        self.Z = [
            m.lift.T @ (np.asarray(x0_abs, dtype=float) - self.grm.xbar[j])
            for j, m in enumerate(self.grm.models)
        ]
        self._partial = None

    def _udev(self, j, u_abs):
        return u_abs - self.grm.ubar[j]

    def partial_states(self):
        """Input-independent part of the per-model states at the current step
        (the pending update without its next-input kick); the kick itself is
        handed to the horizon problem as the initial-state coupling."""
        if self._partial is None:
            return [z.copy() for z in self.Z], False
        return [z.copy() for z in self._partial], True

    def commit(self, u_abs):
        """Finalize the pending update with the actually applied input and
        stage the next one."""
        if self._partial is not None:
            self.Z = []
            for j, m in enumerate(self.grm.models):
                z = self._partial[j]
                if m.L is not None:
                    z = z + m.L @ self._udev(j, u_abs)
                self.Z.append(z)
        self._partial = [
            m.F @ self.Z[j] + m.G @ self._udev(j, u_abs)
            for j, m in enumerate(self.grm.models)
        ]

    def horizon_model(self, rho, cfg, u_held=None):
        """Stacked bracketing-model horizon prediction at frozen ``rho``;
        ``u_held`` carries measured uncontrolled-channel deviations."""
        grm = self.grm
        j0, j1, th = grm.bracket(rho)
        idx = [j0] if j0 == j1 else [j0, j1]
        wts = [1.0] if j0 == j1 else [1.0 - th, th]
        Theta = np.atleast_2d(np.asarray(
            self.readout(rho) if callable(self.readout) else self.readout, dtype=float))
        n_y = Theta.shape[0]
        ubar_rho = (1.0 - th) * grm.ubar[j0] + th * grm.ubar[j1]
        ybar_rho = (1.0 - th) * grm.ybar[j0] + th * grm.ybar[j1]

        F = scipy.linalg.block_diag(*[grm.models[j].F for j in idx])
        G = np.vstack([grm.models[j].G for j in idx])
        L = None
        if grm.models[idx[0]].L is not None:
            L = np.vstack([grm.models[j].L for j in idx])
        H = np.hstack([w * (Theta @ grm.models[j].lift) for w, j in zip(wts, idx)])
        y_off = sum(w * (Theta @ grm.xbar[j]) for w, j in zip(wts, idx)) - ybar_rho
        # each parallel model consumes deviations from its own trim; fold the
        # difference into a per-model constant drive term
        states, pending = self.partial_states()
        z0 = np.concatenate([states[j] for j in idx])
        d = np.zeros(grm.n_u) if u_held is None else np.asarray(u_held, dtype=float).ravel()
        off = [d + (ubar_rho - grm.ubar[j]) for j in idx]
        corr = np.concatenate([grm.models[j].G @ off_j for j, off_j in zip(idx, off)])
        z0_coupling = None
        if L is not None:
            corr = corr + np.concatenate(
                [grm.models[j].L @ off_j for j, off_j in zip(idx, off)]
            )
            if pending:
                # pending states still owe their L-kick from the input being
                # chosen right now
                z0 = z0 + np.concatenate(
                    [grm.models[j].L @ off_j for j, off_j in zip(idx, off)]
                )
                z0_coupling = L
        steps = tuple((F, G, L, H, None, None, corr) for _ in range(cfg.horizon))
        hm = HorizonModel(steps=steps, y_off=y_off, u_off=np.zeros(grm.n_u),
                          n_u=grm.n_u, n_y=n_y, z0_coupling=z0_coupling)
        return hm, z0, ubar_rho


def solve_horizon_parallel(pred, u_prev, rho, r_dev, cfg, u_held=None):
    """MPC solve through the parallel predictor at frozen ``rho``."""
    hm, z0, ubar_rho = pred.horizon_model(float(rho), cfg, u_held=u_held)
    ubar_c = ubar_rho[list(cfg.controlled_channels)]
    return _solve_condensed(hm, z0, u_prev, r_dev, cfg, ubar_c)


# ---------------------------------------------------------------------------
# Closed loop


@dataclass(frozen=True)
class Scenario:
    """Closed-loop experiment description.

    ``reference`` is the absolute output reference (one column per step);
    ``rho_traj`` and ``disturbance`` carry one extra sample for the final
    algebraic input step. Disturbances are absolute deviations injected on
    uncontrolled channels (controlled-channel rows must be zero). ``x0``
    defaults to the trim state at the initial parameter value.
    """

    rho_traj: np.ndarray
    reference: np.ndarray
    disturbance: np.ndarray = None
    x0: np.ndarray = None
    label: str = ""


@dataclass(frozen=True)
class ClosedLoopResult:
    cost: float
    t: np.ndarray
    rho: np.ndarray
    y: np.ndarray
    reference: np.ndarray
    u: np.ndarray
    stage_costs: np.ndarray
    max_condensation_gap: float
    max_kkt_residual: float


def closed_loop_run(plant, grm, scenario, cfg, readout=None):
    """Run the receding-horizon loop against the high-order plant.

    At every step the plant output is measured, the reduced state is updated
    (projection of the true state for state-consistent models, input-driven
    advance for the parallel scheme), one horizon problem is solved, and the
    first optimal input is applied together with the scenario disturbance on
    the uncontrolled channels. The returned cost accumulates the same stage
    expression the controller optimizes.

    ``readout`` (full-state output map, matrix or callable of ``rho``) is
    required for parallel-scheme models, which have no output equation.
    """
    rho = np.asarray(scenario.rho_traj, dtype=float).ravel()
    ref = np.atleast_2d(np.asarray(scenario.reference, dtype=float))
    n_run = ref.shape[1]
    if rho.size != n_run + 1:
        raise DimensionError(f"rho trajectory needs {n_run + 1} samples, got {rho.size}")
    dist = scenario.disturbance
    dist = np.zeros((plant.n_u, n_run + 1)) if dist is None else np.atleast_2d(np.asarray(dist, dtype=float))
    if dist.shape != (plant.n_u, n_run + 1):
        raise DimensionError(f"disturbance must be (n_u, {n_run + 1}), got {dist.shape}")
    ctrl = list(cfg.controlled_channels)
    if np.any(dist[ctrl, :] != 0.0):
        raise ConfigError("disturbance rows on controlled channels must be zero")
    if grm.n_y != ref.shape[0] and grm.algorithm != "admdc":
        raise DimensionError(f"reference has {ref.shape[0]} rows, model outputs {grm.n_y}")

    parallel = grm.algorithm not in STATE_CONSISTENT
    pred = None
    if parallel:
        if readout is None:
            raise ConfigError("parallel-scheme closed loop needs a full-state read-out map")
        pred = ParallelPredictor(grm, readout)

    S = _selector(plant.n_u, cfg.controlled_channels)
    inst0 = interpolate_at(grm, rho[0])
    if scenario.x0 is not None:
        x = np.asarray(scenario.x0, dtype=float).ravel().copy()
    else:
        if inst0.xbar is None:
            raise ConfigError("scenario.x0 omitted but the model carries no full-order trims")
        x = inst0.xbar.copy()
    if parallel:
        pred.reset(x)

    n_y = ref.shape[0]
    y_trace = np.zeros((n_y, n_run))
    u_trace = np.zeros((plant.n_u, n_run))
    stage = np.zeros(n_run)
    Nw, Mw, Mdw = cfg.weights(n_y)
    u_prev_c = np.zeros(cfg.n_controlled)
    pending = None
    max_gap = 0.0
    max_res = 0.0
    cost = 0.0

    for k in range(n_run):
        fp_prev = None
        if k > 0:
            fp_prev = plant.at_rho(rho[k - 1])
        inst = interpolate_at(grm, rho[k])
        ybar_k = inst.ybar
        if cfg.reference_preview:
            # future reference slice, holding the last column
            cols = np.minimum(np.arange(k, k + cfg.horizon), n_run - 1)
            r_dev = ref[:, cols] - ybar_k[:, None]
        else:
            # hold the current sample, consistent with the frozen forecast
            r_dev = np.tile(ref[:, k : k + 1] - ybar_k[:, None], (1, cfg.horizon))

        # uncontrolled channels are measured flight-condition inputs: their
        # current values are known to the predictor and held over the horizon
        d_now = dist[:, k]
        if parallel:
            sol = solve_horizon_parallel(pred, u_prev_c, rho[k], r_dev, cfg,
                                         u_held=d_now)
        else:
            # feedback projects the input-independent part of the true state;
            # the current input's algebraic kick lives inside the horizon model
            if k == 0:
                z_now = grm.project_state(x, rho[k])
                coupling = None
            elif plant.has_algebraic:
                z_now = grm.project_state(
                    pending + fp_prev.R @ (inst.ubar + d_now), rho[k]
                )
                coupling = grm.project_matrix(fp_prev.R, rho[k])
            else:
                z_now = grm.project_state(pending, rho[k])
                coupling = None
            sol = solve_horizon(grm, z_now, u_prev_c, rho[k], r_dev, cfg,
                                z0_coupling=coupling, u_held=d_now)
        max_gap = max(max_gap, sol.condensation_gap)
        max_res = max(max_res, sol.kkt_residual)

        u_c = sol.u_seq[:, 0]
        u_abs = inst.ubar + S @ u_c + dist[:, k]
        if k > 0:
            x = pending + fp_prev.R @ u_abs

        fp = plant.at_rho(rho[k])
        u_next_est = u_abs  # held estimate for the feedthrough algebraic term
        y_abs = fp.output(x, u_abs, u_next_est)
        y_dev = y_abs - ybar_k
        err = y_dev - r_dev[:, 0]
        du = u_c - u_prev_c
        stage[k] = float(err @ Nw @ err + u_c @ Mw @ u_c + du @ Mdw @ du)
        cost += stage[k]
        y_trace[:, k] = y_abs
        u_trace[:, k] = u_abs

        pending = fp.A @ x + fp.B @ u_abs
        if parallel:
            pred.commit(u_abs)
        u_prev_c = u_c

    return ClosedLoopResult(
        cost=float(cost),
        t=np.arange(n_run) * plant.dt,
        rho=rho[:n_run],
        y=y_trace,
        reference=ref,
        u=u_trace,
        stage_costs=stage,
        max_condensation_gap=max_gap,
        max_kkt_residual=max_res,
    )
