"""Frozen-parameter reduced-order model container shared by all fitters."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class ReducedModel:
    """One frozen-parameter low-order model ``(F, G[, H, D][, L, P])``.

    ``lift`` maps reduced states back to full dimension: POD modes for the
    DMDc family and IOROM (orthonormal columns), the fixed basis space for
    balanced fits (bi-orthogonal to the per-grid test space). ``H``/``D`` are
    ``None`` for state-equation-only fits; ``L``/``P`` are ``None`` unless the
    model carries the next-step-input (algebraic) terms.

    ``flags`` records fit diagnostics such as ``"rank_deficient_regressor"``.
    """

    F: np.ndarray
    G: np.ndarray
    lift: np.ndarray
    rho: float
    H: np.ndarray = None
    D: np.ndarray = None
    L: np.ndarray = None
    P: np.ndarray = None
    flags: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "F", np.atleast_2d(np.asarray(self.F, dtype=float)))
        object.__setattr__(self, "G", np.atleast_2d(np.asarray(self.G, dtype=float)))
        object.__setattr__(self, "lift", np.atleast_2d(np.asarray(self.lift, dtype=float)))
        for name in ("H", "D", "L", "P"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.atleast_2d(np.asarray(val, dtype=float)))
        n_z = self.F.shape[0]
        if self.F.shape != (n_z, n_z):
            raise DimensionError(f"F must be square, got {self.F.shape}")
        if self.G.shape[0] != n_z:
            raise DimensionError(f"G has {self.G.shape[0]} rows, expected {n_z}")
        if self.lift.shape[1] != n_z:
            raise DimensionError(f"lift has {self.lift.shape[1]} columns, expected {n_z}")
        if self.lift.shape[0] < n_z:
            raise DimensionError("reduced order exceeds full state dimension")
        if self.L is not None and self.L.shape != self.G.shape:
            raise DimensionError(f"L shape {self.L.shape} != G shape {self.G.shape}")
        if self.H is not None and self.H.shape[1] != n_z:
            raise DimensionError(f"H has {self.H.shape[1]} columns, expected {n_z}")

    @property
    def n_z(self):
        return self.F.shape[0]

    @property
    def n_u(self):
        return self.G.shape[1]

    @property
    def n_y(self):
        return None if self.H is None else self.H.shape[0]

    def simulate(self, u, z0=None):
        """Roll out the frozen model on a deviation input sequence.

        Parameters
        ----------
        u : ndarray, shape (n_u, n_s + 1)
            Deviation inputs; the final algebraic step holds the last value.
        z0 : ndarray, optional
            Initial reduced state (zeros by default).

        Returns
        -------
        z : ndarray, shape (n_z, n_s + 1)
        y : ndarray or None, shape (n_y, n_s + 1)
            Deviation outputs, ``None`` for state-equation-only models.
        """
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if u.shape[0] != self.n_u:
            raise DimensionError(f"input has {u.shape[0]} channels, model expects {self.n_u}")
        n_steps = u.shape[1] - 1
        z = np.zeros((self.n_z, n_steps + 1))
        if z0 is not None:
            z[:, 0] = np.asarray(z0, dtype=float).ravel()
        u_next = np.column_stack([u[:, 1:], u[:, -1]])
        for k in range(n_steps):
            step = self.F @ z[:, k] + self.G @ u[:, k]
            if self.L is not None:
                step = step + self.L @ u_next[:, k]
            z[:, k + 1] = step
        if self.H is None:
            return z, None
        y = self.H @ z + (0.0 if self.D is None else self.D @ u)
        if self.P is not None:
            y = y + self.P @ u_next
        return z, y
