"""Trajectory-based (empirical) controllability and observability Gramians.

Both Gramians are finite-horizon sums assembled from simulated responses:
impulse responses per input channel for controllability, and either adjoint
impulse responses per output channel or zero-input responses from unit
initial-condition perturbations for observability. For a linear plant the two
observability routes are algebraically identical, which makes them a useful
cross-check of each other.

Channel/state responses are propagated as one batched matrix recursion; the
accumulation order over time steps is fixed, so results are bit-stable.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from . import matio
from .errors import DimensionError, GramianError
from .linalg import check_psd, spectral_radius

TRAILING_DECAY = 1e-6


@dataclass(frozen=True)
class GramianEstimate:
    """One empirical Gramian with its provenance.

    ``short_horizon`` is set when the trailing simulated response still
    carries more than ``1e-6`` of the peak response norm, i.e. the horizon
    truncates energy that has not yet decayed.
    """

    W: np.ndarray
    horizon: int
    method: str
    short_horizon: bool


@dataclass(frozen=True)
class GramianPair:
    """Controllability/observability Gramians at one grid point."""

    Wc: np.ndarray
    Wo: np.ndarray
    horizon: int
    method_o: str
    short_horizon_c: bool = False
    short_horizon_o: bool = False

    def __post_init__(self):
        check_psd(self.Wc, tol=1e-10, label="Wc")
        check_psd(self.Wo, tol=1e-10, label="Wo")
        if self.Wc.shape != self.Wo.shape:
            raise DimensionError(
                f"Gramian shapes differ: Wc {self.Wc.shape}, Wo {self.Wo.shape}"
            )


def default_horizon(fp, decay=TRAILING_DECAY):
    """Smallest step count after which the slowest mode's envelope is below
    ``decay``, computed from the plant's spectral radius."""
    sr = spectral_radius(fp.A)
    if sr >= 1.0:
        raise GramianError(f"plant is not stable (spectral radius {sr:.6f})")
    if sr <= 0.0:
        return 1
    return max(1, int(np.ceil(np.log(decay) / np.log(sr))))


def _accumulate(blocks):
    """Sum of ``X @ X.T`` over an ordered sequence of column blocks."""
    W = None
    peak = 0.0
    trailing = 0.0
    for X in blocks:
        W = X @ X.T if W is None else W + X @ X.T
        trailing = float(np.linalg.norm(X))
        peak = max(peak, trailing)
    short = peak > 0.0 and trailing > TRAILING_DECAY * peak
    return 0.5 * (W + W.T), short


def empirical_controllability(fp, horizon):
    """Empirical controllability Gramian from per-channel impulse responses.

    All input channels are propagated at once as a batched recursion; the
    result equals the per-channel sum ``sum_i X_i @ X_i.T``. For a plain plant
    this is exactly the partial Lyapunov sum
    ``sum_{k=0}^{T-1} A^k B B^T (A^T)^k``. With the algebraic term active the
    impulse enters through both ``B`` (at its step) and ``R`` (one step
    earlier), exactly as the simulator propagates it, contributing one extra
    leading state per channel.
    """
    if horizon < 1:
        raise DimensionError(f"horizon must be >= 1, got {horizon}")

    def blocks():
        if fp.has_algebraic:
            X = fp.R.copy()
            yield X
            X = fp.A @ X + fp.B
        else:
            X = fp.B.copy()
        yield X
        for _ in range(horizon - 1):
            X = fp.A @ X
            yield X

    W, short = _accumulate(blocks())
    return GramianEstimate(W=W, horizon=horizon, method="impulse", short_horizon=short)


def empirical_observability(fp, horizon, method="adjoint_impulse"):
    """Empirical observability Gramian.

    ``method="adjoint_impulse"`` runs the controllability procedure on the
    adjoint system ``(A^T, C^T)``, which requires access to the plant
    matrices. ``method="perturbation"`` is fully black-box: one zero-input
    simulation per state from a unit initial perturbation, with
    ``Wo[i, j] = sum_k y_k^i . y_k^j`` over the recorded outputs. Both cover
    ``horizon`` response samples and agree to roundoff for linear plants.
    """
    if method == "adjoint_impulse":
        est = empirical_controllability(fp.adjoint(), horizon)
        return GramianEstimate(W=est.W, horizon=horizon, method=method,
                               short_horizon=est.short_horizon)
    if method == "perturbation":
        if horizon < 1:
            raise DimensionError(f"horizon must be >= 1, got {horizon}")

        def blocks():
            X = np.eye(fp.n_x)
            yield (fp.C @ X).T
            for _ in range(horizon - 1):
                X = fp.A @ X
                yield (fp.C @ X).T

        W, short = _accumulate(blocks())
        return GramianEstimate(W=W, horizon=horizon, method=method, short_horizon=short)
    raise DimensionError(f"unknown observability method {method!r}")


def gramian_pair(fp, horizon=None, method_o="adjoint_impulse"):
    """Convenience wrapper: both Gramians at one frozen-parameter point."""
    if horizon is None:
        horizon = default_horizon(fp)
    c = empirical_controllability(fp, horizon)
    o = empirical_observability(fp, horizon, method=method_o)
    return GramianPair(
        Wc=c.W,
        Wo=o.W,
        horizon=horizon,
        method_o=method_o,
        short_horizon_c=c.short_horizon,
        short_horizon_o=o.short_horizon,
    )


# ---------------------------------------------------------------------------
# Disk cache, keyed by plant content hash + grid value + horizon + method


def cache_key(plant_hash, rho, horizon, method_o):
    raw = f"{plant_hash}|{matio.fmt(rho)}|{int(horizon)}|{method_o}"
    return hashlib.sha256(raw.encode()).hexdigest()[:20]


def cache_file(cache_dir, key):
    return str(cache_dir) + f"/gramians_{key}.txt"


def store_pair(pair, path):
    manifest = {
        "kind": "gramians",
        "horizon": pair.horizon,
        "method_o": pair.method_o,
        "short_horizon_c": int(pair.short_horizon_c),
        "short_horizon_o": int(pair.short_horizon_o),
    }
    matio.save_blocks(path, manifest, {"Wc": pair.Wc, "Wo": pair.Wo})


def load_pair(path):
    manifest, blocks = matio.load_blocks(path)
    if manifest.get("kind") != "gramians":
        raise GramianError(f"{path} is not a Gramian cache file")
    return GramianPair(
        Wc=blocks["Wc"],
        Wo=blocks["Wo"],
        horizon=int(manifest["horizon"]),
        method_o=manifest["method_o"],
        short_horizon_c=bool(int(manifest["short_horizon_c"])),
        short_horizon_o=bool(int(manifest["short_horizon_o"])),
    )
