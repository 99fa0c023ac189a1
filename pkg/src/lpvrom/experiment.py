"""Config-driven experiment pipeline behind the command line driver.

One TOML file describes the whole experiment: plant, trims, training data,
Gramians, fits, prediction-error sweeps, and closed-loop MPC studies. Stages
communicate through files in the output directory; every CSV carries a
provenance header (config hash, plant content hash, master seed) and all
floats are written in round-trip precision, so reruns with the same config and
seed are byte-identical.

Stage outputs are cached: a stage whose artifacts already exist with matching
provenance is a no-op.
"""

import csv
import hashlib
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import matio
from .bmd import bmd_fit, bmd_spaces
from .dmdc import admdc_fit, admdc_lpv_predict, dmdc_fit
from .errors import ConfigError, MissingPrerequisiteError, RangeError
from .gramians import (
    cache_file,
    cache_key,
    default_horizon,
    gramian_pair,
    load_pair,
    store_pair,
)
from .iorom import build_shared_pod_basis, iorom_fit
from .lpv import build_grid_rom, exact_grid_rom, load_grid_rom, save_grid_rom, simulate_lpv
from .mpc import MpcConfig, Scenario, closed_loop_run
from .plant import PlantConfig, load_plant, make_benchmark_plant, plant_to_text
from .signals import SignalSpec, generate, gust_one_cosine, filtered_noise, relative_error
from .snapshots import (
    Trim,
    build_snapshots,
    compute_trim,
    load_trajectory_csv,
    save_trajectory_csv,
)

ALGORITHM_CHOICES = ("dmdc", "admdc", "iorom", "bmd")
SCENARIO_CHOICES = ("sine_bank", "chirp", "prbs9")


def derive_seed(master, tag):
    """Stable 63-bit child seed from a master seed and a purpose tag."""
    digest = hashlib.sha256(f"{master}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class EvalConfig:
    scenarios: tuple = SCENARIO_CHOICES
    rho_start: float = 20.0
    rho_end: float = 50.0
    duration_s: float = 3.0
    amplitude: float = 1.0
    prbs_seed: int = 99
    derived_outputs: int = 3
    derived_nz: int = 14


@dataclass(frozen=True)
class MpcStudyConfig:
    horizon: int = 10
    weight_output: float = 13000.0
    weight_input: float = 10.0
    weight_input_rate: float = 0.1
    u_min: float = -3.0
    u_max: float = 3.0
    controlled_channel: int = 4
    n_z: tuple = (10, 14, 20, 30, 40)
    rho_start: float = 27.0
    rho_end: float = 50.0
    duration_s: float = 3.0
    gust_length_s: float = 0.5
    gust_amplitude: float = 1.0
    turbulence_amplitude: float = 0.0
    turbulence_bandwidth_hz: float = 4.0
    reference_scale: float = 1.0
    normalize_nz: int = 40


@dataclass(frozen=True)
class ExperimentConfig:
    plant: PlantConfig = field(default_factory=PlantConfig)
    seed: int = 0
    out: str = "runs/experiment"
    trim_u_hold: tuple = (1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    trim_settle_steps: int = 50000
    trim_tol: float = 1e-10
    training_n_s: int = 500
    training_amplitude: float = 1.0
    gramian_horizon: int = 0  # 0 = settle automatically
    gramian_method_o: str = "adjoint_impulse"
    algorithms: tuple = ("admdc", "iorom", "bmd")
    n_z_list: tuple = tuple(range(10, 42, 2))
    eval: EvalConfig = field(default_factory=EvalConfig)
    mpc: MpcStudyConfig = field(default_factory=MpcStudyConfig)
    config_sha: str = "builtin"

    def __post_init__(self):
        for alg in self.algorithms:
            if alg not in ALGORITHM_CHOICES:
                raise ConfigError(f"unknown algorithm {alg!r}; choices: {ALGORITHM_CHOICES}")
        for sc in self.eval.scenarios:
            if sc not in SCENARIO_CHOICES:
                raise ConfigError(f"unknown eval scenario {sc!r}; choices: {SCENARIO_CHOICES}")
        if len(self.n_z_list) == 0:
            raise ConfigError("fit.n_z must be a non-empty list")
        if len(self.mpc.n_z) == 0:
            raise ConfigError("mpc.n_z must be a non-empty list")
        if any(n > self.plant.n_x for n in tuple(self.n_z_list) + tuple(self.mpc.n_z)):
            raise ConfigError("n_z values must not exceed the plant order")
        missing = set(self.mpc.n_z) - set(self.n_z_list)
        if missing:
            raise ConfigError(
                f"mpc.n_z values {sorted(missing)} are not in fit.n_z; they would never be fitted"
            )
        if len(self.trim_u_hold) != self.plant.n_u:
            raise ConfigError(
                f"trim.u_hold has {len(self.trim_u_hold)} entries, plant.n_u is {self.plant.n_u}"
            )


def _section(table, name):
    value = table.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return value


def _pick(table, known, where):
    unknown = set(table) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{where}]")
    return {k: table[k] for k in table}


def parse_config(text, config_sha="adhoc"):
    """Parse and validate a TOML experiment description."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc

    plant_tab = _pick(
        _section(raw, "plant"),
        ("n_x", "n_u", "n_y", "rho_min", "rho_max", "n_g", "dt", "modal_damping_range", "core_damping_range", "core_angle_range",
         "nonnormal_coupling_strength", "decoy_fraction", "decoy_scale_range",
         "response_scale", "disturbance_gain_ratio", "gust_channel", "actuation_channel", "actuation_direct", "algebraic", "seed",
         "radius_drift", "freq_drift", "input_gain_drift"),
        "plant",
    )
    grid_keys = {k: plant_tab.pop(k) for k in ("rho_min", "rho_max", "n_g") if k in plant_tab}
    if grid_keys:
        if set(grid_keys) != {"rho_min", "rho_max", "n_g"}:
            raise ConfigError("specify all of plant.rho_min/rho_max/n_g or none")
        plant_tab["grid_rhos"] = tuple(
            np.linspace(grid_keys["rho_min"], grid_keys["rho_max"], int(grid_keys["n_g"]))
        )
    for key in ("modal_damping_range", "core_damping_range", "core_angle_range", "decoy_scale_range"):
        if key in plant_tab:
            plant_tab[key] = tuple(plant_tab[key])
    try:
        plant_cfg = PlantConfig(**plant_tab)
    except TypeError as exc:
        raise ConfigError(f"bad [plant] section: {exc}") from exc

    trim_tab = _pick(_section(raw, "trim"), ("u_hold", "settle_steps", "tol"), "trim")
    training_tab = _pick(_section(raw, "training"), ("n_s", "amplitude"), "training")
    gram_tab = _pick(_section(raw, "gramians"), ("horizon", "method_o"), "gramians")
    fit_tab = _pick(_section(raw, "fit"), ("algorithms", "n_z"), "fit")
    eval_tab = _pick(
        _section(raw, "eval"),
        ("scenarios", "rho_start", "rho_end", "duration_s", "amplitude", "prbs_seed",
         "derived_outputs", "derived_nz"),
        "eval",
    )
    mpc_tab = _pick(
        _section(raw, "mpc"),
        ("horizon", "weight_output", "weight_input", "weight_input_rate", "u_min", "u_max",
         "controlled_channel", "n_z", "rho_start", "rho_end", "duration_s", "gust_length_s",
         "gust_amplitude", "turbulence_amplitude", "turbulence_bandwidth_hz",
         "reference_scale", "normalize_nz"),
        "mpc",
    )
    top = _pick(
        {k: v for k, v in raw.items() if not isinstance(v, dict)}, ("seed", "out"), "top level"
    )

    for tupkey in ("scenarios",):
        if tupkey in eval_tab:
            eval_tab[tupkey] = tuple(eval_tab[tupkey])
    if "n_z" in mpc_tab:
        mpc_tab["n_z"] = tuple(int(v) for v in mpc_tab["n_z"])

    kwargs = dict(
        plant=plant_cfg,
        seed=int(top.get("seed", 0)),
        out=str(top.get("out", "runs/experiment")),
        eval=EvalConfig(**eval_tab),
        mpc=MpcStudyConfig(**mpc_tab),
        config_sha=config_sha,
    )
    if "u_hold" in trim_tab:
        kwargs["trim_u_hold"] = tuple(float(v) for v in trim_tab["u_hold"])
    if "settle_steps" in trim_tab:
        kwargs["trim_settle_steps"] = int(trim_tab["settle_steps"])
    if "tol" in trim_tab:
        kwargs["trim_tol"] = float(trim_tab["tol"])
    if "n_s" in training_tab:
        kwargs["training_n_s"] = int(training_tab["n_s"])
    if "amplitude" in training_tab:
        kwargs["training_amplitude"] = float(training_tab["amplitude"])
    if "horizon" in gram_tab:
        kwargs["gramian_horizon"] = int(gram_tab["horizon"])
    if "method_o" in gram_tab:
        kwargs["gramian_method_o"] = str(gram_tab["method_o"])
    if "algorithms" in fit_tab:
        kwargs["algorithms"] = tuple(fit_tab["algorithms"])
    if "n_z" in fit_tab:
        kwargs["n_z_list"] = tuple(int(v) for v in fit_tab["n_z"])
    return ExperimentConfig(**kwargs)


def load_config(path, out_override=None, seed_override=None):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    sha = hashlib.sha256(data + repr((out_override, seed_override)).encode()).hexdigest()
    cfg = parse_config(data.decode("utf-8"), config_sha=sha)
    if out_override is not None:
        cfg = replace(cfg, out=str(out_override))
    if seed_override is not None:
        cfg = replace(cfg, seed=int(seed_override))
    return cfg


# ---------------------------------------------------------------------------
# Workspace paths and provenance


class Workspace:
    def __init__(self, cfg):
        self.cfg = cfg
        self.root = cfg.out
        self.plant_file = os.path.join(self.root, "plant.txt")
        self.trims_file = os.path.join(self.root, "trims.txt")
        self.traj_dir = os.path.join(self.root, "traj")
        self.gram_dir = os.environ.get("ROM_CACHE_DIR") or os.path.join(self.root, "gram")
        self.rom_dir = os.path.join(self.root, "roms")
        self.eval_dir = os.path.join(self.root, "eval")
        self.mpc_dir = os.path.join(self.root, "mpc")

    def ensure(self, *dirs):
        for d in (self.root,) + dirs:
            os.makedirs(d, exist_ok=True)

    def traj_file(self, j):
        return os.path.join(self.traj_dir, f"traj_g{j:02d}.csv")

    def rom_file(self, alg, n_z):
        return os.path.join(self.rom_dir, f"rom_{alg}_nz{n_z:03d}.txt")

    def plant_hash(self):
        try:
            with open(self.plant_file, "rb") as fh:
                return hashlib.sha256(fh.read()).hexdigest()
        except OSError:
            raise MissingPrerequisiteError(
                f"missing {self.plant_file}; run `lpvrom generate` first"
            ) from None

    def provenance(self):
        return {
            "config_sha256": self.cfg.config_sha,
            "master_seed": str(self.cfg.seed),
            "plant_sha256": self.plant_hash(),
        }


def _write_csv(path, provenance, header, rows):
    """CSV with '#'-prefixed provenance lines before the header row."""
    buf = io.StringIO()
    for key in sorted(provenance):
        buf.write(f"# {key}: {provenance[key]}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([v if isinstance(v, str) else matio.fmt(v) for v in row])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def read_csv_table(path):
    """Read back a provenance-stamped CSV: ``(provenance, header, rows)``."""
    provenance = {}
    rows = []
    header = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                provenance[key.strip()] = val.strip()
            elif header is None:
                header = line.split(",")
            elif line:
                rows.append(line.split(","))
    return provenance, header, rows


# ---------------------------------------------------------------------------
# In-memory building blocks (shared by the CLI stages and the test suite)


def interp_rows(grid, rows, rho):
    """Linear interpolation of stacked per-grid vectors at scalar ``rho``."""
    grid = np.asarray(grid, dtype=float)
    if rho < grid[0] or rho > grid[-1]:
        raise RangeError(f"rho={rho} outside grid range [{grid[0]}, {grid[-1]}]")
    i = int(np.searchsorted(grid, rho, side="left"))
    if i < grid.size and grid[i] == rho:
        return rows[i]
    th = (rho - grid[i - 1]) / (grid[i] - grid[i - 1])
    return (1.0 - th) * rows[i - 1] + th * rows[i]


def interp_rows_many(grid, rows, rho_array):
    return np.column_stack([interp_rows(grid, rows, r) for r in np.asarray(rho_array).ravel()])


def compute_trims(plant, cfg):
    return [
        compute_trim(plant, rho, cfg.trim_settle_steps, u_hold=cfg.trim_u_hold, tol=cfg.trim_tol)
        for rho in plant.grid_rhos
    ]


def training_trajectory(plant, trim, rho, cfg, seed):
    spec = SignalSpec(
        kind="impulse_train",
        dt=plant.dt,
        n_s=cfg.training_n_s,
        amplitude=cfg.training_amplitude,
        seed=seed,
    )
    excitation = generate(spec, plant.n_u)
    u_abs = trim.u[:, None] + excitation
    return plant.simulate(u_abs, rho, x0=trim.x, trim=trim)


def training_snapshots(plant, trims, cfg, master_seed):
    """Impulse-train training recordings at every grid point."""
    snaps = []
    for j, rho in enumerate(plant.grid_rhos):
        seed = derive_seed(master_seed, f"train:{j}")
        traj = training_trajectory(plant, trims[j], rho, cfg, seed)
        snaps.append(build_snapshots(traj))
    return snaps


def gramians_for_grid(plant, cfg, cache_dir=None, plant_hash=None):
    """Empirical Gramian pairs for every grid point (disk-cached when a cache
    directory and plant hash are supplied)."""
    pairs = []
    for rho in plant.grid_rhos:
        fp = plant.at_rho(rho)
        horizon = cfg.gramian_horizon or default_horizon(fp)
        path = None
        if cache_dir is not None and plant_hash is not None:
            key = cache_key(plant_hash, rho, horizon, cfg.gramian_method_o)
            path = cache_file(cache_dir, key)
            if os.path.exists(path):
                pairs.append(load_pair(path))
                continue
        pair = gramian_pair(fp, horizon=horizon, method_o=cfg.gramian_method_o)
        if path is not None:
            store_pair(pair, path)
        pairs.append(pair)
    return pairs


def fit_grid_rom(plant, trims, snaps, pairs, algorithm, n_z, augment_outputs=None):
    """Fit one algorithm at one order over the whole grid.

    ``augment_outputs`` optionally appends extra output rows (derived
    quantities evaluated on the training states) to each regression target.
    """
    algebraic = plant.has_algebraic
    use_snaps = snaps
    use_trims = trims
    if augment_outputs is not None:
        Theta = np.atleast_2d(augment_outputs)
        use_snaps = [
            replace(s, Y0=np.vstack([s.Y0, Theta @ s.X0])) for s in snaps
        ]
        use_trims = [
            Trim(x=t.x, u=t.u, y=np.concatenate([t.y, Theta @ t.x])) for t in trims
        ]
    if algorithm == "bmd":
        proj = bmd_spaces(pairs, plant.grid_rhos, n_z)
        models = [
            bmd_fit(s, proj.V, proj.W[j], algebraic=algebraic)
            for j, s in enumerate(use_snaps)
        ]
        return build_grid_rom(models, use_trims, "bmd", plant.dt,
                              projections=[w.T for w in proj.W])
    if algorithm == "iorom":
        Q = build_shared_pod_basis(use_snaps, n_z)
        models = [iorom_fit(s, Q, algebraic=algebraic) for s in use_snaps]
        return build_grid_rom(models, use_trims, "iorom", plant.dt)
    if algorithm == "admdc":
        models = [admdc_fit(s, n_z) for s in use_snaps]
        return build_grid_rom(models, use_trims, "admdc", plant.dt)
    if algorithm == "dmdc":
        models = [dmdc_fit(s, n_z) for s in use_snaps]
        return build_grid_rom(models, use_trims, "dmdc", plant.dt)
    raise ConfigError(f"unknown algorithm {algorithm!r}")


def eval_scenario_inputs(plant, trims, kind, cfg_eval, dt, n_s):
    """Ramp-manoeuvre evaluation inputs: ``(u_abs, rho_traj)``."""
    rho = np.linspace(cfg_eval.rho_start, cfg_eval.rho_end, n_s + 1)
    v_mid = 0.5 * (cfg_eval.rho_start + cfg_eval.rho_end)
    spec = SignalSpec(
        kind=kind, dt=dt, n_s=n_s, amplitude=cfg_eval.amplitude, seed=cfg_eval.prbs_seed
    )
    excitation = generate(spec, plant.n_u, v_speed=v_mid)
    ubar = np.stack([t.u for t in trims])
    u_abs = interp_rows_many(plant.grid_rhos, ubar, rho) + excitation
    return u_abs, rho


def predict_output_deviation(plant, trims, grm, u_abs, rho, x0):
    """Deviation-output prediction of one GridROM on a manoeuvre.

    State-consistent models run the interpolated LPV recursion; the parallel
    scheme advances all grid models and reads outputs off the interpolated
    lifted state through the plant's known output map.
    """
    grid = plant.grid_rhos
    ubar = np.stack([t.u for t in trims])
    ybar = np.stack([t.y for t in trims])
    if grm.algorithm in ("iorom", "bmd", "exact"):
        u_dev = u_abs - interp_rows_many(grid, ubar, rho)
        z0 = grm.project_state(x0, rho[0])
        res = simulate_lpv(grm, u_dev, rho, z0=z0)
        return res.y_dev
    pred = admdc_lpv_predict(
        list(grm.models),
        [Trim(x=grm.xbar[j], u=grm.ubar[j], y=grm.ybar[j]) for j in range(grm.n_g)],
        u_abs,
        rho,
        x0,
        readout=lambda r: plant.matrices_at(r)[2],
    )
    return pred.outputs - interp_rows_many(grid, ybar, rho)


def truth_output_deviation(plant, trims, u_abs, rho, x0):
    traj = plant.simulate(u_abs, rho, x0=x0)
    ybar = np.stack([t.y for t in trims])
    return traj.outputs - interp_rows_many(plant.grid_rhos, ybar, rho), traj


def scenario_error(plant, trims, grm, kind, cfg_eval, n_s):
    u_abs, rho = eval_scenario_inputs(plant, trims, kind, cfg_eval, plant.dt, n_s)
    xbar = np.stack([t.x for t in trims])
    x0 = interp_rows(plant.grid_rhos, xbar, rho[0])
    truth, _ = truth_output_deviation(plant, trims, u_abs, rho, x0)
    pred = predict_output_deviation(plant, trims, grm, u_abs, rho, x0)
    return relative_error(pred[0], truth[0])


# ---------------------------------------------------------------------------
# Pipeline stages


def run_generate(cfg, echo=print):
    ws = Workspace(cfg)
    ws.ensure(ws.traj_dir, ws.gram_dir)
    plant = make_benchmark_plant(cfg.plant)
    plant_text = None
    if os.path.exists(ws.plant_file):
        with open(ws.plant_file, "r", encoding="utf-8") as fh:
            plant_text = fh.read()
    new_text = plant_to_text(plant)
    if plant_text == new_text:
        echo(f"generate: plant file up to date ({ws.plant_file})")
    else:
        with open(ws.plant_file, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(new_text)
        echo(f"generate: wrote {ws.plant_file}")
    plant_hash = ws.plant_hash()

    trims = compute_trims(plant, cfg)
    matio.save_blocks(
        ws.trims_file,
        {
            "kind": "trims",
            "n_g": plant.n_g,
            "settle_steps": cfg.trim_settle_steps,
            "tol": matio.fmt(cfg.trim_tol),
        },
        {
            "grid_rhos": plant.grid_rhos,
            "xbar": np.stack([t.x for t in trims]),
            "ubar": np.stack([t.u for t in trims]),
            "ybar": np.stack([t.y for t in trims]),
        },
    )
    echo(f"generate: wrote {ws.trims_file}")

    for j, rho in enumerate(plant.grid_rhos):
        path = ws.traj_file(j)
        if os.path.exists(path):
            continue
        seed = derive_seed(cfg.seed, f"train:{j}")
        traj = training_trajectory(plant, trims[j], rho, cfg, seed)
        save_trajectory_csv(traj, path)
    echo(f"generate: {plant.n_g} training trajectories in {ws.traj_dir}")

    gramians_for_grid(plant, cfg, cache_dir=ws.gram_dir, plant_hash=plant_hash)
    echo(f"generate: Gramian cache in {ws.gram_dir}")
    return ws


def load_workspace_inputs(cfg):
    ws = Workspace(cfg)
    if not os.path.exists(ws.plant_file) or not os.path.exists(ws.trims_file):
        raise MissingPrerequisiteError(
            f"missing plant/trims under {ws.root}; run `lpvrom generate` first"
        )
    plant = load_plant(ws.plant_file)
    manifest, blocks = matio.load_blocks(ws.trims_file)
    trims = [
        Trim(x=blocks["xbar"][j], u=blocks["ubar"][j], y=blocks["ybar"][j])
        for j in range(plant.n_g)
    ]
    snaps = []
    for j in range(plant.n_g):
        path = ws.traj_file(j)
        if not os.path.exists(path):
            raise MissingPrerequisiteError(
                f"missing {path}; run `lpvrom generate` first"
            )
        snaps.append(build_snapshots(load_trajectory_csv(path)))
    return ws, plant, trims, snaps


def _fit_cell(args):
    plant, trims, snaps, pairs, alg, n_z = args
    return alg, n_z, fit_grid_rom(plant, trims, snaps, pairs, alg, n_z)


def run_fit(cfg, jobs=1, echo=print):
    ws, plant, trims, snaps = load_workspace_inputs(cfg)
    ws.ensure(ws.rom_dir)
    pairs = gramians_for_grid(plant, cfg, cache_dir=ws.gram_dir, plant_hash=ws.plant_hash())
    prov = ws.provenance()
    cells = [
        (alg, n_z)
        for alg in cfg.algorithms
        for n_z in cfg.n_z_list
        if not os.path.exists(ws.rom_file(alg, n_z))
    ]
    work = [(plant, trims, snaps, pairs, alg, n_z) for alg, n_z in cells]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_cell, work))
    else:
        results = [_fit_cell(w) for w in work]
    for alg, n_z, grm in results:
        save_grid_rom(grm, ws.rom_file(alg, n_z), provenance=prov)
    echo(f"fit: {len(results)} new grid ROMs in {ws.rom_dir} "
         f"({len(cfg.algorithms) * len(cfg.n_z_list) - len(results)} cached)")
    return ws


def _load_rom(ws, alg, n_z):
    path = ws.rom_file(alg, n_z)
    if not os.path.exists(path):
        raise MissingPrerequisiteError(f"missing {path}; run `lpvrom fit` first")
    return load_grid_rom(path)


def derived_readout(plant_hash, n_derived, n_x):
    """Derived-quantity read-out rows, keyed deterministically to the plant."""
    seed = derive_seed(0, f"derived:{plant_hash}:{n_derived}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n_derived, n_x)) / np.sqrt(n_x)


def _eval_cell(args):
    plant, trims, grm, kind, cfg_eval, n_s = args
    return scenario_error(plant, trims, grm, kind, cfg_eval, n_s)


def run_eval(cfg, jobs=1, echo=print):
    ws, plant, trims, snaps = load_workspace_inputs(cfg)
    ws.ensure(ws.eval_dir)
    prov = ws.provenance()
    n_s = int(round(cfg.eval.duration_s / plant.dt))
    roms = {
        (alg, n_z): _load_rom(ws, alg, n_z)
        for alg in cfg.algorithms
        for n_z in cfg.n_z_list
    }

    cells = [
        (kind, n_z, alg)
        for kind in cfg.eval.scenarios
        for n_z in cfg.n_z_list
        for alg in cfg.algorithms
    ]
    work = [(plant, trims, roms[(alg, n_z)], kind, cfg.eval, n_s) for kind, n_z, alg in cells]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_eval_cell, work))
    else:
        values = [_eval_cell(w) for w in work]
    errors = dict(zip(cells, values))

    for kind in cfg.eval.scenarios:
        rows = []
        for n_z in cfg.n_z_list:
            rows.append([n_z] + [errors[(kind, n_z, alg)] for alg in cfg.algorithms])
        path = os.path.join(ws.eval_dir, f"error_vs_order_{kind}.csv")
        _write_csv(path, prov, ["n_z"] + list(cfg.algorithms), rows)
        echo(f"eval: wrote {path}")

    # derived-signal traces at one fixed order: quantities that are linear in
    # the full state but not fitted outputs (except for the balanced fit,
    # which carries them as extra output rows)
    n_der = cfg.eval.derived_outputs
    if n_der > 0:
        Theta = derived_readout(ws.plant_hash(), n_der, plant.n_x)
        kind = cfg.eval.scenarios[0]
        u_abs, rho = eval_scenario_inputs(plant, trims, kind, cfg.eval, plant.dt, n_s)
        xbar = np.stack([t.x for t in trims])
        x0 = interp_rows(plant.grid_rhos, xbar, rho[0])
        traj = plant.simulate(u_abs, rho, x0=x0)
        xbar_path = interp_rows_many(plant.grid_rhos, xbar, rho)
        truth_der = Theta @ (traj.states - xbar_path)
        n_z = cfg.eval.derived_nz
        pairs = gramians_for_grid(plant, cfg, cache_dir=ws.gram_dir, plant_hash=ws.plant_hash())
        header = ["t"] + [f"truth_{i}" for i in range(n_der)]
        columns = [np.arange(n_s + 1) * plant.dt] + [truth_der[i] for i in range(n_der)]
        err_rows = []
        for alg in cfg.algorithms:
            if alg == "bmd":
                grm = fit_grid_rom(plant, trims, snaps, pairs, "bmd", n_z,
                                   augment_outputs=Theta)
                ubar = np.stack([t.u for t in trims])
                u_dev = u_abs - interp_rows_many(plant.grid_rhos, ubar, rho)
                res = simulate_lpv(grm, u_dev, rho, z0=grm.project_state(x0, rho[0]))
                pred_der = res.y_dev[plant.n_y :, :]
            else:
                grm = roms[(alg, n_z)]
                if grm.algorithm in ("iorom", "exact"):
                    ubar = np.stack([t.u for t in trims])
                    u_dev = u_abs - interp_rows_many(plant.grid_rhos, ubar, rho)
                    res = simulate_lpv(grm, u_dev, rho, z0=grm.project_state(x0, rho[0]))
                    pred_der = Theta @ (res.x_abs - xbar_path)
                else:
                    pred = admdc_lpv_predict(
                        list(grm.models),
                        [Trim(x=grm.xbar[j], u=grm.ubar[j], y=grm.ybar[j])
                         for j in range(grm.n_g)],
                        u_abs, rho, x0,
                    )
                    pred_der = Theta @ (pred.states - xbar_path)
            header += [f"{alg}_{i}" for i in range(n_der)]
            columns += [pred_der[i] for i in range(n_der)]
            err_rows.append([alg, relative_error(pred_der, truth_der)])
        path = os.path.join(ws.eval_dir, f"derived_trace_{kind}_nz{n_z:03d}.csv")
        _write_csv(path, prov, header, [list(col) for col in zip(*columns)])
        echo(f"eval: wrote {path}")
        path = os.path.join(ws.eval_dir, "derived_errors.csv")
        _write_csv(path, prov, ["algorithm", "relative_error"], err_rows)
        echo(f"eval: wrote {path}")
    return ws


def mpc_scenario(plant, trims, cfg):
    """Ramp-and-hold manoeuvre with a gust at top speed: the closed-loop test.

    The reference steps the designated output away from trim by a multiple of
    the controlled channel's static gain, so the commanded moves are
    reachable within the input bounds.
    """
    m = cfg.mpc
    n_run = int(round(m.duration_s / plant.dt))
    ramp_end = int(0.6 * n_run)
    rho = np.concatenate([
        np.linspace(m.rho_start, m.rho_end, ramp_end),
        np.full(n_run + 1 - ramp_end, m.rho_end),
    ])
    grid = plant.grid_rhos
    ybar = np.stack([t.y for t in trims])

    # static gain of the controlled channel at the mid-range grid point
    fp = plant.at_rho(grid[len(grid) // 2])
    gain = np.linalg.solve(np.eye(fp.n_x) - fp.A, (fp.B + fp.R)[:, cfg.mpc.controlled_channel])
    g0 = float((fp.C @ gain)[0])

    # smooth step up to +1, later down to -0.5, in units of the reachable move
    t = np.arange(n_run) * plant.dt
    t1, t2 = 0.15 * m.duration_s, 0.55 * m.duration_s
    width = 0.08 * m.duration_s
    step1 = 0.5 * (1.0 + np.tanh((t - t1) / width))
    step2 = 0.5 * (1.0 + np.tanh((t - t2) / width))
    shape = step1 - 1.5 * step2
    level = m.reference_scale * abs(g0) * m.u_max * 0.4
    ref_dev = level * shape
    reference = interp_rows_many(grid, ybar, rho[:n_run]) + ref_dev[None, :]

    dist = np.zeros((plant.n_u, n_run + 1))
    gust = gust_one_cosine(m.gust_length_s, m.gust_amplitude, plant.dt)
    onset = min(int(0.7 * n_run), n_run + 1 - gust.size)
    dist[0, onset : onset + gust.size] += gust
    if m.turbulence_amplitude > 0:
        dist[0] += filtered_noise(
            n_run + 1, plant.dt, m.turbulence_bandwidth_hz,
            amplitude=m.turbulence_amplitude, seed=derive_seed(0, "turbulence"),
        )
    return Scenario(rho_traj=rho, reference=reference, disturbance=dist, label="ramp_gust")


def mpc_config(cfg):
    m = cfg.mpc
    return MpcConfig(
        horizon=m.horizon,
        weight_output=m.weight_output,
        weight_input=m.weight_input,
        weight_input_rate=m.weight_input_rate,
        u_min=m.u_min,
        u_max=m.u_max,
        controlled_channels=(m.controlled_channel,),
    )


def _mpc_cell(args):
    plant, grm, scenario, mcfg = args

    def readout(r):
        return plant.matrices_at(r)[2]

    return closed_loop_run(plant, grm, scenario, mcfg, readout=readout)


def run_mpc(cfg, jobs=1, echo=print):
    ws, plant, trims, snaps = load_workspace_inputs(cfg)
    ws.ensure(ws.mpc_dir)
    prov = ws.provenance()
    scenario = mpc_scenario(plant, trims, cfg)
    mcfg = mpc_config(cfg)

    runs = [("exact", plant.n_x, exact_grid_rom(plant, trims))]
    for alg in cfg.algorithms:
        for n_z in cfg.mpc.n_z:
            runs.append((alg, n_z, _load_rom(ws, alg, n_z)))

    work = [(plant, grm, scenario, mcfg) for _, _, grm in runs]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(_mpc_cell, work))
    else:
        values = [_mpc_cell(w) for w in work]

    results = {}
    for (alg, n_z, _), res in zip(runs, values):
        results[(alg, n_z)] = res
        rows = list(
            zip(res.t, res.rho, res.reference[0], res.y[0],
                res.u[cfg.mpc.controlled_channel], res.stage_costs)
        )
        path = os.path.join(ws.mpc_dir, f"trace_{alg}_nz{n_z:03d}.csv")
        _write_csv(path, prov, ["t", "rho", "r", "y", "u", "stage_cost"], rows)

    norm_key = ("bmd", cfg.mpc.normalize_nz)
    if norm_key not in results:
        norm_key = min(results, key=lambda k: results[k].cost)
    norm = results[norm_key].cost
    rows = []
    for (alg, n_z), res in results.items():
        rows.append([alg, n_z, res.cost, res.cost / norm,
                     res.max_condensation_gap, res.max_kkt_residual])
    path = os.path.join(ws.mpc_dir, "summary.csv")
    _write_csv(
        path, prov,
        ["algorithm", "n_z", "closed_loop_cost", "normalized_cost",
         "max_condensation_gap", "max_kkt_residual"],
        rows,
    )
    echo(f"mpc: wrote {path}")
    return ws


def run_report(cfg, echo=print):
    """Merge the eval and MPC summary tables into one flat CSV."""
    ws = Workspace(cfg)
    rows = []
    for kind in cfg.eval.scenarios:
        path = os.path.join(ws.eval_dir, f"error_vs_order_{kind}.csv")
        if not os.path.exists(path):
            raise MissingPrerequisiteError(f"missing {path}; run `lpvrom eval` first")
        _, header, table = read_csv_table(path)
        for row in table:
            for alg, val in zip(header[1:], row[1:]):
                rows.append([f"eval:{kind}", alg, row[0], val])
    mpc_path = os.path.join(ws.mpc_dir, "summary.csv")
    if os.path.exists(mpc_path):
        _, header, table = read_csv_table(mpc_path)
        for row in table:
            rows.append(["mpc:normalized_cost", row[0], row[1], row[3]])
    path = os.path.join(ws.root, "report.csv")
    _write_csv(path, ws.provenance(), ["study", "algorithm", "n_z", "value"], rows)
    echo(f"report: wrote {path}")
    return ws
