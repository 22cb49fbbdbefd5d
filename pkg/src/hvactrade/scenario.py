"""Scenario files, trace ingestion, synthetic traces, and validation.

A scenario is one YAML file: a time grid, a tariff, per-user parameter
blocks, and loop settings.  Trace vectors may be inline lists, CSV
references (`{file, column}`), or synthesized (`{synth: kind, ...}`).
Loading resolves everything to plain arrays and validates with
diagnostics that name the user and field.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .coordinator import AdmmConfig
from .errors import ScenarioError
from .model import Tariff, TimeGrid, UserParams

_KIND_CODES = {"solar": 1, "wind": 2, "load": 3, "weather": 4}

# relative household demand by hour of day, mean 1.0
_LOAD_SHAPE = np.array([
    0.55, 0.50, 0.48, 0.47, 0.50, 0.62, 0.85, 1.10, 1.05, 0.95, 0.90, 0.92,
    0.95, 0.93, 0.90, 0.95, 1.15, 1.45, 1.60, 1.55, 1.40, 1.20, 0.90, 0.68])
_LOAD_SHAPE = _LOAD_SHAPE / _LOAD_SHAPE.mean()


def synth_traces(seed: int, grid: TimeGrid, profile: str,
                 user_id: int = 0, **knobs) -> np.ndarray:
    """Deterministic synthetic trace of one kind over the grid.

    Kinds: solar (zero outside 06:00-18:00), wind (smoothed, clipped),
    load (daily demand shape around `base`), weather (diurnal sinusoid
    around `mean`, hottest mid-afternoon).
    """
    if profile not in _KIND_CODES:
        raise ScenarioError(f"unknown synth profile {profile!r}; "
                            f"expected one of {sorted(_KIND_CODES)}")
    rng = np.random.default_rng(
        np.random.SeedSequence((int(seed), int(user_id), _KIND_CODES[profile])))
    h = grid.hours()
    n = grid.horizon_len
    if profile == "solar":
        scale = float(knobs.pop("scale", 3.0))
        shape = np.where((h >= 6.0) & (h < 18.0),
                         np.sin(np.pi * (h - 6.0) / 12.0), 0.0)
        out = np.clip(scale * shape * (1.0 + 0.10 * rng.standard_normal(n)),
                      0.0, None)
        out[shape <= 0.0] = 0.0
    elif profile == "wind":
        scale = float(knobs.pop("scale", 2.0))
        x = 0.0
        vals = np.empty(n)
        for t in range(n):
            x = 0.7 * x + 0.3 * rng.standard_normal()
            vals[t] = x
        out = np.clip(scale * (0.4 + vals), 0.0, scale)
    elif profile == "load":
        base = float(knobs.pop("base", 1.0))
        shape = _LOAD_SHAPE[np.floor(h).astype(int) % 24]
        out = np.clip(base * shape * (1.0 + 0.10 * rng.standard_normal(n)),
                      0.0, None)
    else:
        mean = float(knobs.pop("mean", 30.0))
        swing = float(knobs.pop("swing", 5.0))
        sigma = float(knobs.pop("sigma", 0.5))
        out = mean + swing * np.sin(2.0 * np.pi * (h - 9.0) / 24.0) \
            + sigma * rng.standard_normal(n)
    if knobs:
        raise ScenarioError(f"synth profile {profile!r} does not take "
                            f"{sorted(knobs)}")
    return out


@dataclass
class ScenarioConfig:
    """One fully resolved scenario: grid, tariff, users, loop settings."""

    name: str
    grid: TimeGrid
    tariff: Tariff
    users: list[UserParams]
    admm: AdmmConfig
    seed: int = 0
    path: Path | None = None

    def __post_init__(self):
        if not self.users:
            raise ScenarioError("scenario has no users")
        ids = [u.id for u in self.users]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate user ids: {sorted(ids)}")
        self.users = sorted(self.users, key=lambda u: u.id)


class _TraceReader:
    """Resolves a trace field: inline list, CSV reference, or synth spec."""

    def __init__(self, base_dir: Path, seed: int, grid: TimeGrid):
        self.base_dir = base_dir
        self.seed = seed
        self.grid = grid
        self._csv_cache: dict[Path, dict[str, list[float]]] = {}

    def _read_csv(self, path: Path) -> dict[str, list[float]]:
        if path not in self._csv_cache:
            if not path.exists():
                raise ScenarioError(f"trace file not found: {path}")
            with open(path, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames is None:
                    raise ScenarioError(f"trace file {path} has no header row")
                cols = {name: [] for name in reader.fieldnames}
                for row_no, row in enumerate(reader, start=2):
                    for name in cols:
                        raw = row.get(name)
                        if raw is None or raw == "":
                            raise ScenarioError(
                                f"{path}:{row_no}: missing value in column "
                                f"{name!r}")
                        try:
                            cols[name].append(float(raw))
                        except ValueError:
                            raise ScenarioError(
                                f"{path}:{row_no}: {raw!r} in column "
                                f"{name!r} is not a number") from None
            self._csv_cache[path] = cols
        return self._csv_cache[path]

    def resolve(self, spec, where: str, user_id: int = 0) -> np.ndarray:
        h = self.grid.horizon_len
        if isinstance(spec, (int, float)):
            return np.full(h, float(spec))
        if isinstance(spec, (list, tuple)):
            try:
                arr = np.asarray(spec, dtype=np.float64)
            except (TypeError, ValueError):
                raise ScenarioError(f"{where}: inline trace must be numeric") from None
            if arr.ndim != 1:
                raise ScenarioError(f"{where}: inline trace must be flat")
            return arr
        if isinstance(spec, dict) and "file" in spec:
            extra = set(spec) - {"file", "column"}
            if extra:
                raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")
            if "column" not in spec:
                raise ScenarioError(f"{where}: file reference needs a column")
            path = self.base_dir / str(spec["file"])
            cols = self._read_csv(path)
            column = str(spec["column"])
            if column not in cols:
                raise ScenarioError(
                    f"{where}: {path} has no column {column!r} "
                    f"(found {sorted(cols)})")
            vals = cols[column]
            if len(vals) != h:
                raise ScenarioError(
                    f"{where}: {path} column {column!r} has {len(vals)} rows, "
                    f"expected {h}")
            return np.asarray(vals, dtype=np.float64)
        if isinstance(spec, dict) and "synth" in spec:
            knobs = {k: v for k, v in spec.items() if k != "synth"}
            return synth_traces(self.seed, self.grid, str(spec["synth"]),
                                user_id=user_id, **knobs)
        raise ScenarioError(
            f"{where}: expected a number, a list, {{file, column}}, or "
            f"{{synth: kind}}, got {type(spec).__name__}")


def _number(block: dict, key: str, where: str, default=None) -> float:
    if key not in block:
        if default is None:
            raise ScenarioError(f"{where}: missing field {key!r}")
        return float(default)
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where}: field {key!r} must be a number")
    return float(v)


_USER_KEYS = {"id", "thermal_capacitance", "thermal_resistance",
              "hvac_efficiency", "comfort_weight", "temp_ref", "temp_min",
              "temp_max", "grid_cap", "hvac_cap", "temp_initial",
              "renewable_avail", "inflexible_load", "outdoor_temp"}


def _build_user(block: dict, reader: _TraceReader) -> UserParams:
    if not isinstance(block, dict):
        raise ScenarioError(f"user entry must be a mapping, got "
                            f"{type(block).__name__}")
    if "id" not in block:
        raise ScenarioError("user entry missing field 'id'")
    uid = block["id"]
    if isinstance(uid, bool) or not isinstance(uid, int) or uid < 0:
        raise ScenarioError(f"user id {uid!r} must be a nonnegative integer")
    where = f"user {uid}"
    extra = set(block) - _USER_KEYS
    if extra:
        raise ScenarioError(f"{where}: unknown fields {sorted(extra)}")
    traces = {}
    for key in ("renewable_avail", "inflexible_load", "outdoor_temp"):
        if key not in block:
            raise ScenarioError(f"{where}: missing field {key!r}")
        traces[key] = reader.resolve(block[key], f"{where}: {key}", uid)
    try:
        params = UserParams(
            id=uid,
            thermal_capacitance=_number(block, "thermal_capacitance", where),
            thermal_resistance=_number(block, "thermal_resistance", where),
            hvac_efficiency=_number(block, "hvac_efficiency", where),
            comfort_weight=_number(block, "comfort_weight", where),
            temp_ref=_number(block, "temp_ref", where),
            temp_min=_number(block, "temp_min", where),
            temp_max=_number(block, "temp_max", where),
            grid_cap=_number(block, "grid_cap", where),
            hvac_cap=_number(block, "hvac_cap", where, default=10.0),
            temp_initial=(None if "temp_initial" not in block
                          else _number(block, "temp_initial", where)),
            **traces)
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    if params.horizon != reader.grid.horizon_len:
        raise ScenarioError(
            f"{where}: traces cover {params.horizon} slots, grid has "
            f"{reader.grid.horizon_len}")
    return params


def load_scenario(path, seed=None) -> ScenarioConfig:
    """Parse and fully validate a scenario file.

    `seed` overrides the file's seed before any synthetic traces are
    drawn.  Raises ScenarioError carrying one finding per problem
    discovered; user blocks are checked independently so one bad user
    does not mask another.
    """
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioError(f"{path}: parse error{loc}: {exc}") from exc
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: top level must be a mapping")

    known = {"name", "seed", "grid", "tariff", "admm", "users"}
    extra = set(raw) - known
    if extra:
        raise ScenarioError(f"{path}: unknown top-level keys {sorted(extra)}")

    gblock = raw.get("grid")
    if not isinstance(gblock, dict):
        raise ScenarioError(f"{path}: missing or malformed 'grid' block")
    try:
        grid = TimeGrid(horizon_len=int(_number(gblock, "horizon", "grid")),
                        slot_hours=_number(gblock, "slot_hours", "grid",
                                           default=1.0))
    except ValueError as exc:
        raise ScenarioError(f"grid: {exc}") from exc

    if seed is None:
        seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ScenarioError("seed must be an integer")

    reader = _TraceReader(path.parent, seed, grid)

    tblock = raw.get("tariff")
    if not isinstance(tblock, dict):
        raise ScenarioError(f"{path}: missing or malformed 'tariff' block")
    extra = set(tblock) - {"energy_price", "peak_price", "trade_price"}
    if extra:
        raise ScenarioError(f"tariff: unknown fields {sorted(extra)}")
    energy = _number(tblock, "energy_price", "tariff")
    peak = _number(tblock, "peak_price", "tariff", default=0.0)
    if "trade_price" in tblock:
        trade = reader.resolve(tblock["trade_price"], "tariff: trade_price")
    else:
        trade = np.full(grid.horizon_len, 0.5 * energy)
    if trade.shape[0] != grid.horizon_len:
        raise ScenarioError(
            f"tariff: trade_price covers {trade.shape[0]} slots, grid has "
            f"{grid.horizon_len}")
    try:
        tariff = Tariff(energy_price=energy, peak_price=peak, trade_price=trade)
    except ValueError as exc:
        raise ScenarioError(f"tariff: {exc}") from exc

    ablock = raw.get("admm", {})
    if not isinstance(ablock, dict):
        raise ScenarioError(f"{path}: 'admm' block must be a mapping")
    extra = set(ablock) - {"rho_mode", "rho0", "tolerance", "norm",
                           "max_iter", "barrier_timeout", "solver_tol"}
    if extra:
        raise ScenarioError(f"admm: unknown fields {sorted(extra)}")
    try:
        admm = AdmmConfig(
            rho_mode=str(ablock.get("rho_mode", "decaying")),
            rho0=_number(ablock, "rho0", "admm", default=1.0),
            tolerance=_number(ablock, "tolerance", "admm", default=1e-6),
            norm=str(ablock.get("norm", "l1")),
            max_iter=int(_number(ablock, "max_iter", "admm", default=2000)),
            barrier_timeout=_number(ablock, "barrier_timeout", "admm",
                                    default=60.0),
            solver_tol=_number(ablock, "solver_tol", "admm", default=1e-8))
    except ValueError as exc:
        raise ScenarioError(f"admm: {exc}") from exc

    ublocks = raw.get("users")
    if not isinstance(ublocks, list) or not ublocks:
        raise ScenarioError(f"{path}: 'users' must be a nonempty list")
    users = []
    findings = []
    for pos, block in enumerate(ublocks):
        try:
            users.append(_build_user(block, reader))
        except ScenarioError as exc:
            findings.extend(f"users[{pos}]: {f}" for f in exc.findings)
    if findings:
        raise ScenarioError(
            f"{path}: {len(findings)} problem(s): " + "; ".join(findings),
            findings=findings)

    name = str(raw.get("name", path.stem))
    return ScenarioConfig(name=name, grid=grid, tariff=tariff, users=users,
                          admm=admm, seed=seed, path=path)


def validate_scenario(config: ScenarioConfig) -> list[str]:
    """Cross-checks beyond per-object construction; returns findings."""
    findings = []
    h = config.grid.horizon_len
    if config.tariff.trade_price.shape[0] != h:
        findings.append(f"trade_price covers "
                        f"{config.tariff.trade_price.shape[0]} slots, "
                        f"grid has {h}")
    for u in config.users:
        if u.horizon != h:
            findings.append(f"user {u.id}: traces cover {u.horizon} slots, "
                            f"grid has {h}")
        if not (u.temp_min <= u.temp_initial <= u.temp_max):
            findings.append(f"user {u.id}: temp_initial {u.temp_initial} "
                            f"outside [{u.temp_min}, {u.temp_max}]")
        if not np.all(np.isfinite(u.outdoor_temp)):
            findings.append(f"user {u.id}: outdoor_temp has non-finite values")
    return findings


def build_synth_scenario(n_users: int, horizon: int, seed: int = 0,
                         slot_hours: float = 1.0,
                         name: str = "synthetic") -> ScenarioConfig:
    """Assemble a feasible heterogeneous scenario from synthetic traces.

    Odd user ids get solar, ids divisible by four get wind, the rest buy
    everything.  Power caps are sized so each user can hold its starting
    temperature through the whole horizon, which guarantees a feasible
    schedule regardless of the drawn traces.
    """
    if n_users < 1:
        raise ScenarioError("n_users must be at least 1")
    if horizon < 1:
        raise ScenarioError("horizon must be at least 1")
    grid = TimeGrid(horizon_len=int(horizon), slot_hours=float(slot_hours))
    tariff = Tariff(energy_price=0.25, peak_price=0.8,
                    trade_price=np.full(grid.horizon_len, 0.125))
    admm = AdmmConfig(rho_mode="fixed", rho0=1.0, tolerance=1e-6,
                      max_iter=2000)
    users = []
    for uid in range(1, n_users + 1):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), uid, 5)))
        draws = rng.uniform(size=8)
        cap_c = round(2.5 + 1.2 * draws[0], 3)
        res = round(1.1 + 0.5 * draws[1], 3)
        eff = round(2.0 + 1.0 * draws[2], 3)
        beta = round(0.05 + 0.25 * draws[3], 3)
        t_min = round(19.5 + draws[4], 2)
        t_max = round(t_min + 3.5 + draws[5], 2)
        t_ref = round(t_min + (t_max - t_min) * (0.3 + 0.4 * draws[6]), 2)
        if uid % 2 == 1:
            renewable = synth_traces(seed, grid, "solar", user_id=uid,
                                     scale=round(2.5 + 2.0 * draws[7], 3))
        elif uid % 4 == 0:
            renewable = synth_traces(seed, grid, "wind", user_id=uid,
                                     scale=round(1.5 + 1.5 * draws[7], 3))
        else:
            renewable = np.zeros(grid.horizon_len)
        load = synth_traces(seed, grid, "load", user_id=uid,
                            base=round(0.8 + 0.7 * draws[0], 3))
        outdoor = synth_traces(seed, grid, "weather", user_id=uid,
                               mean=30.0, swing=4.0, sigma=0.4)
        t_start = round((t_min + t_max) / 2.0, 2)
        hold = np.maximum(outdoor - t_start, 0.0) / (eff * res)
        hvac_cap = round(float(hold.max()) + 0.75, 3)
        grid_cap = round(float((hold + load).max()) + 0.75, 3)
        users.append(UserParams(
            id=uid, thermal_capacitance=cap_c, thermal_resistance=res,
            hvac_efficiency=eff, comfort_weight=beta, temp_ref=t_ref,
            temp_min=t_min, temp_max=t_max, grid_cap=grid_cap,
            hvac_cap=hvac_cap, temp_initial=t_start,
            renewable_avail=renewable, inflexible_load=load,
            outdoor_temp=outdoor))
    return ScenarioConfig(name=name, grid=grid, tariff=tariff, users=users,
                          admm=admm, seed=int(seed))


def save_scenario(config: ScenarioConfig, path) -> Path:
    """Write a config back to YAML with all traces materialized inline."""
    path = Path(path)
    doc = {
        "name": config.name,
        "seed": int(config.seed),
        "grid": {"horizon": int(config.grid.horizon_len),
                 "slot_hours": float(config.grid.slot_hours)},
        "tariff": {"energy_price": float(config.tariff.energy_price),
                   "peak_price": float(config.tariff.peak_price),
                   "trade_price": [float(v) for v in config.tariff.trade_price]},
        "admm": {"rho_mode": config.admm.rho_mode,
                 "rho0": float(config.admm.rho0),
                 "tolerance": float(config.admm.tolerance),
                 "norm": config.admm.norm,
                 "max_iter": int(config.admm.max_iter),
                 "barrier_timeout": float(config.admm.barrier_timeout),
                 "solver_tol": float(config.admm.solver_tol)},
        "users": [
            {"id": int(u.id),
             "thermal_capacitance": float(u.thermal_capacitance),
             "thermal_resistance": float(u.thermal_resistance),
             "hvac_efficiency": float(u.hvac_efficiency),
             "comfort_weight": float(u.comfort_weight),
             "temp_ref": float(u.temp_ref),
             "temp_min": float(u.temp_min),
             "temp_max": float(u.temp_max),
             "grid_cap": float(u.grid_cap),
             "hvac_cap": float(u.hvac_cap),
             "temp_initial": float(u.temp_initial),
             "renewable_avail": [float(v) for v in u.renewable_avail],
             "inflexible_load": [float(v) for v in u.inflexible_load],
             "outdoor_temp": [float(v) for v in u.outdoor_temp]}
            for u in config.users],
    }
    try:
        with open(path, "w") as fh:
            yaml.safe_dump(doc, fh, sort_keys=True, default_flow_style=None)
    except OSError as exc:
        raise ScenarioError(f"cannot write {path}: {exc}") from exc
    return path
