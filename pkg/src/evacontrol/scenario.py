"""Scenario configuration: YAML files, validation, presets and problem assembly.

A scenario file has the sections ``geometry``, ``model``, ``time``,
``agents``, ``initial_density``, ``controls``, ``observation``,
``optimizer`` and ``output``. Only ``geometry``, ``time`` and
``initial_density`` are required; unknown keys are rejected.
"""

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .adjoint import ReducedProblem
from .forward import ControlGrid, Discretization
from .mesh import Exit, MeshError, RoomSpec, compute_geometry, generate_room, project_p0
from .model import BumpKernel, ModelParams, MorseKernel


class ConfigError(ValueError):
    """Invalid scenario configuration; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


# --------------------------------------------------------------------------
# sections

@dataclass
class GeometryConfig:
    width: float = 0.0
    height: float = 0.0
    target_length: float = 1.0
    exits: List[dict] = field(default_factory=list)
    walls: List[list] = field(default_factory=list)
    mesh_file: Optional[str] = None


@dataclass
class TimeConfig:
    T: float = 1.0
    N: int = 1


@dataclass
class Bell:
    center: List[float]
    variance: float
    amplitude: float


@dataclass
class ControlConfig:
    u: List[list] = field(default_factory=list)
    c: List[float] = field(default_factory=list)
    file: Optional[str] = None


@dataclass
class OptimizerConfig:
    max_iter: int = 50
    tol: float = 1e-3
    d_param: float = 1e-4


@dataclass
class OutputConfig:
    snapshot_stride: int = 10
    vtk: bool = True


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    model: ModelParams = field(default_factory=ModelParams)
    time: TimeConfig = field(default_factory=TimeConfig)
    agents: List[list] = field(default_factory=list)
    initial_density: List[Bell] = field(default_factory=list)
    controls: ControlConfig = field(default_factory=ControlConfig)
    observation: List[list] = field(default_factory=list)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    allow_cfl_violation: bool = False

    @property
    def n_agents(self):
        return len(self.agents)


# --------------------------------------------------------------------------
# dict conversion

_REQUIRED = ("geometry", "time", "initial_density")
_MODEL_KEYS = {f.name for f in fields(ModelParams)} - {"kernel"} | {"delta3", "kernel"}


def _check_keys(data, allowed, where):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", where)
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}; allowed: {sorted(allowed)}", where)


def _num(value, where, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", where)
    if kind is int:
        if int(value) != value:
            raise ConfigError(f"expected an integer, got {value!r}", where)
        return int(value)
    return float(value)


def _point(value, where):
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigError(f"expected [x, y], got {value!r}", where)
    return [_num(v, where) for v in value]


def _kernel_from(data):
    _check_keys(data, {"type", "a", "r_a", "R"}, "model.kernel")
    kind = data.get("type", "morse")
    try:
        if kind == "morse":
            if "R" in data:
                raise ConfigError("R applies to the bump kernel only", "model.kernel")
            return MorseKernel(a=_num(data.get("a", 1.5), "model.kernel.a"),
                               r_a=_num(data.get("r_a", 1.0), "model.kernel.r_a"))
        if kind == "bump":
            if "a" in data or "r_a" in data:
                raise ConfigError("a and r_a apply to the Morse kernel only", "model.kernel")
            return BumpKernel(R=_num(data.get("R", 2.0), "model.kernel.R"))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), "model.kernel") from exc
    raise ConfigError(f"unknown kernel type {kind!r} (expected morse or bump)", "model.kernel.type")


def _kernel_to(kernel):
    if isinstance(kernel, BumpKernel):
        return {"type": "bump", "R": kernel.R}
    return {"type": "morse", "a": kernel.a, "r_a": kernel.r_a}


def config_from_dict(data) -> ScenarioConfig:
    """Validate a parsed mapping and build a :class:`ScenarioConfig`."""
    if data is None:
        raise ConfigError(f"empty configuration; required sections: {list(_REQUIRED)}")
    _check_keys(data, {f.name for f in fields(ScenarioConfig)}, "<root>")
    missing = [k for k in _REQUIRED if k not in data]
    if missing:
        raise ConfigError(f"missing required section(s) {missing}")
    cfg = ScenarioConfig(name=str(data.get("name", "scenario")))

    g = data["geometry"]
    _check_keys(g, {f.name for f in fields(GeometryConfig)}, "geometry")
    if g.get("mesh_file"):
        cfg.geometry = GeometryConfig(mesh_file=str(g["mesh_file"]))
    else:
        for key in ("width", "height"):
            if key not in g:
                raise ConfigError("required", f"geometry.{key}")
        exits = []
        for k, e in enumerate(g.get("exits", [])):
            _check_keys(e, {"side", "start", "end"}, f"geometry.exits[{k}]")
            exits.append({"side": str(e.get("side")), "start": _num(e.get("start"), f"geometry.exits[{k}].start"),
                          "end": _num(e.get("end"), f"geometry.exits[{k}].end")})
        walls = []
        for k, w in enumerate(g.get("walls", [])):
            if not isinstance(w, (list, tuple)) or len(w) != 4:
                raise ConfigError("expected [x0, y0, x1, y1]", f"geometry.walls[{k}]")
            walls.append([_num(v, f"geometry.walls[{k}]") for v in w])
        cfg.geometry = GeometryConfig(width=_num(g["width"], "geometry.width"),
                                      height=_num(g["height"], "geometry.height"),
                                      target_length=_num(g.get("target_length", 1.0), "geometry.target_length"),
                                      exits=exits, walls=walls)

    m = data.get("model", {}) or {}
    _check_keys(m, _MODEL_KEYS, "model")
    kw = {k: _num(v, f"model.{k}") for k, v in m.items() if k not in ("kernel", "delta3")}
    if "delta3" in m:
        if "h_smooth" in m and _num(m["delta3"], "model.delta3") != kw["h_smooth"]:
            raise ConfigError("delta3 and h_smooth are aliases and must agree", "model.delta3")
        kw["h_smooth"] = _num(m["delta3"], "model.delta3")
    if "kernel" in m:
        kw["kernel"] = _kernel_from(m["kernel"] or {})
    try:
        cfg.model = ModelParams(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc), "model") from exc

    t = data["time"]
    _check_keys(t, {"T", "N"}, "time")
    for key in ("T", "N"):
        if key not in t:
            raise ConfigError("required", f"time.{key}")
    cfg.time = TimeConfig(T=_num(t["T"], "time.T"), N=_num(t["N"], "time.N", int))
    if cfg.time.N < 1:
        raise ConfigError("must be at least 1", "time.N")
    if not cfg.time.T > 0:
        raise ConfigError("must be positive", "time.T")

    agents = data.get("agents", []) or []
    if not isinstance(agents, list):
        raise ConfigError("expected a list of [x, y] positions", "agents")
    cfg.agents = [_point(a, f"agents[{k}]") for k, a in enumerate(agents)]

    bells = data["initial_density"]
    if not isinstance(bells, list):
        raise ConfigError("expected a list of bells", "initial_density")
    for k, b in enumerate(bells):
        where = f"initial_density[{k}]"
        _check_keys(b, {"center", "variance", "amplitude"}, where)
        for key in ("center", "variance", "amplitude"):
            if key not in b:
                raise ConfigError("required", f"{where}.{key}")
        bell = Bell(_point(b["center"], f"{where}.center"), _num(b["variance"], f"{where}.variance"),
                    _num(b["amplitude"], f"{where}.amplitude"))
        if not bell.variance > 0:
            raise ConfigError("must be positive", f"{where}.variance")
        if not 0 <= bell.amplitude <= 1:
            raise ConfigError("must lie in [0, 1]", f"{where}.amplitude")
        cfg.initial_density.append(bell)

    c = data.get("controls", {}) or {}
    _check_keys(c, {"u", "c", "file"}, "controls")
    M = cfg.n_agents
    u = c.get("u", [[0.0, 0.0]] * M)
    ci = c.get("c", [0.0] * M)
    if len(u) != M:
        raise ConfigError(f"expected {M} directions, got {len(u)}", "controls.u")
    if not isinstance(ci, list) or len(ci) != M:
        raise ConfigError(f"expected {M} intensities", "controls.c")
    cfg.controls = ControlConfig(u=[_point(v, f"controls.u[{k}]") for k, v in enumerate(u)],
                                 c=[_num(v, f"controls.c[{k}]") for k, v in enumerate(ci)],
                                 file=str(c["file"]) if c.get("file") else None)

    obs = data.get("observation", []) or []
    cfg.observation = []
    for k, r in enumerate(obs):
        if not isinstance(r, (list, tuple)) or len(r) != 4:
            raise ConfigError("expected [x0, y0, x1, y1]", f"observation[{k}]")
        cfg.observation.append([_num(v, f"observation[{k}]") for v in r])

    o = data.get("optimizer", {}) or {}
    _check_keys(o, {f.name for f in fields(OptimizerConfig)}, "optimizer")
    cfg.optimizer = OptimizerConfig(max_iter=_num(o.get("max_iter", 50), "optimizer.max_iter", int),
                                    tol=_num(o.get("tol", 1e-3), "optimizer.tol"),
                                    d_param=_num(o.get("d_param", 1e-4), "optimizer.d_param"))
    if not 0 < cfg.optimizer.d_param < 1:
        raise ConfigError("must lie in (0, 1)", "optimizer.d_param")

    out = data.get("output", {}) or {}
    _check_keys(out, {f.name for f in fields(OutputConfig)}, "output")
    cfg.output = OutputConfig(snapshot_stride=_num(out.get("snapshot_stride", 10), "output.snapshot_stride", int),
                              vtk=bool(out.get("vtk", True)))
    if cfg.output.snapshot_stride < 1:
        raise ConfigError("must be at least 1", "output.snapshot_stride")
    cfg.allow_cfl_violation = bool(data.get("allow_cfl_violation", False))
    return cfg


def config_to_dict(cfg: ScenarioConfig) -> dict:
    model = {f.name: getattr(cfg.model, f.name) for f in fields(ModelParams) if f.name != "kernel"}
    model["kernel"] = _kernel_to(cfg.model.kernel)
    geometry = asdict(cfg.geometry)
    if geometry["mesh_file"] is None:
        del geometry["mesh_file"]
    else:
        geometry = {"mesh_file": geometry["mesh_file"]}
    controls = {"u": cfg.controls.u, "c": cfg.controls.c}
    if cfg.controls.file:
        controls["file"] = cfg.controls.file
    return {
        "name": cfg.name,
        "geometry": geometry,
        "model": model,
        "time": asdict(cfg.time),
        "agents": [list(a) for a in cfg.agents],
        "initial_density": [asdict(b) for b in cfg.initial_density],
        "controls": controls,
        "observation": [list(r) for r in cfg.observation],
        "optimizer": asdict(cfg.optimizer),
        "output": asdict(cfg.output),
        "allow_cfl_violation": cfg.allow_cfl_violation,
    }


def dump_config(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def parse_config(text: str, source="<string>") -> ScenarioConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark is not None else source
        raise ConfigError(f"parse error at {where}: {getattr(exc, 'problem', exc)}") from exc
    return config_from_dict(data)


def load_config(path_or_preset) -> ScenarioConfig:
    """Load a YAML scenario file or a preset name (``example1``, ``example2``, ``example3``)."""
    name = str(path_or_preset)
    if name in PRESETS:
        return preset(name)
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"no such file or preset: {name}")
    cfg = parse_config(path.read_text(), source=str(path))
    # relative paths inside the config resolve against its directory
    if cfg.geometry.mesh_file and not Path(cfg.geometry.mesh_file).is_absolute():
        cfg.geometry.mesh_file = str(path.parent / cfg.geometry.mesh_file)
    if cfg.controls.file and not Path(cfg.controls.file).is_absolute():
        cfg.controls.file = str(path.parent / cfg.controls.file)
    return cfg


# --------------------------------------------------------------------------
# presets
#
# Model parameters are the reference experiment values; room layouts, bells,
# agent positions and kernel parameters are reconstructions. Mesh sizes are
# chosen so that tau = T / N satisfies the time step bound; example2 uses a
# finer mesh and N = 480 because its discrete Eikonal problem has no
# solution on the coarser admissible meshes.

_REFERENCE_MODEL = {"alpha1": 5e-2, "alpha2": 5e-2, "gamma": 10.0, "zeta": 1e-2, "mu": 5e-2, "eps": 1e-5,
                "delta1": 0.2, "delta2": 0.1, "delta3": 1e-2, "delta4": 0.1,
                "kernel": {"type": "morse", "a": 1.5, "r_a": 1.0}}


def _bells(centers, variance, amplitude):
    return [{"center": list(c), "variance": variance, "amplitude": amplitude} for c in centers]


PRESETS = {
    "example1": {
        "name": "example1",
        "geometry": {
            "width": 24.0, "height": 12.0, "target_length": 0.95,
            "walls": [[14.0, 0.0, 15.5, 4.5], [14.0, 7.5, 15.5, 12.0]],
            "exits": [{"side": "south", "start": 6.0, "end": 7.8},
                      {"side": "north", "start": 6.0, "end": 7.8},
                      {"side": "east", "start": 0.0, "end": 12.0}],
        },
        "model": _REFERENCE_MODEL,
        "time": {"T": 9.0, "N": 300},
        "agents": [[9.0, 5.0], [9.0, 6.0], [9.0, 7.0]],
        "initial_density": _bells([(3.0, 3.0), (3.0, 9.0), (6.5, 6.0), (10.0, 3.0), (10.0, 9.0), (11.5, 6.0)],
                                  1.0, 0.6),
        "controls": {"u": [[1.0, 0.0]] * 3, "c": [0.5] * 3},
        "observation": [[0.0, 0.0, 14.0, 12.0]],
    },
    "example2": {
        "name": "example2",
        "geometry": {
            "width": 20.0, "height": 12.0, "target_length": 0.8,
            "exits": [{"side": "west", "start": 5.4, "end": 6.6},
                      {"side": "south", "start": 10.0, "end": 14.0},
                      {"side": "north", "start": 10.0, "end": 14.0}],
        },
        "model": _REFERENCE_MODEL,
        "time": {"T": 12.0, "N": 480},
        "agents": [[6.0, 5.0], [6.0, 7.0]],
        "initial_density": _bells([(3.5, 4.0), (3.5, 8.0), (6.0, 6.0)], 1.2, 0.6),
        "controls": {"u": [[1.0, 0.0]] * 2, "c": [0.5] * 2},
    },
    "example3": {
        "name": "example3",
        "geometry": {
            "width": 14.0, "height": 14.0, "target_length": 1.05,
            "exits": [{"side": "south", "start": 6.3, "end": 7.7},
                      {"side": "east", "start": 5.0, "end": 9.0},
                      {"side": "north", "start": 4.0, "end": 8.0}],
        },
        "model": _REFERENCE_MODEL,
        "time": {"T": 10.0, "N": 300},
        "agents": [[5.0, 5.0], [9.0, 5.0]],
        "initial_density": _bells([(5.0, 3.0), (9.0, 3.0), (7.0, 4.5)], 1.0, 0.6),
        "controls": {"u": [[0.0, 0.5]] * 2, "c": [0.5] * 2},
    },
}


def preset(name: str) -> ScenarioConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return config_from_dict(copy.deepcopy(PRESETS[name]))


# --------------------------------------------------------------------------
# assembly

@dataclass
class Scenario:
    """A configuration turned into mesh, operators, initial data and controls."""

    config: ScenarioConfig
    disc: Discretization
    rho0: np.ndarray
    x0: np.ndarray
    controls: ControlGrid

    @property
    def mesh(self):
        return self.disc.mesh

    def problem(self, mutation=None) -> ReducedProblem:
        return ReducedProblem(self.disc, self.rho0, self.x0, mutation=mutation)


def build_mesh(cfg: ScenarioConfig):
    from .io import read_mesh

    g = cfg.geometry
    try:
        if g.mesh_file:
            return read_mesh(g.mesh_file)
        spec = RoomSpec(g.width, g.height, g.target_length,
                        exits=[Exit(e["side"], e["start"], e["end"]) for e in g.exits],
                        walls=[tuple(w) for w in g.walls])
        return generate_room(spec)
    except (MeshError, OSError) as exc:
        raise ConfigError(str(exc), "geometry") from exc


def initial_density(cfg: ScenarioConfig):
    """Pointwise sum of Gaussian bells a exp(-|x - c|^2 / (2 v))."""
    bells = cfg.initial_density

    def rho0(p):
        out = np.zeros(len(p))
        for b in bells:
            d = p - np.asarray(b.center)
            out += b.amplitude * np.exp(-np.sum(d * d, axis=1) / (2.0 * b.variance))
        return out

    return rho0


def observation_mask(cfg: ScenarioConfig, centroids):
    if not cfg.observation:
        return np.ones(len(centroids), dtype=bool)
    mask = np.zeros(len(centroids), dtype=bool)
    for x0, y0, x1, y1 in cfg.observation:
        mask |= ((centroids[:, 0] >= x0) & (centroids[:, 0] <= x1)
                 & (centroids[:, 1] >= y0) & (centroids[:, 1] <= y1))
    return mask


def initial_controls(cfg: ScenarioConfig) -> ControlGrid:
    from .io import read_controls

    N, M = cfg.time.N, cfg.n_agents
    if cfg.controls.file:
        try:
            u, c = read_controls(cfg.controls.file)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read control file: {exc}", "controls.file") from exc
        if u.shape != (N + 1, M, 2):
            raise ConfigError(f"control file has shape {u.shape}, expected {(N + 1, M, 2)}", "controls.file")
        return ControlGrid(u, c, cfg.time.T)
    return ControlGrid.constant(N, np.array(cfg.controls.u, dtype=float).reshape(M, 2),
                                np.array(cfg.controls.c, dtype=float), cfg.time.T)


def build(cfg: ScenarioConfig) -> Scenario:
    """Mesh, discretize and validate a scenario."""
    mesh = build_mesh(cfg)
    geom = compute_geometry(mesh)
    mask = observation_mask(cfg, geom.centroid)
    try:
        disc = Discretization(mesh, cfg.model, cfg.time.T, cfg.time.N, geom=geom, mask=mask)
    except ValueError as exc:
        raise ConfigError(str(exc), "geometry") from exc
    if disc.tau > disc.cfl and not cfg.allow_cfl_violation:
        raise ConfigError(f"tau = {disc.tau:.4g} exceeds the time step bound {disc.cfl:.4g}; increase N, "
                          "coarsen the mesh or allow the violation explicitly", "time.N")
    raw = project_p0(mesh, initial_density(cfg), clamp=False)
    if raw.max() > 1.0 + 1e-12 or raw.min() < 0.0:
        raise ConfigError(f"initial density leaves [0, 1] (max {raw.max():.4g})", "initial_density")
    rho0 = np.clip(raw, 0.0, 1.0)
    x0 = np.array(cfg.agents, dtype=float).reshape(-1, 2)
    for i, x in enumerate(x0):
        try:
            disc.mollifier.eval_cells(rho0, x)
        except ValueError as exc:
            raise ConfigError(str(exc), f"agents[{i}]") from exc
    q = initial_controls(cfg)
    return Scenario(config=cfg, disc=disc, rho0=rho0, x0=x0, controls=q)

