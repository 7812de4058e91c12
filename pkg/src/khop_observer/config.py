"""Scenario configuration: YAML documents mapped onto nested dataclasses.

Unknown keys are rejected. Dotted ``key=value`` overrides are applied to
the raw document before validation, so they go through the same checks.
"""
from __future__ import annotations

import copy
import dataclasses
import re
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .funnel import Funnel, InfeasibleInitializationError
from .graph import MODES, load_edge_list
from .observer import ObserverVariant
from .plant import AgentModel, Drift, InputMap, grid_initial_states, make_disturbance
from .sim import INTEGRATORS, Scenario

PROFILES = {
    "desk": {"integration.integrator": "rk4", "integration.dt": 1e-4},
    "paper": {"integration.integrator": "euler", "integration.dt": 1e-5},
}


class ConfigError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """SafeLoader with YAML 1.2 style scalars: only true/false are booleans, 1e-4 is a float."""


_Loader.yaml_implicit_resolvers = {
    k: [(tag, rx) for tag, rx in v if tag not in ("tag:yaml.org,2002:bool", "tag:yaml.org,2002:float")]
    for k, v in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_Loader.add_implicit_resolver("tag:yaml.org,2002:bool", re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"),
                              list("tTfF"))
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?|[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)"
               r"|\.[0-9_]+(?:[eE][-+]?[0-9]+)?|[-+]?\.(?:inf|Inf|INF)|\.(?:nan|NaN|NAN))$"),
    list("-+0123456789."),
)


def _yaml(text):
    return yaml.load(text, Loader=_Loader)


@dataclass
class GraphsConfig:
    comm: str = ""
    task: typing.Optional[str] = None


@dataclass
class AgentConfig:
    dim: int = 2
    drift: str = "paper"
    drift_gain: float = 1.0
    input_map: str = "identity"
    disturbance: str = "zero"
    disturbance_amplitude: float = 0.0
    disturbance_frequency: float = 1.0


@dataclass
class ControllerConfig:
    mode: str = "estimated"  # estimated | truth | off
    gain: float = 2.0


@dataclass
class FunnelConfig:
    # triples are (rho0, rho_inf, decay); "auto" designs from delta/theta
    delta: list = field(default_factory=lambda: [14.077, 0.117, 5.0])
    theta: list = field(default_factory=lambda: [231.39, 1.39, 5.0])
    rho: typing.Any = "auto"
    omega: typing.Any = "auto"
    safety: float = 0.95
    per_target: dict = field(default_factory=dict)


@dataclass
class InitialConfig:
    x: typing.Optional[list] = None
    seed: typing.Optional[int] = None
    half_width: float = 5.0
    xhat: typing.Any = 0.0
    ghat: typing.Any = 0.0


@dataclass
class IntegrationConfig:
    integrator: str = "rk4"
    dt: float = 1e-4
    t_end: float = 3.0
    record_dt: float = 1e-2


@dataclass
class OutputConfig:
    dir: typing.Optional[str] = None


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    graphs: GraphsConfig = field(default_factory=GraphsConfig)
    k: int = 3
    mode: str = "standard"
    variant: str = "full"
    agents: AgentConfig = field(default_factory=AgentConfig)
    agent_overrides: dict = field(default_factory=dict)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    funnels: FunnelConfig = field(default_factory=FunnelConfig)
    initial: InitialConfig = field(default_factory=InitialConfig)
    integration: IntegrationConfig = field(default_factory=IntegrationConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------- parsing

def _coerce(value, hint, where):
    origin = typing.get_origin(hint)
    if hint is typing.Any:
        return value
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        return None if value is None else _coerce(value, args[0], where)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if hint in (list, dict) and not isinstance(value, hint):
        raise ConfigError(f"{where}: expected a {hint.__name__}, got {value!r}")
    return value


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(map(str, data)) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {', '.join(unknown)}")
    kw = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kw)


def _parse_value(text: str):
    return _yaml(text)


def apply_override(doc: dict, assignment: str) -> None:
    """Apply one ``a.b.c=value`` assignment in place; value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, _, text = assignment.partition("=")
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {assignment!r} has an empty key segment")
    node = doc
    for p in parts[:-1]:
        sub = node.get(p) if p in node else node.get(_intkey(p))
        if sub is None:
            sub = {}
            node[p] = sub
        if not isinstance(sub, dict):
            raise ConfigError(f"override {assignment!r}: {p} is not a section")
        node = sub
    node[parts[-1]] = _parse_value(text)


def _intkey(p):
    try:
        return int(p)
    except ValueError:
        return p


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("khop_observer") / "scenarios" / f"{name}.yaml"))


def bundled_names() -> list:
    root = Path(str(resources.files("khop_observer") / "scenarios"))
    return sorted(p.stem for p in root.glob("*.yaml"))


def resolve_config_path(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    if ref in bundled_names():
        return bundled_path(ref)
    raise ConfigError(f"no config file {ref!r} and no bundled scenario of that name "
                      f"(bundled: {', '.join(bundled_names())})")


def load_config(ref: str, overrides=(), profile: str | None = None) -> tuple:
    """Returns (ScenarioConfig, directory that relative graph paths resolve against)."""
    path = resolve_config_path(ref)
    try:
        doc = _yaml(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    doc = copy.deepcopy(doc)
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        for k, v in PROFILES[profile].items():
            apply_override(doc, f"{k}={v}")
    for o in overrides:
        apply_override(doc, o)
    return parse_config(doc), path.parent


def parse_config(doc: dict) -> ScenarioConfig:
    cfg = _build(ScenarioConfig, doc, "")
    validate(cfg)
    return cfg


def validate(cfg: ScenarioConfig) -> None:
    if not cfg.graphs.comm:
        raise ConfigError("graphs.comm is required")
    if cfg.k < 2:
        raise ConfigError("k must be at least 2")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    if cfg.variant not in {v.value for v in ObserverVariant}:
        raise ConfigError(f"variant must be one of {[v.value for v in ObserverVariant]}")
    if cfg.integration.integrator not in INTEGRATORS:
        raise ConfigError(f"integrator must be one of {sorted(INTEGRATORS)}")
    if cfg.controller.mode not in ("estimated", "truth", "off"):
        raise ConfigError("controller.mode must be estimated, truth or off")
    for key in ("dt", "t_end", "record_dt"):
        if not getattr(cfg.integration, key) > 0:
            raise ConfigError(f"integration.{key} must be positive")
    for tgt, spec in cfg.funnels.per_target.items():
        if not isinstance(spec, dict) or set(spec) - {"rho", "omega", "delta", "theta"}:
            raise ConfigError(f"funnels.per_target.{tgt}: only rho, omega, delta, theta allowed")
    for aid, spec in cfg.agent_overrides.items():
        if not isinstance(spec, dict):
            raise ConfigError(f"agent_overrides.{aid}: expected a mapping")
        _build(AgentConfig, spec, f"agent_overrides.{aid}")


# --------------------------------------------------------------------------- to Scenario

def _funnel(spec, where, allow_auto=False, gate=False):
    if spec == "auto" and allow_auto:
        return None
    if not (isinstance(spec, (list, tuple)) and len(spec) == 3):
        raise ConfigError(f"{where}: expected [rho0, rho_inf, decay]" + (" or 'auto'" if allow_auto else ""))
    try:
        vals = [float(v) for v in spec]
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: funnel entries must be numbers") from None
    if gate and vals[0] <= 0:
        # a funnel starting at zero cannot contain any initial disagreement
        raise InfeasibleInitializationError(f"{where}: funnel(0)={vals[0]:g} admits no initial disagreement",
                                            required=None)
    try:
        return Funnel(*vals)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _agent(i, base: AgentConfig, n_agents, seed):
    try:
        return AgentModel(
            i, base.dim, Drift(base.drift, base.drift_gain), InputMap(base.input_map),
            make_disturbance(base.disturbance, base.dim, i, n_agents, base.disturbance_amplitude,
                             base.disturbance_frequency, 0 if seed is None else seed),
        )
    except ValueError as exc:
        raise ConfigError(f"agent {i}: {exc}") from None


def to_scenario(cfg: ScenarioConfig, base_dir=".") -> Scenario:
    base_dir = Path(base_dir)

    def graph(ref):
        p = Path(ref)
        p = p if p.is_absolute() else base_dir / p
        try:
            return load_edge_list(p)
        except OSError as exc:
            raise ConfigError(f"cannot read graph {p}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    gc = graph(cfg.graphs.comm)
    gt = graph(cfg.graphs.task) if cfg.graphs.task else None
    N = gc.node_count
    agents = []
    for i in range(1, N + 1):
        spec = cfg.agent_overrides.get(i, cfg.agent_overrides.get(str(i)))
        base = cfg.agents if spec is None else _build(
            AgentConfig, {**dataclasses.asdict(cfg.agents), **spec}, f"agent_overrides.{i}")
        agents.append(_agent(i, base, N, cfg.initial.seed))
    unknown = {int(a) for a in cfg.agent_overrides} - set(range(1, N + 1))
    if unknown:
        raise ConfigError(f"agent_overrides names unknown agents {sorted(unknown)}")

    f = cfg.funnels
    overrides = {}
    for tgt, spec in f.per_target.items():
        t = int(tgt)
        if not 1 <= t <= N:
            raise ConfigError(f"funnels.per_target names unknown agent {t}")
        overrides[t] = {k: _funnel(v, f"funnels.per_target.{t}.{k}", gate=k in ("rho", "omega"))
                        for k, v in spec.items()}

    x0 = None
    if cfg.initial.x is not None:
        try:
            x0 = [np.asarray(x, dtype=float).ravel() for x in cfg.initial.x]
        except (TypeError, ValueError):
            raise ConfigError("initial.x must be a list of numeric vectors") from None
        if len(x0) != N:
            raise ConfigError(f"initial.x has {len(x0)} entries for {N} agents")
    elif len({a.dim for a in agents}) == 1:
        x0 = list(grid_initial_states(N, agents[0].dim, cfg.initial.half_width, cfg.initial.seed))

    it = cfg.integration
    try:
        return Scenario(
            comm_graph=gc, agents=agents, k=cfg.k, mode=cfg.mode, task_graph=gt,
            controller_gain=cfg.controller.gain, control_mode=cfg.controller.mode,
            variant=ObserverVariant(cfg.variant),
            delta=_funnel(f.delta, "funnels.delta"), theta=_funnel(f.theta, "funnels.theta"),
            rho=_funnel(f.rho, "funnels.rho", allow_auto=True, gate=True),
            omega=_funnel(f.omega, "funnels.omega", allow_auto=True, gate=True),
            overrides=overrides, safety=f.safety, x0=x0,
            xhat0=np.asarray(cfg.initial.xhat, dtype=float), ghat0=np.asarray(cfg.initial.ghat, dtype=float),
            t_end=it.t_end, dt=it.dt, integrator=it.integrator,
            record_every=max(1, int(round(it.record_dt / it.dt))),
            seed=cfg.initial.seed, name=cfg.name,
        )
    except ValueError as exc:
        if isinstance(exc, InfeasibleInitializationError):
            raise
        raise ConfigError(str(exc)) from None


def dump_config(cfg: ScenarioConfig, path, base_dir=None) -> None:
    """Write the resolved config; graph paths are made absolute so the copy is self-contained."""
    doc = cfg.to_dict()
    if base_dir is not None:
        for key in ("comm", "task"):
            ref = doc["graphs"][key]
            if ref and not Path(ref).is_absolute():
                doc["graphs"][key] = str((Path(base_dir) / ref).resolve())
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))
