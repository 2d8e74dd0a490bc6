"""Experiment configuration: nested dataclasses backed by a versioned YAML file.

Every field has a default, so an empty file is the desk-scale setup. Unknown
keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1

SWEEP_AXES = ("power", "elements", "ablation")
EVAL_POLICIES = ("tpgc", "always_on", "all_off", "tpc", "random_phase", "disk_oracle", "euclidean_diffusion")


class ConfigError(ValueError):
    """Raised with every offending field listed, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class SceneConfig:
    num_ris: int = 2
    elements: int = 16
    ris_radius: float = 10.0
    carrier_hz: float = 3.5e9
    pathloss_exp: float = 2.0
    tx_power: float = 1.0
    noise_power: float = 1e-12


@dataclass
class UsersConfig:
    num_interferers: int = 3
    r_min: float = 12.0
    r_max: float = 40.0
    ris_clearance: float = 1.0


@dataclass
class SyntheticTraces:
    num_traces: int = 24
    length: int = 400
    speed_min: float = 0.8
    speed_max: float = 2.0
    heading_noise: float = 0.05
    position_noise: float = 0.2


@dataclass
class TrajectoryConfig:
    source: str = "fixtures"
    fixture_dir: str = "data/geolife"
    step: float = 1.0
    synthetic: SyntheticTraces = field(default_factory=SyntheticTraces)


@dataclass
class PredictorSection:
    window: int = 5
    hidden: int = 64
    epochs: int = 60
    batch_size: int = 256
    lr: float = 3e-3


@dataclass
class PolicySection:
    env_steps: int = 2000
    collect_per_iter: int = 16
    updates_per_iter: int = 16
    batch_size: int = 128
    actor_batch: int = 32
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    policy_delay: int = 2
    explore_start: float = 1.5
    explore_end: float = 1.0
    guidance: bool = True
    quantize_bits: int | None = None
    schedule_kind: str = "cosine"
    T: int = 4
    eta: float = 0.1
    width: int = 64
    critic_hidden: int = 64
    num_candidates: int = 1


@dataclass
class EvaluationConfig:
    episodes: int = 4
    intervals: int = 10
    horizon_steps: int = 1
    quantize_bits: int | None = None
    policies: list[str] = field(default_factory=lambda: ["tpgc", "always_on", "all_off"])


@dataclass
class SweepConfig:
    metric: str = "ar"
    axes: list[str] = field(default_factory=lambda: ["power", "elements"])
    powers: list[float] = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0])
    elements: list[int] = field(default_factory=lambda: [8, 16])
    interferer_counts: list[int] = field(default_factory=lambda: [1, 2, 3])
    arr_snapshots: int = 200
    schedule_kinds: list[str] = field(default_factory=lambda: ["cosine"])
    T_list: list[int] = field(default_factory=lambda: [2, 4, 16])
    ablation_env_steps: int = 1000
    ablation_eval_snapshots: int = 200


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    train_seed: int = 0
    out_dir: str = "runs/desk"
    workers: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)
    users: UsersConfig = field(default_factory=UsersConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    policy: PolicySection = field(default_factory=PolicySection)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return hash_mapping(self.to_dict())

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def hash_mapping(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def full_scale() -> ExperimentConfig:
    """Preset matching the full-size layout: 10 RISs of 600 elements, 10 interferers."""
    cfg = ExperimentConfig(out_dir="runs/full")
    cfg.scene = SceneConfig(num_ris=10, elements=600)
    cfg.users = UsersConfig(num_interferers=10)
    cfg.policy = PolicySection(env_steps=50_000, width=256, critic_hidden=256, actor_lr=1e-4, critic_lr=1e-4,
                               updates_per_iter=4)
    cfg.sweep = SweepConfig(elements=[200, 400, 600], interferer_counts=[2, 4, 6, 8, 10])
    return cfg


# ---------------------------------------------------------------------------
# Loading and validation
# ---------------------------------------------------------------------------

def _build(cls, data: Any, path: str, problems: list[str]):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        problems.append(f"{path}: expected a mapping, got {type(data).__name__}")
        return cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            problems.append(f"{path}.{key}: unknown field" if path else f"{key}: unknown field")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        value = data[name]
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub, problems)
        elif isinstance(default, float) and isinstance(value, str):
            # YAML 1.1 reads "1e-12" (no dot) as a string
            try:
                kwargs[name] = float(value)
            except ValueError:
                kwargs[name] = value
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _check_type(value, default, path: str, problems: list[str]) -> None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        return
    if not ok:
        problems.append(f"{path}: expected {type(default).__name__}, got {value!r}")


def _walk_types(obj, path: str, problems: list[str]) -> None:
    template = type(obj)()
    for f in dataclasses.fields(obj):
        value, default = getattr(obj, f.name), getattr(template, f.name)
        sub = f"{path}.{f.name}" if path else f.name
        if dataclasses.is_dataclass(value):
            _walk_types(value, sub, problems)
        elif value is not None or default is not None:
            _check_type(value, default, sub, problems)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Raise :class:`ConfigError` listing every bad field; returns ``cfg`` when clean."""
    problems: list[str] = []
    _walk_types(cfg, "", problems)
    if problems:
        raise ConfigError(problems)

    def need(cond: bool, msg: str) -> None:
        if not cond:
            problems.append(msg)

    need(cfg.schema_version == SCHEMA_VERSION,
         f"schema_version: expected {SCHEMA_VERSION}, got {cfg.schema_version}")
    need(len(cfg.seeds) > 0, "seeds: must list at least one seed")
    need(cfg.workers >= 1, "workers: must be >= 1")
    s = cfg.scene
    need(s.num_ris >= 1, "scene.num_ris: must be >= 1")
    need(s.elements >= 1, "scene.elements: must be >= 1")
    need(s.ris_radius > 0, "scene.ris_radius: must be > 0")
    need(s.carrier_hz > 0, "scene.carrier_hz: must be > 0")
    need(s.pathloss_exp >= 1, "scene.pathloss_exp: must be >= 1")
    need(s.tx_power > 0, "scene.tx_power: must be > 0")
    need(s.noise_power > 0, "scene.noise_power: must be > 0")
    u = cfg.users
    need(u.num_interferers >= 0, "users.num_interferers: must be >= 0")
    need(0 < u.r_min < u.r_max, "users.r_min/r_max: need 0 < r_min < r_max")
    t = cfg.trajectory
    need(t.source in ("fixtures", "synthetic"), "trajectory.source: must be 'fixtures' or 'synthetic'")
    need(t.step > 0, "trajectory.step: must be > 0")
    need(t.synthetic.num_traces >= 1, "trajectory.synthetic.num_traces: must be >= 1")
    need(0 <= t.synthetic.speed_min <= t.synthetic.speed_max,
         "trajectory.synthetic.speed_min/speed_max: need 0 <= min <= max")
    need(cfg.predictor.window >= 2, "predictor.window: must be >= 2")
    need(cfg.predictor.epochs >= 1, "predictor.epochs: must be >= 1")
    p = cfg.policy
    need(p.env_steps >= 1, "policy.env_steps: must be >= 1")
    need(p.T >= 1, "policy.T: must be >= 1")
    need(p.schedule_kind in ("vp", "linear", "cosine"), "policy.schedule_kind: must be vp, linear or cosine")
    need(p.eta >= 0, "policy.eta: must be >= 0")
    need(p.num_candidates >= 1, "policy.num_candidates: must be >= 1")
    need(p.quantize_bits is None or _is_int(p.quantize_bits) and 1 <= p.quantize_bits <= 8,
         "policy.quantize_bits: must be null or 1..8")
    e = cfg.evaluation
    need(e.episodes >= 1, "evaluation.episodes: must be >= 1")
    need(e.intervals >= 1, "evaluation.intervals: must be >= 1")
    need(e.horizon_steps >= 1, "evaluation.horizon_steps: must be >= 1")
    need(e.quantize_bits is None or _is_int(e.quantize_bits) and 1 <= e.quantize_bits <= 8,
         "evaluation.quantize_bits: must be null or 1..8")
    need(len(e.policies) > 0, "evaluation.policies: must not be empty")
    for name in e.policies:
        need(name in EVAL_POLICIES, f"evaluation.policies: unknown policy {name!r}")
    w = cfg.sweep
    need(w.metric in ("sinr", "ar"), "sweep.metric: must be 'sinr' or 'ar'")
    for name in ("axes", "powers", "elements", "interferer_counts", "schedule_kinds", "T_list"):
        need(len(getattr(w, name)) > 0, f"sweep.{name}: must not be empty")
    for a in w.axes:
        need(a in SWEEP_AXES, f"sweep.axes: unknown axis {a!r}")
    need(all(x > 0 for x in w.powers), "sweep.powers: every power must be > 0")
    need(all(x >= 1 for x in w.elements), "sweep.elements: every count must be >= 1")
    need(all(x >= 0 for x in w.interferer_counts), "sweep.interferer_counts: counts must be >= 0")
    need(all(k in ("vp", "linear", "cosine") for k in w.schedule_kinds), "sweep.schedule_kinds: unknown kind")
    need(all(x >= 1 for x in w.T_list), "sweep.T_list: every T must be >= 1")
    need(w.arr_snapshots >= 1, "sweep.arr_snapshots: must be >= 1")
    if problems:
        raise ConfigError(problems)
    return cfg


def from_dict(data: dict | None) -> ExperimentConfig:
    problems: list[str] = []
    cfg = _build(ExperimentConfig, data or {}, "", problems)
    if problems:
        raise ConfigError(problems)
    return validate(cfg)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text)
    if data is not None and not isinstance(data, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
