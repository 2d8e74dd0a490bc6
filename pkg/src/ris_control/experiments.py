"""Batch experiments: training, evaluation episodes, sweeps, the ARR matrix and charts.

A run directory holds CSV tables (the source of truth), a JSON manifest and
derived PNG charts. Every CSV starts with a ``# config_hash=...`` comment line
followed by the column header. Trained models are cached under ``models/``
keyed by a hash of the settings that influence training.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy

from . import __version__
from .channel import Scene, achievable_rate, ring_positions, snapshot_from_positions
from .config import ExperimentConfig, hash_mapping, validate
from .controller import IntervalConfig, PolicyBundle, control_interval, decide_onoff
from .diffusion import build_schedule
from .nn_core import load_checkpoint, save_checkpoint
from .rl import ContextSampler, TrainConfig, TrainResult, make_actor, train_loop
from .trajectory import PredictorConfig, PredictorModel, load_geolife_dir, split_trace, train_predictor

SPEED_OF_LIGHT = 299_792_458.0
MIN_BS_DISTANCE = 1.0


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def write_csv(path: Path, config_hash: str, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        if len(r) != len(columns):
            raise ValueError(f"{path.name}: row has {len(r)} fields, header has {len(columns)}")
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> tuple[str, list[dict[str, str]]]:
    """Return (config hash, rows as dicts)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing CSV {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# config_hash="):
        raise ValueError(f"{path}: first line must carry the config hash")
    return lines[0].split("=", 1)[1], list(csv.DictReader(lines[1:]))


# ---------------------------------------------------------------------------
# Building blocks from config
# ---------------------------------------------------------------------------

def make_scene(cfg: ExperimentConfig, elements: int | None = None, tx_power: float | None = None) -> Scene:
    s = cfg.scene
    return Scene(ris_pos=ring_positions(s.num_ris, s.ris_radius),
                 elements_per_ris=s.elements if elements is None else elements,
                 wavelength=SPEED_OF_LIGHT / s.carrier_hz, pathloss_exp=s.pathloss_exp,
                 tx_power=s.tx_power if tx_power is None else tx_power, noise_power=s.noise_power)


def synthetic_traces(cfg: ExperimentConfig) -> list[np.ndarray]:
    """Smooth random walks: per-trace speed, slowly drifting heading, GPS-like jitter."""
    spec, step = cfg.trajectory.synthetic, cfg.trajectory.step
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train_seed, 7001]))
    out = []
    for _ in range(spec.num_traces):
        speed = rng.uniform(spec.speed_min, spec.speed_max)
        heading = rng.uniform(-math.pi, math.pi) + np.cumsum(rng.normal(0.0, spec.heading_noise, spec.length))
        v = speed * step * np.stack([np.cos(heading), np.sin(heading)], axis=1)
        xy = np.vstack([np.zeros((1, 2)), np.cumsum(v[:-1], axis=0)])
        out.append(xy + rng.normal(0.0, spec.position_noise, xy.shape))
    return out


REPO_ROOT = Path(__file__).resolve().parents[2]


def load_traces(cfg: ExperimentConfig) -> list[np.ndarray]:
    """Fixture traces (relative paths try the working directory, then the repo root) or synthetic ones."""
    if cfg.trajectory.source == "synthetic":
        return synthetic_traces(cfg)
    d = Path(cfg.trajectory.fixture_dir)
    if not d.is_absolute() and not d.exists():
        d = REPO_ROOT / d
    traces = load_geolife_dir(d, cfg.trajectory.step)
    if not traces:
        raise FileNotFoundError(f"no .plt files under {d}")
    return traces


def train_test_traces(traces: Sequence[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    pairs = [split_trace(t) for t in traces]
    return [a for a, _ in pairs], [b for _, b in pairs]


def predictor_config(cfg: ExperimentConfig) -> PredictorConfig:
    p = cfg.predictor
    return PredictorConfig(window=p.window, hidden=p.hidden, epochs=p.epochs, batch_size=p.batch_size,
                           lr=p.lr, step=cfg.trajectory.step, seed=cfg.train_seed)


def train_config(cfg: ExperimentConfig, **overrides) -> TrainConfig:
    p = cfg.policy
    tc = TrainConfig(env_steps=p.env_steps, collect_per_iter=p.collect_per_iter,
                     updates_per_iter=p.updates_per_iter, batch_size=p.batch_size, actor_batch=p.actor_batch,
                     actor_lr=p.actor_lr, critic_lr=p.critic_lr, policy_delay=p.policy_delay,
                     explore_start=p.explore_start, explore_end=p.explore_end, guidance=p.guidance,
                     quantize_bits=p.quantize_bits, schedule_kind=p.schedule_kind, T=p.T, eta=p.eta,
                     width=p.width, head_hidden=p.width, critic_hidden=p.critic_hidden, seed=cfg.train_seed)
    return dataclasses.replace(tc, **overrides)


def context_sampler(cfg: ExperimentConfig, scene: Scene, num_interferers: int) -> ContextSampler:
    u = cfg.users
    return ContextSampler(scene, num_interferers, u.r_min, u.r_max, ris_clearance=u.ris_clearance)


# ---------------------------------------------------------------------------
# Model cache
# ---------------------------------------------------------------------------

CURVE_COLUMNS = ("step", "mean_reward", "q1_loss", "q2_loss")


@dataclass
class TrainedPolicy:
    tag: str
    bundle: PolicyBundle
    curve: list[tuple]
    key: str


class ModelStore:
    """Train-on-demand cache of predictor and policy checkpoints under ``root``."""

    def __init__(self, cfg: ExperimentConfig, root: Path, traces: Sequence[np.ndarray] | None = None,
                 log: Callable[[str], None] | None = None):
        self.cfg, self.root = cfg, Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._traces = traces
        self._policies: dict[str, TrainedPolicy] = {}
        self._predictor: PredictorModel | None = None
        self.log = log or (lambda msg: None)

    @property
    def traces(self) -> list[np.ndarray]:
        if self._traces is None:
            self._traces = load_traces(self.cfg)
        return self._traces

    def predictor(self) -> PredictorModel:
        if self._predictor is not None:
            return self._predictor
        pcfg = predictor_config(self.cfg)
        key = hash_mapping({"predictor": dataclasses.asdict(pcfg), "trajectory": dataclasses.asdict(
            self.cfg.trajectory)})[:16]
        path = self.root / f"predictor-{key}.ckpt"
        if path.exists():
            self._predictor = PredictorModel.load(path)
        else:
            self.log(f"training predictor ({pcfg.epochs} epochs)")
            train, _ = train_test_traces(self.traces)
            self._predictor = train_predictor(train, pcfg)
            self._predictor.save(path)
        return self._predictor

    def policy(self, tag: str, elements: int | None = None, num_interferers: int | None = None,
               **overrides) -> TrainedPolicy:
        if tag in self._policies:
            return self._policies[tag]
        cfg = self.cfg
        scene = make_scene(cfg, elements=elements)
        m = cfg.users.num_interferers if num_interferers is None else num_interferers
        tc = train_config(cfg, **overrides)
        key = hash_mapping({"train": dataclasses.asdict(tc), "scene": dataclasses.asdict(cfg.scene),
                            "elements": scene.elements_per_ris, "interferers": m,
                            "users": dataclasses.asdict(cfg.users)})[:16]
        ckpt, curve_path = self.root / f"policy-{key}.ckpt", self.root / f"policy-{key}.curve.csv"
        schedule = build_schedule(tc.schedule_kind, tc.T, tc.eta)
        if ckpt.exists() and curve_path.exists():
            actor = make_actor(scene, tc, np.random.default_rng(0))
            actor.load_state_dict(load_checkpoint(ckpt))
            _, rows = read_csv(curve_path)
            curve = [(int(r["step"]), float(r["mean_reward"]), float(r["q1_loss"]), float(r["q2_loss"]))
                     for r in rows]
        else:
            self.log(f"training policy {tag} ({tc.env_steps} env steps)")
            res: TrainResult = train_loop(context_sampler(cfg, scene, m), tc)
            actor, curve = res.actor, res.curve
            save_checkpoint(ckpt, actor.state_dict())
            write_csv(curve_path, key, CURVE_COLUMNS, curve)
        bundle = PolicyBundle(actor, schedule, guidance=tc.guidance, num_candidates=cfg.policy.num_candidates,
                              bits=cfg.evaluation.quantize_bits)
        tp = TrainedPolicy(tag, bundle, curve, key)
        self._policies[tag] = tp
        return tp


# ---------------------------------------------------------------------------
# Evaluation episodes
# ---------------------------------------------------------------------------

def place_episode(traces: Sequence[np.ndarray], cfg: ExperimentConfig, scene: Scene, num_users: int,
                  length: int, rng: np.random.Generator, anchor: int) -> list[np.ndarray]:
    """Cut ``num_users`` segments of ``length`` points and drop them into the cell.

    Point ``anchor`` of each segment (the first decision time) lands uniformly
    in the user annulus; segments passing too close to the BS or a RIS are redrawn.
    """
    usable = [t for t in traces if len(t) >= length]
    if not usable:
        raise ValueError(f"no trace has the {length} points an episode needs")
    sampler = context_sampler(cfg, scene, 0)
    u = cfg.users
    out = []
    for _ in range(num_users):
        for _attempt in range(200):
            tr = usable[rng.integers(len(usable))]
            start = rng.integers(0, len(tr) - length + 1)
            seg = tr[start:start + length]
            p = sampler._point(rng, u.r_min, u.r_max)
            seg = seg - seg[anchor] + p
            d_bs = np.linalg.norm(seg - scene.bs_pos, axis=1)
            d_ris = np.linalg.norm(seg[:, None, :] - scene.ris_pos[None], axis=2)
            if d_bs.min() >= MIN_BS_DISTANCE and d_ris.min() >= u.ris_clearance:
                break
        else:
            raise RuntimeError("could not place a user segment clear of the BS and RISs")
        out.append(seg)
    return out


DECISION_BASE = ("seed", "axis", "value", "episode", "interval", "baseline_mode")
DECISION_TAIL = ("ar_on", "ar_off", "predicted_ar", "realized_ar", "realized_sinr")


def decision_columns(num_ris: int) -> tuple[str, ...]:
    return DECISION_BASE + tuple(f"v{i}" for i in range(num_ris)) + DECISION_TAIL


@dataclass
class EvalPoint:
    """One (axis value, seed) cell of an evaluation sweep; carries everything a worker needs."""

    cfg: ExperimentConfig
    scene: Scene
    predictor: PredictorModel | None
    policy: PolicyBundle | None
    traces: list
    seed: int
    axis: str
    value: float
    index: int


def run_point(pt: EvalPoint) -> list[tuple]:
    cfg, scene = pt.cfg, pt.scene
    ev = cfg.evaluation
    H = cfg.predictor.window
    length = H + 1 + ev.intervals + ev.horizon_steps
    rng = np.random.default_rng(np.random.SeedSequence([pt.seed, 11]))
    rows = []
    for ep in range(ev.episodes):
        tracks = place_episode(pt.traces, cfg, scene, 1 + cfg.users.num_interferers, length, rng, anchor=H)
        for t in range(ev.intervals):
            hist = [tr[t:t + H + 1] for tr in tracks]
            truth = np.array([tr[t + H + ev.horizon_steps] for tr in tracks])
            # identical sampling stream for every mode so tpgc and always_on share phases
            interval_seed = int(np.random.SeedSequence([pt.seed, ep, t]).generate_state(1)[0])
            for mode in ev.policies:
                icfg = IntervalConfig(ev.horizon_steps, ev.quantize_bits, mode, interval_seed)
                res = control_interval(pt.predictor, pt.policy, scene, hist, truth, icfg)
                d = res.decision
                rows.append((pt.seed, pt.axis, pt.value, ep, t, mode, *[int(v) for v in d.activation],
                             d.ar_on, d.ar_off, res.predicted_ar, res.realized_ar, res.realized_sinr))
    return rows


def _pool_map(fn, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def summarize(rows: Sequence[Sequence], columns: Sequence[str], metric: str) -> list[tuple]:
    """Mean/std of ``realized_ar`` or ``realized_sinr`` per (axis, value, mode)."""
    col = columns.index("realized_ar" if metric == "ar" else "realized_sinr")
    ia, iv, im = columns.index("axis"), columns.index("value"), columns.index("baseline_mode")
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r[ia], r[iv], r[im]), []).append(float(r[col]))
    out = []
    for (axis, value, mode), vals in groups.items():
        a = np.array(vals)
        out.append((axis, value, mode, metric, float(a.mean()), float(a.std()), len(a)))
    return out


SUMMARY_COLUMNS = ("axis", "value", "baseline_mode", "metric", "mean", "std", "n")


def _needs_policy(cfg: ExperimentConfig) -> bool:
    return any(m in ("tpgc", "always_on", "euclidean_diffusion") for m in cfg.evaluation.policies)


def evaluate(cfg: ExperimentConfig, store: ModelStore, axis: str = "base",
             points: Sequence[tuple[float, Scene, PolicyBundle | None]] | None = None) -> list[tuple]:
    """Decision rows over every seed for each (value, scene, policy) point."""
    _, test = train_test_traces(store.traces)
    predictor = store.predictor()
    if points is None:
        scene = make_scene(cfg)
        policy = store.policy("main").bundle if _needs_policy(cfg) else None
        points = [(cfg.scene.tx_power, scene, policy)]
    jobs = []
    for value, scene, policy in points:
        for seed in cfg.seeds:
            jobs.append(EvalPoint(cfg, scene, predictor, policy, test, seed, axis, value, len(jobs)))
    rows: list[tuple] = []
    for chunk in _pool_map(run_point, jobs, cfg.workers):
        rows.extend(chunk)
    return rows


def sweep(cfg: ExperimentConfig, store: ModelStore, axis: str) -> list[tuple]:
    if axis == "power":
        policy = store.policy("main").bundle if _needs_policy(cfg) else None
        points = [(p, make_scene(cfg, tx_power=p), policy) for p in cfg.sweep.powers]
    elif axis == "elements":
        points = []
        for n in cfg.sweep.elements:
            policy = store.policy(f"N{n}", elements=n).bundle if _needs_policy(cfg) else None
            points.append((n, make_scene(cfg, elements=n), policy))
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    return evaluate(cfg, store, axis, points)


# ---------------------------------------------------------------------------
# ARR matrix and schedule ablation
# ---------------------------------------------------------------------------

ARR_LOG_COLUMNS = ("m_train", "m_test", "stream", "seed", "snapshot", "ar")
ARR_COLUMNS = ("m_train", "m_test", "ar_test", "ar_train", "arr")


def _snapshot_rates(bundle: PolicyBundle, scene: Scene, sampler: ContextSampler, seed: int, stream: int,
                    m: int, n: int) -> list[float]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, stream, m]))
    prng = np.random.default_rng(np.random.SeedSequence([seed, stream, m, 1]))
    out = []
    for _ in range(n):
        target, inter = sampler.positions(rng)
        csi = snapshot_from_positions(target, inter, scene)
        phases = bundle.sample(csi, scene, prng)
        out.append(decide_onoff(csi, phases, scene).rate)
    return out


def arr_matrix(cfg: ExperimentConfig, store: ModelStore,
               train_counts: Sequence[int] | None = None,
               test_counts: Sequence[int] | None = None) -> tuple[np.ndarray, list[tuple]]:
    """ARR[i, j] = mean AR of the m_train[i] policy at m_test[j] over its own matched mean AR.

    The matched reference uses a separate snapshot stream (stream 0) from the
    test evaluations (stream 1), so the diagonal is one only up to sampling noise.
    """
    train_counts = list(cfg.sweep.interferer_counts if train_counts is None else train_counts)
    test_counts = list(cfg.sweep.interferer_counts if test_counts is None else test_counts)
    scene = make_scene(cfg)
    n = cfg.sweep.arr_snapshots
    log: list[tuple] = []
    mat = np.zeros((len(train_counts), len(test_counts)))
    for i, mt in enumerate(train_counts):
        bundle = store.policy(f"m{mt}", num_interferers=mt).bundle
        ref = []
        for seed in cfg.seeds:
            rates = _snapshot_rates(bundle, scene, context_sampler(cfg, scene, mt), seed, 0, mt, n)
            log.extend((mt, mt, 0, seed, k, r) for k, r in enumerate(rates))
            ref.extend(rates)
        for j, ms in enumerate(test_counts):
            test = []
            for seed in cfg.seeds:
                rates = _snapshot_rates(bundle, scene, context_sampler(cfg, scene, ms), seed, 1, ms, n)
                log.extend((mt, ms, 1, seed, k, r) for k, r in enumerate(rates))
                test.extend(rates)
            mat[i, j] = float(np.mean(test)) / float(np.mean(ref))
    return mat, log


def arr_table(mat: np.ndarray, log: Sequence[tuple], train_counts, test_counts) -> list[tuple]:
    rows = []
    for i, mt in enumerate(train_counts):
        ref = np.mean([r[5] for r in log if r[0] == mt and r[1] == mt and r[2] == 0])
        for j, ms in enumerate(test_counts):
            test = np.mean([r[5] for r in log if r[0] == mt and r[1] == ms and r[2] == 1])
            rows.append((mt, ms, float(test), float(ref), float(mat[i, j])))
    return rows


ABLATION_COLUMNS = ("schedule_kind", "T", "env_steps", "train_final_reward", "eval_reward")
ABLATION_LOG_COLUMNS = ("schedule_kind", "T", "snapshot", "ar")


def ablation(cfg: ExperimentConfig, store: ModelStore) -> tuple[list[tuple], list[tuple], dict[str, list]]:
    """Train one policy per (schedule kind, T) at the ablation budget and score it on a fixed set."""
    scene = make_scene(cfg)
    sampler = context_sampler(cfg, scene, cfg.users.num_interferers)
    steps = cfg.sweep.ablation_env_steps
    table, log, curves = [], [], {}
    for kind in cfg.sweep.schedule_kinds:
        for T in cfg.sweep.T_list:
            tp = store.policy(f"abl-{kind}-T{T}", schedule_kind=kind, T=T, env_steps=steps)
            obs = sampler.sample(np.random.default_rng(np.random.SeedSequence([cfg.train_seed, 4242])),
                                 cfg.sweep.ablation_eval_snapshots)
            prng = np.random.default_rng(np.random.SeedSequence([cfg.train_seed, 4243]))
            rates = []
            for k, o in enumerate(obs):
                ph = tp.bundle.sample(o.csi, scene, prng)
                r = achievable_rate(o.csi, ph, np.ones(scene.num_ris), scene)
                rates.append(r)
                log.append((kind, T, k, r))
            tail = [row[1] for row in tp.curve[-max(1, len(tp.curve) // 10):]]
            table.append((kind, T, steps, float(np.mean(tail)), float(np.mean(rates))))
            curves[tp.tag] = tp.curve
    return table, log, curves


# ---------------------------------------------------------------------------
# Run orchestration
# ---------------------------------------------------------------------------

STAGES = ("train", "eval", "sweep", "arr")


def _versions() -> dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "ris_control": __version__}


def run_config(cfg: ExperimentConfig, out: Path | str | None = None, stages: Sequence[str] = STAGES,
               log: Callable[[str], None] | None = None) -> Path:
    """Execute the requested stages and write CSVs plus ``manifest.json`` into the run directory."""
    validate(cfg)
    for s in stages:
        if s not in STAGES:
            raise ValueError(f"unknown stage {s!r}; expected one of {STAGES}")
    out = Path(cfg.out_dir if out is None else out)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    store = ModelStore(cfg, out / "models", log=log)
    written: list[str] = []

    def emit(name: str, columns, rows) -> None:
        write_csv(out / name, h, columns, rows)
        written.append(name)

    if "train" in stages:
        store.predictor()
        tp = store.policy("main")
        emit("reward_curve.csv", CURVE_COLUMNS, tp.curve)
    if "eval" in stages:
        rows = evaluate(cfg, store)
        cols = decision_columns(cfg.scene.num_ris)
        emit("decisions_eval.csv", cols, rows)
        emit("eval_summary.csv", SUMMARY_COLUMNS, summarize(rows, cols, cfg.sweep.metric))
    if "sweep" in stages:
        for axis in cfg.sweep.axes:
            if axis == "ablation":
                table, alog, curves = ablation(cfg, store)
                emit("ablation.csv", ABLATION_COLUMNS, table)
                emit("ablation_log.csv", ABLATION_LOG_COLUMNS, alog)
                for tag, curve in curves.items():
                    emit(f"reward_curve_{tag}.csv", CURVE_COLUMNS, curve)
                continue
            rows = sweep(cfg, store, axis)
            cols = decision_columns(cfg.scene.num_ris)
            emit(f"decisions_{axis}.csv", cols, rows)
            emit(f"sweep_{axis}.csv", SUMMARY_COLUMNS, summarize(rows, cols, cfg.sweep.metric))
    if "arr" in stages:
        counts = cfg.sweep.interferer_counts
        mat, alog = arr_matrix(cfg, store)
        emit("arr_log.csv", ARR_LOG_COLUMNS, alog)
        emit("arr.csv", ARR_COLUMNS, arr_table(mat, alog, counts, counts))

    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    if manifest.get("config_hash") != h:
        manifest = {"outputs": {}}
    manifest.update({"config_hash": h, "schema_version": cfg.schema_version, "seeds": list(cfg.seeds),
                     "train_seed": cfg.train_seed, "versions": _versions(), "config": cfg.to_dict()})
    for name in written:
        manifest["outputs"][name] = hash_bytes((out / name).read_bytes())
    manifest["outputs"] = dict(sorted(manifest["outputs"].items()))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def hash_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def load_arr(path) -> tuple[list[int], list[int], np.ndarray]:
    _, rows = read_csv(path)
    tr = sorted({int(r["m_train"]) for r in rows})
    te = sorted({int(r["m_test"]) for r in rows})
    mat = np.full((len(tr), len(te)), np.nan)
    for r in rows:
        mat[tr.index(int(r["m_train"])), te.index(int(r["m_test"]))] = float(r["arr"])
    return tr, te, mat
