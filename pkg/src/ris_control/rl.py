"""Twin-critic training of the diffusion actor.

Each control interval is a one-step episode: the reward depends only on the
observation and the sampled phases. Critics therefore regress straight onto
the observed rate (no bootstrapped target), and the actor ascends critic 1
through the unrolled reverse chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import torus
from .channel import CsiSnapshot, Scene, achievable_rate
from .diffusion import (Denoiser, DenoiserConfig, DiffusionSchedule, Observation, TOKEN_FEATURES,
                        build_schedule, encode_observation, reverse_sample, stack_tokens)
from .nn_core import MLP, Adam, ContractError, NonFiniteError, Tensor, concat, mse


@dataclass(frozen=True)
class Transition:
    obs: Observation
    action: np.ndarray  # flattened R*N angles in [0, 2pi)
    reward: float

    def __post_init__(self):
        if self.reward < 0:
            raise ValueError("rate reward cannot be negative")
        a = np.asarray(self.action)
        if np.any(a < 0) or np.any(a >= 2 * math.pi):
            raise ValueError("action angles must lie in [0, 2pi)")


class ReplayBuffer:
    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.items: list[Transition] = []
        self.pos = 0

    def __len__(self) -> int:
        return len(self.items)

    def add(self, tr: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(tr)
        else:
            self.items[self.pos] = tr
        self.pos = (self.pos + 1) % self.capacity

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        if not self.items:
            raise ContractError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self.items), size=n)
        return [self.items[i] for i in idx]


class Critic(MLP):
    pass


class CriticPair:
    """Two independent value networks Q(o, a) -> rate estimate.

    Outputs are ``offset + scale * net(...)``; the affine pair is fixed at
    construction so network weights see targets of order one.
    """

    def __init__(self, num_ris: int, elements: int, rng: np.random.Generator,
                 hidden: int = 256, offset: float = 0.0, scale: float = 1.0, phasor_features: bool = True):
        self.num_ris, self.elements = num_ris, elements
        self.phasor_features = phasor_features
        in_dim = (num_ris + 1) * TOKEN_FEATURES + 2 * num_ris * elements
        if phasor_features:
            in_dim += 6 * num_ris
        self.q1 = Critic([in_dim, hidden, hidden, 1], rng)
        self.q2 = Critic([in_dim, hidden, hidden, 1], rng)
        self.offset, self.scale = offset, scale
        self.updates = 0

    def _inputs(self, tokens: np.ndarray, action_embed) -> Tensor:
        B = tokens.shape[0]
        parts = [Tensor(tokens.reshape(B, -1)), action_embed]
        if self.phasor_features:
            # mean phasor per RIS and its complex products with both cascade features;
            # the rate sees each RIS only through this sum
            R = self.num_ris
            m = action_embed.reshape((B, R, self.elements, 2)).mean(axis=2)
            mr, mi = m[:, :, 0], m[:, :, 1]
            ris = tokens[:, :R, :]
            parts.append(m.reshape((B, 2 * R)))
            for j in (0, 2):
                cr, ci = Tensor(ris[:, :, j]), Tensor(ris[:, :, j + 1])
                parts.append(cr * mr - ci * mi)
                parts.append(cr * mi + ci * mr)
        return concat(parts, axis=-1)

    def q_values(self, tokens: np.ndarray, action_embed) -> tuple[Tensor, Tensor]:
        inp = self._inputs(tokens, action_embed)
        return (self.q1(inp).reshape(-1) * self.scale + self.offset,
                self.q2(inp).reshape(-1) * self.scale + self.offset)


def critic_eval(critics: CriticPair, obs: Sequence[Observation], action) -> tuple[np.ndarray, np.ndarray]:
    tokens = stack_tokens(obs)
    emb = torus.embed_phases(np.asarray(action, dtype=float).reshape(len(obs), -1))
    q1, q2 = critics.q_values(tokens, Tensor(emb))
    return q1.data, q2.data


@dataclass
class CriticTrainer:
    critics: CriticPair
    lr: float = 1e-4

    def __post_init__(self):
        self.opt1 = Adam(self.critics.q1.named_parameters(), lr=self.lr)
        self.opt2 = Adam(self.critics.q2.named_parameters(), lr=self.lr)


def critic_update(trainer: CriticTrainer, batch: Sequence[Transition], lr: float | None = None) -> tuple[float, float]:
    if not batch:
        raise ContractError("empty critic batch")
    c = trainer.critics
    tokens = stack_tokens([t.obs for t in batch])
    emb = Tensor(torus.embed_phases(np.stack([t.action for t in batch])))
    target = np.array([t.reward for t in batch])
    losses = []
    for net, opt in ((c.q1, trainer.opt1), (c.q2, trainer.opt2)):
        opt.zero_grad()
        pred = net(c._inputs(tokens, emb)).reshape(-1)
        loss = mse(pred, (target - c.offset) / c.scale)
        if not np.isfinite(loss.data):
            raise NonFiniteError("critic loss is not finite")
        loss.backward()
        opt.step(lr)
        losses.append(float(loss.data) * c.scale ** 2)
    c.updates += 1
    return losses[0], losses[1]


def _check_finite(named):
    for name, p in named:
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteError(f"parameter {name!r} became non-finite")


def actor_update(actor: Denoiser, actor_opt: Adam, critics: CriticPair, obs: Sequence[Observation],
                 schedule: DiffusionSchedule, rng: np.random.Generator, scene: Scene | None = None,
                 guidance: bool = True, lr: float | None = None, trace=None) -> float:
    """One gradient-ascent step on mean Q1(o, actor(o)); returns the objective before the step."""
    if trace is None:
        trace = reverse_sample(actor, schedule, obs, rng, guidance=guidance, scene=scene, differentiable=True)
    if not trace.x0.requires_grad:
        raise ContractError("actor update needs a differentiable sample trace")
    actor_opt.zero_grad()
    for p in critics.q1.parameters():
        p.grad = None
    q1, _ = critics.q_values(stack_tokens(obs), trace.x0)
    objective = q1.mean()
    (-objective).backward()
    # the critic is frozen here: drop whatever gradient reached it
    for p in critics.q1.parameters():
        p.grad = None
    actor_opt.step(lr)
    _check_finite(actor.named_parameters())
    return float(objective.data)


# ---------------------------------------------------------------------------
# Environment and training loop
# ---------------------------------------------------------------------------

@dataclass
class ContextSampler:
    """Draws random user layouts around the BS and turns them into observations.

    Users are placed uniformly (by area) in an annulus around the BS and kept
    at least ``ris_clearance`` metres away from every RIS.
    """

    scene: Scene
    num_interferers: int = 0
    r_min: float = 12.0
    r_max: float = 40.0
    interferer_r_min: float | None = None
    interferer_r_max: float | None = None
    ris_clearance: float = 1.0

    def _point(self, rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
        while True:
            r = math.sqrt(rng.uniform(lo * lo, hi * hi))
            a = rng.uniform(0, 2 * math.pi)
            p = self.scene.bs_pos + r * np.array([math.cos(a), math.sin(a)])
            if np.min(np.linalg.norm(self.scene.ris_pos - p, axis=1)) >= self.ris_clearance:
                return p

    def positions(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        lo_i = self.r_min if self.interferer_r_min is None else self.interferer_r_min
        hi_i = self.r_max if self.interferer_r_max is None else self.interferer_r_max
        target = self._point(rng, self.r_min, self.r_max)
        inter = np.array([self._point(rng, lo_i, hi_i) for _ in range(self.num_interferers)]).reshape(-1, 2)
        return target, inter

    def sample(self, rng: np.random.Generator, n: int) -> list[Observation]:
        from .channel import snapshot_from_positions
        out = []
        for _ in range(n):
            t, m = self.positions(rng)
            out.append(encode_observation(snapshot_from_positions(t, m, self.scene), self.scene))
        return out


@dataclass
class TrainConfig:
    env_steps: int = 5000
    collect_per_iter: int = 16
    updates_per_iter: int = 4
    batch_size: int = 128
    actor_batch: int = 32
    actor_lr: float = 1e-4
    critic_lr: float = 1e-4
    policy_delay: int = 2
    buffer_capacity: int = 100_000
    explore_start: float = 1.5
    explore_end: float = 1.0
    warmup_steps: int = 256
    guidance: bool = True
    quantize_bits: int | None = None
    schedule_kind: str = "cosine"
    T: int = 4
    eta: float = 0.1
    width: int = 256
    head_hidden: int = 256
    critic_hidden: int = 256
    seed: int = 0


@dataclass
class TrainResult:
    actor: Denoiser
    critics: CriticPair
    schedule: DiffusionSchedule
    curve: list[tuple[int, float, float, float]] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    actor_updates: int = 0


def env_reward(csi: CsiSnapshot, theta: np.ndarray, scene: Scene, bits: int | None = None) -> float:
    """Rate with every RIS ON; with ``bits`` the phases pass through the hardware quantiser first."""
    theta = np.asarray(theta, dtype=float).reshape(csi.num_ris, -1)
    if bits:
        theta = torus.quantize_phases(theta, bits)
    return achievable_rate(csi, theta, np.ones(csi.num_ris), scene)


def make_actor(scene: Scene, cfg: TrainConfig, rng: np.random.Generator) -> Denoiser:
    dcfg = DenoiserConfig(num_ris=scene.num_ris, elements=scene.elements_per_ris, width=cfg.width,
                          ff_hidden=cfg.width, head_hidden=cfg.head_hidden)
    return Denoiser(dcfg, rng)


def train_loop(env: ContextSampler, cfg: TrainConfig,
               on_row: Callable[[tuple], None] | None = None) -> TrainResult:
    """Collect / critic-update / delayed actor-update until ``env_steps`` transitions are stored."""
    scene = env.scene
    rng = np.random.default_rng(cfg.seed)
    init_rng, env_rng, act_rng, buf_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, size=4))
    schedule = build_schedule(cfg.schedule_kind, cfg.T, cfg.eta)
    actor = make_actor(scene, cfg, init_rng)

    # reward scale from a probe of random phases; fixed for the whole run
    probe = env.sample(np.random.default_rng(cfg.seed + 1), 64)
    R, N = scene.num_ris, scene.elements_per_ris
    probe_r = [env_reward(o.csi, rng.uniform(0, 2 * math.pi, (R, N)), scene, cfg.quantize_bits) for o in probe]
    offset, scale = float(np.mean(probe_r)), float(max(np.std(probe_r), 1e-3))
    critics = CriticPair(R, N, init_rng, cfg.critic_hidden, offset, scale)
    ctrainer = CriticTrainer(critics, cfg.critic_lr)
    actor_opt = Adam(actor.named_parameters(), lr=cfg.actor_lr)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    result = TrainResult(actor, critics, schedule)

    steps = 0
    while steps < cfg.env_steps:
        n = min(cfg.collect_per_iter, cfg.env_steps - steps)
        frac = steps / max(cfg.env_steps, 1)
        explore = cfg.explore_start + (cfg.explore_end - cfg.explore_start) * frac
        obs = env.sample(env_rng, n)
        trace = reverse_sample(actor, schedule, obs, act_rng, guidance=cfg.guidance, scene=scene,
                               noise_scale=explore)
        batch_rewards = []
        for o, th in zip(obs, trace.phases):
            r = env_reward(o.csi, th, scene, cfg.quantize_bits)
            buffer.add(Transition(o, th.reshape(-1), r))
            batch_rewards.append(r)
        result.rewards.extend(batch_rewards)
        steps += n
        l1 = l2 = float("nan")
        if len(buffer) >= min(cfg.warmup_steps, cfg.env_steps):
            for _ in range(cfg.updates_per_iter):
                l1, l2 = critic_update(ctrainer, buffer.sample(buf_rng, cfg.batch_size))
                _check_finite(critics.q1.named_parameters() + critics.q2.named_parameters())
                if critics.updates % cfg.policy_delay == 0:
                    actor_obs = [t.obs for t in buffer.sample(buf_rng, cfg.actor_batch)]
                    actor_update(actor, actor_opt, critics, actor_obs, schedule, act_rng,
                                 scene=scene, guidance=cfg.guidance)
                    result.actor_updates += 1
        row = (steps, float(np.mean(batch_rewards)), l1, l2)
        result.curve.append(row)
        if on_row is not None:
            on_row(row)
    return result


def evaluate_policy(actor: Denoiser, schedule: DiffusionSchedule, obs: Sequence[Observation], scene: Scene,
                    seed: int, guidance: bool = True, manifold: bool = True) -> np.ndarray:
    """Greedy (unit-noise) samples for each observation; returns (B, R, N) phases."""
    trace = reverse_sample(actor, schedule, obs, np.random.default_rng(seed), guidance=guidance,
                           scene=scene, manifold=manifold)
    return trace.phases
