"""Guided reverse diffusion on the torus, used as a generative phase actor.

The chain starts from a uniform torus point and runs T reverse steps. Each step
takes a denoiser prediction in the ambient space, optionally adds a
reward-gradient nudge, perturbs in the tangent space and projects back onto
the torus. All of it is built from :mod:`ris_control.nn_core` ops, so the final
sample can be differentiated with respect to the denoiser weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import torus
from .channel import CsiSnapshot, Scene, reward_phase_gradient
from .nn_core import (ContractError, Dense, Module, SelfAttentionBlock, Tensor, as_tensor, atan2,
                      concat, time_embedding)

SCHEDULE_KINDS = ("vp", "linear", "cosine")
TOKEN_FEATURES = 6


class SamplingError(RuntimeError):
    """The reverse chain hit a zero-norm block it could not recover from."""


@dataclass(frozen=True)
class DiffusionSchedule:
    kind: str
    beta: np.ndarray
    eta: float = 0.1

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    @property
    def beta_tilde(self) -> np.ndarray:
        ab = self.alpha_bar
        prev = np.concatenate([[1.0], ab[:-1]])
        return self.beta * (1.0 - prev) / (1.0 - ab)

    def step(self, k: int) -> tuple[float, float, float, float]:
        """(beta, alpha, alpha_bar, beta_tilde) for 1-based step k."""
        if not 1 <= k <= self.T:
            raise ContractError(f"step {k} outside [1, {self.T}]")
        i = k - 1
        return float(self.beta[i]), float(self.alpha[i]), float(self.alpha_bar[i]), float(self.beta_tilde[i])


def build_schedule(kind: str, T: int, eta: float = 0.1, max_beta: float = 0.999) -> DiffusionSchedule:
    if T < 1:
        raise ValueError("need at least one diffusion step")
    if eta < 0:
        raise ValueError("guidance weight must be non-negative")
    k = np.arange(1, T + 1, dtype=float)
    if kind == "linear":
        beta = np.linspace(1e-4, 0.2, T)
    elif kind == "cosine":
        s = 0.008
        f = lambda t: np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
        ab = f(np.arange(0, T + 1, dtype=float)) / f(0.0)
        beta = 1.0 - ab[1:] / ab[:-1]
    elif kind == "vp":
        b_min, b_max = 0.1, 20.0
        beta = 1.0 - np.exp(-b_min / T - (b_max - b_min) * (2 * k - 1) / (2 * T * T))
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    beta = np.clip(beta, 1e-8, max_beta)
    return DiffusionSchedule(kind, beta, eta)


# ---------------------------------------------------------------------------
# Observation encoding
# ---------------------------------------------------------------------------

def _compress(z: np.ndarray) -> np.ndarray:
    # keep the phase, squash the magnitude: z/|z| * log1p(|z|)
    mag = np.abs(z)
    scale = np.where(mag > 0, np.log1p(mag) / np.where(mag > 0, mag, 1.0), 1.0)
    return z * scale


@dataclass(frozen=True)
class Observation:
    """Token matrix for one snapshot: R per-RIS rows plus one global row.

    Everything is expressed relative to the target's direct channel (divided by
    ``h_l``), which removes the global phase reference without changing the
    rate as a function of the element sums.
    """

    tokens: np.ndarray
    csi: CsiSnapshot = field(repr=False)

    @property
    def num_ris(self) -> int:
        return self.tokens.shape[0] - 1


def encode_observation(csi: CsiSnapshot, scene: Scene) -> Observation:
    N = scene.elements_per_ris
    ref = csi.h_l
    c = _compress(N * csi.target_cascade / ref)
    d = _compress(N * csi.interference_cascade / ref)
    m = _compress(np.array([csi.interference_direct / ref]))[0]
    snr_db = 10 * math.log10(scene.tx_power * abs(ref) ** 2 / scene.noise_power)
    R = csi.num_ris
    tokens = np.zeros((R + 1, TOKEN_FEATURES))
    tokens[:R, 0], tokens[:R, 1] = c.real, c.imag
    tokens[:R, 2], tokens[:R, 3] = d.real, d.imag
    tokens[R] = [1.0, 0.0, m.real, m.imag, snr_db / 100.0, 1.0]
    if not np.all(np.isfinite(tokens)):
        raise ValueError("observation is not finite")
    return Observation(tokens, csi)


def stack_tokens(obs: Sequence[Observation]) -> np.ndarray:
    return np.stack([o.tokens for o in obs])


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    num_ris: int
    elements: int
    width: int = 256
    ff_hidden: int = 256
    head_hidden: int = 256
    time_dim: int = 16
    blocks: int = 2


class Denoiser(Module):
    """Attention over CSI tokens, then a shared per-RIS head predicting 2N outputs.

    The head for RIS i sees its own token, the global token, the step
    embedding and RIS i's current 2N-block of x_k.
    """

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        D = cfg.width
        self.embed = self.add_module("embed", Dense(TOKEN_FEATURES, D, rng, "tanh"))
        self.blocks = [self.add_module(f"attn{n}", SelfAttentionBlock(D, rng, cfg.ff_hidden))
                       for n in range(cfg.blocks)]
        head_in = 2 * D + cfg.time_dim + 2 * cfg.elements
        self.hidden = self.add_module("hidden", Dense(head_in, cfg.head_hidden, rng, "tanh"))
        self.head = self.add_module("head", Dense(cfg.head_hidden, 2 * cfg.elements, rng))

    @property
    def out_dim(self) -> int:
        return 2 * self.cfg.elements * self.cfg.num_ris

    def __call__(self, tokens, x_k, k: int) -> Tensor:
        cfg = self.cfg
        tokens = as_tensor(tokens)
        x_k = as_tensor(x_k)
        R, N = cfg.num_ris, cfg.elements
        if tokens.ndim != 3 or tokens.shape[1:] != (R + 1, TOKEN_FEATURES):
            raise ContractError(f"tokens must be (B, {R + 1}, {TOKEN_FEATURES}), got {tokens.shape}")
        B = tokens.shape[0]
        if x_k.shape != (B, 2 * N * R):
            raise ContractError(f"x_k must be ({B}, {2 * N * R}), got {x_k.shape}")
        h = self.embed(tokens)
        for block in self.blocks:
            h = block(h)
        per_ris = h[:, :R, :]
        glob = h[:, R:R + 1, :] * np.ones((1, R, 1))
        temb = np.broadcast_to(time_embedding(k, cfg.time_dim), (B, R, cfg.time_dim))
        feats = concat([per_ris, glob, Tensor(temb), x_k.reshape(B, R, 2 * N)], axis=-1)
        out = self.head(self.hidden(feats))
        return out.reshape(B, 2 * N * R)


def denoiser_forward(params: Denoiser, obs, x_k, k: int) -> Tensor:
    tokens = stack_tokens(obs) if isinstance(obs, (list, tuple)) else obs
    if isinstance(tokens, Observation):
        tokens = tokens.tokens[None]
    return params(tokens, x_k, k)


# ---------------------------------------------------------------------------
# Reverse sampler
# ---------------------------------------------------------------------------

def _torus_project_t(x: Tensor, B: int) -> Tensor:
    blocks = x.reshape(B, -1, 2)
    norm2 = (blocks * blocks).sum(axis=-1, keepdims=True)
    if np.any(norm2.data == 0):
        raise torus.SingularProjectionError("zero-norm block in torus projection")
    return (blocks / norm2.sqrt()).reshape(B, -1)


def _tangent_project_t(x: Tensor, xi: np.ndarray, B: int) -> Tensor:
    bx = x.reshape(B, -1, 2)
    bxi = Tensor(xi.reshape(B, -1, 2))
    radial = (bx * bxi).sum(axis=-1, keepdims=True)
    return (bxi - radial * bx).reshape(B, -1)


@dataclass
class SampleTrace:
    """Output of one batched reverse chain.

    ``x0`` is the final torus point as a graph node (differentiable w.r.t. the
    denoiser when sampled with ``differentiable=True``); ``path`` holds plain
    copies of x_T, ..., x_0.
    """

    phases: np.ndarray
    x0: Tensor
    path: list[np.ndarray]

    def phase_tensor(self) -> Tensor:
        B = self.x0.shape[0]
        blocks = self.x0.reshape(B, -1, 2)
        return atan2(blocks[..., 1], blocks[..., 0])


def guidance_direction(x: np.ndarray, csis: Sequence[CsiSnapshot], scene: Scene) -> np.ndarray:
    """Rate gradient per sample, lifted into the tangent space at x (all RIS ON)."""
    B = x.shape[0]
    R = csis[0].num_ris
    theta = torus.recover_phases(x).reshape(B, R, -1)
    grads = np.stack([reward_phase_gradient(c, theta[b], np.ones(R), scene) for b, c in enumerate(csis)])
    return torus.project_tangent(x, torus.tangent_lift(x, grads.reshape(B, -1)))


def reverse_sample(params: Denoiser, schedule: DiffusionSchedule, obs: Sequence[Observation],
                   rng: np.random.Generator, guidance: bool = True, scene: Scene | None = None,
                   differentiable: bool = False, noise_scale: float = 1.0, manifold: bool = True,
                   init_kappa: float = 0.0, max_retries: int = 3) -> SampleTrace:
    """Run the T-step guided reverse chain for a batch of observations.

    ``noise_scale`` multiplies beta_tilde (exploration). With ``manifold=False``
    the torus and tangent projections are skipped until the final step, which
    gives the Euclidean baseline. Guidance is treated as a constant with
    respect to the denoiser weights.
    """
    obs = list(obs)
    if not obs:
        raise ContractError("empty observation batch")
    if guidance and scene is None:
        raise ContractError("guidance needs the scene for rate gradients")
    B = len(obs)
    cfg = params.cfg
    R, N = cfg.num_ris, cfg.elements
    tokens = stack_tokens(obs)
    if init_kappa > 0:
        x_np = torus.von_mises_torus(rng, init_kappa, (B, R * N))
    else:
        x_np = torus.uniform_torus(rng, (B, R * N))
    x = Tensor(x_np)
    path = [x_np.copy()]
    csis = [o.csi for o in obs]

    def run_denoiser(x_in: Tensor, k: int) -> Tensor:
        if differentiable:
            return params(tokens, x_in, k)
        return Tensor(params(tokens, Tensor(x_in.data), k).data)

    for k in range(schedule.T, 0, -1):
        beta, alpha, alpha_bar, beta_tilde = schedule.step(k)
        eps = run_denoiser(x, k)
        G = (x - eps * (beta / math.sqrt(1.0 - alpha_bar))) * (1.0 / math.sqrt(alpha))
        if guidance and schedule.eta > 0:
            G = G + schedule.eta * guidance_direction(x.data, csis, scene)
        if k > 1:
            scale = math.sqrt(beta_tilde * noise_scale)
            for attempt in range(max_retries + 1):
                xi = rng.standard_normal((B, 2 * N * R))
                try:
                    if manifold:
                        x_next = _torus_project_t(G + _tangent_project_t(x, xi, B) * scale, B)
                    else:
                        x_next = G + Tensor(xi) * scale
                    break
                except torus.SingularProjectionError:
                    if attempt == max_retries:
                        raise SamplingError(f"zero-norm block at step {k} after {max_retries} retries")
        else:
            try:
                x_next = _torus_project_t(G, B)
            except torus.SingularProjectionError as exc:
                raise SamplingError("zero-norm block at the final projection") from exc
        x = x_next if differentiable else Tensor(x_next.data)
        path.append(x.data.copy())
    phases = torus.recover_phases(x.data).reshape(B, R, N)
    return SampleTrace(phases, x, path)
