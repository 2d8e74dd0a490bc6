"""One control interval: predict positions, rebuild CSI, sample phases, decide ON/OFF.

Also hosts the reference configuration policies used as baselines and oracles.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from . import torus
from .channel import (CsiSnapshot, Scene, achievable_rate, aligned_phases, phases_for_sum, ris_sum_factor, sinr,
                      snapshot_from_positions)
from .diffusion import Denoiser, DiffusionSchedule, encode_observation, reverse_sample
from .trajectory import PredictorModel, predict_rollout

BASELINE_MODES = ("always_on", "all_off", "random_phase", "aligned_oracle", "disk_oracle",
                  "exhaustive_quantized", "euclidean_diffusion")


@dataclass
class ControlDecision:
    phases: np.ndarray
    activation: np.ndarray
    ar_on: float
    ar_off: float
    per_ris_marginals: np.ndarray
    rate: float = float("nan")
    evaluated: int = 0

    def __post_init__(self):
        if self.ar_on < 0 or self.ar_off < 0:
            raise ValueError("rates cannot be negative")
        if np.isnan(self.rate):
            self.rate = self.ar_on if np.all(self.activation == 1) else float("nan")


def _rate(csi, phases, v, scene) -> float:
    return achievable_rate(csi, phases, v, scene)


def decide_onoff(csi: CsiSnapshot, phases, scene: Scene) -> ControlDecision:
    """Single ascending sweep from all-ON; RIS i stays ON iff its ON rate >= its OFF rate.

    If the sweep ends below the all-OFF rate, all-OFF is returned instead. For
    one RIS this is exactly the on >= off comparison.
    """
    phases = np.asarray(phases, dtype=float).reshape(csi.num_ris, -1)
    R = csi.num_ris
    v = np.ones(R)
    ar_on = _rate(csi, phases, v, scene)
    ar_off = achievable_rate(csi, phases, None, scene, mode="all_off")
    marginals = np.zeros(R)
    for i in range(R):
        on = v.copy(); on[i] = 1
        off = v.copy(); off[i] = 0
        r_on, r_off = _rate(csi, phases, on, scene), _rate(csi, phases, off, scene)
        marginals[i] = r_on - r_off
        v[i] = 1.0 if r_on >= r_off else 0.0
    final = _rate(csi, phases, v, scene)
    if final < ar_off:
        v[:] = 0
        final = ar_off
    return ControlDecision(phases, v, ar_on, ar_off, marginals, final)


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def _sinr_grid(base_a, base_b, c, d, S, scene):
    A = base_a + S * c
    B = base_b + S * d
    P = scene.tx_power
    return P * np.abs(A) ** 2 / (P * np.abs(B) ** 2 + scene.noise_power)


def disk_oracle_sums(csi: CsiSnapshot, scene: Scene, grid: int = 201, max_sweeps: int = 20,
                     refine: bool = True) -> np.ndarray:
    """Coordinate search over each RIS's element sum, restricted to the disk |S| <= N.

    The SINR only sees the phases through these sums, so this is an exact
    reformulation; each coordinate step is a grid search plus a local polish.
    """
    N, R = scene.elements_per_ris, csi.num_ris
    c, d = csi.target_cascade, csi.interference_cascade
    if N == 1:
        cand = np.exp(1j * np.linspace(0, 2 * np.pi, 3600, endpoint=False))
    else:
        g = np.linspace(-N, N, grid)
        Z = g[None, :] + 1j * g[:, None]
        cand = Z[np.abs(Z) <= N]
    sums = np.zeros(R, dtype=complex)
    best = -np.inf
    for _ in range(max_sweeps):
        improved = False
        for i in range(R):
            others = np.delete(np.arange(R), i)
            base_a = csi.h_l + np.sum(sums[others] * c[others])
            base_b = csi.interference_direct + np.sum(sums[others] * d[others])
            vals = _sinr_grid(base_a, base_b, c[i], d[i], cand, scene)
            j = int(np.argmax(vals))
            s_new, v_new = cand[j], vals[j]
            if refine:
                s_new, v_new = _polish(base_a, base_b, c[i], d[i], s_new, v_new, N, scene)
            cur = _sinr_grid(base_a, base_b, c[i], d[i], sums[i], scene)
            if v_new > cur * (1 + 1e-12):
                sums[i] = s_new
                improved = True
        current = float(np.log2(1 + _sinr_total(csi, sums, scene)))
        if not improved or current <= best:
            break
        best = current
    return sums


def _sinr_total(csi, sums, scene):
    A = csi.h_l + np.sum(sums * csi.target_cascade)
    B = csi.interference_direct + np.sum(sums * csi.interference_cascade)
    P = scene.tx_power
    return P * abs(A) ** 2 / (P * abs(B) ** 2 + scene.noise_power)


def _polish(base_a, base_b, c, d, s0, v0, N, scene):
    if N == 1:
        f = lambda a: -np.log(_sinr_grid(base_a, base_b, c, d, np.exp(1j * a), scene))
        a0 = np.angle(s0)
        res = minimize_scalar(f, bounds=(a0 - 0.01, a0 + 0.01), method="bounded",
                              options={"xatol": 1e-12})
        s = np.exp(1j * res.x)
    else:
        f = lambda z: -np.log(_sinr_grid(base_a, base_b, c, d, z[0] + 1j * z[1], scene))
        cons = {"type": "ineq", "fun": lambda z: N * N - z[0] ** 2 - z[1] ** 2}
        res = minimize(f, [s0.real, s0.imag], method="SLSQP", constraints=[cons],
                       options={"ftol": 1e-15, "maxiter": 200})
        s = complex(res.x[0], res.x[1])
        if abs(s) > N:
            s *= N / abs(s)
    v = _sinr_grid(base_a, base_b, c, d, s, scene)
    return (s, v) if v > v0 else (s0, v0)


def exhaustive_quantized(csi: CsiSnapshot, scene: Scene, bits: int = 2,
                         brute_limit: int = 1 << 16) -> tuple[np.ndarray, float, int]:
    """Exact best over all 2^bits-level phase assignments; returns (phases, rate, count).

    Small instances are enumerated configuration by configuration. Larger ones
    enumerate per-RIS level multisets, which is exact because the rate depends
    on each RIS only through its element sum.
    """
    N, R = scene.elements_per_ris, csi.num_ris
    L = 2 ** bits
    if N * R * bits > 32:
        raise ValueError(f"exhaustive search over {L}^{N * R} configurations is too large")
    levels = 2 * np.pi * np.arange(L) / L
    phasors = np.exp(1j * levels)
    c, d = csi.target_cascade, csi.interference_cascade
    P, n0 = scene.tx_power, scene.noise_power
    if L ** (N * R) <= brute_limit:
        idx = np.array(list(itertools.product(range(L), repeat=N * R))).reshape(-1, R, N)
        sums = phasors[idx].sum(axis=2)
        A = csi.h_l + (sums * c).sum(axis=1)
        B = csi.interference_direct + (sums * d).sum(axis=1)
        gam = P * np.abs(A) ** 2 / (P * np.abs(B) ** 2 + n0)
        j = int(np.argmax(gam))
        return levels[idx[j]], float(np.log2(1 + gam[j])), len(idx)
    multisets = list(itertools.combinations_with_replacement(range(L), N))
    ms_sums = np.array([phasors[list(m)].sum() for m in multisets])
    best, best_combo, count = -1.0, None, 0
    for combo in itertools.product(range(len(multisets)), repeat=R):
        s = ms_sums[list(combo)]
        g = _sinr_total(csi, s, scene)
        count += 1
        if g > best:
            best, best_combo = g, combo
    phases = np.array([levels[list(multisets[k])] for k in best_combo])
    return phases, float(np.log2(1 + best)), count


def quantization_gap_bound(csi: CsiSnapshot, scene: Scene, sums: np.ndarray, bits: int,
                           samples: int = 720) -> float:
    """Upper bound on rate(sums) - best quantized rate.

    Quantising every phase moves each element sum by at most
    N * 2 sin(pi / 2^(bits+1)); the bound is the worst rate drop over that
    neighbourhood of each sum (sampled on its boundary and interior rings).
    """
    N = scene.elements_per_ris
    radius = N * 2 * math.sin(math.pi / 2 ** (bits + 1))
    ref = math.log2(1 + _sinr_total(csi, sums, scene))
    worst = ref
    ring = np.exp(1j * np.linspace(0, 2 * np.pi, samples, endpoint=False))
    if csi.num_ris != 1:
        raise ValueError("gap bound implemented for a single RIS")
    for frac in np.linspace(0.0, 1.0, 41):
        cand = sums[0] + frac * radius * ring
        cand = cand[np.abs(cand) <= N + 1e-12]
        if cand.size == 0:
            continue
        g = _sinr_grid(csi.h_l, csi.interference_direct, csi.target_cascade[0],
                       csi.interference_cascade[0], cand, scene)
        worst = min(worst, float(np.log2(1 + g.min())))
    return ref - worst


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

@dataclass
class PolicyBundle:
    """Trained actor plus its sampling settings.

    With ``num_candidates > 1`` the sampler draws that many configurations in
    one batch and keeps the one with the highest predicted all-ON rate, scored
    after quantization when ``bits`` is set.
    """

    actor: Denoiser
    schedule: DiffusionSchedule
    guidance: bool = True
    num_candidates: int = 1
    bits: int | None = None

    def sample(self, csi: CsiSnapshot, scene: Scene, rng: np.random.Generator, manifold: bool = True) -> np.ndarray:
        obs = encode_observation(csi, scene)
        K = self.num_candidates
        phases = reverse_sample(self.actor, self.schedule, [obs] * K, rng, guidance=self.guidance,
                                scene=scene, manifold=manifold).phases
        if K == 1:
            return phases[0]
        on = np.ones(csi.num_ris)
        scores = [_rate(csi, torus.quantize_phases(p, self.bits) if self.bits else p, on, scene) for p in phases]
        return phases[int(np.argmax(scores))]


def _all_on(csi, phases, scene, evaluated=0) -> ControlDecision:
    R = csi.num_ris
    on = _rate(csi, phases, np.ones(R), scene)
    off = achievable_rate(csi, phases, None, scene, mode="all_off")
    return ControlDecision(np.asarray(phases), np.ones(R), on, off, np.zeros(R), on, evaluated)


def baseline_configure(csi: CsiSnapshot, scene: Scene, mode: str, policy_phases=None,
                       rng: np.random.Generator | None = None, bits: int = 2, grid: int = 201,
                       policy: PolicyBundle | None = None) -> ControlDecision:
    R, N = csi.num_ris, scene.elements_per_ris
    if mode == "always_on":
        if policy_phases is None:
            raise ValueError("always_on needs the policy's phases")
        return _all_on(csi, np.asarray(policy_phases).reshape(R, N), scene)
    if mode == "all_off":
        phases = np.zeros((R, N)) if policy_phases is None else np.asarray(policy_phases).reshape(R, N)
        off = achievable_rate(csi, phases, None, scene, mode="all_off")
        on = _rate(csi, phases, np.ones(R), scene)
        return ControlDecision(phases, np.zeros(R), on, off, np.zeros(R), off)
    if mode == "random_phase":
        rng = rng or np.random.default_rng()
        return _all_on(csi, rng.uniform(0, 2 * np.pi, (R, N)), scene)
    if mode == "aligned_oracle":
        return _all_on(csi, aligned_phases(csi, N), scene)
    if mode == "disk_oracle":
        sums = disk_oracle_sums(csi, scene, grid=grid)
        phases = np.stack([phases_for_sum(s, N) for s in sums])
        return _all_on(csi, phases, scene)
    if mode == "exhaustive_quantized":
        phases, _, count = exhaustive_quantized(csi, scene, bits)
        return _all_on(csi, phases, scene, evaluated=count)
    if mode == "euclidean_diffusion":
        if policy is None:
            raise ValueError("euclidean_diffusion needs a trained policy bundle")
        phases = policy.sample(csi, scene, rng or np.random.default_rng(), manifold=False)
        return _all_on(csi, phases, scene)
    raise ValueError(f"unknown baseline mode {mode!r}; expected one of {BASELINE_MODES}")


# ---------------------------------------------------------------------------
# Control interval
# ---------------------------------------------------------------------------

@dataclass
class FrameStage:
    name: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]


FRAME_PLAN = (
    FrameStage("pilot", ("histories",), ("predicted_positions",)),
    FrameStage("configuration", ("predicted_positions",), ("phases", "activation", "ar_on", "ar_off")),
    FrameStage("transmission", ("phases", "activation", "true_positions"), ("realized_ar",)),
)


@dataclass
class IntervalConfig:
    horizon_steps: int = 1
    quantize_bits: int | None = None
    mode: str = "tpgc"
    seed: int = 0


@dataclass
class IntervalResult:
    decision: ControlDecision
    predicted_positions: np.ndarray
    realized_ar: float
    predicted_ar: float
    stages: list[str] = field(default_factory=list)
    realized_sinr: float = float("nan")


class PerfectPredictor:
    """Stub predictor that returns known future positions (zero prediction error)."""

    window = 1

    def __init__(self, futures: dict[int, np.ndarray]):
        self.futures = futures


def _predict_positions(predictor, histories: Sequence[np.ndarray], horizon: int) -> np.ndarray:
    out = []
    for u, hist in enumerate(histories):
        if hist is None or len(hist) == 0:
            raise ValueError(f"missing history for user {u}")
        if isinstance(predictor, PerfectPredictor):
            out.append(np.asarray(predictor.futures[u])[horizon - 1])
        elif predictor is None:
            out.append(np.asarray(hist)[-1])
        else:
            out.append(predict_rollout(predictor, hist, horizon)[-1])
    return np.array(out)


def control_interval(predictor, policy: PolicyBundle | None, scene: Scene, histories: Sequence[np.ndarray],
                     true_positions: np.ndarray, cfg: IntervalConfig,
                     override_phases=None) -> IntervalResult:
    """Run the three frame stages. ``histories[0]`` is the target user, the rest interferers.

    ``true_positions`` are the actual positions at the horizon, used only in the
    transmission stage to score the decision. ``predictor=None`` means
    persistence (repeat the last observed position).
    """
    stages = []
    # pilot: predict every user's position at the horizon
    pred = _predict_positions(predictor, histories, cfg.horizon_steps)
    stages.append("pilot")
    # configuration
    csi_pred = snapshot_from_positions(pred[0], pred[1:], scene)
    rng = np.random.default_rng(cfg.seed)
    R, N = scene.num_ris, scene.elements_per_ris
    if override_phases is not None:
        phases = np.asarray(override_phases, dtype=float).reshape(R, N)
    elif cfg.mode in ("aligned_oracle", "tpc"):
        phases = aligned_phases(csi_pred, N)
    elif cfg.mode in ("disk_oracle",):
        phases = baseline_configure(csi_pred, scene, "disk_oracle").phases
    elif cfg.mode == "random_phase":
        phases = rng.uniform(0, 2 * np.pi, (R, N))
    elif cfg.mode == "all_off" and policy is None:
        phases = np.zeros((R, N))
    else:
        if policy is None:
            raise ValueError("a trained policy is required for this mode")
        phases = policy.sample(csi_pred, scene, rng, manifold=cfg.mode != "euclidean_diffusion")
    if cfg.quantize_bits:
        phases = torus.quantize_phases(phases, cfg.quantize_bits)
    if cfg.mode in ("tpgc", "tpc"):
        decision = decide_onoff(csi_pred, phases, scene)
    elif cfg.mode == "all_off":
        decision = baseline_configure(csi_pred, scene, "all_off", phases)
    else:
        decision = _all_on(csi_pred, phases, scene)
    stages.append("configuration")
    # transmission: score on the true geometry
    csi_true = snapshot_from_positions(true_positions[0], true_positions[1:], scene)
    realized = _rate(csi_true, decision.phases, decision.activation, scene)
    realized_sinr = sinr(csi_true, decision.phases, decision.activation, scene)
    stages.append("transmission")
    return IntervalResult(decision, pred, realized, decision.rate, stages, realized_sinr)
