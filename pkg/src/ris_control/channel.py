"""Deterministic line-of-sight channels, SINR and achievable rate for a multi-RIS uplink.

Each RIS enters the signal model through one complex number per user: the
cascade ``h_i * h_ui`` scaled by the element sum ``S_i = sum_n exp(j theta_n)``.
Everything here is plain numpy on complex scalars/arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0


class DegenerateGeometryError(ValueError):
    """A distance collapsed to zero (user sitting on the BS or on a RIS)."""


def ring_positions(num_ris: int, radius: float = 10.0, center=(0.0, 0.0)) -> np.ndarray:
    ang = 2 * np.pi * np.arange(num_ris) / num_ris
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)


@dataclass(frozen=True)
class Scene:
    """Static geometry and radio constants. Positions are planar, in metres."""

    ris_pos: np.ndarray
    elements_per_ris: int = 16
    bs_pos: np.ndarray = field(default_factory=lambda: np.zeros(2))
    wavelength: float = SPEED_OF_LIGHT / 3.5e9
    pathloss_exp: float = 2.0
    tx_power: float = 1.0
    noise_power: float = 1e-12
    incidence_efficiency: bool = False

    def __post_init__(self):
        object.__setattr__(self, "ris_pos", np.atleast_2d(np.asarray(self.ris_pos, dtype=float)))
        object.__setattr__(self, "bs_pos", np.asarray(self.bs_pos, dtype=float))
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if self.pathloss_exp < 1:
            raise ValueError("path-loss exponent must be >= 1")
        if self.tx_power <= 0 or self.noise_power <= 0:
            raise ValueError("transmit and noise power must be positive")
        if self.elements_per_ris < 1 or self.num_ris < 1:
            raise ValueError("need at least one RIS with at least one element")
        if np.any(np.linalg.norm(self.ris_pos - self.bs_pos, axis=1) == 0):
            raise DegenerateGeometryError("a RIS coincides with the BS")

    @property
    def num_ris(self) -> int:
        return self.ris_pos.shape[0]

    @property
    def snr_ref_db(self) -> float:
        return 10 * math.log10(self.tx_power / self.noise_power)

    def with_power(self, tx_power: float) -> "Scene":
        return replace(self, tx_power=tx_power)

    @classmethod
    def on_ring(cls, num_ris: int, radius: float = 10.0, **kw) -> "Scene":
        return cls(ris_pos=ring_positions(num_ris, radius), **kw)


@dataclass(frozen=True)
class CsiSnapshot:
    """Channel set for one target user and its interferers.

    ``h_mi`` has shape (R, M). Interferer terms are kept per user so the
    observation encoder and the SINR can both use them.
    """

    h_l: complex
    h_m: np.ndarray
    h_i: np.ndarray
    h_li: np.ndarray
    h_mi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "h_m", np.asarray(self.h_m, dtype=complex).reshape(-1))
        object.__setattr__(self, "h_i", np.asarray(self.h_i, dtype=complex).reshape(-1))
        object.__setattr__(self, "h_li", np.asarray(self.h_li, dtype=complex).reshape(-1))
        R, M = self.h_i.size, self.h_m.size
        object.__setattr__(self, "h_mi", np.asarray(self.h_mi, dtype=complex).reshape(R, M))
        if self.h_li.size != R:
            raise ValueError("h_i and h_li must have one entry per RIS")

    @property
    def num_ris(self) -> int:
        return self.h_i.size

    @property
    def num_interferers(self) -> int:
        return self.h_m.size

    # cascade terms per RIS (without the element sum)
    @property
    def target_cascade(self) -> np.ndarray:
        return self.h_i * self.h_li

    @property
    def interference_cascade(self) -> np.ndarray:
        return self.h_i * self.h_mi.sum(axis=1)

    @property
    def interference_direct(self) -> complex:
        return complex(self.h_m.sum())

    def rotated(self, phase: float) -> "CsiSnapshot":
        """Multiply every user-side coefficient by ``exp(j phase)``."""
        r = np.exp(1j * phase)
        return CsiSnapshot(self.h_l * r, self.h_m * r, self.h_i, self.h_li * r, self.h_mi * r)


def channel_coefficient(d, scene: Scene):
    """``d^(-alpha/2) * exp(-j 2 pi d / lambda)``; accepts scalars or arrays."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise DegenerateGeometryError(f"non-positive distance {d.min() if d.ndim else float(d)}")
    out = d ** (-scene.pathloss_exp / 2) * np.exp(-2j * np.pi * d / scene.wavelength)
    return complex(out) if out.ndim == 0 else out


def _incidence_gain(scene: Scene, user_pos: np.ndarray) -> np.ndarray:
    # RIS normals point at the BS; amplitude scales with cos of the incidence angle
    normals = scene.bs_pos - scene.ris_pos
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    inc = user_pos[None, :] - scene.ris_pos
    inc /= np.linalg.norm(inc, axis=1, keepdims=True)
    return np.clip((normals * inc).sum(axis=1), 0.0, 1.0)


def _user_to_ris(scene: Scene, pos: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(scene.ris_pos - pos[None, :], axis=1)
    h = channel_coefficient(d, scene)
    if scene.incidence_efficiency:
        h = h * _incidence_gain(scene, pos)
    return np.asarray(h)


def snapshot_from_positions(target_pos, interferer_pos, scene: Scene) -> CsiSnapshot:
    target = np.asarray(target_pos, dtype=float)
    interferers = np.asarray(interferer_pos, dtype=float).reshape(-1, 2)
    h_i = np.asarray(channel_coefficient(np.linalg.norm(scene.ris_pos - scene.bs_pos, axis=1), scene)).reshape(-1)
    h_l = channel_coefficient(np.linalg.norm(target - scene.bs_pos), scene)
    h_li = _user_to_ris(scene, target)
    if len(interferers):
        h_m = np.asarray(channel_coefficient(np.linalg.norm(interferers - scene.bs_pos, axis=1), scene)).reshape(-1)
        h_mi = np.stack([_user_to_ris(scene, p) for p in interferers], axis=1)
    else:
        h_m = np.zeros(0, dtype=complex)
        h_mi = np.zeros((scene.num_ris, 0), dtype=complex)
    return CsiSnapshot(h_l, h_m, h_i, h_li, h_mi)


def ris_sum_factor(theta):
    """Element sum ``sum_n exp(j theta_n)`` over the last axis."""
    return np.exp(1j * np.asarray(theta, dtype=float)).sum(axis=-1)


def _as_activation(act, R: int) -> np.ndarray:
    v = np.ones(R) if act is None else np.asarray(act, dtype=float).reshape(-1)
    if v.size != R or not np.all((v == 0) | (v == 1)):
        raise ValueError(f"activation must be {R} binary values, got {act}")
    return v


def sinr_from_sums(csi: CsiSnapshot, sums, act, scene: Scene) -> float:
    """SINR as a function of the per-RIS element sums only."""
    sums = np.asarray(sums, dtype=complex).reshape(-1)
    v = _as_activation(act, csi.num_ris)
    if sums.size != csi.num_ris:
        raise ValueError("one element sum per RIS expected")
    signal = csi.h_l + np.sum(v * sums * csi.target_cascade)
    interference = csi.interference_direct + np.sum(v * sums * csi.interference_cascade)
    P, n = scene.tx_power, scene.noise_power
    return float(P * abs(signal) ** 2 / (P * abs(interference) ** 2 + n))


def sinr(csi: CsiSnapshot, phases, act, scene: Scene) -> float:
    theta = np.asarray(phases, dtype=float).reshape(csi.num_ris, -1)
    return sinr_from_sums(csi, ris_sum_factor(theta), act, scene)


def achievable_rate(csi: CsiSnapshot, phases, act, scene: Scene, mode: str = "on_config") -> float:
    if mode == "all_off":
        return float(np.log2(1 + sinr_from_sums(csi, np.zeros(csi.num_ris), np.zeros(csi.num_ris), scene)))
    if mode != "on_config":
        raise ValueError(f"unknown rate mode {mode!r}")
    return float(np.log2(1 + sinr(csi, phases, act, scene)))


def reward_phase_gradient(csi: CsiSnapshot, phases, act, scene: Scene) -> np.ndarray:
    """Exact d(rate)/d(theta) with shape (R, N).

    With A = h_l + sum v S c, B = h_m + sum v S d and Z = P|B|^2 + noise,
    rate = log2(P|A|^2) - log2(Z), and dS/dtheta_n = j exp(j theta_n).
    """
    theta = np.asarray(phases, dtype=float).reshape(csi.num_ris, -1)
    v = _as_activation(act, csi.num_ris)
    e = np.exp(1j * theta)
    sums = e.sum(axis=1)
    c, d = csi.target_cascade, csi.interference_cascade
    A = csi.h_l + np.sum(v * sums * c)
    B = csi.interference_direct + np.sum(v * sums * d)
    P, n = scene.tx_power, scene.noise_power
    num = P * abs(A) ** 2
    den = P * abs(B) ** 2 + n
    # d|A|^2/dtheta_n = 2 Re(conj(A) * v c j e_n)
    dA2 = 2 * np.real(np.conj(A) * (v * c)[:, None] * 1j * e)
    dB2 = 2 * np.real(np.conj(B) * (v * d)[:, None] * 1j * e)
    dgamma = (P * dA2 * den - num * P * dB2) / den ** 2
    gamma = num / den
    return dgamma / ((1 + gamma) * math.log(2))


def aligned_phases(csi: CsiSnapshot, N: int) -> np.ndarray:
    """Per-RIS co-phasing angle ``arg(h_l) - arg(h_i h_li)`` wrapped to [0, 2pi), repeated N times."""
    theta = np.mod(np.angle(csi.h_l) - np.angle(csi.target_cascade), 2 * np.pi)
    return np.repeat(theta[:, None], N, axis=1)


def aligned_rate_closed_form(csi: CsiSnapshot, scene: Scene) -> float:
    """Rate at the co-phased optimum for one RIS and no interferers."""
    N = scene.elements_per_ris
    amp = abs(csi.h_l) + N * abs(csi.target_cascade[0])
    return float(np.log2(1 + scene.tx_power * amp ** 2 / scene.noise_power))


def phases_for_sum(target, N: int) -> np.ndarray:
    """N angles whose unit phasors add up to ``target`` (|target| <= N).

    For N == 1 only the unit circle is reachable; the angle of ``target`` is used.
    """
    target = complex(target)
    mag, ang = abs(target), np.angle(target)
    if N == 1:
        return np.mod(np.array([ang]), 2 * np.pi)
    mag = min(mag, N)
    if N % 2 == 0:
        delta = math.acos(max(-1.0, min(1.0, mag / N)))
        out = np.concatenate([np.full(N // 2, ang + delta), np.full(N // 2, ang - delta)])
    else:
        delta = math.acos(max(-1.0, min(1.0, (mag - 1) / (N - 1))))
        half = (N - 1) // 2
        out = np.concatenate([[ang], np.full(half, ang + delta), np.full(half, ang - delta)])
    return np.mod(out, 2 * np.pi)
