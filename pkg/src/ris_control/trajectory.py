"""GeoLife ingestion, planar kinematics and a two-layer LSTM next-position predictor."""

from __future__ import annotations

import datetime as dt
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .nn_core import LSTMCell, Adam, Dense, Module, Tensor, mse, load_checkpoint, save_checkpoint

EARTH_RADIUS_M = 6_371_000.0
PLT_HEADER_LINES = 6
# GeoLife day numbers count from 1899-12-30 (spreadsheet epoch)
_SERIAL_EPOCH = dt.datetime(1899, 12, 30)
_DEFAULT_HEADER = [
    "Geolife trajectory",
    "WGS 84",
    "Altitude is in Feet",
    "Reserved 3",
    "0,2,255,My Track,0,0,2,8421376",
    "0",
]


class PltParseError(ValueError):
    pass


@dataclass(frozen=True)
class GpsPoint:
    lat: float
    lon: float
    t: float  # seconds since the serial-day epoch
    altitude_ft: float = 0.0

    def __post_init__(self):
        if abs(self.lat) > 90 or abs(self.lon) > 180:
            raise ValueError(f"coordinates out of range: {self.lat}, {self.lon}")


@dataclass(frozen=True)
class KinematicSample:
    q: tuple[float, float]
    speed: float
    heading: float


# ---------------------------------------------------------------------------
# .plt files
# ---------------------------------------------------------------------------

def parse_plt(raw: str | TextIO) -> list[GpsPoint]:
    text = raw if isinstance(raw, str) else raw.read()
    lines = text.splitlines()
    if len(lines) < PLT_HEADER_LINES:
        raise PltParseError(f"expected {PLT_HEADER_LINES} header lines, got {len(lines)}")
    points: list[GpsPoint] = []
    for row, line in enumerate(lines[PLT_HEADER_LINES:]):
        if not line.strip():
            continue
        parts = line.strip().split(",")
        if len(parts) != 7:
            raise PltParseError(f"row {row}: expected 7 fields, got {len(parts)}")
        try:
            lat, lon = float(parts[0]), float(parts[1])
            alt = float(parts[3])
            day = float(parts[4])
            point = GpsPoint(lat, lon, day * 86400.0, alt)
        except ValueError as exc:
            raise PltParseError(f"row {row}: {exc}") from exc
        if points and point.t <= points[-1].t:
            raise PltParseError(f"row {row}: timestamp not increasing")
        points.append(point)
    return points


def read_plt(path) -> list[GpsPoint]:
    return parse_plt(Path(path).read_text())


def timestamp_from_fields(date: str, time: str) -> float:
    stamp = dt.datetime.strptime(f"{date} {time}", "%Y-%m-%d %H:%M:%S")
    return (stamp - _SERIAL_EPOCH).total_seconds()


def serialize_plt(points: Sequence[GpsPoint]) -> str:
    out = io.StringIO()
    for line in _DEFAULT_HEADER:
        out.write(line + "\n")
    for p in points:
        day = p.t / 86400.0
        stamp = _SERIAL_EPOCH + dt.timedelta(seconds=round(p.t))
        alt = int(p.altitude_ft) if float(p.altitude_ft).is_integer() else p.altitude_ft
        out.write(f"{p.lat!r},{p.lon!r},0,{alt},{day!r},{stamp:%Y-%m-%d},{stamp:%H:%M:%S}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def haversine_distance(a: GpsPoint, b: GpsPoint) -> float:
    return float(haversine_array(a.lat, a.lon, b.lat, b.lon))


def haversine_array(lat1, lon1, lat2, lon2):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def local_projection(points: Sequence[GpsPoint], origin: GpsPoint) -> np.ndarray:
    """Equirectangular metres around ``origin``: x east, y north."""
    lat = np.radians([p.lat for p in points])
    lon = np.radians([p.lon for p in points])
    lat0, lon0 = math.radians(origin.lat), math.radians(origin.lon)
    x = EARTH_RADIUS_M * (lon - lon0) * math.cos(lat0)
    y = EARTH_RADIUS_M * (lat - lat0)
    return np.stack([x, y], axis=1)


def inverse_projection(xy: np.ndarray, origin: GpsPoint) -> tuple[np.ndarray, np.ndarray]:
    lat0, lon0 = math.radians(origin.lat), math.radians(origin.lon)
    lat = lat0 + xy[:, 1] / EARTH_RADIUS_M
    lon = lon0 + xy[:, 0] / (EARTH_RADIUS_M * math.cos(lat0))
    return np.degrees(lat), np.degrees(lon)


def resample_uniform(t: np.ndarray, xy: np.ndarray, step: float = 1.0) -> np.ndarray:
    """Linear interpolation of a planar trace onto a uniform time grid."""
    t = np.asarray(t, dtype=float)
    grid = np.arange(t[0], t[-1] + 1e-9, step)
    return np.stack([np.interp(grid, t, xy[:, 0]), np.interp(grid, t, xy[:, 1])], axis=1)


def planar_trace(points: Sequence[GpsPoint], step: float = 1.0, origin: GpsPoint | None = None) -> np.ndarray:
    origin = points[0] if origin is None else origin
    xy = local_projection(points, origin)
    return resample_uniform(np.array([p.t for p in points]), xy, step)


def kinematic_features(trace: np.ndarray, step: float = 1.0) -> list[KinematicSample]:
    trace = np.asarray(trace, dtype=float)
    speed, heading = _speed_heading(trace, step)
    return [KinematicSample((float(q[0]), float(q[1])), float(v), float(h))
            for q, v, h in zip(trace, speed, heading)]


def _speed_heading(trace: np.ndarray, step: float) -> tuple[np.ndarray, np.ndarray]:
    if len(trace) < 2:
        raise ValueError("need at least two points for kinematic features")
    if step <= 0:
        raise ValueError("sampling interval must be positive")
    diff = np.diff(trace, axis=0)
    speed = np.concatenate([[0.0], np.hypot(diff[:, 0], diff[:, 1]) / step])
    heading = np.concatenate([[0.0], np.arctan2(diff[:, 1], diff[:, 0])])
    # atan2 returns +pi for the negative x axis; fold it to -pi so headings sit in [-pi, pi)
    heading = np.where(heading >= math.pi, -math.pi, heading)
    return speed, heading


def feature_matrix(trace: np.ndarray, step: float = 1.0) -> np.ndarray:
    """Per-sample (x, y, speed, cos heading, sin heading)."""
    speed, heading = _speed_heading(trace, step)
    return np.column_stack([trace, speed, np.cos(heading), np.sin(heading)])


# ---------------------------------------------------------------------------
# Predictor
# ---------------------------------------------------------------------------

@dataclass
class PredictorConfig:
    window: int = 5
    hidden: int = 64
    epochs: int = 60
    batch_size: int = 256
    lr: float = 3e-3
    step: float = 1.0
    seed: int = 0


class PredictorModel(Module):
    """Two stacked LSTM cells and a dense head mapping to the next planar step.

    Inputs per window step: position relative to the window's last point,
    speed, cos/sin heading. The head predicts the displacement to the next
    point; normalisation statistics are stored with the weights.
    """

    def __init__(self, cfg: PredictorConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.window < 2:
            raise ValueError("window must be at least 2")
        self.cfg = cfg
        self.lstm1 = self.add_module("lstm1", LSTMCell(5, cfg.hidden, rng))
        self.lstm2 = self.add_module("lstm2", LSTMCell(cfg.hidden, cfg.hidden, rng))
        self.head = self.add_module("head", Dense(cfg.hidden, 2, rng))
        self.in_mean = np.zeros(5)
        self.in_scale = np.ones(5)
        self.out_scale = np.ones(2)
        self.loss_history: list[float] = []

    @property
    def window(self) -> int:
        return self.cfg.window

    def normalize(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.in_mean) / self.in_scale

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.in_scale + self.in_mean

    def forward(self, windows: np.ndarray) -> Tensor:
        """``windows``: (B, H, 5) relative features -> normalised displacement (B, 2)."""
        z = self.normalize(windows)
        B = z.shape[0]
        s1 = self.lstm1.initial_state(B)
        s2 = self.lstm2.initial_state(B)
        h2 = s2[0]
        for t in range(z.shape[1]):
            h1, s1 = self.lstm1(Tensor(z[:, t, :]), s1)
            h2, s2 = self.lstm2(h1, s2)
        return self.head(h2)

    def predict_next(self, feats_window: np.ndarray) -> np.ndarray:
        """Absolute next position for each (B, H, 5) absolute-feature window."""
        rel, last = _relative(feats_window)
        disp = self.forward(rel).data * self.out_scale
        return last + disp

    def state(self) -> dict[str, np.ndarray]:
        st = self.state_dict()
        st["norm.in_mean"] = self.in_mean
        st["norm.in_scale"] = self.in_scale
        st["norm.out_scale"] = self.out_scale
        st["meta.window_hidden"] = np.array([self.cfg.window, self.cfg.hidden], dtype=float)
        return st

    def save(self, path) -> None:
        save_checkpoint(path, self.state())

    @classmethod
    def load(cls, path) -> "PredictorModel":
        st = load_checkpoint(path)
        window, hidden = (int(v) for v in st.pop("meta.window_hidden"))
        model = cls(PredictorConfig(window=window, hidden=hidden), np.random.default_rng(0))
        model.in_mean = st.pop("norm.in_mean")
        model.in_scale = st.pop("norm.in_scale")
        model.out_scale = st.pop("norm.out_scale")
        model.load_state_dict(st)
        return model


def _relative(windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    last = windows[:, -1, :2].copy()
    rel = windows.copy()
    rel[:, :, :2] -= last[:, None, :]
    return rel, last


def make_windows(traces: Sequence[np.ndarray], window: int, step: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Sliding windows of absolute features and the following position."""
    xs, ys = [], []
    for tr in traces:
        feats = feature_matrix(tr, step)
        for s in range(len(tr) - window):
            xs.append(feats[s:s + window])
            ys.append(tr[s + window])
    if not xs:
        return np.zeros((0, window, 5)), np.zeros((0, 2))
    return np.stack(xs), np.stack(ys)


def train_predictor(traces: Sequence[np.ndarray], cfg: PredictorConfig | None = None) -> PredictorModel:
    cfg = cfg or PredictorConfig()
    if not traces:
        raise ValueError("no training traces")
    short = min(range(len(traces)), key=lambda i: len(traces[i]))
    if len(traces[short]) <= cfg.window:
        raise ValueError(f"trace {short} has {len(traces[short])} points; need more than window={cfg.window}")
    rng = np.random.default_rng(cfg.seed)
    model = PredictorModel(cfg, rng)
    X, Y = make_windows(traces, cfg.window, cfg.step)
    rel, last = _relative(X)
    disp = Y - last
    flat = rel.reshape(-1, 5)
    model.in_mean = np.concatenate([[0.0, 0.0], flat[:, 2:].mean(axis=0)])
    model.in_scale = np.maximum(flat.std(axis=0), 1e-3)
    model.in_scale[:2] = max(float(np.abs(rel[:, :, :2]).std()), 1e-3)
    model.out_scale = np.full(2, max(float(disp.std()), 1e-3))
    target = disp / model.out_scale
    opt = Adam(model.named_parameters(), lr=cfg.lr)
    n = len(X)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            loss = mse(model.forward(rel[idx]), target[idx])
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        model.loss_history.append(total / n)
    return model


def predict_rollout(model: PredictorModel, history: np.ndarray, horizon_steps: int) -> np.ndarray:
    """Recursive multi-step prediction from a planar history of at least ``window`` points."""
    if horizon_steps <= 0:
        raise ValueError("horizon_steps must be positive")
    history = np.asarray(history, dtype=float)
    H = model.window
    if len(history) < H:
        raise ValueError(f"history has {len(history)} points; need at least {H}")
    # one extra point gives the first window sample a real speed/heading
    pts = list(history[-(H + 1):])
    out = []
    for _ in range(horizon_steps):
        feats = feature_matrix(np.array(pts), model.cfg.step)[-H:]
        nxt = model.predict_next(feats[None])[0]
        out.append(nxt)
        pts = pts[1:] + [nxt] if len(pts) > H else pts + [nxt]
    return np.array(out)


def persistence_rollout(history: np.ndarray, horizon_steps: int) -> np.ndarray:
    return np.repeat(np.asarray(history, dtype=float)[-1:], horizon_steps, axis=0)


def constant_velocity_track(start, velocity, n: int, step: float = 1.0) -> np.ndarray:
    return np.asarray(start, float) + np.outer(np.arange(n) * step, np.asarray(velocity, float))


def load_geolife_dir(path, step: float = 1.0) -> list[np.ndarray]:
    """Every ``.plt`` under ``path`` (sorted), projected around its own first point."""
    return [planar_trace(read_plt(p), step) for p in sorted(Path(path).rglob("*.plt"))]


def split_trace(trace: np.ndarray, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    cut = int(round(len(trace) * train_frac))
    return trace[:cut], trace[cut:]
