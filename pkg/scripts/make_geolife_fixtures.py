"""Write the checked-in GeoLife-format fixture traces under data/geolife/.

The traces are synthetic pedestrian / cyclist paths around the Tsinghua-PKU
area in Beijing, in the exact ``.plt`` layout. Re-running with the same seed
reproduces the files byte for byte.
"""

import argparse
import datetime as dt
import math
from pathlib import Path

import numpy as np

from ris_control.trajectory import _DEFAULT_HEADER, _SERIAL_EPOCH, EARTH_RADIUS_M

ORIGIN = (39.984702, 116.318417)
MODES = {"walk": (1.3, 0.25), "run": (3.0, 0.4), "bike": (4.5, 0.8)}


def simulate(rng, n, mode):
    mean_v, sd_v = MODES[mode]
    t, x, y = [0.0], [0.0], [0.0]
    heading = rng.uniform(-math.pi, math.pi)
    v = mean_v
    turn_rate = 0.0
    for _ in range(n - 1):
        dtau = float(rng.choice([1, 1, 1, 2, 2, 3, 5]))
        v = max(0.2, v + 0.3 * (mean_v - v) * dtau + sd_v * 0.3 * math.sqrt(dtau) * rng.standard_normal())
        if rng.uniform() < 0.02:
            turn_rate = rng.choice([-1, 1]) * rng.uniform(0.15, 0.4)
        turn_rate *= 0.85 ** dtau
        heading += turn_rate * dtau + 0.03 * math.sqrt(dtau) * rng.standard_normal()
        x.append(x[-1] + v * dtau * math.cos(heading))
        y.append(y[-1] + v * dtau * math.sin(heading))
        t.append(t[-1] + dtau)
    return np.array(t), np.array(x), np.array(y)


def write_trace(path, rng, start, lat0, lon0, t, x, y):
    noise = 0.4 * rng.standard_normal((len(t), 2))
    lat = lat0 + np.degrees((y + noise[:, 1]) / EARTH_RADIUS_M)
    lon = lon0 + np.degrees((x + noise[:, 0]) / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    alt = np.round(150 + 10 * np.sin(t / 200)).astype(int)
    lines = list(_DEFAULT_HEADER)
    for k in range(len(t)):
        stamp = start + dt.timedelta(seconds=float(t[k]))
        day = (stamp - _SERIAL_EPOCH).total_seconds() / 86400.0
        la, lo = (ORIGIN if k == 0 and path.name == "000.plt" else (lat[k], lon[k]))
        lines.append(f"{la:.6f},{lo:.6f},0,{alt[k] if k else 492},{day:.10f},{stamp:%Y-%m-%d},{stamp:%H:%M:%S}")
    path.write_text("\n".join(lines) + "\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "geolife"))
    ap.add_argument("--count", type=int, default=24)
    ap.add_argument("--seed", type=int, default=2008)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        mode = ["walk", "run", "bike"][i % 3]
        n = int(rng.integers(300, 700))
        t, x, y = simulate(rng, n, mode)
        start = dt.datetime(2008, 10, 23, 2, 53, 4) + dt.timedelta(days=int(i * 3), minutes=int(rng.integers(0, 600)) * (i > 0))
        lat0 = ORIGIN[0] + rng.uniform(-0.01, 0.01) if i else ORIGIN[0]
        lon0 = ORIGIN[1] + rng.uniform(-0.01, 0.01) if i else ORIGIN[1]
        write_trace(out / f"{i:03d}.plt", rng, start, lat0, lon0, t, x, y)
    print(f"wrote {args.count} traces to {out}")


if __name__ == "__main__":
    main()
