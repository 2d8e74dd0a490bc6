"""Independent high-precision reference values for the frozen numbers in the test suite.

Uses mpmath at 50 significant digits and none of the package code. Run it to
re-derive the literals found in tests/test_channel.py, tests/test_diffusion.py
and tests/test_trajectory.py.
"""

import mpmath as mp

mp.mp.dps = 50
C = mp.mpf(299792458)
LAM = C / mp.mpf("3.5e9")


def coeff(d, alpha=2):
    d = mp.mpf(d)
    return d ** (-mp.mpf(alpha) / 2) * mp.expj(-2 * mp.pi * d / LAM)


def dist(a, b):
    return mp.sqrt((mp.mpf(a[0]) - b[0]) ** 2 + (mp.mpf(a[1]) - b[1]) ** 2)


def show(name, z):
    if isinstance(z, mp.mpc):
        print(f"{name} = complex({mp.nstr(z.real, 17)}, {mp.nstr(z.imag, 17)})")
    else:
        print(f"{name} = {mp.nstr(z, 17)}")


def channel_values():
    h = coeff(10)
    show("coef_d10_abs", abs(h))
    show("coef_d10_phase_wrapped", mp.fmod(mp.arg(h) + 2 * mp.pi, 2 * mp.pi))

    # two RISs on the 10 m ring (angles 0 and pi), target and two interferers
    bs = (0, 0)
    ris = [(10, 0), (-10, 0)]
    target = (15, 20)
    inter = [(-25, 5), (3, -30)]
    show("snap_h_l", coeff(dist(target, bs)))
    for i, r in enumerate(ris):
        show(f"snap_h_i[{i}]", coeff(dist(r, bs)))
        show(f"snap_h_li[{i}]", coeff(dist(target, r)))
        for m, u in enumerate(inter):
            show(f"snap_h_mi[{i},{m}]", coeff(dist(u, r)))
    for m, u in enumerate(inter):
        show(f"snap_h_m[{m}]", coeff(dist(u, bs)))

    # ris_sum_factor on eight fixed angles
    angles = [mp.mpf(a) for a in ("0.1", "1.7", "2.9", "3.3", "4.4", "5.5", "6.0", "0.75")]
    show("sum8", mp.fsum(mp.expj(a) for a in angles))

    # one RIS at (10, 0), one interferer, N = 4 fixed phases, P = 1 W, noise 1 pW
    ris1 = (10, 0)
    tgt, itf = (20, 12), (-14, 22)
    h_l, h_m = coeff(dist(tgt, bs)), coeff(dist(itf, bs))
    h_i = coeff(dist(ris1, bs))
    h_li, h_mi = coeff(dist(tgt, ris1)), coeff(dist(itf, ris1))
    theta = [mp.mpf(a) for a in ("0.3", "2.2", "4.0", "5.9")]
    S = mp.fsum(mp.expj(a) for a in theta)
    P, n = mp.mpf(1), mp.mpf("1e-12")
    g_on = P * abs(h_l + S * h_i * h_li) ** 2 / (P * abs(h_m + S * h_i * h_mi) ** 2 + n)
    g_off = P * abs(h_l) ** 2 / (P * abs(h_m) ** 2 + n)
    show("sinr_on_1ris_1int", g_on)
    show("rate_on_1ris_1int", mp.log(1 + g_on, 2))
    show("rate_off_1ris_1int", mp.log(1 + g_off, 2))


def schedule_values():
    T = 4
    beta = [mp.mpf("1e-4") + (mp.mpf("0.2") - mp.mpf("1e-4")) * k / (T - 1) for k in range(T)]
    ab = mp.mpf(1)
    for b in beta:
        ab *= 1 - b
    show("linear_T4_alpha_bar4", ab)

    s = mp.mpf("0.008")
    f = lambda t: mp.cos((mp.mpf(t) / T + s) / (1 + s) * mp.pi / 2) ** 2
    show("cosine_T4_alpha_bar4", f(T) / f(0))
    b = [1 - (f(k) / f(0)) / (f(k - 1) / f(0)) for k in range(1, T + 1)]
    print("cosine_T4_beta = [" + ", ".join(mp.nstr(min(x, mp.mpf("0.999")), 17) for x in b) + "]")

    bmin, bmax = mp.mpf("0.1"), mp.mpf(20)
    vp = [1 - mp.exp(-bmin / T - (bmax - bmin) * (2 * k - 1) / (2 * T * T)) for k in range(1, T + 1)]
    print("vp_T4_beta = [" + ", ".join(mp.nstr(x, 17) for x in vp) + "]")
    ab = [mp.mpf(1)]
    for x in vp:
        ab.append(ab[-1] * (1 - x))
    bt = [vp[k] * (1 - ab[k]) / (1 - ab[k + 1]) for k in range(T)]
    print("vp_T4_beta_tilde = [" + ", ".join(mp.nstr(x, 17) for x in bt) + "]")


def haversine_values():
    R = mp.mpf(6371000)

    def hav(lat1, lon1, lat2, lon2):
        p1, p2 = mp.radians(lat1), mp.radians(lat2)
        dp, dl = p2 - p1, mp.radians(mp.mpf(lon2) - lon1)
        a = mp.sin(dp / 2) ** 2 + mp.cos(p1) * mp.cos(p2) * mp.sin(dl / 2) ** 2
        return 2 * R * mp.asin(mp.sqrt(a))

    show("hav_geolife_pair", hav(mp.mpf("39.984702"), mp.mpf("116.318417"),
                                  mp.mpf("39.984683"), mp.mpf("116.31845")))
    show("hav_lon_step", hav(mp.mpf("39.9847"), mp.mpf("116.3184"), mp.mpf("39.9847"), mp.mpf("116.3284")))
    show("hav_beijing_shanghai", hav(mp.mpf("39.9042"), mp.mpf("116.4074"), mp.mpf("31.2304"), mp.mpf("121.4737")))


if __name__ == "__main__":
    channel_values()
    schedule_values()
    haversine_values()
