"""Sphere rules and small Gauss helpers."""
import numpy as np


def lebedev26():
    """Degree-7 Lebedev rule on S^2, weights normalized to sum 1."""
    pts = []
    wts = []
    for ax in range(3):
        for s in (1.0, -1.0):
            p = np.zeros(3)
            p[ax] = s
            pts.append(p)
            wts.append(1.0 / 21.0)
    r = 1.0 / np.sqrt(2.0)
    for a, b in ((0, 1), (0, 2), (1, 2)):
        for sa in (1.0, -1.0):
            for sb in (1.0, -1.0):
                p = np.zeros(3)
                p[a] = sa * r
                p[b] = sb * r
                pts.append(p)
                wts.append(4.0 / 105.0)
    c = 1.0 / np.sqrt(3.0)
    for sx in (1.0, -1.0):
        for sy in (1.0, -1.0):
            for sz in (1.0, -1.0):
                pts.append(np.array([sx, sy, sz]) * c)
                wts.append(9.0 / 280.0)
    return np.array(pts), np.array(wts)


def product_rule(n_mu: int):
    """Gauss-Legendre in cos(theta) times a uniform azimuthal rule (2 n_mu points).

    Exact for spherical polynomials of degree < 2 n_mu; antipodally symmetric.
    """
    mu, wm = np.polynomial.legendre.leggauss(n_mu)
    n_phi = 2 * n_mu
    phi = (np.arange(n_phi) + 0.5) * 2 * np.pi / n_phi
    M, P = np.meshgrid(mu, phi, indexing="ij")
    s = np.sqrt(1 - M ** 2)
    pts = np.column_stack([(s * np.cos(P)).ravel(), (s * np.sin(P)).ravel(), M.ravel()])
    w = np.repeat(wm, n_phi) / (2.0 * n_phi)
    return pts, w


def sphere_rule(name="lebedev26"):
    if name == "lebedev26":
        return lebedev26()
    if name.startswith("gauss"):
        n = int(name[5:] or 8)
        return product_rule(n)
    raise ValueError(f"unknown sphere rule {name!r}")


def half_rule(pts, w):
    """Keep one point of each antipodal pair with doubled weight."""
    keep = []
    used = np.zeros(len(pts), dtype=bool)
    for i in range(len(pts)):
        if used[i]:
            continue
        j = np.flatnonzero(np.all(np.abs(pts + pts[i]) < 1e-12, axis=1))
        if len(j) != 1 or abs(w[j[0]] - w[i]) > 1e-14:
            raise ValueError("rule is not antipodally symmetric")
        used[i] = used[j[0]] = True
        keep.append(i)
    keep = np.array(keep)
    return pts[keep], 2.0 * w[keep]


def gauss_legendre(a, b, n):
    x, w = np.polynomial.legendre.leggauss(n)
    a = np.asarray(a, float)[..., None]
    b = np.asarray(b, float)[..., None]
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w
