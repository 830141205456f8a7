"""Rescaled ball and cylinder domains.

The cylinder is (-L/eps, L/eps) x disk(r/eps) with x[0] the axial coordinate.
The ball has radius radius_base/eps.  All ray queries follow the backwards
convention: a ray from x with velocity v visits x - s*v for s > 0.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    pass


class NotOnBoundary(GeometryError):
    pass


class ZeroVelocity(GeometryError):
    pass


class NumericalDegenerate(GeometryError):
    pass


class Tag(enum.IntEnum):
    CAP1 = 0
    CAP2 = 1
    LATERAL = 2
    SMOOTH_WALL = 3
    SINGULAR_EDGE = 4
    NONE = 5


@dataclass(frozen=True)
class BoundaryClass:
    tag: Tag
    normal: np.ndarray

    def __repr__(self):
        n = np.array2string(self.normal, precision=6)
        return f"BoundaryClass({self.tag.name}, n={n})"


@dataclass(frozen=True)
class AccommodationProfile:
    """Maxwell accommodation coefficient iota(x).

    mode 'constant' gives iota0 everywhere, mode 'caps_diffuse' gives 1 on the
    caps and 0 on the lateral wall (cylinder only).
    """
    mode: str = "caps_diffuse"
    iota0: float = 1.0

    def __post_init__(self):
        if self.mode not in ("constant", "caps_diffuse"):
            raise ValueError(f"unknown accommodation mode {self.mode!r}")
        if self.mode == "constant" and not (0.0 < self.iota0 <= 1.0):
            raise ValueError("iota0 must lie in (0, 1]")

    def at_tag(self, tag):
        """Vectorized iota by boundary tag (edge points count as caps)."""
        tag = np.asarray(tag)
        if self.mode == "constant":
            return np.full(tag.shape, self.iota0, dtype=float)
        return np.where(tag == Tag.LATERAL, 0.0, 1.0)


@dataclass(frozen=True)
class Domain:
    kind: str
    epsilon: float
    radius_base: float = 1.0
    half_length_base: float = 1.0
    disk_radius_base: float = 1.0
    accommodation: AccommodationProfile = field(default_factory=AccommodationProfile)

    def __post_init__(self):
        if self.kind not in ("ball", "cylinder"):
            raise ValueError(f"unknown domain kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.epsilon > 1:
            # allowed so that above-threshold counterexamples can be built
            log.warning("epsilon=%g lies outside (0, 1]", self.epsilon)
        if min(self.radius_base, self.half_length_base, self.disk_radius_base) <= 0:
            raise ValueError("base dimensions must be positive")
        if self.kind == "ball" and self.accommodation.mode == "caps_diffuse":
            object.__setattr__(self, "accommodation", AccommodationProfile("constant", 1.0))

    @classmethod
    def cylinder(cls, L=1.0, r=1.0, epsilon=1.0, accommodation=None):
        acc = accommodation or AccommodationProfile("caps_diffuse")
        return cls("cylinder", epsilon, half_length_base=L, disk_radius_base=r,
                   accommodation=acc)

    @classmethod
    def ball(cls, radius=1.0, epsilon=1.0, iota0=1.0):
        return cls("ball", epsilon, radius_base=radius,
                   accommodation=AccommodationProfile("constant", iota0))

    # effective dimensions
    @property
    def L(self):
        return self.half_length_base / self.epsilon

    @property
    def R(self):
        if self.kind == "ball":
            return self.radius_base / self.epsilon
        return self.disk_radius_base / self.epsilon

    @property
    def diameter(self):
        if self.kind == "ball":
            return 2 * self.R
        return float(np.hypot(2 * self.L, 2 * self.R))

    @property
    def btol(self):
        return 1e-9 * self.diameter

    @property
    def edge_tol(self):
        return 1e-7 * self.R

    def bounding_box(self):
        if self.kind == "ball":
            return -self.R * np.ones(3), self.R * np.ones(3)
        return np.array([-self.L, -self.R, -self.R]), np.array([self.L, self.R, self.R])

    # membership and distance
    def signed_distance(self, x):
        """Distance to the boundary, positive inside."""
        x = np.asarray(x, dtype=float)
        if self.kind == "ball":
            return self.R - np.linalg.norm(x, axis=-1)
        dr = self.R - np.hypot(x[..., 1], x[..., 2])
        da = self.L - np.abs(x[..., 0])
        inside = np.minimum(dr, da)
        outside = -np.hypot(np.minimum(dr, 0.0), np.minimum(da, 0.0))
        return np.where((dr >= 0) & (da >= 0), inside, outside)

    def contains(self, x):
        return self.signed_distance(x) > 0

    def volume(self):
        if self.kind == "ball":
            return 4.0 / 3.0 * np.pi * self.R ** 3
        return 2 * self.L * np.pi * self.R ** 2

    # boundary structure
    def classify(self, x):
        """Vectorized boundary tag and outward normal for points on the wall."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = np.zeros_like(x)
        if self.kind == "ball":
            n = x / np.linalg.norm(x, axis=1, keepdims=True)
            return np.full(len(x), int(Tag.SMOOTH_WALL)), n
        rho = np.hypot(x[:, 1], x[:, 2])
        dlat = rho - self.R
        dcap = np.abs(x[:, 0]) - self.L
        on_lat = np.abs(dlat) <= self.btol
        on_cap = (np.abs(dcap) <= self.btol) & (dlat <= self.btol)
        edge = np.hypot(dlat, dcap) <= self.edge_tol
        edge &= on_lat | on_cap
        tag = np.full(len(x), int(Tag.NONE))
        tag[on_cap & (x[:, 0] < 0)] = Tag.CAP1
        tag[on_cap & (x[:, 0] > 0)] = Tag.CAP2
        n[on_cap, 0] = np.sign(x[on_cap, 0])
        lat = on_lat & ~on_cap
        tag[lat] = Tag.LATERAL
        safe = np.where(rho > 0, rho, 1.0)
        n[lat, 1] = x[lat, 1] / safe[lat]
        n[lat, 2] = x[lat, 2] / safe[lat]
        tag[edge] = Tag.SINGULAR_EDGE
        return tag, n

    def outward_normal(self, x) -> BoundaryClass:
        x = np.asarray(x, dtype=float)
        if abs(self.signed_distance(x)) > self.btol:
            raise NotOnBoundary(f"point {x} is {self.signed_distance(x):.3e} from the wall")
        tag, n = self.classify(x)
        tag = Tag(int(tag[0]))
        if tag == Tag.NONE:
            raise NotOnBoundary(f"point {x} is not on the wall")
        if tag == Tag.SINGULAR_EDGE:
            return BoundaryClass(tag, np.array([np.sign(x[0]), 0.0, 0.0]))
        return BoundaryClass(tag, n[0])

    def iota(self, tag):
        return self.accommodation.at_tag(tag)

    # ray queries
    def exit_times(self, x, v):
        """Vectorized backwards exit time.

        Returns (t_b, x_exit, tag, normal).  Rays that never leave (v = 0 or a
        grazing lateral ray with zero axial speed) get t_b = inf and tag NONE.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        x, v = np.broadcast_arrays(x, v)
        if self.kind == "ball":
            tb = _sphere_root(x, v, self.R)
        else:
            tb_lat = _disk_root(x[:, 1:], v[:, 1:], self.R, self.btol)
            tb_cap = _cap_root(x[:, 0], v[:, 0], self.L)
            tb = np.minimum(tb_lat, tb_cap)
        fin = np.isfinite(tb)
        xe = np.where(fin[:, None], x - np.where(fin, tb, 0.0)[:, None] * v, np.nan)
        tag = np.full(len(x), int(Tag.NONE))
        n = np.full_like(x, np.nan)
        if fin.any():
            if self.kind == "cylinder":
                # snap the exit point exactly onto the wall it hit
                xs = xe[fin]
                lat_first = (tb_lat <= tb_cap)[fin]
                rho = np.hypot(xs[:, 1], xs[:, 2])
                scale = np.where(lat_first, self.R / np.where(rho > 0, rho, 1.0), 1.0)
                xs[:, 1] *= scale
                xs[:, 2] *= scale
                xs[~lat_first, 0] = np.sign(xs[~lat_first, 0]) * self.L
                xe[fin] = xs
            tg, nn = self.classify(xe[fin])
            tag[fin] = tg
            n[fin] = nn
        return tb, xe, tag, n

    def exit_time(self, x, v):
        """Scalar backwards exit time with classification."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        if not np.any(v):
            raise ZeroVelocity("v = 0 never reaches the wall")
        tb, xe, tag, n = self.exit_times(x[None], v[None])
        if not np.isfinite(tb[0]):
            raise NumericalDegenerate("grazing ray cannot be resolved")
        tag = Tag(int(tag[0]))
        if tag == Tag.SINGULAR_EDGE:
            cls = BoundaryClass(tag, np.array([np.sign(xe[0, 0]), 0.0, 0.0]))
        else:
            cls = BoundaryClass(tag, n[0])
        return float(tb[0]), xe[0], cls


def _sphere_root(x, v, R):
    a = np.einsum("ij,ij->i", v, v)
    p = np.einsum("ij,ij->i", x, v)
    c = R * R - np.einsum("ij,ij->i", x, x)
    return _far_root(a, p, c, 0.0)


def _disk_root(xh, vh, R, tol):
    a = np.einsum("ij,ij->i", vh, vh)
    p = np.einsum("ij,ij->i", xh, vh)
    c = R * R - np.einsum("ij,ij->i", xh, xh)
    return _far_root(a, p, c, tol * tol)


def _far_root(a, p, c, disc_tol):
    """Largest s solving a s^2 - 2 p s - c = 0, inf when no crossing.

    Uses the cancellation-free form c / (sqrt(D) - p) when p < 0.
    """
    c = np.maximum(c, 0.0)
    D = p * p + a * c
    out = np.full(a.shape, np.inf)
    ok = (a > 0) & (D > disc_tol * a)
    sq = np.sqrt(D[ok])
    pp = p[ok]
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.where(pp >= 0, (pp + sq) / a[ok], c[ok] / (sq - pp))
    out[ok] = root
    return out


def _cap_root(x1, v1, L):
    out = np.full(x1.shape, np.inf)
    pos = v1 > 0
    neg = v1 < 0
    # subnormal axial speeds overflow to inf, which is the correct exit time
    with np.errstate(over="ignore"):
        out[pos] = (x1[pos] + L) / v1[pos]
        out[neg] = (x1[neg] - L) / v1[neg]
    return np.maximum(out, 0.0)
