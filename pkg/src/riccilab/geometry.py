"""Space-time metric models with curvature and soliton-structure checks.

Four families share one query interface:

* ``EinsteinSphere``    round S^n shrinking by scaling, polar chart about a pole
* ``GaussianFlat``      non-evolving R^n, cartesian chart
* ``ShrinkingCylinder`` S^(n-1) x R in canonical form, product chart (y, angles)
* ``NumericWarped``     tabulated rotationally symmetric flow from module `flow`

Closed-form families evaluate for every t below the singular time T (they are
ancient solutions), which lets callers test soliton identities on the slice
t = T - 1 even when T < 1.  The numeric family is restricted to its tabulated
time range.

Radial reductions: every family exposes a 1-D radial chart (coordinate listed
first) with vectorized coefficient callbacks used by the geodesic shooting
machinery, plus an angular factor for perturbation checks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import gamma as gamma_fn

from .errors import GridMismatch, NoFlowData, OutOfChart, PastSingularTime

_EPS = 1e-12


def sphere_area(m: int) -> float:
    """Surface area of the unit sphere S^m."""
    return 2 * np.pi ** ((m + 1) / 2) / gamma_fn((m + 1) / 2)


def _nested_sphere_diag(angles):
    """Diagonal of the unit round metric on S^m in nested spherical angles."""
    d = [1.0]
    for a in angles[:-1]:
        d.append(d[-1] * np.sin(a) ** 2)
    return np.array(d)


@dataclass
class CurvaturePacket:
    """Curvature data of one (point, time) query."""
    ric: np.ndarray          # coordinate components, symmetric
    scalar: float            # scalar curvature R
    rm_norm: float           # |Rm|
    grad_R: np.ndarray       # covector components
    point: np.ndarray
    t: float


@dataclass
class PotentialField:
    """Candidate soliton potential sampled on a spatial grid at one time.

    ``kind`` is "radial" (points are radial coordinates; grad/hess store the
    radial coordinate derivatives f_r and f_rr) or "cartesian" (full
    componentwise grad and hess matrices on a flat chart).
    """
    t: float
    kind: str
    points: np.ndarray
    values: np.ndarray
    grad: np.ndarray
    hess: np.ndarray

    def __post_init__(self):
        if self.kind not in ("radial", "cartesian"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if self.kind == "cartesian":
            sym = np.abs(self.hess - np.swapaxes(self.hess, -1, -2)).max()
            if sym > 1e-8:
                raise ValueError(f"hessian asymmetry {sym:.2e} exceeds 1e-8")


@dataclass
class RadialChart:
    """Vectorized coefficient callbacks of a 1-D radial reduction.

    Functions take (r_array, t) and broadcast over r.  ``fold_period`` is set
    for compact charts where trajectories reflect through poles; noncompact
    charts carry finite bounds and the caller treats exits as LeftChart.
    """
    r_lo: float
    r_hi: float
    fold_period: Optional[float]       # None => noncompact, clamp to bounds
    g_rr: Callable
    gamma: Callable                    # Gamma^r_rr, odd about poles
    ric_mixed: Callable                # Ric^r_r
    grad_R_up: Callable                # (grad R)^r, odd about poles
    R: Callable                        # scalar curvature
    g_ang: Callable                    # angular verification factor g_ww
    vol_weight: Callable               # dvol = vol_weight(r, t) dr

    def fold(self, r_tilde):
        """Map unfolded coordinates into [r_lo, r_hi]; return (r, parity)."""
        if self.fold_period is None:
            return np.asarray(r_tilde, dtype=float), np.ones_like(
                np.asarray(r_tilde, dtype=float))
        p = self.fold_period
        m = np.mod(np.asarray(r_tilde, dtype=float) - self.r_lo, p)
        half = p / 2
        over = m > half
        r = np.where(over, p - m, m) + self.r_lo
        parity = np.where(over, -1.0, 1.0)
        return r, parity


class MetricModel:
    """Base for space-time metric models g(t) on [0, T)."""

    family = "abstract"
    is_canonical_soliton = False
    ancient = False

    n: int
    T: float

    # -- time/chart validation --------------------------------------------

    def check_time(self, t):
        if t >= self.T - _EPS:
            raise PastSingularTime(
                f"t={t} is at or past singular time T={self.T}")

    def check_point(self, q):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if q.shape[0] != self.n:
            raise OutOfChart(
                f"point has {q.shape[0]} coordinates, chart needs {self.n}")
        ch = self.radial_chart()
        if not (ch.r_lo - 1e-9 <= q[0] <= ch.r_hi + 1e-9):
            raise OutOfChart(
                f"radial coordinate {q[0]} outside [{ch.r_lo}, {ch.r_hi}]")
        return q

    # -- queries ------------------------------------------------------------

    def metric_at(self, q, t):
        raise NotImplementedError

    def curvature_at(self, q, t):
        raise NotImplementedError

    def radial_chart(self) -> RadialChart:
        raise NotImplementedError

    def radial_hessian_frame(self, r, t, f_r, f_rr):
        """Orthonormal-frame components (rad, ang) of the covariant Hessian
        of a radial function with coordinate derivatives f_r, f_rr."""
        raise NotImplementedError

    def canonical_potential(self, t, points):
        """Reference soliton potential on radial points, if the family is a
        canonical-form soliton."""
        raise NotImplementedError(f"{self.family} has no reference potential")

    def to_config(self):
        raise NotImplementedError


class EinsteinSphere(MetricModel):
    """Shrinking round S^n: g(t) = (1 - 2 R0 t / n) g0, T = n/(2 R0).

    Chart: geodesic polar angle x in [0, pi] about the base pole plus nested
    angles of the orbit S^(n-1).  Radius a(t)^2 = 2(n-1)(T-t).
    """

    family = "EinsteinSphere"
    is_canonical_soliton = True
    ancient = True

    def __init__(self, n=3, R0=6.0):
        if n < 2:
            raise ValueError("EinsteinSphere needs n >= 2")
        if R0 <= 0:
            raise ValueError("EinsteinSphere needs R0 > 0")
        self.n = int(n)
        self.R0 = float(R0)
        self.T = self.n / (2 * self.R0)

    def a2(self, t):
        return 2 * (self.n - 1) * (self.T - t)

    def metric_at(self, q, t):
        q = self.check_point(q)
        self.check_time(t)
        a2 = self.a2(t)
        diag = np.empty(self.n)
        diag[0] = 1.0
        if self.n > 1:
            diag[1:] = np.sin(q[0]) ** 2 * _nested_sphere_diag(q[1:])
        return a2 * np.diag(diag)

    def curvature_at(self, q, t):
        q = self.check_point(q)
        self.check_time(t)
        tau = self.T - t
        g = self.metric_at(q, t)
        ric = g / (2 * tau)
        R = self.n / (2 * tau)
        K = 1.0 / self.a2(t)
        rm = np.sqrt(2 * self.n * (self.n - 1)) * K
        return CurvaturePacket(ric, R, rm, np.zeros(self.n), q, t)

    def radial_chart(self):
        n, T = self.n, self.T
        return RadialChart(
            r_lo=0.0, r_hi=np.pi, fold_period=2 * np.pi,
            g_rr=lambda r, t: np.broadcast_to(self.a2(t), np.shape(r)).copy(),
            gamma=lambda r, t: np.zeros_like(np.asarray(r, dtype=float)),
            ric_mixed=lambda r, t: np.full_like(
                np.asarray(r, dtype=float), 1.0 / (2 * (T - t))),
            grad_R_up=lambda r, t: np.zeros_like(np.asarray(r, dtype=float)),
            R=lambda r, t: np.full_like(
                np.asarray(r, dtype=float), n / (2 * (T - t))),
            g_ang=lambda r, t: self.a2(t) * np.sin(r) ** 2,
            vol_weight=lambda r, t: sphere_area(n - 1)
            * self.a2(t) ** (n / 2) * np.abs(np.sin(r)) ** (n - 1),
        )

    def radial_hessian_frame(self, r, t, f_r, f_rr):
        a2 = self.a2(t)
        h_rad = f_rr / a2
        r = np.asarray(r, dtype=float)
        # Hess_ww = sin x cos x f_x per angular direction
        with np.errstate(divide="ignore", invalid="ignore"):
            h_ang = np.where(np.abs(np.sin(r)) > 1e-9,
                             np.cos(r) * f_r / (np.sin(r) * a2), f_rr / a2)
        return h_rad, h_ang

    def canonical_potential(self, t, points):
        pts = np.asarray(points, dtype=float)
        z = np.zeros_like(pts)
        return PotentialField(t=t, kind="radial", points=pts, values=z,
                              grad=z.copy(), hess=z.copy())

    def to_config(self):
        return {"family": self.family, "n": self.n, "R0": self.R0}


class GaussianFlat(MetricModel):
    """Non-evolving flat R^n; T is a formal label for singular-base runs."""

    family = "GaussianFlat"
    is_canonical_soliton = True
    ancient = True

    def __init__(self, n=2, T=1.0, box_radius=40.0):
        if n < 1:
            raise ValueError("GaussianFlat needs n >= 1")
        self.n = int(n)
        self.T = float(T)
        self.box_radius = float(box_radius)

    def check_time(self, t):
        # metric is defined for all times; T only labels the base point
        return

    def check_point(self, q):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if q.shape[0] != self.n:
            raise OutOfChart(
                f"point has {q.shape[0]} coordinates, chart needs {self.n}")
        if np.abs(q).max() > self.box_radius:
            raise OutOfChart(f"|q|_inf = {np.abs(q).max()} outside box "
                             f"radius {self.box_radius}")
        return q

    def metric_at(self, q, t):
        self.check_point(q)
        return np.eye(self.n)

    def curvature_at(self, q, t):
        q = self.check_point(q)
        return CurvaturePacket(np.zeros((self.n, self.n)), 0.0, 0.0,
                               np.zeros(self.n), q, t)

    def radial_chart(self):
        # radial distance from a base point; flat polar coordinates
        n = self.n
        return RadialChart(
            r_lo=0.0, r_hi=2 * self.box_radius, fold_period=None,
            g_rr=lambda r, t: np.ones_like(np.asarray(r, dtype=float)),
            gamma=lambda r, t: np.zeros_like(np.asarray(r, dtype=float)),
            ric_mixed=lambda r, t: np.zeros_like(np.asarray(r, dtype=float)),
            grad_R_up=lambda r, t: np.zeros_like(np.asarray(r, dtype=float)),
            R=lambda r, t: np.zeros_like(np.asarray(r, dtype=float)),
            g_ang=lambda r, t: np.asarray(r, dtype=float) ** 2,
            vol_weight=lambda r, t: sphere_area(n - 1)
            * np.asarray(r, dtype=float) ** (n - 1),
        )

    def radial_hessian_frame(self, r, t, f_r, f_rr):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            h_ang = np.where(r > 1e-9, f_r / r, f_rr)
        return np.asarray(f_rr, dtype=float), h_ang

    def canonical_potential(self, t, points):
        """f = |x|^2 / (4 (T - t)) about the origin; points are radii."""
        pts = np.asarray(points, dtype=float)
        tau = self.T - t
        if tau <= 0:
            raise PastSingularTime("potential slice needs t < T")
        return PotentialField(
            t=t, kind="radial", points=pts, values=pts ** 2 / (4 * tau),
            grad=pts / (2 * tau),
            hess=np.full_like(pts, 1.0 / (2 * tau)))

    def to_config(self):
        return {"family": self.family, "n": self.n, "T": self.T,
                "box_radius": self.box_radius}


class ShrinkingCylinder(MetricModel):
    """S^(n-1) x R in canonical form: sphere radius^2 = 2(n-2)(T-t).

    Chart: line coordinate y first, then nested angles of S^(n-1).  The
    radius is forced by the soliton equation on the sphere factor.
    """

    family = "ShrinkingCylinder"
    is_canonical_soliton = True
    ancient = True

    def __init__(self, n=3, T=1.0, y_range=25.0):
        if n < 3:
            raise ValueError("ShrinkingCylinder needs n >= 3")
        self.n = int(n)
        self.T = float(T)
        self.y_range = float(y_range)

    def b2(self, t):
        return 2 * (self.n - 2) * (self.T - t)

    def check_point(self, q):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if q.shape[0] != self.n:
            raise OutOfChart(
                f"point has {q.shape[0]} coordinates, chart needs {self.n}")
        if abs(q[0]) > self.y_range:
            raise OutOfChart(f"|y| = {abs(q[0])} outside range {self.y_range}")
        return q

    def metric_at(self, q, t):
        q = self.check_point(q)
        self.check_time(t)
        diag = np.empty(self.n)
        diag[0] = 1.0
        diag[1:] = self.b2(t) * _nested_sphere_diag(q[1:])
        return np.diag(diag)

    def curvature_at(self, q, t):
        q = self.check_point(q)
        self.check_time(t)
        b2 = self.b2(t)
        diag = np.zeros(self.n)
        diag[1:] = (self.n - 2) * _nested_sphere_diag(q[1:])
        R = (self.n - 1) * (self.n - 2) / b2
        rm = np.sqrt(2 * (self.n - 1) * (self.n - 2)) / b2
        return CurvaturePacket(np.diag(diag), R, rm, np.zeros(self.n), q, t)

    def radial_chart(self):
        n, T = self.n, self.T
        return RadialChart(
            r_lo=-self.y_range, r_hi=self.y_range, fold_period=None,
            g_rr=lambda r, t: np.ones_like(np.asarray(r, dtype=float)),
            gamma=lambda r, t: np.zeros_like(np.asarray(r, dtype=float)),
            ric_mixed=lambda r, t: np.zeros_like(np.asarray(r, dtype=float)),
            grad_R_up=lambda r, t: np.zeros_like(np.asarray(r, dtype=float)),
            R=lambda r, t: np.full_like(
                np.asarray(r, dtype=float), (n - 1) / (2 * (T - t))),
            g_ang=lambda r, t: np.broadcast_to(
                self.b2(t), np.shape(r)).copy(),
            vol_weight=lambda r, t: np.full_like(
                np.asarray(r, dtype=float),
                sphere_area(n - 1) * self.b2(t) ** ((n - 1) / 2)),
        )

    def radial_hessian_frame(self, r, t, f_r, f_rr):
        shape = np.shape(np.asarray(r, dtype=float))
        return np.asarray(f_rr, dtype=float), np.zeros(shape)

    def canonical_potential(self, t, points):
        """f = y^2 / (4 (T - t)) along the line factor."""
        pts = np.asarray(points, dtype=float)
        tau = self.T - t
        if tau <= 0:
            raise PastSingularTime("potential slice needs t < T")
        return PotentialField(
            t=t, kind="radial", points=pts, values=pts ** 2 / (4 * tau),
            grad=pts / (2 * tau),
            hess=np.full_like(pts, 1.0 / (2 * tau)))

    def to_config(self):
        return {"family": self.family, "n": self.n, "T": self.T,
                "y_range": self.y_range}


class NumericWarped(MetricModel):
    """Rotationally symmetric metric tabulated by a flow run.

    g = psi^2 dx^2 + phi^2 g_{S^(n-1)} on labels x in [0, 1]; interpolation is
    cubic in x on stored area-radius-squared fields and cubic-in-time across
    the four bracketing states.  Queries outside the tabulated time range
    raise NoFlowData.
    """

    family = "NumericWarped"
    ancient = False

    def __init__(self, history):
        if history.states is None or len(history.states) < 4:
            raise NoFlowData("history carries too few states for a model")
        self.history = history
        self.n = history.n
        self.T = history.T_estimate if history.T_estimate is not None \
            else history.times[-1] + 1e-9
        self._x = history.states[0].x
        self._spline_cache = {}

    @property
    def t_min(self):
        return self.history.times[0]

    @property
    def t_max(self):
        return self.history.times[-1]

    def check_time(self, t):
        if t >= self.T - _EPS:
            raise PastSingularTime(
                f"t={t} is at or past singular time T={self.T}")
        if t < self.t_min - _EPS or t > self.t_max + _EPS:
            raise NoFlowData(
                f"t={t} outside tabulated range [{self.t_min}, {self.t_max}]")

    # -- interpolation ------------------------------------------------------

    def _state_fields(self, k):
        """Even/odd-extended spline data for state k: w = phi^2 and psi."""
        if k not in self._spline_cache:
            from scipy.interpolate import CubicSpline
            st = self.history.states[k]
            x = self._x
            # extend by parity through both poles: w = phi^2 and psi even
            xe = np.concatenate((-x[3:0:-1], x, 2.0 - x[-2:-5:-1]))
            w = st.phi ** 2
            we = np.concatenate((w[3:0:-1], w, w[-2:-5:-1]))
            pe = np.concatenate((st.psi[3:0:-1], st.psi, st.psi[-2:-5:-1]))
            self._spline_cache[k] = (CubicSpline(xe, we), CubicSpline(xe, pe))
        return self._spline_cache[k]

    def _bracket(self, t):
        times = self.history.times
        j = int(np.searchsorted(times, t))
        j0 = min(max(j - 2, 0), len(times) - 4)
        return j0

    def _interp(self, x, t, deriv_w=0, deriv_psi=None):
        """Cubic-in-time Lagrange combination of per-state spline values."""
        x = np.asarray(x, dtype=float)
        times = self.history.times
        j0 = self._bracket(t)
        ts = times[j0:j0 + 4]
        wsum = 0.0
        psum = 0.0
        for m in range(4):
            lm = 1.0
            for l in range(4):
                if l != m:
                    lm *= (t - ts[l]) / (ts[m] - ts[l])
            ws, ps = self._state_fields(j0 + m)
            wsum = wsum + lm * ws(x, deriv_w)
            if deriv_psi is not None:
                psum = psum + lm * ps(x, deriv_psi)
        if deriv_psi is None:
            return wsum
        return wsum, psum

    def fields_at(self, x, t):
        """(w, w_x, w_xx, psi, psi_x) at label positions x, time t."""
        x = np.asarray(x, dtype=float)
        times = self.history.times
        j0 = self._bracket(t)
        ts = times[j0:j0 + 4]
        acc = [0.0] * 5
        for m in range(4):
            lm = 1.0
            for l in range(4):
                if l != m:
                    lm *= (t - ts[l]) / (ts[m] - ts[l])
            ws, ps = self._state_fields(j0 + m)
            acc[0] += lm * ws(x)
            acc[1] += lm * ws(x, 1)
            acc[2] += lm * ws(x, 2)
            acc[3] += lm * ps(x)
            acc[4] += lm * ps(x, 1)
        return tuple(np.asarray(a) for a in acc)

    def _sectionals_raw(self, x, t):
        w, w_x, w_xx, psi, psi_x = self.fields_at(x, t)
        w_s = w_x / psi
        w_ss = (w_xx / psi - w_x * psi_x / psi ** 2) / psi
        with np.errstate(divide="ignore", invalid="ignore"):
            k_rad = (w_s ** 2 - 2 * w * w_ss) / (4 * w ** 2)
            k_sph = (4 * w - w_s ** 2) / (4 * w ** 2)
        return np.asarray(k_rad), np.asarray(k_sph)

    def sectional_curvatures(self, x, t):
        """K_rad, K_sph from the tabulated fields.

        Both formulas cancel catastrophically where w -> 0, so values inside
        three cells of a pole come from an even quadratic extrapolation off
        interior samples (the curvatures are smooth even functions there).
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        k_rad, k_sph = self._sectionals_raw(x, t)
        h = self._x[1] - self._x[0]
        for pole in (0.0, 1.0):
            d = np.abs(x - pole)
            near = d < 3 * h
            if not np.any(near):
                continue
            ds = np.array([3 * h, 5 * h, 7 * h])
            kr_s, ks_s = self._sectionals_raw(pole + (1 - 2 * pole) * ds, t)
            cr = np.polynomial.polynomial.polyfit(ds ** 2, kr_s, 2)
            cs = np.polynomial.polynomial.polyfit(ds ** 2, ks_s, 2)
            k_rad[near] = np.polynomial.polynomial.polyval(d[near] ** 2, cr)
            k_sph[near] = np.polynomial.polynomial.polyval(d[near] ** 2, cs)
        return k_rad, k_sph

    def scalar_R_at(self, x, t):
        k_rad, k_sph = self.sectional_curvatures(x, t)
        n = self.n
        return 2 * (n - 1) * k_rad + (n - 1) * (n - 2) * k_sph

    # -- model interface ----------------------------------------------------

    def check_point(self, q):
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if q.shape[0] != self.n:
            raise OutOfChart(
                f"point has {q.shape[0]} coordinates, chart needs {self.n}")
        if not (-1e-9 <= q[0] <= 1 + 1e-9):
            raise OutOfChart(f"label coordinate {q[0]} outside [0, 1]")
        return q

    def metric_at(self, q, t):
        q = self.check_point(q)
        self.check_time(t)
        w, _, _, psi, _ = self.fields_at(q[0], t)
        diag = np.empty(self.n)
        diag[0] = psi ** 2
        diag[1:] = max(float(w), 0.0) * _nested_sphere_diag(q[1:])
        return np.diag(diag)

    def curvature_at(self, q, t):
        q = self.check_point(q)
        self.check_time(t)
        n = self.n
        k_rad, k_sph = (float(v) for v in self.sectional_curvatures(q[0], t))
        w, _, _, psi, _ = self.fields_at(q[0], t)
        diag = np.empty(n)
        diag[0] = (n - 1) * k_rad * psi ** 2
        diag[1:] = (k_rad + (n - 2) * k_sph) * max(float(w), 0.0) \
            * _nested_sphere_diag(q[1:])
        R = 2 * (n - 1) * k_rad + (n - 1) * (n - 2) * k_sph
        rm = np.sqrt(4 * (n - 1) * k_rad ** 2
                     + 2 * (n - 1) * (n - 2) * k_sph ** 2)
        grad = np.zeros(n)
        grad[0] = self._grad_R_x(np.atleast_1d(q[0]), t)[0]
        return CurvaturePacket(np.diag(diag), R, rm, grad, q, t)

    def _grad_R_x(self, x, t):
        """dR/dx by 4th-order centered differences on the label grid."""
        h = (self._x[1] - self._x[0]) / 2
        x = np.asarray(x, dtype=float)
        pts = np.stack([x - 2 * h, x - h, x + h, x + 2 * h])
        # evaluate R with pole reflection for stencil points outside [0,1]
        refl = np.where(pts < 0, -pts, pts)
        refl = np.where(refl > 1, 2 - refl, refl)
        Rv = self.scalar_R_at(refl.ravel(), t).reshape(pts.shape)
        return (Rv[0] - 8 * Rv[1] + 8 * Rv[2] - Rv[3]) / (12 * h)

    def radial_chart(self):
        n = self.n

        def g_rr(r, t):
            _, _, _, psi, _ = self.fields_at(self._fold_arr(r), t)
            return psi ** 2

        def gamma(r, t):
            rf, par = self._fold_pair(r)
            _, _, _, psi, psi_x = self.fields_at(rf, t)
            return par * psi_x / psi

        def ric_mixed(r, t):
            k_rad, _ = self.sectional_curvatures(self._fold_arr(r), t)
            return (n - 1) * k_rad

        def grad_R_up(r, t):
            rf, par = self._fold_pair(r)
            _, _, _, psi, _ = self.fields_at(rf, t)
            return par * self._grad_R_x(rf, t) / psi ** 2

        def Rfun(r, t):
            return self.scalar_R_at(self._fold_arr(r), t)

        def g_ang(r, t):
            w, *_ = self.fields_at(self._fold_arr(r), t)
            return np.maximum(w, 0.0)

        def vol_weight(r, t):
            w, _, _, psi, _ = self.fields_at(self._fold_arr(r), t)
            return sphere_area(n - 1) * np.maximum(w, 0.0) ** ((n - 1) / 2) * psi

        return RadialChart(r_lo=0.0, r_hi=1.0, fold_period=2.0,
                           g_rr=g_rr, gamma=gamma, ric_mixed=ric_mixed,
                           grad_R_up=grad_R_up, R=Rfun, g_ang=g_ang,
                           vol_weight=vol_weight)

    def _fold_pair(self, r):
        m = np.mod(np.asarray(r, dtype=float), 2.0)
        over = m > 1.0
        return np.where(over, 2.0 - m, m), np.where(over, -1.0, 1.0)

    def _fold_arr(self, r):
        return self._fold_pair(r)[0]

    def radial_hessian_frame(self, r, t, f_r, f_rr):
        r = np.asarray(r, dtype=float)
        w, w_x, _, psi, psi_x = self.fields_at(r, t)
        h_rad = (f_rr - (psi_x / psi) * f_r) / psi ** 2
        # Hess_ww / g_ww with g_ww = w: Gamma^x_ww = -w_x/(2 psi^2)
        with np.errstate(divide="ignore", invalid="ignore"):
            h_ang = np.where(w > 1e-14, w_x * f_r / (2 * psi ** 2 * w), 0.0)
        return h_rad, h_ang

    def to_config(self):
        return {"family": self.family, "n": self.n,
                "history": "<attached FlowHistory>"}


def make_model(config) -> MetricModel:
    """Build a model from a declarative config record."""
    fam = config.get("family")
    if fam == "EinsteinSphere":
        return EinsteinSphere(n=config.get("n", 3), R0=config.get("R0", 6.0))
    if fam == "GaussianFlat":
        return GaussianFlat(n=config.get("n", 2), T=config.get("T", 1.0),
                            box_radius=config.get("box_radius", 40.0))
    if fam == "ShrinkingCylinder":
        return ShrinkingCylinder(n=config.get("n", 3), T=config.get("T", 1.0),
                                 y_range=config.get("y_range", 25.0))
    raise ValueError(f"unknown or non-declarative family {fam!r}")


# --- module-level operations ------------------------------------------------

def metric_at(model: MetricModel, q, t) -> np.ndarray:
    """Metric coordinate matrix at (q, t)."""
    return model.metric_at(q, t)


def curvature_at(model: MetricModel, q, t) -> CurvaturePacket:
    """Curvature packet at (q, t)."""
    return model.curvature_at(q, t)


def _check_radial_grid(model, f):
    ch = model.radial_chart()
    pts = np.asarray(f.points, dtype=float)
    if pts.ndim != 1:
        raise GridMismatch("radial potential needs 1-D points")
    if pts.min() < ch.r_lo - 1e-9 or pts.max() > ch.r_hi + 1e-9:
        raise GridMismatch(
            f"potential grid [{pts.min()}, {pts.max()}] outside chart "
            f"[{ch.r_lo}, {ch.r_hi}]")
    return ch, pts


def soliton_residual(model: MetricModel, f: PotentialField, t=None,
                     tau=None) -> float:
    """sup over the grid of |Ric + Hess f - g/(2 tau)| in the g-norm.

    tau defaults to T - t, the time to the singular time; passing tau
    explicitly supports rescaled slices.
    """
    t = f.t if t is None else t
    if tau is None:
        tau = model.T - t
    if tau <= 0:
        raise PastSingularTime("soliton check needs tau > 0")
    n = model.n
    if f.kind == "cartesian":
        if f.points.shape[-1] != n:
            raise GridMismatch("cartesian potential dimension mismatch")
        if model.family != "GaussianFlat":
            raise GridMismatch("cartesian potentials only fit flat charts")
        res = f.hess - np.eye(n) / (2 * tau)
        return float(np.sqrt((res ** 2).sum(axis=(-2, -1))).max())
    ch, pts = _check_radial_grid(model, f)
    h_rad, h_ang = model.radial_hessian_frame(pts, t, f.grad, f.hess)
    g_rr = ch.g_rr(pts, t)
    ric_rad = ch.ric_mixed(pts, t)                    # frame == mixed here
    Rv = ch.R(pts, t)
    # frame angular Ricci eigenvalue from the trace
    ric_ang = (Rv - ric_rad) / (n - 1) if n > 1 else np.zeros_like(Rv)
    del g_rr
    res_rad = ric_rad + h_rad - 1.0 / (2 * tau)
    res_ang = ric_ang + h_ang - 1.0 / (2 * tau)
    res = np.sqrt(res_rad ** 2 + (n - 1) * res_ang ** 2)
    return float(res.max())


def gradconst_check(model: MetricModel, f: PotentialField, t=None):
    """Evaluate R + |grad f|^2 - f pointwise; return (mean C, max spread).

    Constant to machine precision exactly on the unit-time-to-singularity
    slice of a canonical-form soliton.
    """
    t = f.t if t is None else t
    if f.kind == "cartesian":
        grad2 = (f.grad ** 2).sum(axis=-1)
        A = grad2 - f.values        # flat: R = 0
    else:
        ch, pts = _check_radial_grid(model, f)
        grad2 = f.grad ** 2 / ch.g_rr(pts, t)
        A = ch.R(pts, t) + grad2 - f.values
    C = float(A.mean())
    return C, float(np.abs(A - C).max())
