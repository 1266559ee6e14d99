"""Rotationally symmetric Ricci flow to singular time, T estimation, type A fit.

The evolved geometry is g = psi^2 dx^2 + phi^2 g_{S^(n-1)} on S^n with poles
at the label values x = 0, 1.  Internally the solver integrates the strictly
parabolic arclength-gauge equation for the squared sphere radius

    w_t = w_ss + (A + xi L_t) w_s - 2(n-2) + (n-3) w_s^2 / (2 w)

on a staggered grid in xi = s / L(t), where A(s,t) = (n-1) int_0^s K_rad and
L_t = -A(L).  The naive fixed-label system (phi_t, psi_t) is only weakly
parabolic and its explicit discretization is violently unstable at the poles,
so stored states are produced by integrating Lagrangian label trajectories
through the gauge solve instead:

    dxi_lab/dt = (xi_lab A(L) - A(xi_lab L)) / L,
    dpsi/dt    = -(n-1) K_rad(s_lab) psi,       phi_lab = sqrt(w(xi_lab)).

The stored (t, x_j, phi_j, psi_j) history then satisfies the Ricci flow
equation on the fixed labels to discretization accuracy, which the tests
check directly by differencing stored states against -2 Ric.

Sectional curvatures with s = arclength: K_rad = -phi_ss/phi and
K_sph = (1 - phi_s^2)/phi^2, so |Rm|^2 = 4(n-1) K_rad^2 + 2(n-1)(n-2) K_sph^2
and R = 2(n-1) K_rad + (n-1)(n-2) K_sph.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (Blowup, CflViolation, InsufficientTail, NoBlowupTrend,
                     PoleDegeneracy)
from .quadrature import cumulative_from_pole

_DEFAULT_GUARD = 1e8


# --------------------------------------------------------------------------
# states and histories
# --------------------------------------------------------------------------

@dataclass
class WarpedFlowState:
    """One stored time slice of the flow on fixed labels x_j in [0, 1]."""
    t: float
    x: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    n: int

    def validate(self, slope_tol=1e-3):
        interior = slice(1, -1)
        if not (self.phi[interior] > 0).all():
            raise PoleDegeneracy("phi lost positivity at interior nodes")
        if not (self.psi > 0).all():
            raise PoleDegeneracy("psi lost positivity")
        if abs(self.phi[0]) > 1e-12 or abs(self.phi[-1]) > 1e-12:
            raise PoleDegeneracy("pole values of phi moved off zero")
        for sl in self.pole_slopes():
            if abs(abs(sl) - 1) > slope_tol:
                raise PoleDegeneracy(
                    f"pole slope {sl} drifted from +-1 beyond {slope_tol}")

    def pole_slopes(self):
        dx = self.x[1] - self.x[0]
        left = (4 * self.phi[1] - self.phi[2]) / (2 * dx) / self.psi[0]
        right = -(4 * self.phi[-2] - self.phi[-3]) / (2 * dx) / self.psi[-1]
        return left, right

    def max_rm(self):
        k_rad, k_sph = _label_sectionals(self)
        rm2 = 4 * (self.n - 1) * k_rad ** 2 \
            + 2 * (self.n - 1) * (self.n - 2) * k_sph ** 2
        return float(np.sqrt(rm2.max()))


def _label_sectionals(state: WarpedFlowState):
    """K_rad, K_sph on the stored label grid, pole-regularized."""
    x, phi, psi = state.x, state.phi, state.psi
    dx = x[1] - x[0]
    w = phi ** 2
    we = np.concatenate((w[3:0:-1], w, w[-2:-5:-1]))
    pe = np.concatenate((psi[3:0:-1], psi, psi[-2:-5:-1]))
    w_x = _d1(we, dx)
    w_xx = _d2(we, dx)
    psi_x = _d1(pe, dx)
    w_s = w_x / psi
    w_ss = (w_xx / psi - w_x * psi_x / psi ** 2) / psi
    with np.errstate(divide="ignore", invalid="ignore"):
        k_rad = (w_s ** 2 - 2 * w * w_ss) / (4 * w ** 2)
        k_sph = (4 * w - w_s ** 2) / (4 * w ** 2)
    for idx, inward, base in (
            (np.arange(3), np.arange(3, 8), x[0]),
            (np.arange(len(x) - 3, len(x)), np.arange(len(x) - 8,
                                                      len(x) - 3), x[-1])):
        d2v = (x[inward] - base) ** 2
        cr = np.polynomial.polynomial.polyfit(d2v, k_rad[inward], 2)
        cs = np.polynomial.polynomial.polyfit(d2v, k_sph[inward], 2)
        k_rad[idx] = np.polynomial.polynomial.polyval((x[idx] - base) ** 2, cr)
        k_sph[idx] = np.polynomial.polynomial.polyval((x[idx] - base) ** 2, cs)
    return k_rad, k_sph


@dataclass
class FlowHistory:
    """Ordered flow states with curvature track and estimated singular time.

    ``states`` may be None for synthetic histories that carry only the
    (t, max|Rm|) track (enough for singular-time and blow-up-exponent fits).
    """
    times: np.ndarray
    max_rm: np.ndarray
    n: int
    states: Optional[list] = None
    T_estimate: Optional[float] = None
    T_uncertainty: Optional[float] = None
    termination: str = "horizon"

    def validate(self):
        dt = np.diff(self.times)
        if not (dt > 0).all():
            raise ValueError("history times must be strictly increasing")
        if not np.isfinite(self.max_rm).all():
            raise ValueError("history contains non-finite max|Rm|")


def synthetic_history(times, max_rm, n=3) -> FlowHistory:
    """History carrying only the curvature track (fitting tests and oracles)."""
    h = FlowHistory(times=np.asarray(times, dtype=float),
                    max_rm=np.asarray(max_rm, dtype=float), n=n)
    h.validate()
    return h


@dataclass
class TypeAEstimate:
    """Fit of max|Rm| <= C / (T-t)^r over a tail window."""
    C: float
    r: float
    r_stderr: float
    fit_residual: float
    window: tuple

    @property
    def verdict(self):
        band = max(2 * self.r_stderr, 0.02)
        if abs(self.r - 1.0) <= band:
            return "type I"
        if 1.0 - band <= self.r < 1.5:
            return "type A"
        return "not type A"


# --------------------------------------------------------------------------
# spatial operators (staggered xi grid, 4th order, parity ghosts)
# --------------------------------------------------------------------------

def _ghosts_even(f):
    return np.concatenate((f[1::-1], f, f[:-3:-1]))


def _d1(fe, h):
    return (fe[:-4] - 8 * fe[1:-3] + 8 * fe[3:-1] - fe[4:]) / (12 * h)


def _d2(fe, h):
    return (-fe[:-4] + 16 * fe[1:-3] - 30 * fe[2:-2] + 16 * fe[3:-1]
            - fe[4:]) / (12 * h ** 2)


def _gauge_rhs(w, L, dxi, n):
    """Time derivative of (w, L) in the arclength gauge, plus diagnostics."""
    we = _ghosts_even(w)
    w_s = _d1(we, dxi) / L
    w_ss = _d2(we, dxi) / L ** 2
    k_rad = (w_s ** 2 - 2 * w * w_ss) / (4 * w ** 2)
    A = (n - 1) * cumulative_from_pole(k_rad, dxi * L)
    kN = (3 * k_rad[-1] - k_rad[-2]) / 2
    A_L = A[-1] + (n - 1) * 0.25 * (dxi * L) * (k_rad[-1] + kN)
    xi = (np.arange(len(w)) + 0.5) * dxi
    w_t = w_ss + (A + xi * (-A_L)) * w_s - 2 * (n - 2)
    if n != 3:
        w_t = w_t + (n - 3) * w_s ** 2 / (2 * w)
    return w_t, -A_L, k_rad, A, A_L


@dataclass
class _GaugeState:
    """Internal solver state: w on the staggered xi grid plus total length."""
    w: np.ndarray
    L: float
    t: float
    n: int
    dxi: float

    def curvatures(self):
        we = _ghosts_even(self.w)
        w_s = _d1(we, self.dxi) / self.L
        w_ss = _d2(we, self.dxi) / self.L ** 2
        k_rad = (w_s ** 2 - 2 * self.w * w_ss) / (4 * self.w ** 2)
        k_sph = (4 * self.w - w_s ** 2) / (4 * self.w ** 2)
        return k_rad, k_sph

    def max_rm(self):
        k_rad, k_sph = self.curvatures()
        rm2 = 4 * (self.n - 1) * k_rad ** 2 \
            + 2 * (self.n - 1) * (self.n - 2) * k_sph ** 2
        return float(np.sqrt(rm2.max()))


def _gauge_step(gs: _GaugeState, dt):
    """One SSPRK3 step of the gauge system."""
    w, L, dxi, n = gs.w, gs.L, gs.dxi, gs.n
    w1t, L1t, *_ = _gauge_rhs(w, L, dxi, n)
    w1, L1 = w + dt * w1t, L + dt * L1t
    w2t, L2t, *_ = _gauge_rhs(w1, L1, dxi, n)
    w2 = 0.75 * w + 0.25 * (w1 + dt * w2t)
    L2 = 0.75 * L + 0.25 * (L1 + dt * L2t)
    w3t, L3t, *_ = _gauge_rhs(w2, L2, dxi, n)
    return _GaugeState(w=w / 3 + 2 / 3 * (w2 + dt * w3t),
                       L=L / 3 + 2 / 3 * (L2 + dt * L3t),
                       t=gs.t + dt, n=n, dxi=dxi)


def cfl_dt(gs: _GaugeState, cfl=0.2, reaction_margin=0.1):
    """Stability bound: diffusion limit on the arclength spacing plus a
    reaction limit from the current curvature scale."""
    ds = gs.dxi * gs.L
    return min(cfl * ds ** 2, reaction_margin / max(gs.max_rm(), 1e-30))


# --------------------------------------------------------------------------
# label reconstruction
# --------------------------------------------------------------------------

class _Labels:
    """Lagrangian label trajectories carrying the fixed-label description."""

    def __init__(self, x_labels, xi0, psi0):
        self.x = np.asarray(x_labels, dtype=float)
        self.xi = np.asarray(xi0, dtype=float)
        self.psi = np.asarray(psi0, dtype=float)

    @staticmethod
    def _vel(gs, xi_lab, psi_lab):
        _, _, k_rad, A, A_L = _gauge_rhs(gs.w, gs.L, gs.dxi, gs.n)
        grid = (np.arange(len(gs.w)) + 0.5) * gs.dxi
        csA = CubicSpline(grid, A)
        csK = CubicSpline(grid, k_rad)
        xi_c = np.clip(xi_lab, 0.0, 1.0)
        A_lab = np.where(xi_c < grid[0], A[0] * xi_c / grid[0], csA(xi_c))
        A_lab = np.where(xi_c > grid[-1],
                         A_L - (A_L - A[-1]) * (1 - xi_c) / (1 - grid[-1]),
                         A_lab)
        K_lab = csK(np.clip(xi_c, grid[0], grid[-1]))
        v = (xi_c * A_L - A_lab) / gs.L
        p = -(gs.n - 1) * K_lab * psi_lab
        return v, p

    def advance(self, gs_old, gs_new, dt):
        v1, p1 = self._vel(gs_old, self.xi, self.psi)
        v2, p2 = self._vel(gs_new, self.xi + dt * v1, self.psi + dt * p1)
        self.xi = self.xi + 0.5 * dt * (v1 + v2)
        self.psi = self.psi + 0.5 * dt * (p1 + p2)
        # poles are fixed points of the coordinate map
        self.xi[0] = 0.0
        self.xi[-1] = 1.0

    def state(self, gs) -> WarpedFlowState:
        grid = (np.arange(len(gs.w)) + 0.5) * gs.dxi
        we = _ghosts_even(gs.w)
        ge = np.concatenate(([-grid[1], -grid[0]], grid,
                             [2 - grid[-1], 2 - grid[-2]]))
        cs = CubicSpline(ge, we)
        w_lab = np.clip(cs(self.xi), 0.0, None)
        phi = np.sqrt(w_lab)
        phi[0] = 0.0
        phi[-1] = 0.0
        return WarpedFlowState(t=gs.t, x=self.x.copy(), phi=phi,
                               psi=self.psi.copy(), n=gs.n)


# --------------------------------------------------------------------------
# driver operations
# --------------------------------------------------------------------------

def initial_gauge_state(profile, n, n_grid) -> _GaugeState:
    """Gauge state from a radius profile phi0(s) given on arclength s in
    [0, L0] with unit pole slopes; ``profile`` maps s-array -> phi values,
    ``profile.length`` gives L0."""
    L0 = profile.length
    dxi = 1.0 / n_grid
    xi = (np.arange(n_grid) + 0.5) * dxi
    w = profile(xi * L0) ** 2
    return _GaugeState(w=w, L=L0, t=0.0, n=n, dxi=dxi)


@dataclass
class RoundSphereProfile:
    """phi0(s) = a0 sin(s / a0) on [0, pi a0]."""
    a0: float = 1.0

    @property
    def length(self):
        return np.pi * self.a0

    def __call__(self, s):
        return self.a0 * np.sin(s / self.a0)


@dataclass
class DumbbellProfile:
    """Neck-pinching dumbbell: phi0(s) = sin(s)(1 - amp sin^2(s)) on [0, pi]."""
    amp: float = 0.8

    @property
    def length(self):
        return np.pi

    def __call__(self, s):
        return np.sin(s) * (1 - self.amp * np.sin(s) ** 2)


@dataclass
class CappedTubeProfile:
    """Constant-radius tube with spherical caps.

    The middle evolves by the round-cylinder ODE phi^2(t) = phi^2(0) - 2(n-2)t
    until the caps' influence diffuses in, giving a closed-form check of the
    reaction term.
    """
    radius: float = 0.5
    length: float = np.pi

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        cap = self.radius * np.pi / 2
        out = np.full_like(s, self.radius)
        left = s < cap
        out[left] = self.radius * np.sin(s[left] / self.radius)
        right = s > self.length - cap
        out[right] = self.radius * np.sin((self.length - s[right])
                                          / self.radius)
        return out


def step_flow(state: WarpedFlowState, dt) -> WarpedFlowState:
    """Advance one stored state by dt (single-step contract).

    Runs the gauge solver seeded from the state's own labels.  dt must
    respect the CFL bound for the state's resolution; dt = 0 is an identity.
    """
    state.validate()
    if dt == 0:
        return WarpedFlowState(t=state.t, x=state.x.copy(),
                               phi=state.phi.copy(), psi=state.psi.copy(),
                               n=state.n)
    gs, labels = _gauge_from_state(state)
    bound = cfl_dt(gs)
    if dt > bound * (1 + 1e-9):
        raise CflViolation(f"dt={dt} exceeds stability bound {bound:.3e}")
    gs_new = _gauge_step(gs, dt)
    labels.advance(gs, gs_new, dt)
    out = labels.state(gs_new)
    out.validate()
    return out


def _gauge_from_state(state: WarpedFlowState, n_grid=None):
    x, phi, psi = state.x, state.phi, state.psi
    s = np.concatenate(([0.0], np.cumsum(0.5 * np.diff(x)
                                         * (psi[1:] + psi[:-1]))))
    L0 = s[-1]
    n_grid = n_grid if n_grid is not None else 2 * (len(x) - 1)
    dxi = 1.0 / n_grid
    xi_grid = (np.arange(n_grid) + 0.5) * dxi
    w_of_s = CubicSpline(s / L0, phi ** 2)
    gs = _GaugeState(w=np.clip(w_of_s(xi_grid), 1e-300, None), L=L0,
                     t=state.t, n=state.n, dxi=dxi)
    labels = _Labels(x, s / L0, psi.copy())
    return gs, labels


def run_flow(profile, n=3, n_grid=192, n_labels=129, cfl=0.2,
             guard=_DEFAULT_GUARD, t_horizon=None, store_every=1,
             max_steps=2_000_000) -> FlowHistory:
    """Evolve initial data to the curvature guard or a time horizon.

    Returns the pure-gauge history on ``n_labels`` fixed labels (uniform,
    including poles).  Termination at the guard marks proximity to the
    singular time; the history is annotated by estimate_singular_time.
    """
    gs = initial_gauge_state(profile, n, n_grid)
    x_labels = np.linspace(0.0, 1.0, n_labels)
    labels = _Labels(x_labels, x_labels.copy(),
                     np.full(n_labels, profile.length))
    states = [labels.state(gs)]
    times = [gs.t]
    rms = [gs.max_rm()]
    termination = "horizon"
    for k in range(max_steps):
        if t_horizon is not None and gs.t >= t_horizon - 1e-15:
            break
        m = gs.max_rm()
        if m > guard:
            termination = "blowup_guard"
            break
        dt = cfl_dt(gs, cfl=cfl)
        if t_horizon is not None:
            dt = min(dt, t_horizon - gs.t)
        gs_new = _gauge_step(gs, dt)
        if not np.isfinite(gs_new.w).all() or gs_new.w.min() <= 0:
            termination = "degenerate"
            break
        labels.advance(gs, gs_new, dt)
        gs = gs_new
        if (k + 1) % store_every == 0:
            st = labels.state(gs)
            st.validate()
            states.append(st)
            times.append(gs.t)
            rms.append(gs.max_rm())
    else:
        raise Blowup("max_steps exhausted before guard or horizon")
    hist = FlowHistory(times=np.asarray(times), max_rm=np.asarray(rms),
                       n=n, states=states, termination=termination)
    hist.validate()
    return hist


def estimate_singular_time(history: FlowHistory, tail=None):
    """Extrapolate 1/max|Rm| to zero over the increasing tail.

    Returns (T, uncertainty).  Iterates a log-log exponent estimate so that
    non-unit blow-up exponents do not bias the root.
    """
    t = history.times
    m = history.max_rm
    if len(t) < 10:
        raise NoBlowupTrend("need at least 10 states")
    k = len(m) - 1
    while k > 0 and m[k] > m[k - 1]:
        k -= 1
    n_tail = len(m) - 1 - k
    if n_tail < 8 or m[-1] < 4 * m.min():
        raise NoBlowupTrend("max|Rm| shows no sustained increase in the tail")
    if tail is None:
        tail = max(8, n_tail // 2)
    tt, mm = t[-tail:], m[-tail:]
    r = 1.0
    T, sigma = None, None
    for _ in range(3):
        y = mm ** (-1.0 / r)
        A = np.vstack([tt, np.ones_like(tt)]).T
        coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
        slope, icept = coef
        if slope >= 0:
            raise NoBlowupTrend("1/max|Rm| not decreasing in the tail")
        T = -icept / slope
        dof = max(len(tt) - 2, 1)
        s2 = (res[0] / dof if len(res) else
              ((y - A @ coef) ** 2).sum() / dof)
        cov = s2 * np.linalg.inv(A.T @ A)
        # propagate to the root T = -b/a
        gradT = np.array([icept / slope ** 2, -1.0 / slope])
        sigma = float(np.sqrt(gradT @ cov @ gradT))
        if T <= tt[-1]:
            T = tt[-1] + 0.5 * (tt[-1] - tt[0]) / len(tt)
        lg = np.log(T - tt)
        r_new = -np.polyfit(lg, np.log(mm), 1)[0]
        if not np.isfinite(r_new) or r_new <= 0.2:
            break
        r = min(max(r_new, 0.5), 1.49)
    history.T_estimate = float(T)
    history.T_uncertainty = float(sigma)
    return float(T), float(sigma)


def fit_type_a(history: FlowHistory, T, window=None) -> TypeAEstimate:
    """Least squares of log max|Rm| against -r log(T-t) over a tail window."""
    t = history.times
    m = history.max_rm
    if window is None:
        mmin = m.min()
        sig = np.nonzero(m >= 4 * mmin)[0]
        t_signal = t[sig[0]] if len(sig) else t[len(t) // 2]
        lo = T - 0.4 * (T - t_signal)
        window = (max(lo, 0.5 * T), t[-1])
    sel = (t >= window[0]) & (t <= window[1]) & (t < T)
    if sel.sum() < 8:
        raise InsufficientTail(
            f"only {int(sel.sum())} states inside window {window}")
    lg = np.log(T - t[sel])
    lm = np.log(m[sel])
    A = np.vstack([lg, np.ones_like(lg)]).T
    coef, res, *_ = np.linalg.lstsq(A, lm, rcond=None)
    r = -coef[0]
    C = float(np.exp(coef[1]))
    dof = max(sel.sum() - 2, 1)
    s2 = (res[0] / dof if len(res) else ((lm - A @ coef) ** 2).sum() / dof)
    cov = s2 * np.linalg.inv(A.T @ A)
    return TypeAEstimate(C=C, r=float(r), r_stderr=float(np.sqrt(cov[0, 0])),
                         fit_residual=float(np.sqrt(s2)),
                         window=(float(window[0]), float(window[1])))


def blowup_lower_bound_check(history: FlowHistory, T):
    """Check max|Rm|(t) >= 1/(8(T-t)) at every stored state.

    Returns (ok, worst margin) with margin = min over states of
    8 (T-t) max|Rm|; the maximum principle forces margin >= 1 for any
    maximal flow.
    """
    ratios = 8 * (T - history.times) * history.max_rm
    return bool(ratios.min() >= 1.0), float(ratios.min())
