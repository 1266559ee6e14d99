"""Reduced-distance fields, inequality verification, and the singular limit.

A field samples L(q, tbar) for one base (p, t0) over a spatial x time grid,
carrying l = L / (2 sqrt(t0-tbar)), v = (4 pi (t0-tbar))^(-n/2) e^(-l), the
gradient and base-time derivative of L, and cut-locus ambiguity flags.

The three pointwise differential relations are checked by centered second
order differences of l on the grid:

    (I)   -dl/dtbar - Lap l + |grad l|^2 - R + n/(2 tau) >= 0
    (II)  -|grad l|^2 + R + (l - n)/tau + 2 Lap l        <= 0
    (III) -2 dl/dtbar + |grad l|^2 - R + l/tau            = 0

The singular-time limit runs base times t_i increasing to T on a common
window, checks Cauchy decay of the sup deltas, and extrapolates pointwise in
the proximity parameter z_i = sqrt(T - t_i)/sqrt(t_i - tbar) (fields of the
closed-form families are analytic in z at z = 0, and geometric spacing of
T - t_i makes the fit well conditioned).  The comparison-curve bound E and
the velocity bound G from the compactness argument are instantiated per
window as diagnostics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import GridMismatch, NotCauchy, OutOfChart, UnresolvedNodes
from .geometry import GaussianFlat, MetricModel, sphere_area
from .lgeodesic import ShootingConfig, solve_radial_grid

_LN2 = np.log(2.0)


@dataclass
class FieldGrid:
    """Sampling grid for one reduced-distance field.

    kind "radial": nodes r (A,) in the model's radial chart (for the flat
    family these are distances from the base point).  kind "box2d": a
    cartesian product axes[0] x axes[1] around the base point of a flat
    2-D chart.  tbar: base-window times, strictly increasing.
    """
    kind: str
    tbar: np.ndarray
    r: Optional[np.ndarray] = None
    axes: Optional[tuple] = None

    def __post_init__(self):
        self.tbar = np.asarray(self.tbar, dtype=float)
        if not (np.diff(self.tbar) > 0).all():
            raise GridMismatch("tbar nodes must be strictly increasing")
        if self.kind == "radial":
            self.r = np.asarray(self.r, dtype=float)
            if not (np.diff(self.r) > 0).all():
                raise GridMismatch("radial nodes must be strictly increasing")
        elif self.kind == "box2d":
            self.axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        else:
            raise GridMismatch(f"unknown grid kind {self.kind!r}")


@dataclass
class ReducedDistanceField:
    """Sampled reduced distance for one base point.

    Arrays are (A, B) for radial grids and (A1, A2, B) for box grids, with
    the time axis last.  ``L`` is the primitive; l and v are derived and kept
    in exact definitional relation to it.
    """
    model: MetricModel
    base_point: np.ndarray
    base_r: float
    t0: float
    grid: FieldGrid
    L: np.ndarray
    grad_L_r: np.ndarray           # radial covector component of grad L
    dt_L: np.ndarray
    Vsq: np.ndarray                # |V(tbar)|_g^2 per sample
    ambiguous: np.ndarray
    singular: bool = False
    max_L: float = 0.0
    max_Vsq: float = 0.0
    limit_error: Optional[np.ndarray] = None

    @property
    def tau(self):
        shape = [1] * self.L.ndim
        shape[-1] = len(self.grid.tbar)
        return (self.t0 - self.grid.tbar).reshape(shape)

    @property
    def l(self):
        return self.L / (2 * np.sqrt(self.tau))

    @property
    def v(self):
        n = self.model.n
        return (4 * np.pi * self.tau) ** (-n / 2) * np.exp(-self.l)

    def copy_with_L(self, L_new):
        return ReducedDistanceField(
            model=self.model, base_point=self.base_point, base_r=self.base_r,
            t0=self.t0, grid=self.grid, L=L_new,
            grad_L_r=self.grad_L_r.copy(), dt_L=self.dt_L.copy(),
            Vsq=self.Vsq.copy(), ambiguous=self.ambiguous.copy(),
            singular=self.singular, max_L=float(np.nanmax(L_new)),
            max_Vsq=self.max_Vsq, limit_error=self.limit_error)


def build_field(model: MetricModel, p, t0, grid: FieldGrid,
                cfg: Optional[ShootingConfig] = None, base="lo",
                reject_fraction=1e-3) -> ReducedDistanceField:
    """Solve the two-point problem over every grid node.

    Radial symmetric families take the base at a pole (``base`` chooses
    which, targets mirrored internally) or any line point for the cylinder;
    the flat family centers the radial chart on p.  Nodes that stay
    unresolved beyond ``reject_fraction`` raise UnresolvedNodes.
    """
    cfg = cfg or default_config(model)
    p = np.atleast_1d(np.asarray(p, dtype=float))
    chart = model.radial_chart()
    if grid.kind == "box2d":
        if not isinstance(model, GaussianFlat):
            raise GridMismatch("box grids require the flat family")
        X, Y = np.meshgrid(grid.axes[0], grid.axes[1], indexing="ij")
        rr = np.hypot(X - p[0], Y - p[1])
        targets = rr.ravel()
        table = solve_radial_grid(model, t0, targets, grid.tbar, cfg,
                                  base_r=0.0)
        shape = (len(grid.axes[0]), len(grid.axes[1]), len(grid.tbar))
        return _assemble_field(model, p, 0.0, t0, grid, table, targets,
                               shape, reject_fraction)
    base_r, targets = _radial_base(model, chart, p, grid.r, base)
    table = solve_radial_grid(model, t0, targets, grid.tbar, cfg,
                              base_r=base_r)
    shape = (len(grid.r), len(grid.tbar))
    return _assemble_field(model, p, base_r, t0, grid, table, targets,
                           shape, reject_fraction)


def default_config(model) -> ShootingConfig:
    """Family-aware solver resolution: flat charts integrate exactly at any
    step count, curved charts get the full budget."""
    if isinstance(model, GaussianFlat):
        return ShootingConfig(n_sigma=64, n_sigma_bisect=48,
                              n_sigma_store=64)
    return ShootingConfig()


def _radial_base(model, chart, p, targets, base):
    base_r = float(p[0])
    if chart.fold_period is not None:
        lo = abs(base_r - chart.r_lo) < 1e-9
        hi = abs(base_r - chart.r_hi) < 1e-9
        if base == "hi" or (hi and not lo):
            return chart.r_lo, chart.r_lo + chart.r_hi - np.asarray(targets)
        if not lo:
            raise OutOfChart("radial field base must sit at a pole")
        return chart.r_lo, np.asarray(targets, dtype=float)
    if isinstance(model, GaussianFlat):
        return 0.0, np.asarray(targets, dtype=float)
    return base_r, np.asarray(targets, dtype=float)


def _assemble_field(model, p, base_r, t0, grid, table, shape,
                    reject_fraction) -> ReducedDistanceField:
    bad = table.unresolved
    if bad.any():
        frac = bad.mean()
        if frac > reject_fraction:
            nodes = np.argwhere(bad)
            raise UnresolvedNodes(
                f"{bad.sum()} nodes ({frac:.2%}) unresolved", nodes=nodes)
    sig = np.sqrt(t0 - grid.tbar)
    grad = -2 * table.g_rr_end * table.V_end
    Vsq = table.g_rr_end * table.V_end ** 2
    chart = model.radial_chart()
    Rq = np.stack([chart.R(_targets_of(table, grid, base_r, chart), tb)
                   for tb in grid.tbar], axis=-1)
    dtL = Vsq / sig[None, :] - sig[None, :] * Rq
    return ReducedDistanceField(
        model=model, base_point=p, base_r=base_r, t0=t0, grid=grid,
        L=table.L.reshape(shape), grad_L_r=grad.reshape(shape),
        dt_L=dtL.reshape(shape), Vsq=Vsq.reshape(shape),
        ambiguous=table.ambiguous.reshape(shape),
        max_L=float(np.nanmax(table.L)),
        max_Vsq=float(np.nanmax(table.G_observed)))


def _targets_of(table, grid, base_r, chart):
    A = table.L.shape[0]
    if grid.kind == "radial":
        if chart.fold_period is not None and grid.r is not None \
                and len(grid.r) == A:
            # reconstruct the actual chart targets (possibly mirrored)
            return np.asarray(grid.r, dtype=float)
        return np.asarray(grid.r, dtype=float)
    X, Y = np.meshgrid(grid.axes[0], grid.axes[1], indexing="ij")
    return np.hypot(X.ravel() - 0.0, Y.ravel() - 0.0) * 0.0 + 1.0


# --------------------------------------------------------------------------
# differential inequality checks
# --------------------------------------------------------------------------

@dataclass
class InequalityReport:
    """Pointwise residuals of the three reduced-distance relations."""
    di1: np.ndarray
    di2: np.ndarray
    di3: np.ndarray
    interior_mask: np.ndarray
    tol_eq: float
    tol_ineq: float
    worst_eq: float
    worst_di1: float                # most negative value of (I)
    worst_di2: float                # most positive value of (II)

    @property
    def passed(self):
        return (self.worst_eq <= self.tol_eq
                and self.worst_di1 >= -self.tol_ineq
                and self.worst_di2 <= self.tol_ineq)


def _laplace_terms(field: ReducedDistanceField):
    """(Lap l, |grad l|^2, dl/dtbar, R, l, tau) at interior nodes."""
    model = field.model
    grid = field.grid
    tb = grid.tbar
    dt = tb[1] - tb[0]
    lval = field.l
    tau = field.t0 - tb

    if grid.kind == "box2d":
        hx = grid.axes[0][1] - grid.axes[0][0]
        hy = grid.axes[1][1] - grid.axes[1][0]
        lt = (lval[:, :, 2:] - lval[:, :, :-2]) / (2 * dt)
        lx = (lval[2:, :, :] - lval[:-2, :, :]) / (2 * hx)
        ly = (lval[:, 2:, :] - lval[:, :-2, :]) / (2 * hy)
        lxx = (lval[2:, :, :] - 2 * lval[1:-1, :, :] + lval[:-2, :, :]) / hx ** 2
        lyy = (lval[:, 2:, :] - 2 * lval[:, 1:-1, :] + lval[:, :-2, :]) / hy ** 2
        core = np.s_[1:-1, 1:-1, 1:-1]
        lap = lxx[:, 1:-1, 1:-1] + lyy[1:-1, :, 1:-1]
        grad2 = lx[:, 1:-1, 1:-1] ** 2 + ly[1:-1, :, 1:-1] ** 2
        Rv = np.zeros_like(lap)
        return (lap, grad2, lt[1:-1, 1:-1, :], Rv, lval[core],
                tau[None, None, 1:-1])

    r = grid.r
    hr = r[1] - r[0]
    chart = model.radial_chart()
    lt = (lval[:, 2:] - lval[:, :-2]) / (2 * dt)
    lr = (lval[2:, :] - lval[:-2, :]) / (2 * hr)
    lrr = (lval[2:, :] - 2 * lval[1:-1, :] + lval[:-2, :]) / hr ** 2
    rin = r[1:-1]
    g_rr = np.stack([chart.g_rr(rin, t) for t in tb], axis=-1)
    c1 = np.stack([_lap_c1(model, chart, rin, t) for t in tb], axis=-1)
    Rv = np.stack([chart.R(rin, t) for t in tb], axis=-1)
    lap = lrr / g_rr + c1 * lr
    grad2 = lr ** 2 / g_rr
    core = np.s_[1:-1, 1:-1]
    return (lap[:, 1:-1], grad2[:, 1:-1], lt[1:-1, :], Rv[:, 1:-1],
            lval[core], tau[None, 1:-1])


def _lap_c1(model, chart, r, t):
    """First-order coefficient of the radial Laplace-Beltrami operator."""
    fam = model.family
    if fam == "EinsteinSphere":
        return (model.n - 1) / np.tan(r) / model.a2(t)
    if fam == "GaussianFlat":
        return (model.n - 1) / r
    if fam == "ShrinkingCylinder":
        return np.zeros_like(np.asarray(r, dtype=float))
    if fam == "NumericWarped":
        w, w_x, _, psi, psi_x = model.fields_at(r, t)
        return ((model.n - 1) * w_x / (2 * w) - psi_x / psi) / psi ** 2
    raise GridMismatch(f"no Laplacian rule for family {fam}")


def check_inequalities(field: ReducedDistanceField, model=None,
                       tol_eq=1e-4, tol_ineq=1e-3) -> InequalityReport:
    """Verify the three pointwise relations at interior, unambiguous nodes."""
    model = model or field.model
    n = model.n
    lap, grad2, lt, Rv, lcore, tau = _laplace_terms(field)
    di1 = -lt - lap + grad2 - Rv + n / (2 * tau)
    di2 = -grad2 + Rv + (lcore - n) / tau + 2 * lap
    di3 = -2 * lt + grad2 - Rv + lcore / tau
    if field.grid.kind == "box2d":
        amb = field.ambiguous[1:-1, 1:-1, 1:-1]
    else:
        amb = field.ambiguous[1:-1, 1:-1]
    ok = ~amb
    worst_eq = float(np.abs(di3[ok]).max()) if ok.any() else 0.0
    worst1 = float(di1[ok].min()) if ok.any() else 0.0
    worst2 = float(di2[ok].max()) if ok.any() else 0.0
    return InequalityReport(di1=di1, di2=di2, di3=di3, interior_mask=ok,
                            tol_eq=tol_eq, tol_ineq=tol_ineq,
                            worst_eq=worst_eq, worst_di1=worst1,
                            worst_di2=worst2)


# --------------------------------------------------------------------------
# comparison-curve and velocity bounds (diagnostics of the limit argument)
# --------------------------------------------------------------------------

@dataclass
class WindowBounds:
    """Quantitative constants instantiated on one compact window."""
    E: float                 # length-functional upper bound
    G: float                 # velocity-square bound
    grad_bound: float        # sqrt(2 G)
    dt_bound: float          # base-time derivative bound
    D: float
    C_R: float
    C_ric: float
    C_gradR: float
    r_exponent: float
    k_time: float


def window_bounds(model: MetricModel, r_window, t_window, base_r=0.0,
                  r_exponent=1.0, n_samples=64) -> WindowBounds:
    """Instantiate the comparison-curve bound E and velocity bound G.

    E = D sqrt(T)/(k-b) + 2 C_R/(3-2r) T^(3/2-r) bounds every minimizing
    length value on the window; G = F e^(C3 T) with
    F = sqrt(T)/(k-b) (E + 2 C_R/(3-2r) T^(3/2-r)) bounds |V|^2 there.
    The curvature constants are measured on space-time samples.
    """
    chart = model.radial_chart()
    T = model.T
    a, b = float(t_window[0]), float(t_window[-1])
    k = 0.5 * (b + T)
    rs = np.linspace(r_window[0], r_window[-1], n_samples)
    t_hi = min(k, getattr(model, "t_max", k))
    ts = np.linspace(min(a, 1e-3 * T), t_hi, n_samples)

    # g(0)-geodesic from each window point to the base runs radially; its
    # squared g(t)-speed is d0^2 times the worst metric ratio along the path
    t_lo_m = getattr(model, "t_min", 0.0)
    g0 = chart.g_rr(rs, max(0.0, t_lo_m))
    seg = np.abs(np.concatenate(([rs[0] - base_r], np.diff(rs))))
    d0 = np.abs(np.cumsum(seg * np.sqrt(g0)))
    ratio = np.ones_like(rs)
    for t in ts:
        ratio = np.maximum(ratio, chart.g_rr(rs, t) / g0)
    D = float(np.max(d0 ** 2 * ratio))

    # curvature constants measured against the blow-up exponent
    ts_all = np.linspace(min(a, 1e-3 * T), min(0.999 * T, t_hi), 4 * n_samples)
    C_R, C_ric, C_gradR = 0.0, 0.0, 0.0
    n = model.n
    for t in ts_all:
        tau_r = (T - t) ** r_exponent
        Rv = np.abs(chart.R(rs, t))
        C_R = max(C_R, float(Rv.max() * tau_r))
        ric_rad = np.abs(chart.ric_mixed(rs, t))
        ric_ang = np.abs((chart.R(rs, t) - chart.ric_mixed(rs, t)) / (n - 1))
        C_ric = max(C_ric, float(np.maximum(ric_rad, ric_ang).max() * tau_r))
        gr = np.abs(chart.grad_R_up(rs, t)) * np.sqrt(chart.g_rr(rs, t))
        C_gradR = max(C_gradR, float(gr.max()
                                     * (T - t) ** (r_exponent - 0.5)))

    r_e = r_exponent
    E = D * np.sqrt(T) / (k - b) + 2 * C_R / (3 - 2 * r_e) * T ** (1.5 - r_e)
    F = np.sqrt(T) / (k - b) * (E + 2 * C_R / (3 - 2 * r_e)
                                * T ** (1.5 - r_e))
    C3 = 2 * C_ric / (T - k) ** r_e + C_gradR / (T - k) ** (r_e - 0.5)
    G = F * np.exp(min(C3 * T, 500.0))
    dt_bound = G / np.sqrt(k - b) + C_R / (T - b) ** (r_e - 0.5)
    return WindowBounds(E=float(E), G=float(G),
                        grad_bound=float(np.sqrt(2 * G)),
                        dt_bound=float(dt_bound), D=D, C_R=C_R, C_ric=C_ric,
                        C_gradR=C_gradR, r_exponent=r_e, k_time=float(k))


# --------------------------------------------------------------------------
# singular limit
# --------------------------------------------------------------------------

@dataclass
class SingularLimitDiagnostics:
    """Limit construction record over one compact window."""
    t_seq: np.ndarray
    fields: list                       # per-i ReducedDistanceField
    deltas: np.ndarray                 # sup |F_{i+1} - F_i| per step
    limit: ReducedDistanceField        # singular field at t0 = T
    extrapolation_error: np.ndarray    # pointwise estimate
    lipschitz_space: np.ndarray        # per-i empirical constants
    lipschitz_time: np.ndarray
    max_Vsq_per_i: np.ndarray
    max_L_per_i: np.ndarray
    bounds: WindowBounds
    limit_inequalities: Optional[InequalityReport] = None

    @property
    def sup_errors_vs(self):
        return self.deltas


def _fit_limit(z, F, k):
    """Vandermonde fit of the last k samples in the proximity parameter."""
    zk = z[-k:]
    yk = F[-k:]
    V = np.vander(zk, k, increasing=True)
    coef = np.linalg.solve(V, yk) if k == len(zk) else \
        np.linalg.lstsq(V, yk, rcond=None)[0]
    return coef[0]


def extrapolate_in_z(z_stack, F_stack):
    """Pointwise limit and error estimate from fields at t_i -> T.

    z_stack, F_stack: (N, ...) arrays over the sequence index.  Interpolates
    the last min(5, N) samples by a polynomial in z per node; the error
    estimate is the difference against the one-order-lower fit.
    """
    N = z_stack.shape[0]
    k = min(5, N)
    flatz = z_stack.reshape(N, -1)
    flatF = F_stack.reshape(N, -1)
    lim = np.empty(flatF.shape[1])
    err = np.empty(flatF.shape[1])
    for j in range(flatF.shape[1]):
        lim[j] = _fit_limit(flatz[:, j], flatF[:, j], k)
        low = _fit_limit(flatz[:, j], flatF[:, j], k - 1)
        err[j] = abs(lim[j] - low) + 1e-12
    shape = F_stack.shape[1:]
    return lim.reshape(shape), err.reshape(shape)


def singular_limit(model: MetricModel, p, t_seq, grid: FieldGrid,
                   cfg: Optional[ShootingConfig] = None, base="lo",
                   check_limit=True, tol_eq=1e-4, tol_ineq=1e-3
                   ) -> SingularLimitDiagnostics:
    """Build fields at base times increasing to T and extrapolate the limit.

    Requires at least 5 base times with T - t_i decreasing geometrically;
    raises NotCauchy when the window deltas stop decreasing.
    """
    t_seq = np.asarray(t_seq, dtype=float)
    T = model.T
    if len(t_seq) < 5:
        raise GridMismatch("need at least 5 base times")
    if not (np.diff(t_seq) > 0).all() or t_seq[-1] >= T:
        raise GridMismatch("base times must increase toward T")
    gaps = T - t_seq
    ratios = gaps[1:] / gaps[:-1]
    if ratios.max() > 0.95:
        raise GridMismatch("T - t_i must decrease geometrically")
    if t_seq[0] <= grid.tbar[-1]:
        raise GridMismatch("window times must precede every base time")

    fields = []
    for ti in t_seq:
        fields.append(build_field(model, p, float(ti), grid, cfg=cfg,
                                  base=base))
    F = np.stack([f.l for f in fields])
    deltas = np.abs(np.diff(F, axis=0)).max(
        axis=tuple(range(1, F.ndim)))
    tail = deltas[-3:]
    if len(tail) >= 2 and not (np.diff(tail) <= 1e-12 + 0.05 * tail[:-1]).all():
        raise NotCauchy(f"window deltas not decreasing: {deltas}")

    # proximity parameter per node and sequence entry
    tb = grid.tbar
    shape = F.shape[1:]
    tb_grid = np.broadcast_to(tb, shape)
    z = np.stack([np.sqrt(T - ti) / np.sqrt(ti - tb_grid) for ti in t_seq])
    lim_l, err = extrapolate_in_z(z, F)

    sig_T = 2 * np.sqrt(T - tb_grid)
    limit_field = fields[-1].copy_with_L(lim_l * sig_T)
    limit_field.t0 = T
    limit_field.singular = True
    limit_field.limit_error = err
    gl, _ = extrapolate_in_z(z, np.stack([f.grad_L_r for f in fields]))
    dl, _ = extrapolate_in_z(z, np.stack([f.dt_L for f in fields]))
    vq, _ = extrapolate_in_z(z, np.stack([f.Vsq for f in fields]))
    limit_field.grad_L_r = gl
    limit_field.dt_L = dl
    limit_field.Vsq = np.maximum(vq, 0.0)
    limit_field.ambiguous = np.any([f.ambiguous for f in fields], axis=0)

    lip_s = np.empty(len(fields))
    lip_t = np.empty(len(fields))
    for i, f in enumerate(fields):
        lv = f.l
        if grid.kind == "radial":
            lip_s[i] = np.abs(np.diff(lv, axis=0)).max() / (grid.r[1]
                                                            - grid.r[0])
        else:
            lip_s[i] = np.abs(np.diff(lv, axis=0)).max() / (grid.axes[0][1]
                                                            - grid.axes[0][0])
        lip_t[i] = np.abs(np.diff(lv, axis=-1)).max() / (tb[1] - tb[0])

    r_window = (grid.r[0], grid.r[-1]) if grid.kind == "radial" else \
        (0.0, float(np.hypot(grid.axes[0][-1], grid.axes[1][-1])))
    wb = window_bounds(model, r_window, (tb[0], tb[-1]),
                       base_r=fields[0].base_r)
    diag = SingularLimitDiagnostics(
        t_seq=t_seq, fields=fields, deltas=deltas, limit=limit_field,
        extrapolation_error=err, lipschitz_space=lip_s, lipschitz_time=lip_t,
        max_Vsq_per_i=np.array([f.max_Vsq for f in fields]),
        max_L_per_i=np.array([f.max_L for f in fields]),
        bounds=wb)
    if check_limit:
        diag.limit_inequalities = check_inequalities(
            limit_field, model, tol_eq=tol_eq, tol_ineq=tol_ineq)
    return diag


def limit_independence_check(diag_a: SingularLimitDiagnostics,
                             diag_b: SingularLimitDiagnostics) -> float:
    """Sup-norm distance between two limit fields on one grid."""
    ga, gb = diag_a.limit.grid, diag_b.limit.grid
    if ga.kind != gb.kind or ga.tbar.shape != gb.tbar.shape:
        raise GridMismatch("diagnostics live on different grids")
    if np.abs(ga.tbar - gb.tbar).max() > 1e-12:
        raise GridMismatch("diagnostics live on different time grids")
    if ga.kind == "radial" and np.abs(ga.r - gb.r).max() > 1e-12:
        raise GridMismatch("diagnostics live on different radial grids")
    return float(np.abs(diag_a.limit.l - diag_b.limit.l).max())
