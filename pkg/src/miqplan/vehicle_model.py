"""Linear point-mass vehicle model and its velocity-plane region linearization.

Per axis the state is [position, velocity, acceleration] driven by jerk; the
heading is never a state.  Orientation-dependent quantities (sine/cosine of
the heading, the curvature cap) are replaced by one-sided affine bounds in
(vx, vy) fitted per angular sector of the velocity plane, so everything a
planner needs stays linear.  A one-hot binary per sector selects which
region's bounds apply.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.optimize import linprog


class FitInfeasible(Exception):
    """An affine bound fit failed or failed its validity check."""


@dataclass(frozen=True)
class DynamicsMatrices:
    """Exact zero-order-hold discretization of the per-axis triple integrator."""

    a_step: np.ndarray  # 3x3
    b_step: np.ndarray  # 3
    dt: float

    def propagate(self, state3, jerk):
        return self.a_step @ np.asarray(state3, dtype=float) + self.b_step * jerk


def discretize_triple_integrator(dt: float) -> DynamicsMatrices:
    """dp/dt = v, dv/dt = a, da/dt = u integrated exactly over one step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    a = np.array([
        [1.0, dt, dt * dt / 2.0],
        [0.0, 1.0, dt],
        [0.0, 0.0, 1.0],
    ])
    b = np.array([dt ** 3 / 6.0, dt * dt / 2.0, dt])
    a.setflags(write=False)
    b.setflags(write=False)
    return DynamicsMatrices(a, b, dt)


@dataclass(frozen=True)
class AffineBound:
    """chi*vx + psi*vy + omega, one-sided bound on a trig function of heading."""

    chi: float
    psi: float
    omega: float

    def value(self, vx, vy):
        return self.chi * np.asarray(vx) + self.psi * np.asarray(vy) + self.omega


@dataclass(frozen=True)
class AffineBound3:
    """c_vx*vx + c_vy*vy + c_a*a_other + offset, one side of a curvature window."""

    c_vx: float
    c_vy: float
    c_a: float
    offset: float

    def value(self, vx, vy, a_other):
        return (self.c_vx * np.asarray(vx) + self.c_vy * np.asarray(vy)
                + self.c_a * np.asarray(a_other) + self.offset)


@dataclass(frozen=True)
class Region:
    """One angular sector of the velocity plane with its fitted bounds.

    ``curv_axis`` names the acceleration component the curvature window
    constrains ('y' where vx keeps its sign over the sector, 'x' otherwise);
    ``curv_lo``/``curv_hi`` take (vx, vy, a_other) where a_other is the
    acceleration on the *other* axis.  ``accel_taper_alpha`` caps each
    acceleration component to alpha times the speed projected on the sector
    center; without that low-speed taper no sound affine curvature window
    exists over the full accel box.
    """

    index: int
    theta_lo: float
    theta_hi: float
    cos_lo: AffineBound
    cos_hi: AffineBound
    sin_lo: AffineBound
    sin_hi: AffineBound
    curv_axis: str
    curv_lo: AffineBound3
    curv_hi: AffineBound3
    ax_box: tuple
    ay_box: tuple
    jerk_box: tuple
    accel_taper: tuple  # (slope, offset): |a| <= min(box, slope*speed + offset)
    v_min: float
    v_max: float
    kappa_max: float

    def accel_cap(self, speed):
        half = max(abs(self.ax_box[0]), abs(self.ax_box[1]))
        slope, offset = self.accel_taper
        return np.minimum(half, slope * np.asarray(speed) + offset)

    def contains_angle(self, theta: float) -> bool:
        t = theta % (2 * np.pi)
        return self.theta_lo - 1e-15 <= t < self.theta_hi

    def center_angle(self) -> float:
        return 0.5 * (self.theta_lo + self.theta_hi)


def _sector_grid(theta_lo, theta_hi, v_min, v_max, n_theta, n_speed):
    th = np.linspace(theta_lo, theta_hi, n_theta)
    vs = np.linspace(v_min, v_max, n_speed)
    tg, vg = np.meshgrid(th, vs)
    vx = (vg * np.cos(tg)).ravel()
    vy = (vg * np.sin(tg)).ravel()
    return tg.ravel(), vx, vy


def _eval_target(target, th, vx, vy):
    """Targets are functions of the heading (np.sin/np.cos) or of (th, vx, vy)."""
    if isinstance(target, np.ufunc):
        return target(th)
    try:
        import inspect

        if len(inspect.signature(target).parameters) >= 3:
            return target(th, vx, vy)
    except (TypeError, ValueError):
        pass
    return target(th)


def fit_affine_bound(target, sector, speed_range, side,
                     n_theta: int = 64, n_speed: int = 16,
                     pad_factor: int = 4) -> tuple[AffineBound, float]:
    """One-sided minimax affine fit of ``target(theta)`` over a sector.

    ``target`` maps an array of angles to values (np.sin / np.cos or any
    callable).  For side='upper' the fit satisfies bound >= target on the grid
    and minimizes the worst gap (an LP in the coefficients); side='lower' is
    symmetric.  The fitted offset is then padded by the worst violation found
    on a ``pad_factor`` denser grid so validity holds on any grid at least
    that dense.  Returns (bound, max_gap).
    """
    theta_lo, theta_hi = sector
    if theta_hi - theta_lo >= np.pi / 2:
        raise FitInfeasible("sector too wide for a one-sided affine trig fit")
    v_min, v_max = speed_range
    th, vx, vy = _sector_grid(theta_lo, theta_hi, v_min, v_max, n_theta, n_speed)
    t = np.asarray(_eval_target(target, th, vx, vy), dtype=float)
    sign = 1.0 if side == "upper" else -1.0
    if side not in ("upper", "lower"):
        raise ValueError("side must be 'upper' or 'lower'")
    # variables [chi, psi, omega, gap]; upper: bound >= t, bound - t <= gap
    m = len(vx)
    cols = np.stack([vx, vy, np.ones(m)], axis=1) * sign
    a_ub = np.vstack([
        np.hstack([-cols, np.zeros((m, 1))]),
        np.hstack([cols, -np.ones((m, 1))]),
    ])
    b_ub = np.concatenate([-sign * t, sign * t])
    res = linprog(c=[0.0, 0.0, 0.0, 1.0], A_ub=a_ub, b_ub=b_ub,
                  bounds=[(None, None)] * 3 + [(0, None)], method="highs")
    if not res.success:
        raise FitInfeasible(f"trig bound LP failed: {res.message}")
    chi, psi, omega, gap = res.x
    # pad by the worst violation on a denser grid plus an analytic margin for
    # the curvature of (target - fit) along the sector arc, so the one-sided
    # property holds everywhere, not just at sampled angles; in the speed
    # direction both fit and trig targets are linear, so endpoints dominate
    thf, vxf, vyf = _sector_grid(theta_lo, theta_hi, v_min, v_max,
                                 pad_factor * n_theta, pad_factor * n_speed)
    tf = np.asarray(_eval_target(target, thf, vxf, vyf), dtype=float)
    fit = chi * vxf + psi * vyf + omega
    viol = np.max(sign * (tf - fit))
    h = (theta_hi - theta_lo) / (pad_factor * n_theta - 1)
    margin = (1.0 + (abs(chi) + abs(psi)) * v_max) * h * h / 8.0
    pad = max(viol, 0.0) + margin + 1e-12
    omega += sign * pad
    return AffineBound(chi, psi, omega), float(gap + pad)


def _curvature_window_samples(theta, v, a_other, axis, kappa_max):
    """True admissible interval of the solved acceleration at each sample.

    With kappa = (vx*ay - vy*ax) / v^3 the cap |kappa| <= kappa_max is solved
    for ay (axis 'y') or ax (axis 'x'); both branch signs are handled by
    taking min/max of the two endpoint formulas.
    """
    vx = v * np.cos(theta)
    vy = v * np.sin(theta)
    v3 = v ** 3
    if axis == "y":
        e1 = (vy * a_other - kappa_max * v3) / vx
        e2 = (vy * a_other + kappa_max * v3) / vx
    else:
        e1 = (vx * a_other - kappa_max * v3) / vy
        e2 = (vx * a_other + kappa_max * v3) / vy
    return vx, vy, np.minimum(e1, e2), np.maximum(e1, e2)


def fit_curvature_window(sector, speed_range, a_box, kappa_max,
                         accel_full_speed: float = 6.0,
                         n_theta: int = 24, n_speed: int = 12, n_accel: int = 9,
                         pad_factor: int = 3):
    """Fit the affine inner window [lo, hi] on the curvature-controlling accel.

    Both sides are fitted jointly by an LP that maximizes the mean admitted
    window width subject to staying inside the true window at every grid
    sample, with an anchor keeping zero lateral acceleration admissible on
    the zero-other-accel slice.  The domain of the fit tapers the other-axis
    acceleration linearly below ``accel_full_speed`` (matching the gated
    rows a planner must add); without the taper no sound affine window
    exists.  The true cap grows quadratically with speed, so the affine
    window is conservative at high speed (roughly linear growth) and may
    pinch closed at low-speed/high-accel corners; that only forbids states,
    never admits excess curvature.

    Returns (axis, lo: AffineBound3, hi: AffineBound3, eps_fit) where eps_fit
    is the worst relative curvature excess at the fitted bounds on a denser
    grid (must stay within the 5% budget).
    """
    theta_lo, theta_hi = sector
    # the solve axis needs its velocity-component denominator bounded away from 0
    angles = np.linspace(theta_lo, theta_hi, 65)
    min_abs_cos = np.min(np.abs(np.cos(angles)))
    min_abs_sin = np.min(np.abs(np.sin(angles)))
    axis = "y" if min_abs_cos >= min_abs_sin else "x"
    a_half = max(abs(a_box[0]), abs(a_box[1]))
    v_lo, v_hi = speed_range
    # taper intercept matches the curvature budget at v_min so the window's
    # center swing never outruns its width there
    cap0 = min(a_half, kappa_max * v_lo ** 2)
    slope = max((a_half - cap0) / max(accel_full_speed - v_lo, 1e-9), 0.0)
    taper = (slope, cap0 - slope * v_lo)

    def grids(nt, ns, na):
        th = np.linspace(theta_lo, theta_hi, nt)
        vs = np.linspace(v_lo, v_hi, ns)
        frac = np.linspace(-1.0, 1.0, na)
        t, v, f = np.meshgrid(th, vs, frac)
        cap = np.minimum(a_half, slope * v + taper[1])
        return t.ravel(), v.ravel(), (f * cap).ravel()

    th, v, ao = grids(n_theta, n_speed, n_accel)
    vx, vy, true_lo, true_hi = _curvature_window_samples(th, v, ao, axis, kappa_max)
    m = len(vx)
    cols = np.stack([vx, vy, ao, np.ones(m)], axis=1)
    zero = np.zeros_like(cols)
    # variables [lo coefficients (4), hi coefficients (4)]
    a_rows = [np.hstack([zero, cols]),      # hi <= true_hi
              np.hstack([cols, zero]) * -1.0]  # -lo <= -true_lo
    b_rows = [true_hi, -true_lo]
    # anchor: on the a_other = 0 slice keep [-delta0, +delta0] admissible
    ths = np.repeat(np.linspace(theta_lo, theta_hi, n_theta),
                    n_speed)
    vss = np.tile(np.linspace(speed_range[0], speed_range[1], n_speed), n_theta)
    vxs, vys = vss * np.cos(ths), vss * np.sin(ths)
    delta0 = min(0.05, 0.9 * kappa_max * speed_range[0] ** 2)
    cols0 = np.stack([vxs, vys, np.zeros_like(vxs), np.ones_like(vxs)], axis=1)
    zero0 = np.zeros_like(cols0)
    a_rows.append(np.hstack([zero0, -cols0]))  # hi(a=0) >= +delta0
    b_rows.append(-delta0 * np.ones(len(vxs)))
    a_rows.append(np.hstack([cols0, zero0]))   # lo(a=0) <= -delta0
    b_rows.append(-delta0 * np.ones(len(vxs)))
    # maximize mean width = mean(hi) - mean(lo)
    c = np.concatenate([cols.mean(axis=0), -cols.mean(axis=0)])
    res = linprog(c=c, A_ub=np.vstack(a_rows), b_ub=np.concatenate(b_rows),
                  bounds=[(None, None)] * 8, method="highs")
    if not res.success:
        raise FitInfeasible(f"curvature window LP failed: {res.message}")
    coef_lo, coef_hi = res.x[:4].copy(), res.x[4:].copy()

    # pad both fits inward by the excess seen on a denser grid
    thf, vf, aof = grids(pad_factor * n_theta, pad_factor * n_speed, pad_factor * n_accel)
    vxf, vyf, tlo, thi = _curvature_window_samples(thf, vf, aof, axis, kappa_max)
    fit_hi = coef_hi @ np.stack([vxf, vyf, aof, np.ones(len(vxf))])
    fit_lo = coef_lo @ np.stack([vxf, vyf, aof, np.ones(len(vxf))])
    coef_hi[3] -= max(np.max(fit_hi - thi), 0.0) + 1e-4
    coef_lo[3] += max(np.max(tlo - fit_lo), 0.0) + 1e-4

    hi = AffineBound3(*coef_hi)
    lo = AffineBound3(*coef_lo)
    # curvature excess is measured over the states the window actually admits
    vhi, vlo = hi.value(vxf, vyf, aof), lo.value(vxf, vyf, aof)
    open_mask = vlo <= vhi
    kap = _curvature_of(vxf[open_mask], vyf[open_mask], aof[open_mask],
                        vhi[open_mask], axis)
    kap2 = _curvature_of(vxf[open_mask], vyf[open_mask], aof[open_mask],
                         vlo[open_mask], axis)
    eps_fit = max(np.max(np.abs(kap)), np.max(np.abs(kap2))) / kappa_max - 1.0
    eps_fit = max(eps_fit, 0.0)
    if eps_fit > 0.05:
        raise FitInfeasible(f"curvature fit slack {eps_fit:.3f} exceeds the 5% budget")
    return axis, lo, hi, float(eps_fit), taper


def _curvature_of(vx, vy, a_other, a_solved, axis):
    v3 = (vx ** 2 + vy ** 2) ** 1.5
    if axis == "y":
        return (vx * a_solved - vy * a_other) / v3
    return (vx * a_other - vy * a_solved) / v3


@dataclass(frozen=True)
class RegionPartition:
    """Equal angular sectors tiling [0, 2pi) with validated affine bounds."""

    regions: tuple
    region_count: int
    v_min: float
    v_max: float
    kappa_max: float
    wheelbase: float
    a_total_max: float
    jerk_total_max: float

    @property
    def sector_width(self) -> float:
        return 2 * np.pi / self.region_count

    def region_of(self, vx: float, vy: float) -> int:
        """Half-open sectors: every direction maps to exactly one region."""
        theta = np.arctan2(vy, vx) % (2 * np.pi)
        return int(theta // self.sector_width) % self.region_count

    def boundary_candidates(self, vx: float, vy: float, rel_tol: float = 1e-6):
        """Region indices to try when the angle sits on a sector edge."""
        theta = np.arctan2(vy, vx) % (2 * np.pi)
        w = self.sector_width
        base = self.region_of(vx, vy)
        frac = (theta - base * w) / w
        cands = [base]
        if frac <= rel_tol:
            cands.append((base - 1) % self.region_count)
        elif frac >= 1 - rel_tol:
            cands.append((base + 1) % self.region_count)
        return cands

    def speed_projection_axis(self, region_index: int):
        """Unit vector along the sector center; used by the linear speed window."""
        th = self.regions[region_index].center_angle()
        return np.array([np.cos(th), np.sin(th)])

    def to_json(self) -> str:
        payload = {
            "format": "region-partition",
            "version": 1,
            "region_count": self.region_count,
            "v_min": self.v_min,
            "v_max": self.v_max,
            "kappa_max": self.kappa_max,
            "wheelbase": self.wheelbase,
            "a_total_max": self.a_total_max,
            "jerk_total_max": self.jerk_total_max,
            "regions": [
                {
                    **{k: v for k, v in asdict(r).items()
                       if k in ("index", "theta_lo", "theta_hi", "curv_axis",
                                "v_min", "v_max", "kappa_max")},
                    "accel_taper": list(r.accel_taper),
                    "cos_lo": asdict(r.cos_lo), "cos_hi": asdict(r.cos_hi),
                    "sin_lo": asdict(r.sin_lo), "sin_hi": asdict(r.sin_hi),
                    "curv_lo": asdict(r.curv_lo), "curv_hi": asdict(r.curv_hi),
                    "ax_box": list(r.ax_box), "ay_box": list(r.ay_box),
                    "jerk_box": list(r.jerk_box),
                }
                for r in self.regions
            ],
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "RegionPartition":
        data = json.loads(text)
        if data.get("format") != "region-partition" or data.get("version") != 1:
            raise ValueError("unrecognized region partition file")
        regions = tuple(
            Region(
                index=r["index"], theta_lo=r["theta_lo"], theta_hi=r["theta_hi"],
                cos_lo=AffineBound(**r["cos_lo"]), cos_hi=AffineBound(**r["cos_hi"]),
                sin_lo=AffineBound(**r["sin_lo"]), sin_hi=AffineBound(**r["sin_hi"]),
                curv_axis=r["curv_axis"],
                curv_lo=AffineBound3(**r["curv_lo"]), curv_hi=AffineBound3(**r["curv_hi"]),
                ax_box=tuple(r["ax_box"]), ay_box=tuple(r["ay_box"]),
                jerk_box=tuple(r["jerk_box"]),
                accel_taper=tuple(r["accel_taper"]),
                v_min=r["v_min"], v_max=r["v_max"], kappa_max=r["kappa_max"],
            )
            for r in data["regions"]
        )
        return RegionPartition(
            regions=regions, region_count=data["region_count"],
            v_min=data["v_min"], v_max=data["v_max"], kappa_max=data["kappa_max"],
            wheelbase=data["wheelbase"], a_total_max=data["a_total_max"],
            jerk_total_max=data["jerk_total_max"],
        )


def build_region_partition(region_count: int, v_min: float, v_max: float,
                           kappa_max: float, wheelbase: float,
                           a_total_max: float, jerk_total_max: float,
                           accel_full_speed: float = 6.0,
                           n_theta: int = 64, n_speed: int = 16,
                           validate: bool = True) -> RegionPartition:
    """Fit all per-sector bounds and assemble the partition.

    Sectors are edge-aligned starting at theta=0.  The default actuation boxes
    are the squares inscribed in the total-magnitude circles, identical for
    every region.
    """
    if region_count < 8 or region_count % 2:
        raise ValueError("region_count must be even and >= 8")
    if not (0 < v_min < v_max):
        raise ValueError("need 0 < v_min < v_max")
    width = 2 * np.pi / region_count
    a_half = a_total_max / np.sqrt(2.0)
    j_half = jerk_total_max / np.sqrt(2.0)
    regions = []
    for r in range(region_count):
        lo, hi = r * width, (r + 1) * width
        cos_lo, _ = fit_affine_bound(np.cos, (lo, hi), (v_min, v_max), "lower",
                                     n_theta, n_speed)
        cos_hi, _ = fit_affine_bound(np.cos, (lo, hi), (v_min, v_max), "upper",
                                     n_theta, n_speed)
        sin_lo, _ = fit_affine_bound(np.sin, (lo, hi), (v_min, v_max), "lower",
                                     n_theta, n_speed)
        sin_hi, _ = fit_affine_bound(np.sin, (lo, hi), (v_min, v_max), "upper",
                                     n_theta, n_speed)
        axis, curv_lo, curv_hi, _, taper = fit_curvature_window(
            (lo, hi), (v_min, v_max), (-a_half, a_half), kappa_max,
            accel_full_speed=accel_full_speed)
        regions.append(Region(
            index=r, theta_lo=lo, theta_hi=hi,
            cos_lo=cos_lo, cos_hi=cos_hi, sin_lo=sin_lo, sin_hi=sin_hi,
            curv_axis=axis, curv_lo=curv_lo, curv_hi=curv_hi,
            ax_box=(-a_half, a_half), ay_box=(-a_half, a_half),
            jerk_box=(-j_half, j_half),
            accel_taper=taper,
            v_min=v_min, v_max=v_max, kappa_max=kappa_max,
        ))
    part = RegionPartition(
        regions=tuple(regions), region_count=region_count,
        v_min=v_min, v_max=v_max, kappa_max=kappa_max, wheelbase=wheelbase,
        a_total_max=a_total_max, jerk_total_max=jerk_total_max,
    )
    if validate:
        for region in part.regions:
            validate_region_bounds(region)
    return part


def validate_region_bounds(region: Region, n_theta: int = 100, n_speed: int = 100):
    """Dense-grid soundness check of a region's trig bounds; raises on violation."""
    th, vx, vy = _sector_grid(region.theta_lo, region.theta_hi,
                              region.v_min, region.v_max, n_theta, n_speed)
    c, s = np.cos(th), np.sin(th)
    checks = [
        (region.cos_lo.value(vx, vy) <= c, "cos lower"),
        (region.cos_hi.value(vx, vy) >= c, "cos upper"),
        (region.sin_lo.value(vx, vy) <= s, "sin lower"),
        (region.sin_hi.value(vx, vy) >= s, "sin upper"),
    ]
    for ok, what in checks:
        if not np.all(ok):
            raise FitInfeasible(f"region {region.index}: {what} bound violated on grid")


@dataclass(frozen=True)
class FrontAxleBounds:
    """Axis-aligned box guaranteed to contain the front-axle point.

    Each side is the rear position plus the wheelbase times the matching trig
    bound: x_lo = px + L*cos_lo(vx, vy) and so on.
    """

    wheelbase: float
    x_lo: AffineBound
    x_hi: AffineBound
    y_lo: AffineBound
    y_hi: AffineBound

    def box(self, px, py, vx, vy):
        return (px + self.x_lo.value(vx, vy), px + self.x_hi.value(vx, vy),
                py + self.y_lo.value(vx, vy), py + self.y_hi.value(vx, vy))


def front_axle_bound_exprs(region: Region, wheelbase: float) -> FrontAxleBounds:
    if wheelbase < 0:
        raise ValueError("wheelbase must be >= 0")

    def scaled(b: AffineBound) -> AffineBound:
        return AffineBound(wheelbase * b.chi, wheelbase * b.psi, wheelbase * b.omega)

    return FrontAxleBounds(
        wheelbase=wheelbase,
        x_lo=scaled(region.cos_lo), x_hi=scaled(region.cos_hi),
        y_lo=scaled(region.sin_lo), y_hi=scaled(region.sin_hi),
    )


def ay_bound_exprs(region: Region, kappa_max: float | None = None):
    """The region's affine window on its curvature-controlling acceleration.

    Returns (lo, hi) as AffineBound3 in (vx, vy, a_other); region.curv_axis
    says whether the window constrains ay or ax.
    """
    if kappa_max is not None and abs(kappa_max - region.kappa_max) > 1e-12:
        a_half = max(abs(region.ax_box[0]), abs(region.ax_box[1]))
        slope = region.accel_taper[0]
        full_speed = (a_half - region.accel_taper[1]) / slope if slope > 0 else 6.0
        _, lo, hi, _, _ = fit_curvature_window(
            (region.theta_lo, region.theta_hi), (region.v_min, region.v_max),
            (-a_half, a_half), kappa_max, accel_full_speed=full_speed)
        return lo, hi
    return region.curv_lo, region.curv_hi
