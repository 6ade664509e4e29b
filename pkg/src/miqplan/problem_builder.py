"""Assemble the joint trajectory-planning MIQP for a scene.

Variables are laid out agent-major with a fixed role order inside each agent
block (states, jerk inputs, front-box variables, region binaries, environment
binaries), followed by one block per agent pair (separation binaries, then
soft safety-margin slacks).  That layout is stable across receding-horizon
steps, so shifted warm starts always line up.

Constraint families per agent: exact triple-integrator dynamics, one-hot
velocity-region selection with big-M-gated sector/speed/curvature/actuation
rows, big-M-gated ties binding the front-box variables to the active region's
affine bounds, and per-point environment membership over the convex cover.
Per pair: four separation families (rear-rear, rear-front both ways,
front-front), each four binaries coupled by a sum <= 3 row; the rear-rear
family of ego-to-unaware pairs carries bounded slacks that soften the safety
margin and are penalized quadratically in the joint objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import PolygonCover
from .vehicle_model import RegionPartition, discretize_triple_integrator

STATE_NAMES = ("px", "py", "vx", "vy", "ax", "ay")
FVAR_NAMES = ("fx_lo", "fx_hi", "fy_lo", "fy_hi")
FAMILY_NAMES = ("rear_rear", "rear_front", "front_rear", "front_front")


class BuildError(Exception):
    pass


class PathExhausted(Exception):
    """Reference stepping ran past the end of a non-looping path."""


@dataclass
class AgentSpec:
    agent_id: str
    initial_state: np.ndarray          # (6,) px py vx vy ax ay
    radius: float
    wheelbase: float
    reference: np.ndarray              # (N+1, 2)
    q_p: float
    q_u: float
    controlled_by: str = "planner"     # 'planner' | 'unaware'
    is_ego: bool = False

    def __post_init__(self):
        self.initial_state = np.asarray(self.initial_state, dtype=float)
        self.reference = np.asarray(self.reference, dtype=float)
        if self.radius <= 0:
            raise BuildError(f"{self.agent_id}: radius must be positive")
        if self.q_p < 0 or self.q_u < 0:
            raise BuildError(f"{self.agent_id}: weights must be nonnegative")


@dataclass
class GameSpec:
    agents: list
    environment: PolygonCover          # drivable area (undeflated)
    partition: RegionPartition
    n_steps: int
    dt: float
    lambda_ego: float
    q_slack: float
    safety_distance: np.ndarray        # (N+1,), D(k) >= 0
    big_m: float | None = None
    hard_margin: float = 0.0
    initial_regions: dict = field(default_factory=dict)
    prune: bool = True

    def __post_init__(self):
        if not self.agents:
            raise BuildError("need at least one agent")
        egos = [a for a in self.agents if a.is_ego]
        if len(egos) != 1 or egos[0].controlled_by != "planner":
            raise BuildError("exactly one planner-controlled agent must be the ego")
        self.safety_distance = np.broadcast_to(
            np.asarray(self.safety_distance, dtype=float), (self.n_steps + 1,)).copy()
        if np.any(self.safety_distance < 0):
            raise BuildError("safety distance must be nonnegative")
        for agent in self.agents:
            if agent.reference.shape != (self.n_steps + 1, 2):
                raise BuildError(
                    f"{agent.agent_id}: reference must have {self.n_steps + 1} points")

    def lambda_vector(self):
        lam = compute_lambda_vector(self.lambda_ego, len(self.agents))
        ego_pos = next(i for i, a in enumerate(self.agents) if a.is_ego)
        out = np.empty(len(self.agents))
        others = [i for i in range(len(self.agents)) if i != ego_pos]
        out[ego_pos] = lam[0]
        for j, i in enumerate(others):
            out[i] = lam[1 + j]
        return out

    def slack_pairs(self):
        """Index pairs (i, j), i < j, that get soft safety margins."""
        out = []
        for i in range(len(self.agents)):
            for j in range(i + 1, len(self.agents)):
                a, b = self.agents[i], self.agents[j]
                ego_unaware = (a.is_ego and b.controlled_by == "unaware") or \
                              (b.is_ego and a.controlled_by == "unaware")
                if ego_unaware:
                    out.append((i, j))
        return out


def compute_lambda_vector(lambda_ego: float, agent_count: int):
    """Ego keeps lambda_ego; the rest is split evenly; the sum is one."""
    if not 0.0 <= lambda_ego <= 1.0:
        raise BuildError("lambda_ego must lie in [0, 1]")
    if agent_count < 1:
        raise BuildError("agent_count must be >= 1")
    if agent_count == 1:
        return [1.0]
    share = (1.0 - lambda_ego) / (agent_count - 1)
    return [lambda_ego] + [share] * (agent_count - 1)


# ---------------------------------------------------------------------------
# reference preprocessing


class Path:
    """Piecewise-linear path with arc-length lookup; optionally a closed loop."""

    def __init__(self, points, closed: bool = False):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise BuildError("path needs at least two 2-d points")
        if closed and np.linalg.norm(pts[0] - pts[-1]) > 1e-9:
            pts = np.vstack([pts, pts[0]])
        self.points = pts
        self.closed = closed
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(seg <= 1e-12):
            raise BuildError("path has zero-length segments")
        self.cum = np.concatenate([[0.0], np.cumsum(seg)])
        self.length = float(self.cum[-1])

    def position(self, station: float):
        s = station % self.length if self.closed else station
        if not self.closed and (s < -1e-9 or s > self.length + 1e-9):
            raise PathExhausted(f"station {station:.3f} outside [0, {self.length:.3f}]")
        s = np.clip(s, 0.0, self.length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(i, len(self.points) - 2)
        t = (s - self.cum[i]) / (self.cum[i + 1] - self.cum[i])
        return (1 - t) * self.points[i] + t * self.points[i + 1]

    def tangent(self, station: float):
        s = station % self.length if self.closed else np.clip(station, 0, self.length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.points) - 2)
        d = self.points[i + 1] - self.points[i]
        return d / np.linalg.norm(d)

    def project(self, point, hint_station: float | None = None, window: float = 30.0):
        """Station of the nearest path point; a hint restricts the search window."""
        p = np.asarray(point, dtype=float)
        best_s, best_d = 0.0, np.inf
        n_seg = len(self.points) - 1
        for i in range(n_seg):
            a, b = self.points[i], self.points[i + 1]
            if hint_station is not None:
                mid = 0.5 * (self.cum[i] + self.cum[i + 1])
                delta = mid - hint_station
                if self.closed:
                    delta = (delta + self.length / 2) % self.length - self.length / 2
                if abs(delta) > window + (self.cum[i + 1] - self.cum[i]):
                    continue
            ab = b - a
            t = float(np.clip((p - a) @ ab / (ab @ ab), 0.0, 1.0))
            proj = a + t * ab
            d = float(np.linalg.norm(p - proj))
            if d < best_d - 1e-12:
                best_d = d
                best_s = self.cum[i] + t * (self.cum[i + 1] - self.cum[i])
        return best_s


def curve_speed_limit(path: Path, v_des: float, a_lat_max: float):
    """Per-vertex speed profile: v = min(v_des, sqrt(a_lat_max / |curvature|)).

    Curvature from three-point finite differences (circumcircle through each
    vertex and its neighbours); endpoints of open paths count as straight.
    """
    if a_lat_max <= 0:
        raise BuildError("a_lat_max must be positive")
    pts = path.points
    n = len(pts)
    kappa = np.zeros(n)
    rng = range(n - 1) if path.closed else range(1, n - 1)
    for i in rng:
        a = pts[(i - 1) % (n - 1)] if path.closed else pts[i - 1]
        b = pts[i]
        c = pts[(i + 1) % (n - 1)] if path.closed else pts[i + 1]
        area2 = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        la, lb, lc = np.linalg.norm(b - a), np.linalg.norm(c - b), np.linalg.norm(c - a)
        if la * lb * lc < 1e-12:
            continue
        kappa[i] = 2.0 * area2 / (la * lb * lc)
    if path.closed:
        kappa[-1] = kappa[0]
    with np.errstate(divide="ignore"):
        vcap = np.where(kappa > 1e-12, np.sqrt(a_lat_max / np.maximum(kappa, 1e-12)),
                        np.inf)
    return np.minimum(v_des, vcap)


def compute_reference(path: Path, speed_profile, start_station: float,
                      n_steps: int, dt: float):
    """March the station forward at the profile speed; interpolate positions.

    speed_profile holds one speed per path vertex; speeds between vertices are
    interpolated linearly in arc length.
    """
    prof = np.asarray(speed_profile, dtype=float)
    if len(prof) != len(path.points):
        raise BuildError("speed profile must have one value per path vertex")

    def speed_at(s):
        ss = s % path.length if path.closed else np.clip(s, 0, path.length)
        return float(np.interp(ss, path.cum, prof))

    out = np.empty((n_steps + 1, 2))
    s = float(start_station)
    out[0] = path.position(s)
    for k in range(n_steps):
        s = s + speed_at(s) * dt
        out[k + 1] = path.position(s)  # raises PathExhausted on open paths
    return out


# ---------------------------------------------------------------------------
# variable layout


class VariableLayout:
    """Index map for all decision variables of one game instance."""

    def __init__(self, spec: GameSpec):
        self.spec = spec
        n = spec.n_steps
        n_agents = len(spec.agents)
        n_regions = spec.partition.region_count
        n_pieces = len(spec.environment.pieces)
        self.n_regions = n_regions
        self.n_pieces = n_pieces
        self.names = []
        self._agent_base = []
        cursor = 0
        for ai, agent in enumerate(spec.agents):
            base = cursor
            self._agent_base.append(base)
            for k in range(n + 1):
                for s in STATE_NAMES:
                    self.names.append((agent.agent_id, k, s))
            cursor += 6 * (n + 1)
            for k in range(n):
                for s in ("ux", "uy"):
                    self.names.append((agent.agent_id, k, s))
            cursor += 2 * n
            for k in range(n + 1):
                for s in FVAR_NAMES:
                    self.names.append((agent.agent_id, k, s))
            cursor += 4 * (n + 1)
            for k in range(n + 1):
                for r in range(n_regions):
                    self.names.append((agent.agent_id, k, f"rho_{r}"))
            cursor += n_regions * (n + 1)
            for k in range(1, n + 1):
                for pt in range(5):
                    for piece in range(n_pieces):
                        self.names.append((agent.agent_id, k, f"env_{pt}_{piece}"))
            cursor += 5 * n_pieces * n
        self._pair_base = {}
        self.pairs = [(i, j) for i in range(n_agents) for j in range(i + 1, n_agents)]
        self.slack_pairs = spec.slack_pairs()
        for (i, j) in self.pairs:
            self._pair_base[(i, j)] = cursor
            pid = f"{spec.agents[i].agent_id}|{spec.agents[j].agent_id}"
            for k in range(1, n + 1):
                for fam in FAMILY_NAMES:
                    for a in range(4):
                        self.names.append((pid, k, f"alpha_{fam}_{a}"))
            cursor += 16 * n
            if (i, j) in self.slack_pairs:
                for k in range(1, n + 1):
                    self.names.append((pid, k, "slack_x"))
                    self.names.append((pid, k, "slack_y"))
                cursor += 2 * n
        self.n_vars = cursor

    def state(self, ai: int, k: int, comp: int) -> int:
        return self._agent_base[ai] + 6 * k + comp

    def state_block(self, ai: int, k: int):
        b = self._agent_base[ai] + 6 * k
        return np.arange(b, b + 6)

    def input(self, ai: int, k: int, comp: int) -> int:
        n = self.spec.n_steps
        return self._agent_base[ai] + 6 * (n + 1) + 2 * k + comp

    def fvar(self, ai: int, k: int, which: int) -> int:
        n = self.spec.n_steps
        return self._agent_base[ai] + 6 * (n + 1) + 2 * n + 4 * k + which

    def rho(self, ai: int, k: int, r: int) -> int:
        n = self.spec.n_steps
        return self._agent_base[ai] + 6 * (n + 1) + 2 * n + 4 * (n + 1) \
            + self.n_regions * k + r

    def env(self, ai: int, k: int, pt: int, piece: int) -> int:
        n = self.spec.n_steps
        return self._agent_base[ai] + 6 * (n + 1) + 2 * n + 4 * (n + 1) \
            + self.n_regions * (n + 1) \
            + 5 * self.n_pieces * (k - 1) + self.n_pieces * pt + piece

    def alpha(self, pair, k: int, family: int, a: int) -> int:
        return self._pair_base[pair] + 16 * (k - 1) + 4 * family + a

    def slack(self, pair, k: int):
        n = self.spec.n_steps
        base = self._pair_base[pair] + 16 * n + 2 * (k - 1)
        return base, base + 1

    def binary_indices(self):
        n = self.spec.n_steps
        out = []
        for ai in range(len(self.spec.agents)):
            for k in range(n + 1):
                for r in range(self.n_regions):
                    out.append(self.rho(ai, k, r))
            for k in range(1, n + 1):
                for pt in range(5):
                    for piece in range(self.n_pieces):
                        out.append(self.env(ai, k, pt, piece))
        for pair in self.pairs:
            for k in range(1, n + 1):
                for fam in range(4):
                    for a in range(4):
                        out.append(self.alpha(pair, k, fam, a))
        return np.array(sorted(out), dtype=int)

    def slack_indices(self):
        out = []
        for pair in self.slack_pairs:
            for k in range(1, self.spec.n_steps + 1):
                out.extend(self.slack(pair, k))
        return np.array(sorted(out), dtype=int)


@dataclass
class MIQPProblem:
    """Sparse convex MIQP: 0.5 x'Qx + c'x + const over rows A x {<=,=} b."""

    Q: sp.csr_matrix
    c: np.ndarray
    const: float
    A: sp.csr_matrix
    senses: str
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    binary_idx: np.ndarray
    slack_idx: np.ndarray
    names: list
    layout: VariableLayout
    meta: dict
    row_tags: list = field(default_factory=list)

    @property
    def n_vars(self):
        return len(self.c)

    @classmethod
    def from_arrays(cls, Q, c, A, senses, b, lb, ub, binary_idx, const=0.0):
        """Bare problem without game semantics (tests, generic instances)."""
        return cls(Q=sp.csr_matrix(Q), c=np.asarray(c, dtype=float),
                   const=float(const), A=sp.csr_matrix(A), senses=senses,
                   b=np.asarray(b, dtype=float),
                   lb=np.asarray(lb, dtype=float), ub=np.asarray(ub, dtype=float),
                   binary_idx=np.asarray(binary_idx, dtype=int),
                   slack_idx=np.array([], dtype=int), names=[], layout=None,
                   meta={})

    def free_binaries(self):
        mask = self.lb[self.binary_idx] != self.ub[self.binary_idx]
        return self.binary_idx[mask]

    def objective_value(self, x):
        return 0.5 * float(x @ (self.Q @ x)) + float(self.c @ x) + self.const

    def min_objective_eigenvalue(self):
        dense = self.Q.toarray()
        return float(np.linalg.eigvalsh(0.5 * (dense + dense.T)).min())

    def heuristic_rounding(self, x):
        if self.layout is None:
            return None
        return derive_assignment(self, x)

    def per_agent_costs(self, x):
        """Individual tracking+jerk cost of each agent (own weights, no joint scaling)."""
        spec = self.layout.spec
        out = {}
        for ai, agent in enumerate(spec.agents):
            j = 0.0
            for k in range(1, spec.n_steps + 1):
                dx = x[self.layout.state(ai, k, 0)] - agent.reference[k, 0]
                dy = x[self.layout.state(ai, k, 1)] - agent.reference[k, 1]
                j += agent.q_p * (dx * dx + dy * dy)
            for k in range(spec.n_steps):
                ux = x[self.layout.input(ai, k, 0)]
                uy = x[self.layout.input(ai, k, 1)]
                j += agent.q_u * (ux * ux + uy * uy)
            out[agent.agent_id] = float(j)
        return out

    def slack_values(self, x):
        """(pair_id, step) -> (slack_x, slack_y) for every soft pair."""
        spec = self.layout.spec
        out = {}
        for pair in self.layout.slack_pairs:
            pid = f"{spec.agents[pair[0]].agent_id}|{spec.agents[pair[1]].agent_id}"
            for k in range(1, spec.n_steps + 1):
                ix, iy = self.layout.slack(pair, k)
                out[(pid, k)] = (float(x[ix]), float(x[iy]))
        return out


class _Rows:
    """Triplet accumulator for sparse constraint rows."""

    def __init__(self):
        self.data, self.rows, self.cols = [], [], []
        self.b, self.senses, self.tags = [], [], []

    def add(self, cols, vals, rhs, sense="<", tag=None):
        r = len(self.b)
        for ccol, vval in zip(cols, vals):
            self.rows.append(r)
            self.cols.append(int(ccol))
            self.data.append(float(vval))
        self.b.append(float(rhs))
        self.senses.append(sense)
        self.tags.append(tag)
        return r

    def matrix(self, n_vars):
        A = sp.coo_matrix((self.data, (self.rows, self.cols)),
                          shape=(len(self.b), n_vars)).tocsr()
        return A, np.asarray(self.b), "".join(self.senses)


class ProblemBuilder:
    """Stateful assembly of one MIQPProblem; single-writer."""

    def __init__(self, spec: GameSpec):
        self.spec = spec
        self.layout = VariableLayout(spec)
        self.rows = _Rows()
        n = self.layout.n_vars
        self.lb = np.full(n, -np.inf)
        self.ub = np.full(n, np.inf)
        self.q_data = {}
        self.c = np.zeros(n)
        self.const = 0.0
        self.matrices = discretize_triple_integrator(spec.dt)
        self.covers = [spec.environment.deflated(agent.radius)
                       for agent in spec.agents]
        self.initial_region_pins = {}
        self.big_m = self._big_m_values()
        self._allowed_regions_cache = {}
        self._allowed_pieces_cache = {}

    # --- big-M bookkeeping -------------------------------------------------

    def _big_m_values(self):
        spec = self.spec
        xmin, ymin, xmax, ymax = spec.environment.total_bounding_box()
        diag = float(np.hypot(xmax - xmin, ymax - ymin))
        r_sums = [spec.agents[i].radius + spec.agents[j].radius
                  for (i, j) in self.layout.pairs] or [0.0]
        d_max = float(spec.safety_distance.max(initial=0.0))
        l_max = max(a.wheelbase for a in spec.agents)
        part = spec.partition
        m_pos = spec.big_m if spec.big_m else diag + 2 * (max(r_sums) + d_max)
        return {
            "position": m_pos,
            "pair_front": m_pos + 4 * l_max + 4,
            "sector": 2 * part.v_max + 1.0,
            "speed": part.v_min + part.v_max + 1.0,
            "ftie": 2.5 * l_max + 1.0,
            "env": diag + 2 * (l_max + 2.0),
            "taper": part.a_total_max + part.regions[0].accel_taper[0] * part.v_max
                     + abs(part.regions[0].accel_taper[1]) + 1.0,
            "bbox": (xmin, ymin, xmax, ymax),
        }

    def _m_curv(self, region):
        part = self.spec.partition
        vmax, ahalf = part.v_max, part.a_total_max / np.sqrt(2)
        worst = 0.0
        for bnd in (region.curv_lo, region.curv_hi):
            worst = max(worst, abs(bnd.c_vx) * vmax + abs(bnd.c_vy) * vmax
                        + abs(bnd.c_a) * ahalf + abs(bnd.offset))
        return ahalf + worst + 1.0

    # --- reachability pruning ------------------------------------------------

    def reach_radius(self, ai: int, k: int) -> float:
        v_max = self.spec.partition.v_max
        return v_max * k * self.spec.dt + 0.5

    def allowed_regions(self, ai: int, k: int):
        got = self._allowed_regions_cache.get((ai, k))
        if got is not None:
            return got
        part = self.spec.partition
        all_regions = list(range(part.region_count))
        if not self.spec.prune:
            self._allowed_regions_cache[(ai, k)] = all_regions
            return all_regions
        r0 = self.initial_region_pins.get(ai)
        if r0 is None:
            self._allowed_regions_cache[(ai, k)] = all_regions
            return all_regions
        # greatest per-step heading change under the curvature cap, plus margin
        dtheta = 1.05 * part.kappa_max * part.v_max * self.spec.dt
        span = int(np.ceil(k * dtheta / part.sector_width)) + 1
        if 2 * span + 1 >= part.region_count:
            out = all_regions
        else:
            out = sorted(((r0 + d) % part.region_count)
                         for d in range(-span, span + 1))
        self._allowed_regions_cache[(ai, k)] = out
        return out

    def allowed_pieces(self, ai: int, k: int):
        got = self._allowed_pieces_cache.get((ai, k))
        if got is not None:
            return got
        cover = self.covers[ai]
        n_pieces = len(cover.pieces)
        if not self.spec.prune:
            out = list(range(n_pieces))
        else:
            p0 = self.spec.agents[ai].initial_state[:2]
            reach = self.reach_radius(ai, k) + self.spec.agents[ai].wheelbase + 1.0
            out = []
            for pi, piece in enumerate(cover.pieces):
                # max halfspace violation is a lower bound on the distance
                dist_lb = max(0.0, float(np.max(piece.normals @ p0 - piece.offsets)))
                if dist_lb <= reach:
                    out.append(pi)
            if not out:
                out = list(range(n_pieces))
        self._allowed_pieces_cache[(ai, k)] = out
        return out

    # --- constraint families -------------------------------------------------

    def pin_initial_conditions(self):
        spec = self.spec
        part = spec.partition
        for ai, agent in enumerate(spec.agents):
            for comp in range(6):
                self.rows.add([self.layout.state(ai, 0, comp)], [1.0],
                              agent.initial_state[comp], "=")
            r0 = spec.initial_regions.get(agent.agent_id)
            if r0 is None:
                r0 = part.region_of(agent.initial_state[2], agent.initial_state[3])
            self.initial_region_pins[ai] = int(r0)
            for r in range(part.region_count):
                v = 1.0 if r == r0 else 0.0
                idx = self.layout.rho(ai, 0, r)
                self.lb[idx] = v
                self.ub[idx] = v

    def add_dynamics_constraints(self, ai: int):
        n = self.spec.n_steps
        a_m, b_m = self.matrices.a_step, self.matrices.b_step
        for k in range(n):
            for axis in range(2):  # x, y
                comps = [0 + axis, 2 + axis, 4 + axis]
                u = self.layout.input(ai, k, axis)
                for row_i, comp in enumerate(comps):
                    cols = [self.layout.state(ai, k + 1, comp)]
                    vals = [1.0]
                    for col_j, comp2 in enumerate(comps):
                        coeff = a_m[row_i, col_j]
                        if coeff != 0.0:
                            cols.append(self.layout.state(ai, k, comp2))
                            vals.append(-coeff)
                    cols.append(u)
                    vals.append(-b_m[row_i])
                    self.rows.add(cols, vals, 0.0, "=")

    def set_variable_bounds(self, ai: int):
        spec = self.spec
        part = spec.partition
        n = spec.n_steps
        xmin, ymin, xmax, ymax = self.big_m["bbox"]
        wl = spec.agents[ai].wheelbase
        a_half = part.a_total_max / np.sqrt(2)
        j_half = part.jerk_total_max / np.sqrt(2)
        for k in range(n + 1):
            sb = self.layout.state_block(ai, k)
            self.lb[sb[0]], self.ub[sb[0]] = xmin - 1.0, xmax + 1.0
            self.lb[sb[1]], self.ub[sb[1]] = ymin - 1.0, ymax + 1.0
            for comp in (2, 3):
                self.lb[sb[comp]], self.ub[sb[comp]] = -part.v_max, part.v_max
            for comp in (4, 5):
                self.lb[sb[comp]], self.ub[sb[comp]] = -a_half, a_half
            for which in range(4):
                f = self.layout.fvar(ai, k, which)
                if which < 2:
                    self.lb[f], self.ub[f] = xmin - wl - 2.0, xmax + wl + 2.0
                else:
                    self.lb[f], self.ub[f] = ymin - wl - 2.0, ymax + wl + 2.0
            for r in range(part.region_count):
                idx = self.layout.rho(ai, k, r)
                if self.lb[idx] == -np.inf:
                    self.lb[idx], self.ub[idx] = 0.0, 1.0
        for k in range(n):
            for comp in range(2):
                u = self.layout.input(ai, k, comp)
                self.lb[u], self.ub[u] = -j_half, j_half

    def add_region_constraints(self, ai: int):
        spec = self.spec
        part = spec.partition
        wl = spec.agents[ai].wheelbase
        m_sector = self.big_m["sector"]
        m_speed = self.big_m["speed"]
        m_ftie = self.big_m["ftie"]
        m_taper = self.big_m["taper"]
        halfw = part.sector_width / 2.0
        for k in range(spec.n_steps + 1):
            allowed = self.allowed_regions(ai, k)
            allowed_set = set(allowed)
            for r in range(part.region_count):
                idx = self.layout.rho(ai, k, r)
                if r not in allowed_set and self.lb[idx] == self.ub[idx] == 0.0:
                    continue
                if r not in allowed_set:
                    self.lb[idx] = self.ub[idx] = 0.0
            self.rows.add([self.layout.rho(ai, k, r) for r in allowed],
                          [1.0] * len(allowed), 1.0, "=")
            vx = self.layout.state(ai, k, 2)
            vy = self.layout.state(ai, k, 3)
            axv = self.layout.state(ai, k, 4)
            ayv = self.layout.state(ai, k, 5)
            for r in allowed:
                region = part.regions[r]
                rho = self.layout.rho(ai, k, r)
                lo_t, hi_t = region.theta_lo, region.theta_hi
                # inside the cone spanned by the sector edges
                self.rows.add([vx, vy, rho],
                              [np.sin(lo_t), -np.cos(lo_t), m_sector], m_sector)
                self.rows.add([vx, vy, rho],
                              [-np.sin(hi_t), np.cos(hi_t), m_sector], m_sector)
                # speed window via the projection onto the sector center
                cx, cy = np.cos(region.center_angle()), np.sin(region.center_angle())
                self.rows.add([vx, vy, rho], [-cx, -cy, m_speed],
                              m_speed - part.v_min)
                self.rows.add([vx, vy, rho], [cx, cy, m_speed],
                              m_speed + part.v_max * np.cos(halfw))
                # low-speed actuation taper on both accel components
                slope, off = region.accel_taper
                for acomp in (axv, ayv):
                    self.rows.add([acomp, vx, vy, rho],
                                  [1.0, -slope * cx, -slope * cy, m_taper],
                                  m_taper + off)
                    self.rows.add([acomp, vx, vy, rho],
                                  [-1.0, -slope * cx, -slope * cy, m_taper],
                                  m_taper + off)
                # curvature window on the solved accel component
                m_curv = self._m_curv(region)
                solved, other = (ayv, axv) if region.curv_axis == "y" else (axv, ayv)
                hi = region.curv_hi
                self.rows.add([solved, vx, vy, other, rho],
                              [1.0, -hi.c_vx, -hi.c_vy, -hi.c_a, m_curv],
                              m_curv + hi.offset)
                lo = region.curv_lo
                self.rows.add([solved, vx, vy, other, rho],
                              [-1.0, lo.c_vx, lo.c_vy, lo.c_a, m_curv],
                              m_curv - lo.offset)
                # tie the front-box variables to this region's affine bounds
                trig = {0: region.cos_lo, 1: region.cos_hi,
                        2: region.sin_lo, 3: region.sin_hi}
                for which, bnd in trig.items():
                    fv = self.layout.fvar(ai, k, which)
                    pv = self.layout.state(ai, k, 0 if which < 2 else 1)
                    self.rows.add([fv, pv, vx, vy, rho],
                                  [1.0, -1.0, -wl * bnd.chi, -wl * bnd.psi, m_ftie],
                                  m_ftie + wl * bnd.omega)
                    self.rows.add([fv, pv, vx, vy, rho],
                                  [-1.0, 1.0, wl * bnd.chi, wl * bnd.psi, m_ftie],
                                  m_ftie - wl * bnd.omega)

    def _env_point_cols(self, ai: int, k: int, pt: int):
        """Columns and coefficients of checked point pt as (x_cols, y_cols)."""
        if pt == 0:
            return ([self.layout.state(ai, k, 0)], [1.0],
                    [self.layout.state(ai, k, 1)], [1.0])
        fx = self.layout.fvar(ai, k, 0 if pt in (1, 2) else 1)
        fy = self.layout.fvar(ai, k, 2 if pt in (1, 3) else 3)
        return [fx], [1.0], [fy], [1.0]

    def add_environment_constraints(self, ai: int):
        spec = self.spec
        cover = self.covers[ai]
        m_env = self.big_m["env"]
        n_pieces = len(cover.pieces)
        for k in range(1, spec.n_steps + 1):
            allowed = self.allowed_pieces(ai, k)
            allowed_set = set(allowed)
            for pt in range(5):
                xcols, xvals, ycols, yvals = self._env_point_cols(ai, k, pt)
                betas = []
                for piece_i in range(n_pieces):
                    idx = self.layout.env(ai, k, pt, piece_i)
                    if piece_i not in allowed_set:
                        self.lb[idx] = self.ub[idx] = 0.0
                        continue
                    if len(allowed) == 1:
                        self.lb[idx] = self.ub[idx] = 1.0
                    else:
                        self.lb[idx], self.ub[idx] = 0.0, 1.0
                    betas.append(idx)
                    piece = cover.pieces[piece_i]
                    for normal, offset in zip(piece.normals, piece.offsets):
                        cols = xcols + ycols + [idx]
                        vals = [normal[0] * v for v in xvals] \
                            + [normal[1] * v for v in yvals] + [m_env]
                        self.rows.add(cols, vals, offset + m_env)
                self.rows.add(betas, [-1.0] * len(betas), -1.0)

    def add_agent_collision_constraints(self, pair, with_slack: bool):
        spec = self.spec
        i, j = pair
        agent_i, agent_j = spec.agents[i], spec.agents[j]
        r_sum = agent_i.radius + agent_j.radius
        m_pos = self.big_m["position"]
        m_front = self.big_m["pair_front"]
        fixed_families = self._pair_prefix_fixing(pair) if spec.prune else {}
        for k in range(1, spec.n_steps + 1):
            d_k = spec.safety_distance[k] if with_slack else spec.hard_margin
            if with_slack:
                sx, sy = self.layout.slack(pair, k)
                self.lb[sx] = self.lb[sy] = 0.0
                self.ub[sx] = self.ub[sy] = spec.safety_distance[k]
            pxi, pyi = self.layout.state(i, k, 0), self.layout.state(i, k, 1)
            pxj, pyj = self.layout.state(j, k, 0), self.layout.state(j, k, 1)
            fij = [self.layout.fvar(i, k, w) for w in range(4)]
            fjj = [self.layout.fvar(j, k, w) for w in range(4)]

            def family(fam, rows_spec, m_val):
                alphas = [self.layout.alpha(pair, k, fam, a) for a in range(4)]
                decided = fixed_families.get((k, fam))
                for a, idx in enumerate(alphas):
                    if decided is not None:
                        val = 0.0 if a == decided else 1.0
                        self.lb[idx] = self.ub[idx] = val
                    else:
                        self.lb[idx], self.ub[idx] = 0.0, 1.0
                # alpha = 1 switches its row off; the coupling row keeps at
                # least one of the four separation rows hard
                for a, (cols, vals, rhs) in enumerate(rows_spec):
                    self.rows.add(cols + [alphas[a]], vals + [-m_val], rhs,
                                  tag=("pair", i, j, k, fam, a))
                self.rows.add(alphas, [1.0] * 4, 3.0,
                              tag=("pair_coupling", i, j, k, fam))

            # rear-rear, optionally soft
            margin = r_sum + d_k
            if with_slack:
                rr = [
                    ([pxi, pxj, sx], [1.0, -1.0, -1.0], -margin),
                    ([pxj, pxi, sx], [1.0, -1.0, -1.0], -margin),
                    ([pyi, pyj, sy], [1.0, -1.0, -1.0], -margin),
                    ([pyj, pyi, sy], [1.0, -1.0, -1.0], -margin),
                ]
            else:
                rr = [
                    ([pxi, pxj], [1.0, -1.0], -margin),
                    ([pxj, pxi], [1.0, -1.0], -margin),
                    ([pyi, pyj], [1.0, -1.0], -margin),
                    ([pyj, pyi], [1.0, -1.0], -margin),
                ]
            family(0, rr, m_pos)
            # rear of i versus front box of j
            family(1, [
                ([pxi, fjj[0]], [1.0, -1.0], -r_sum),
                ([fjj[1], pxi], [1.0, -1.0], -r_sum),
                ([pyi, fjj[2]], [1.0, -1.0], -r_sum),
                ([fjj[3], pyi], [1.0, -1.0], -r_sum),
            ], m_front)
            # rear of j versus front box of i
            family(2, [
                ([pxj, fij[0]], [1.0, -1.0], -r_sum),
                ([fij[1], pxj], [1.0, -1.0], -r_sum),
                ([pyj, fij[2]], [1.0, -1.0], -r_sum),
                ([fij[3], pyj], [1.0, -1.0], -r_sum),
            ], m_front)
            # front versus front: j's box center kept r_sum plus j's half
            # extent away from i's box, which reduces to box separation
            family(3, [
                ([fjj[1], fij[0]], [1.0, -1.0], -r_sum),
                ([fij[1], fjj[0]], [1.0, -1.0], -r_sum),
                ([fjj[3], fij[2]], [1.0, -1.0], -r_sum),
                ([fij[3], fjj[2]], [1.0, -1.0], -r_sum),
            ], m_front)

    def _pair_prefix_fixing(self, pair):
        """Fix whole separation families at steps where reach discs prove a row.

        A row that provably holds for every reachable state can take the hard
        slot (its binary 0, siblings 1) without cutting any feasible solution.
        """
        spec = self.spec
        i, j = pair
        ai, aj = spec.agents[i], spec.agents[j]
        p_i, p_j = ai.initial_state[:2], aj.initial_state[:2]
        r_sum = ai.radius + aj.radius
        pad_i = ai.wheelbase * 1.25 + 0.2
        pad_j = aj.wheelbase * 1.25 + 0.2
        out = {}
        for k in range(1, spec.n_steps + 1):
            ri = self.reach_radius(i, k)
            rj = self.reach_radius(j, k)
            d_soft = spec.safety_distance[k] if (i, j) in self.layout.slack_pairs \
                else spec.hard_margin
            for fam in range(4):
                exti = pad_i if fam in (2, 3) else 0.0
                extj = pad_j if fam in (1, 3) else 0.0
                margin = r_sum + (d_soft if fam == 0 else 0.0) + 0.2
                gap_i = ri + exti
                gap_j = rj + extj
                deltas = [
                    (p_j[0] - gap_j) - (p_i[0] + gap_i),  # i left of j
                    (p_i[0] - gap_i) - (p_j[0] + gap_j),  # i right of j
                    (p_j[1] - gap_j) - (p_i[1] + gap_i),  # i below j
                    (p_i[1] - gap_i) - (p_j[1] + gap_j),  # i above j
                ]
                # families 2 and 3 write their rows from agent j's viewpoint,
                # so the direction-to-row mapping swaps within each axis
                row_of = (0, 1, 2, 3) if fam in (0, 1) else (1, 0, 3, 2)
                for d_idx, delta in enumerate(deltas):
                    if delta >= margin:
                        out[(k, fam)] = row_of[d_idx]
                        break
        return out

    def build_objective(self):
        spec = self.spec
        lam = spec.lambda_vector()
        for ai, agent in enumerate(spec.agents):
            w_p = lam[ai] * agent.q_p
            w_u = lam[ai] * agent.q_u
            for k in range(1, spec.n_steps + 1):
                for comp in range(2):
                    idx = self.layout.state(ai, k, comp)
                    ref = agent.reference[k, comp]
                    self.q_data[(idx, idx)] = self.q_data.get((idx, idx), 0.0) + 2 * w_p
                    self.c[idx] += -2.0 * w_p * ref
                    self.const += w_p * ref * ref
            for k in range(spec.n_steps):
                for comp in range(2):
                    idx = self.layout.input(ai, k, comp)
                    self.q_data[(idx, idx)] = self.q_data.get((idx, idx), 0.0) + 2 * w_u
        for pair in self.layout.slack_pairs:
            for k in range(1, spec.n_steps + 1):
                sx, sy = self.layout.slack(pair, k)
                for a, bb in ((sx, sx), (sy, sy), (sx, sy), (sy, sx)):
                    self.q_data[(a, bb)] = self.q_data.get((a, bb), 0.0) \
                        + 2.0 * spec.q_slack

    def finish(self) -> MIQPProblem:
        n = self.layout.n_vars
        if self.q_data:
            qi, qj = zip(*self.q_data.keys())
            Q = sp.coo_matrix((list(self.q_data.values()), (qi, qj)),
                              shape=(n, n)).tocsr()
        else:
            Q = sp.csr_matrix((n, n))
        A, b, senses = self.rows.matrix(n)
        meta = {
            "big_m": {k: v for k, v in self.big_m.items() if k != "bbox"},
            "initial_regions": dict(self.initial_region_pins),
            "n_steps": self.spec.n_steps,
            "dt": self.spec.dt,
            "covers": self.covers,
        }
        return MIQPProblem(
            Q=Q, c=self.c, const=self.const, A=A, senses=senses, b=b,
            lb=self.lb, ub=self.ub,
            binary_idx=self.layout.binary_indices(),
            slack_idx=self.layout.slack_indices(),
            names=self.layout.names, layout=self.layout, meta=meta,
            row_tags=list(self.rows.tags),
        )


# spec-level operation wrappers kept as plain functions

def add_dynamics_constraints(builder: ProblemBuilder, agent_index: int, matrices=None):
    if matrices is not None:
        builder.matrices = matrices
    builder.add_dynamics_constraints(agent_index)


def add_region_constraints(builder: ProblemBuilder, agent_index: int, partition=None):
    builder.add_region_constraints(agent_index)


def add_environment_constraints(builder: ProblemBuilder, agent_index: int, cover=None):
    builder.add_environment_constraints(agent_index)


def add_agent_collision_constraints(builder: ProblemBuilder, pair, with_slack: bool):
    builder.add_agent_collision_constraints(pair, with_slack)


def build_objective(builder: ProblemBuilder, spec=None):
    builder.build_objective()


def build(spec: GameSpec) -> MIQPProblem:
    """Assemble the complete MIQP for one planning instance."""
    builder = ProblemBuilder(spec)
    builder.pin_initial_conditions()
    for ai in range(len(spec.agents)):
        builder.set_variable_bounds(ai)
        builder.add_dynamics_constraints(ai)
        builder.add_region_constraints(ai)
        builder.add_environment_constraints(ai)
    slack_pairs = set(builder.layout.slack_pairs)
    for pair in builder.layout.pairs:
        builder.add_agent_collision_constraints(pair, with_slack=pair in slack_pairs)
    builder.build_objective()
    return builder.finish()


# ---------------------------------------------------------------------------
# relaxation rounding: derive a full binary assignment from continuous values


def derive_assignment(problem: MIQPProblem, x):
    """Read regions, environment pieces, and separation choices off a point.

    Used by the solver as a primal heuristic: the returned assignment fixes
    every free binary to the value implied by the continuous trajectory.
    """
    layout = problem.layout
    spec = layout.spec
    part = spec.partition
    fixes = {}
    free = set(int(v) for v in problem.free_binaries())

    def put(idx, val):
        if idx in free:
            fixes[int(idx)] = float(val)

    for ai in range(len(spec.agents)):
        for k in range(spec.n_steps + 1):
            vx = x[layout.state(ai, k, 2)]
            vy = x[layout.state(ai, k, 3)]
            want = part.region_of(vx, vy)
            allowed = [r for r in range(part.region_count)
                       if problem.ub[layout.rho(ai, k, r)] > 0.0]
            if want not in allowed and allowed:
                dist = [min((want - r) % part.region_count,
                            (r - want) % part.region_count) for r in allowed]
                want = allowed[int(np.argmin(dist))]
            for r in range(part.region_count):
                put(layout.rho(ai, k, r), 1.0 if r == want else 0.0)
        cover_pieces = None
        for k in range(1, spec.n_steps + 1):
            for pt in range(5):
                if pt == 0:
                    px = x[layout.state(ai, k, 0)]
                    py = x[layout.state(ai, k, 1)]
                else:
                    px = x[layout.fvar(ai, k, 0 if pt in (1, 2) else 1)]
                    py = x[layout.fvar(ai, k, 2 if pt in (1, 3) else 3)]
                point = np.array([px, py])
                if cover_pieces is None:
                    cover_pieces = problem.meta["covers"][ai].pieces
                best_piece, best_viol = None, np.inf
                for piece_i, piece in enumerate(cover_pieces):
                    idx = layout.env(ai, k, pt, piece_i)
                    if problem.ub[idx] <= 0.0:
                        continue
                    viol = float(np.max(piece.normals @ point - piece.offsets))
                    if viol <= 1e-9:
                        best_piece, best_viol = piece_i, viol
                        break
                    if viol < best_viol:
                        best_piece, best_viol = piece_i, viol
                for piece_i in range(len(cover_pieces)):
                    idx = layout.env(ai, k, pt, piece_i)
                    put(idx, 1.0 if piece_i == best_piece else 0.0)

    for pair in layout.pairs:
        i, j = pair
        for k in range(1, spec.n_steps + 1):
            pxi = x[layout.state(i, k, 0)]
            pyi = x[layout.state(i, k, 1)]
            pxj = x[layout.state(j, k, 0)]
            pyj = x[layout.state(j, k, 1)]
            fi = [x[layout.fvar(i, k, w)] for w in range(4)]
            fj = [x[layout.fvar(j, k, w)] for w in range(4)]
            r_sum = spec.agents[i].radius + spec.agents[j].radius
            margins = [
                [(pxj - pxi), (pxi - pxj), (pyj - pyi), (pyi - pyj)],
                [(fj[0] - pxi), (pxi - fj[1]), (fj[2] - pyi), (pyi - fj[3])],
                [(fi[0] - pxj), (pxj - fi[1]), (fi[2] - pyj), (pyj - fi[3])],
                [(fi[0] - fj[1]), (fj[0] - fi[1]), (fi[2] - fj[3]), (fj[2] - fi[3])],
            ]
            for fam in range(4):
                hard = int(np.argmax(margins[fam]))
                for a in range(4):
                    put(layout.alpha(pair, k, fam, a), 0.0 if a == hard else 1.0)
    return fixes


# ---------------------------------------------------------------------------
# sparse text export (MPS with an integer marker block and a QMATRIX section)


def export_problem(problem: MIQPProblem, path):
    """Write the MIQP in MPS format with QMATRIX; export only, no import."""
    lines = ["NAME          MIQPLAN"]
    lines.append("ROWS")
    lines.append(" N  OBJ")
    for r, s in enumerate(problem.senses):
        kind = "E" if s == "=" else "L"
        lines.append(f" {kind}  R{r}")
    a_csc = problem.A.tocsc()
    binset = set(int(i) for i in problem.binary_idx)
    lines.append("COLUMNS")
    in_int = False
    marker = 0
    for jcol in range(problem.n_vars):
        is_bin = jcol in binset
        if is_bin and not in_int:
            lines.append(f"    MARKER{marker}  'MARKER'  'INTORG'")
            marker += 1
            in_int = True
        if not is_bin and in_int:
            lines.append(f"    MARKER{marker}  'MARKER'  'INTEND'")
            marker += 1
            in_int = False
        name = f"X{jcol}"
        if problem.c[jcol] != 0.0:
            lines.append(f"    {name}  OBJ  {problem.c[jcol]:.17g}")
        sl = slice(a_csc.indptr[jcol], a_csc.indptr[jcol + 1])
        for r, v in zip(a_csc.indices[sl], a_csc.data[sl]):
            lines.append(f"    {name}  R{r}  {v:.17g}")
    if in_int:
        lines.append(f"    MARKER{marker}  'MARKER'  'INTEND'")
    lines.append("RHS")
    for r, bv in enumerate(problem.b):
        if bv != 0.0:
            lines.append(f"    RHS  R{r}  {bv:.17g}")
    if problem.const != 0.0:
        lines.append(f"    RHS  OBJ  {-problem.const:.17g}")
    lines.append("BOUNDS")
    for jcol in range(problem.n_vars):
        lo, hi = problem.lb[jcol], problem.ub[jcol]
        name = f"X{jcol}"
        if lo == hi:
            lines.append(f" FX BND  {name}  {lo:.17g}")
            continue
        if np.isfinite(lo):
            lines.append(f" LO BND  {name}  {lo:.17g}")
        else:
            lines.append(f" MI BND  {name}")
        if np.isfinite(hi):
            lines.append(f" UP BND  {name}  {hi:.17g}")
    lines.append("QMATRIX")
    qcoo = problem.Q.tocoo()
    for r, ccol, v in zip(qcoo.row, qcoo.col, qcoo.data):
        lines.append(f"    X{r}  X{ccol}  {v:.17g}")
    lines.append("ENDATA")
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text
