"""Graph-based local trajectory planner.

The spatial graph is a lattice of layers along the racing line with laterally
offset nodes spanning the track corridor. A planning step has two parts: the
short-term step (STPS) connects the projected start state to the first layer
with quartic polynomials in both the longitudinal and lateral Frenet
coordinates; the long-term step (LTPS) is a uniform-cost search over the
remaining layers, generating spatiotemporal edges lazily by sampling constant
accelerations along the precomputed spatial edges and merging arrival states
into (time, velocity) interval cells.

Edges pay four costs: racing-line deviation, target-speed deviation, proximity
to predicted opponents (elliptic falloff), and curvature. Edges that exceed
the acceleration/curvature/power limits are dropped; edges that collide with a
prediction inside the confident horizon are dropped too, unless that would
leave the short-term step empty, in which case collisions degrade to a large
soft cost. Every plan carries a lateral tube and a full-braking emergency
trajectory that ends at standstill on the same path.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .raceline import GGLimits, RacingLine
from .track import GRAVITY, FrenetPose, TrackMap, wrap_angle


@dataclass
class PlannerParams:
    layer_span: float = 20.0
    n_offsets: int = 7
    lateral_step: float = 1.1
    margin: float = 1.0
    horizon: float = 5.0
    replan_period: float = 0.15
    avg_calc_time: float = 0.12
    recapture_distance: float = 2.5
    time_cell: float = 0.2
    vel_cell: float = 2.0
    n_accels: int = 3
    accel_frac: float = 0.55
    t_confident: float = 2.0
    kappa_max: float = 0.045
    w_line: float = 0.35
    w_speed: float = 0.25
    w_proximity: float = 120.0
    w_kappa: float = 900.0
    w_kappa_rate: float = 0.0        # optional fifth term, off by default
    soft_collision_cost: float = 2000.0
    prox_long: float = 28.0
    prox_lat: float = 5.5
    vehicle_length: float = 4.9
    vehicle_width: float = 1.9
    exclusion_long: float = 10.0
    exclusion_lat: float = 2.5
    max_expansions: int = 20000
    banking_limit_mode: str = "conservative"  # conservative | aware | peak_everywhere
    tube_cap_factor: float = 2.0
    edge_samples: int = 7
    stps_samples: int = 12


class PlanningError(Exception):
    """No horizon-satisfying path could be produced."""


@dataclass
class SpatialNode:
    n_abs: float
    heading: float
    x: float
    y: float


@dataclass
class SpatialEdge:
    """Precomputed geometry between nodes of consecutive layers."""

    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    kappa: np.ndarray
    n_abs: np.ndarray
    s_track: np.ndarray
    arc: np.ndarray       # cumulative arc length, arc[0] = 0
    length: float
    rl_offset: np.ndarray  # lateral offset to the racing line per sample
    theta: np.ndarray      # banking per sample


@dataclass
class Layer:
    s_line: float          # arc position along the racing line
    s_track: float
    nodes: list[SpatialNode]
    edges: dict = field(default_factory=dict)   # (i_from, j_to) -> SpatialEdge


class SpatialGraph:
    def __init__(self, layers: list[Layer], line: RacingLine, closed: bool = True):
        self.layers = layers
        self.line = line
        self.closed = closed

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def next_index(self, i: int) -> int:
        return (i + 1) % len(self.layers)

    def layer_ahead_of(self, s_line: float, min_lead: float) -> int:
        span = self.line.length
        best_i, best_gap = 0, math.inf
        for i, layer in enumerate(self.layers):
            gap = (layer.s_line - s_line) % span
            if gap >= min_lead and gap < best_gap:
                best_i, best_gap = i, gap
        return best_i



def line_lateral_distance(line: RacingLine, tree: cKDTree, xs, ys) -> np.ndarray:
    """Distance from points to the racing-line polyline (not just its vertices)."""
    pts = np.stack([np.asarray(xs), np.asarray(ys)], axis=1)
    _, idx = tree.query(pts)
    n = len(line.x)
    out = np.empty(len(pts))
    for k, i in enumerate(idx):
        best = math.inf
        for j in (i - 1, i):
            j0 = j % n
            j1 = (j + 1) % n
            ax, ay = line.x[j0], line.y[j0]
            bx, by = line.x[j1], line.y[j1]
            dx, dy = bx - ax, by - ay
            ln2 = dx * dx + dy * dy
            t = 0.0 if ln2 < 1e-12 else max(0.0, min(1.0, ((pts[k, 0] - ax) * dx + (pts[k, 1] - ay) * dy) / ln2))
            px, py = ax + t * dx, ay + t * dy
            best = min(best, math.hypot(pts[k, 0] - px, pts[k, 1] - py))
        out[k] = best
    return out


def build_spatial_graph(track: TrackMap, line: RacingLine,
                        params: PlannerParams | None = None) -> SpatialGraph:
    """Lattice over the whole closed track; built once per scenario."""
    params = params or PlannerParams()
    line_tree = cKDTree(np.stack([line.x, line.y], axis=1))
    n_layers = max(4, int(round(line.length / params.layer_span)))
    s_positions = np.linspace(0.0, line.length, n_layers, endpoint=False)

    layers: list[Layer] = []
    for s_line in s_positions:
        lx = float(line.interp(s_line, line.x))
        ly = float(line.interp(s_line, line.y))
        pose = track.to_frenet(lx, ly)
        n_rl = pose.n
        tangent = track.heading_at(pose.s)
        # Racing-line heading at this arc position.
        ds = 1.0
        lx2 = float(line.interp(s_line + ds, line.x))
        ly2 = float(line.interp(s_line + ds, line.y))
        rl_heading = math.atan2(ly2 - ly, lx2 - lx)
        w_l = track.width_left_at(pose.s) - params.margin
        w_r = track.width_right_at(pose.s) - params.margin
        nodes = []
        half = params.n_offsets // 2
        d_max = half * params.lateral_step
        for j in range(params.n_offsets):
            d = (j - half) * params.lateral_step
            n_abs = n_rl + d
            if n_abs > w_l or n_abs < -w_r:
                continue
            blend = min(1.0, abs(d) / max(d_max, 1e-6))
            heading = wrap_angle(rl_heading + blend * wrap_angle(tangent - rl_heading))
            x, y, _ = track.from_frenet(type(pose)(s=pose.s, n=n_abs, xi=0.0))
            nodes.append(SpatialNode(n_abs=n_abs, heading=heading, x=x, y=y))
        layers.append(Layer(s_line=float(s_line), s_track=pose.s, nodes=nodes))

    graph = SpatialGraph(layers, line)
    for i, layer in enumerate(layers):
        nxt = layers[(i + 1) % len(layers)]
        for a, node_a in enumerate(layer.nodes):
            for b, node_b in enumerate(nxt.nodes):
                edge = _build_spatial_edge(track, line, line_tree, layer, nxt,
                                           node_a, node_b, params)
                if edge is not None:
                    layer.edges[(a, b)] = edge
    graph.line_tree = line_tree
    return graph


def _build_spatial_edge(track, line, line_tree, layer_a, layer_b, node_a, node_b,
                        params) -> SpatialEdge | None:
    span_s = (layer_b.s_track - layer_a.s_track) % track.total_length
    if span_s < 1.0:
        return None
    m = params.edge_samples
    sig = np.linspace(0.0, 1.0, m)
    # Cubic Hermite on the absolute lateral offset with heading-matched slopes.
    xi_a = wrap_angle(node_a.heading - track.heading_at(layer_a.s_track))
    xi_b = wrap_angle(node_b.heading - track.heading_at(layer_b.s_track))
    slope_a = math.tan(xi_a) * span_s
    slope_b = math.tan(xi_b) * span_s
    h00 = 2 * sig ** 3 - 3 * sig ** 2 + 1
    h10 = sig ** 3 - 2 * sig ** 2 + sig
    h01 = -2 * sig ** 3 + 3 * sig ** 2
    h11 = sig ** 3 - sig ** 2
    n_abs = h00 * node_a.n_abs + h10 * slope_a + h01 * node_b.n_abs + h11 * slope_b
    s_track = (layer_a.s_track + sig * span_s) % track.total_length

    xs = np.empty(m)
    ys = np.empty(m)
    theta = np.empty(m)
    for k in range(m):
        # Containment straight from the widths (no projection needed).
        if n_abs[k] > track.width_left_at(s_track[k]) - params.margin * 0.5 or \
                n_abs[k] < -(track.width_right_at(s_track[k]) - params.margin * 0.5):
            return None
        xs[k], ys[k], _ = track.from_frenet(FrenetPose(s_track[k], n_abs[k], 0.0))
        theta[k] = track.banking_at(s_track[k])
    seg = np.hypot(np.diff(xs), np.diff(ys))
    arc = np.concatenate(([0.0], np.cumsum(seg)))
    psi = np.empty(m)
    psi[:-1] = np.arctan2(np.diff(ys), np.diff(xs))
    psi[-1] = psi[-2]
    dpsi = np.mod(np.diff(psi) + math.pi, 2 * math.pi) - math.pi
    kappa = np.zeros(m)
    kappa[1:-1] = 2.0 * dpsi[:-1] / np.maximum(seg[:-1] + seg[1:], 1e-6)
    kappa[0] = kappa[1]
    kappa[-1] = kappa[-2]
    # Lateral offset to the racing line (point-to-polyline).
    rl_off = line_lateral_distance(line, line_tree, xs, ys)
    return SpatialEdge(x=xs, y=ys, psi=psi, kappa=kappa, n_abs=n_abs, s_track=s_track,
                       arc=arc, length=float(arc[-1]), rl_offset=rl_off, theta=theta)


# --------------------------------------------------------------------------
# effective acceleration limits (banking modes)
# --------------------------------------------------------------------------

class EffectiveLimits:
    """gg lookups with optional banking awareness.

    conservative      tire demand = |v^2 kappa|, no banking credit anywhere
    aware             demand reduced by the local banking assist (signed)
    peak_everywhere   demand reduced by the maximum assist of the whole track,
                      regardless of position or turn direction (the unsafe
                      assumption that puts evasive maneuvers on flat straights
                      beyond the real grip)
    """

    def __init__(self, gg: GGLimits, track: TrackMap, mode: str = "conservative"):
        self.gg = gg
        self.track = track
        self.mode = mode
        self._peak_assist = GRAVITY * math.tan(float(np.max(np.abs(track.banking))))

    def lateral_demand(self, ay_plane, kappa, theta):
        ay_plane = np.asarray(ay_plane, dtype=float)
        if self.mode == "aware":
            assist = GRAVITY * np.tan(np.asarray(theta))
            return np.abs(ay_plane - assist)
        if self.mode == "peak_everywhere":
            return np.maximum(0.0, np.abs(ay_plane) - self._peak_assist)
        return np.abs(ay_plane)

    def usage(self, ax, ay_plane, v, kappa, theta):
        ay_t = self.lateral_demand(ay_plane, kappa, theta)
        return (np.abs(ax) / self.gg.ax_max(v)) ** self.gg.p \
            + (ay_t / self.gg.ay_max(v)) ** self.gg.p


def check_feasible(v, ax, kappa, theta, limits: EffectiveLimits, mass: float,
                   kappa_max: float) -> bool:
    """Per-sample curvature / combined-acceleration / engine-power audit."""
    v = np.asarray(v, dtype=float)
    ax = np.asarray(ax, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if np.any(np.abs(kappa) > kappa_max):
        return False
    ay = v * v * kappa
    if np.any(limits.usage(ax, ay, v, kappa, theta) > 1.0):
        return False
    power = mass * np.maximum(ax, 0.0) * v
    return bool(np.all(power <= limits.gg.power_w * 1.001))


# --------------------------------------------------------------------------
# collision checking
# --------------------------------------------------------------------------

def _rect_overlap(cx1, cy1, psi1, l1, w1, cx2, cy2, psi2, l2, w2) -> bool:
    """Oriented rectangle overlap via the separating axis test."""
    def corners(cx, cy, psi, l, w):
        c, s = math.cos(psi), math.sin(psi)
        pts = []
        for dx, dy in ((l / 2, w / 2), (l / 2, -w / 2), (-l / 2, -w / 2), (-l / 2, w / 2)):
            pts.append((cx + dx * c - dy * s, cy + dx * s + dy * c))
        return pts

    p1 = corners(cx1, cy1, psi1, l1, w1)
    p2 = corners(cx2, cy2, psi2, l2, w2)
    for pts, psi in ((p1, psi1), (p2, psi2)):
        for ang in (psi, psi + math.pi / 2):
            ax, ay = math.cos(ang), math.sin(ang)
            pr1 = [px * ax + py * ay for px, py in p1]
            pr2 = [px * ax + py * ay for px, py in p2]
            if max(pr1) < min(pr2) or max(pr2) < min(pr1):
                return False
    return True


def check_collision(xs, ys, psis, times, predictions, params: PlannerParams,
                    t_confident: float) -> str:
    """'free', 'soft_colliding' (overlap beyond the confident horizon) or
    'hard_colliding' (overlap within it). OBB prefilter, then exact footprints."""
    if not predictions:
        return "free"
    diag = math.hypot(params.vehicle_length, params.vehicle_width)
    result = "free"
    for pred in predictions:
        px = np.interp(times, pred.t, pred.x)
        py = np.interp(times, pred.t, pred.y)
        inside = np.hypot(px - xs, py - ys) < diag + 0.5
        if not np.any(inside):
            continue
        for k in np.flatnonzero(inside):
            ppsi = pred.heading_at(times[k])
            if _rect_overlap(xs[k], ys[k], psis[k], params.vehicle_length,
                             params.vehicle_width, px[k], py[k], ppsi,
                             params.vehicle_length, params.vehicle_width):
                if times[k] <= t_confident:
                    return "hard_colliding"
                result = "soft_colliding"
    return result


def edge_cost(rl_offset, v, v_target, kappa, xs, ys, times, predictions,
              params: PlannerParams, weights=None) -> float:
    """Four-term cost; `weights` overrides (w_line, w_speed, w_prox, w_kappa)."""
    w1, w2, w3, w4 = weights if weights is not None else (
        params.w_line, params.w_speed, params.w_proximity, params.w_kappa)
    cost = w1 * float(np.sum(np.asarray(rl_offset) ** 2))
    cost += w2 * float(np.sum((np.asarray(v) - np.asarray(v_target)) ** 2))
    cost += w4 * float(np.sum(np.asarray(kappa) ** 2))
    if params.w_kappa_rate > 0.0 and len(kappa) > 1:
        cost += params.w_kappa_rate * float(np.sum(np.diff(kappa) ** 2))
    if predictions:
        for pred in predictions:
            px = np.interp(times, pred.t, pred.x)
            py = np.interp(times, pred.t, pred.y)
            dx = np.asarray(xs) - px
            dy = np.asarray(ys) - py
            # Distance in the opponent frame with elongated longitudinal axis.
            ppsi = np.array([pred.heading_at(t) for t in times])
            c, s = np.cos(ppsi), np.sin(ppsi)
            lon = (dx * c + dy * s) / params.prox_long
            lat = (-dx * s + dy * c) / params.prox_lat
            r = np.sqrt(lon ** 2 + lat ** 2)
            cost += w3 * float(np.sum(np.maximum(0.0, 1.0 - r) ** 2))
    return cost


# --------------------------------------------------------------------------
# STPS quartics
# --------------------------------------------------------------------------

def _quartic(c0, c1, c2, bc_t, bc_vals):
    """Quartic with fixed p(0), p'(0), p''(0) and two end conditions.

    bc_vals are ((order, value), (order, value)) at t = bc_t, where order 0/1/2
    selects position/velocity/acceleration.
    """
    rows = []
    rhs = []
    t = bc_t
    basis = {
        0: lambda t: (t ** 3, t ** 4),
        1: lambda t: (3 * t ** 2, 4 * t ** 3),
        2: lambda t: (6 * t, 12 * t ** 2),
    }
    free = {0: c0 + c1 * t + c2 * t * t, 1: c1 + 2 * c2 * t, 2: 2 * c2}
    for order, val in bc_vals:
        rows.append(basis[order](t))
        rhs.append(val - free[order])
    a = np.array(rows)
    b = np.array(rhs)
    c3, c4 = np.linalg.solve(a, b)
    return np.array([c0, c1, c2, c3, c4])


def _poly_eval(c, t, order=0):
    t = np.asarray(t, dtype=float)
    if order == 0:
        return c[0] + c[1] * t + c[2] * t ** 2 + c[3] * t ** 3 + c[4] * t ** 4
    if order == 1:
        return c[1] + 2 * c[2] * t + 3 * c[3] * t ** 2 + 4 * c[4] * t ** 3
    return 2 * c[2] + 6 * c[3] * t + 12 * c[4] * t ** 2


@dataclass
class STEdge:
    node_index: int
    t_end: float
    v_end: float
    a_end: float
    times: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    v: np.ndarray
    a: np.ndarray
    kappa: np.ndarray
    n_abs: np.ndarray
    s_track: np.ndarray
    rl_offset: np.ndarray
    theta: np.ndarray
    cost: float = 0.0
    soft_collision: bool = False


@dataclass
class StartState:
    s_track: float
    n_abs: float
    xi: float
    v: float
    a: float
    t: float
    x: float
    y: float
    psi: float
    discontinuity: bool = False


def stps_edges(track: TrackMap, graph: SpatialGraph, start: StartState,
               layer_index: int, v_targets, params: PlannerParams,
               a_end_hint: float = 0.0) -> list[STEdge]:
    """Quartic lateral/longitudinal edges from the start state to one layer.

    One end-acceleration condition per (node, end velocity): the edge duration
    is fixed-pointed (<= 5 iterations) so the longitudinal quartic lands on the
    layer while meeting start (s, v, a) and end (v, a) conditions.
    """
    layer = graph.layers[layer_index]
    span = (layer.s_track - start.s_track) % track.total_length
    if span < 2.0:
        return []
    edges: list[STEdge] = []
    d_rate = start.v * math.tan(start.xi)
    for node_index, node in enumerate(layer.nodes):
        xi_node = wrap_angle(node.heading - track.heading_at(layer.s_track))
        for v_end in v_targets:
            v_end = max(1.0, v_end)
            t_end = span / max(0.5 * (start.v + v_end), 1.0)
            cs = None
            for _ in range(5):
                cs = _quartic(0.0, start.v, 0.5 * start.a, t_end,
                              ((1, v_end), (2, a_end_hint)))
                s_reach = float(_poly_eval(cs, t_end))
                err = span - s_reach
                if abs(err) < 1e-6:
                    break
                t_end += err / max(v_end, 1.0)
                if t_end <= 0.05:
                    break
            if cs is None or t_end <= 0.05:
                continue
            s_reach = float(_poly_eval(cs, t_end))
            if abs(s_reach - span) > 0.05:
                continue
            # Lateral quartic: position + heading-matched slope at the node.
            d_end_rate = v_end * math.tan(xi_node)
            cd = _quartic(start.n_abs, d_rate, 0.0, t_end,
                          ((0, node.n_abs), (1, d_end_rate)))
            times = np.linspace(0.0, t_end, params.stps_samples)
            s_prof = _poly_eval(cs, times)
            if np.any(np.diff(s_prof) <= 0.0):
                continue
            v_prof = _poly_eval(cs, times, 1)
            if np.any(v_prof < 0.2):
                continue
            a_prof = _poly_eval(cs, times, 2)
            n_prof = _poly_eval(cd, times)
            s_abs = (start.s_track + s_prof) % track.total_length
            xs = np.empty(len(times))
            ys = np.empty(len(times))
            theta = np.empty(len(times))
            ok = True
            for k in range(len(times)):
                xs[k], ys[k], _ = track.from_frenet(FrenetPose(s_abs[k], n_prof[k], 0.0))
                theta[k] = track.banking_at(s_abs[k])
                if k > 0 and (
                        n_prof[k] > track.width_left_at(s_abs[k]) - params.margin * 0.5
                        or n_prof[k] < -(track.width_right_at(s_abs[k])
                                         - params.margin * 0.5)):
                    ok = False
                    break
            if not ok:
                continue
            psi = np.empty(len(times))
            psi[:-1] = np.arctan2(np.diff(ys), np.diff(xs))
            psi[-1] = psi[-2]
            seg = np.hypot(np.diff(xs), np.diff(ys))
            dpsi = np.mod(np.diff(psi) + math.pi, 2 * math.pi) - math.pi
            kappa = np.zeros(len(times))
            kappa[1:-1] = 2.0 * dpsi[:-1] / np.maximum(seg[:-1] + seg[1:], 1e-6)
            kappa[0] = kappa[1]
            kappa[-1] = kappa[-2]
            rl_off = line_lateral_distance(graph.line, graph.line_tree, xs, ys)
            edges.append(STEdge(node_index=node_index, t_end=t_end, v_end=float(v_end),
                                a_end=a_end_hint, times=times, x=xs, y=ys, psi=psi,
                                v=v_prof, a=a_prof, kappa=kappa, n_abs=n_prof,
                                s_track=s_abs, rl_offset=rl_off, theta=theta))
    return edges


# --------------------------------------------------------------------------
# LTPS uniform-cost search
# --------------------------------------------------------------------------

@dataclass
class SearchEntry:
    cost: float
    layer: int
    node: int
    t: float
    v: float
    parent: int            # index into the entry list, -1 for STPS roots
    st_edge: STEdge | None
    spatial_edge: SpatialEdge | None
    accel: float


@dataclass
class SearchResult:
    entries: list[SearchEntry]
    goal: int
    expansions: int
    generated_edges: int
    interrupted: bool
    cost: float


def ltps_search(graph: SpatialGraph, st_edges: list[STEdge], start_layer: int,
                params: PlannerParams, limits: EffectiveLimits, mass: float,
                v_target_of, predictions=(), weights=None,
                max_expansions: int | None = None) -> SearchResult:
    """Dijkstra-style best-first search with (time, velocity) interval merging.

    Spatiotemporal edges are generated lazily on expansion: per spatial edge,
    `n_accels` constant accelerations within the current gg envelope. Per
    (layer, node, t-cell, v-cell) only the cheapest entry survives. Returns
    when the cheapest frontier path satisfies the horizon; if the expansion
    budget runs out first, the cheapest already-complete path is returned
    flagged as interrupted.
    """
    entries: list[SearchEntry] = []
    best_cell: dict = {}
    heap: list = []
    seq = 0
    for e in st_edges:
        entries.append(SearchEntry(cost=e.cost, layer=start_layer, node=e.node_index,
                                   t=e.t_end, v=e.v_end, parent=-1, st_edge=e,
                                   spatial_edge=None, accel=0.0))
        idx = len(entries) - 1
        heapq.heappush(heap, (e.cost, start_layer, e.node_index, seq, idx))
        seq += 1

    budget = max_expansions if max_expansions is not None else params.max_expansions
    expansions = 0
    generated = 0
    best_goal = -1
    best_goal_cost = math.inf
    interrupted = False

    while heap:
        cost, _, _, _, idx = heapq.heappop(heap)
        entry = entries[idx]
        if cost > entry.cost + 1e-12:
            continue
        if entry.t >= params.horizon:
            return SearchResult(entries, idx, expansions, generated, False, entry.cost)
        if expansions >= budget:
            interrupted = True
            break
        expansions += 1
        layer = graph.layers[entry.layer]
        nxt_index = graph.next_index(entry.layer)
        v0 = entry.v
        ax_cap = float(limits.gg.ax_max(v0))
        accels = np.linspace(-params.accel_frac * ax_cap, params.accel_frac * ax_cap,
                             params.n_accels)
        for (a_idx, b_idx), sedge in layer.edges.items():
            if a_idx != entry.node:
                continue
            for acc in accels:
                v_end_sq = v0 * v0 + 2.0 * acc * sedge.length
                if v_end_sq < 1.0:
                    continue
                v_end = math.sqrt(v_end_sq)
                if v_end > limits.gg.v_cap:
                    v_end = limits.gg.v_cap
                    acc = (v_end * v_end - v0 * v0) / (2.0 * sedge.length)
                dt_edge = sedge.length / max(0.5 * (v0 + v_end), 0.5)
                t_end = entry.t + dt_edge
                generated += 1
                v_prof = np.sqrt(np.maximum(v0 * v0 + 2.0 * acc * sedge.arc, 0.25))
                if not check_feasible(v_prof, acc, sedge.kappa, sedge.theta,
                                      limits, mass, params.kappa_max):
                    continue
                t_prof = entry.t + 2.0 * sedge.arc / np.maximum(v_prof + v0, 0.5)
                soft_cost = 0.0
                if predictions:
                    verdict = check_collision(sedge.x, sedge.y, sedge.psi, t_prof,
                                              predictions, params, params.t_confident)
                    if verdict == "hard_colliding":
                        continue
                v_tgt = v_target_of(sedge.s_track)
                c_edge = edge_cost(sedge.rl_offset, v_prof, v_tgt, sedge.kappa,
                                   sedge.x, sedge.y, t_prof, predictions,
                                   params, weights) + soft_cost
                new_cost = entry.cost + c_edge
                cell = (nxt_index, b_idx,
                        int(t_end / params.time_cell), int(v_end / params.vel_cell))
                old = best_cell.get(cell)
                if old is not None and entries[old].cost <= new_cost:
                    continue
                entries.append(SearchEntry(cost=new_cost, layer=nxt_index, node=b_idx,
                                           t=t_end, v=v_end, parent=idx,
                                           st_edge=None, spatial_edge=sedge, accel=float(acc)))
                new_idx = len(entries) - 1
                best_cell[cell] = new_idx
                heapq.heappush(heap, (new_cost, nxt_index, b_idx, seq, new_idx))
                seq += 1
                if t_end >= params.horizon and new_cost < best_goal_cost:
                    best_goal = new_idx
                    best_goal_cost = new_cost

    if best_goal >= 0:
        return SearchResult(entries, best_goal, expansions, generated, interrupted,
                            best_goal_cost)
    raise PlanningError("no horizon-satisfying path found")


# --------------------------------------------------------------------------
# plan assembly
# --------------------------------------------------------------------------

@dataclass
class PlanOutput:
    t: np.ndarray          # absolute times
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    v: np.ndarray
    a: np.ndarray
    kappa: np.ndarray
    tube: np.ndarray       # lateral half-width per sample
    em_t: np.ndarray       # emergency trajectory, same format
    em_x: np.ndarray
    em_y: np.ndarray
    em_psi: np.ndarray
    em_v: np.ndarray
    em_a: np.ndarray
    created: float
    cost: float = 0.0
    expansions: int = 0
    generated_edges: int = 0
    interrupted: bool = False
    discontinuity: bool = False
    relaxed_collision: bool = False
    fallback: bool = False

    def sample_at(self, t_abs: float):
        """Interpolated (x, y, psi, v, a, kappa) on the main trajectory."""
        tq = min(max(t_abs, self.t[0]), self.t[-1])
        x = float(np.interp(tq, self.t, self.x))
        y = float(np.interp(tq, self.t, self.y))
        v = float(np.interp(tq, self.t, self.v))
        a = float(np.interp(tq, self.t, self.a))
        kap = float(np.interp(tq, self.t, self.kappa))
        i = int(np.searchsorted(self.t, tq))
        i = min(max(i, 0), len(self.t) - 1)
        psi = float(self.psi[i])
        return x, y, psi, v, a, kap

    def horizon_end(self) -> float:
        return float(self.t[-1])


def project_start(prev: PlanOutput | None, ego, now: float,
                  avg_calc_time: float, recapture: float) -> tuple:
    """Start pose for the next plan: previous-trajectory state at now + calc time.

    Falls back to the raw ego state (discontinuity flagged) when there is no
    previous plan or the ego strayed beyond the recapture distance.
    """
    t_start = now + avg_calc_time
    if prev is not None and prev.t[0] <= t_start <= prev.t[-1] + 0.5:
        px, py, ppsi, pv, pa, pk = prev.sample_at(now)
        if math.hypot(ego.x - px, ego.y - py) <= recapture:
            x, y, psi, v, a, kap = prev.sample_at(t_start)
            return (x, y, psi, max(v, 0.5), a, t_start, False)
    return (ego.x, ego.y, ego.psi, max(ego.v, 0.5), 0.0, t_start, True)


def emergency_traj(track: TrackMap, xs, ys, psis, kappas, v0: float,
                   limits: EffectiveLimits, dt_out: float = 0.1,
                   extend_margin: float = 1.0):
    """Full combined braking along the given path, ending at standstill.

    If the path is shorter than the stopping distance it is extended along the
    track (constant lateral offset). Returns (t, x, y, psi, v, a) arrays.
    """
    xs = list(np.asarray(xs, dtype=float))
    ys = list(np.asarray(ys, dtype=float))
    psis = list(np.asarray(psis, dtype=float))
    kappas = list(np.asarray(kappas, dtype=float))
    gg = limits.gg
    # Extend the path if braking from v0 could outrun it.
    stop_est = v0 * v0 / (2.0 * max(gg.ax_max(v0) * 0.5, 1.0)) + 20.0
    length = float(np.sum(np.hypot(np.diff(xs), np.diff(ys))))
    if length < stop_est:
        from .track import FrenetPose
        pose = track.to_frenet(xs[-1], ys[-1], psis[-1])
        step = 4.0
        s_ext = pose.s
        need = stop_est - length
        for _ in range(int(need / step) + 2):
            s_ext += step
            ex, ey, epsi = track.from_frenet(FrenetPose(s_ext % track.total_length, pose.n, 0.0))
            xs.append(ex)
            ys.append(ey)
            psis.append(epsi)
            kappas.append(track.curvature_at(s_ext % track.total_length))
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    psis = np.asarray(psis)
    kappas = np.asarray(kappas)
    seg = np.hypot(np.diff(xs), np.diff(ys))
    n = len(xs)
    v = np.zeros(n)
    v[0] = max(v0, 0.0)
    theta = np.zeros(n)
    for i in range(n - 1):
        vi = v[i]
        if vi <= 0.3:
            v[i] = 0.0
            v[i + 1:] = 0.0
            break
        ay = vi * vi * abs(kappas[i])
        frac = min(1.0, (ay / max(gg.ay_max(vi), 1e-9)) ** gg.p)
        ax_brake = gg.ax_max(vi) * max(0.0, 1.0 - frac) ** (1.0 / gg.p)
        ax_brake = max(ax_brake, 0.5)
        v[i + 1] = math.sqrt(max(0.0, vi * vi - 2.0 * ax_brake * seg[i]))
    stop_idx = int(np.argmax(v <= 0.0)) if np.any(v <= 0.0) else n - 1
    stop_idx = max(stop_idx, 1)
    v[stop_idx:] = 0.0
    # Time parameterization up to the stop.
    t = np.zeros(stop_idx + 1)
    for i in range(stop_idx):
        vm = max(0.5 * (v[i] + v[i + 1]), 0.25)
        t[i + 1] = t[i] + seg[i] / vm
    a = np.zeros(stop_idx + 1)
    a[:-1] = (v[1:stop_idx + 1] ** 2 - v[:stop_idx] ** 2) / (2.0 * seg[:stop_idx])
    return (t, xs[:stop_idx + 1], ys[:stop_idx + 1], psis[:stop_idx + 1],
            v[:stop_idx + 1], a[:stop_idx + 1])


class LocalPlanner:
    """Full planning step every replan period; owns the spatial graph."""

    def __init__(self, track: TrackMap, line: RacingLine, gg: GGLimits,
                 params: PlannerParams | None = None, mass: float = 750.0,
                 speed_cap: float | None = None, graph: SpatialGraph | None = None):
        self.track = track
        self.line = line
        self.params = params or PlannerParams()
        self.limits = EffectiveLimits(gg, track, self.params.banking_limit_mode)
        self.mass = mass
        self.speed_cap = speed_cap
        self.graph = graph if graph is not None else build_spatial_graph(
            track, line, self.params)
        self.prev: PlanOutput | None = None
        self.failures = 0
        self.stps_dropped = 0

    def v_target_of(self, s_track):
        v = self.line.interp(np.asarray(s_track) % self.line.length, self.line.v) \
            if hasattr(s_track, "__len__") else self.line.interp(s_track, self.line.v)
        v = np.asarray(v, dtype=float)
        if self.speed_cap is not None:
            v = np.minimum(v, self.speed_cap)
        return v

    def plan_step(self, ego, now: float, predictions=()) -> PlanOutput:
        p = self.params
        try:
            return self._plan(ego, now, predictions)
        except PlanningError:
            self.failures += 1
            return self._fallback(ego, now)

    def _plan(self, ego, now, predictions) -> PlanOutput:
        p = self.params
        x0, y0, psi0, v0, a0, t_start, discont = project_start(
            self.prev, ego, now, p.avg_calc_time, p.recapture_distance)
        pose = self.track.to_frenet(x0, y0, psi0)
        start = StartState(s_track=pose.s, n_abs=pose.n, xi=pose.xi, v=v0, a=a0,
                           t=t_start, x=x0, y=y0, psi=psi0, discontinuity=discont)
        # Racing-line arc position of the start (for layer lookup).
        s_line0 = self._line_s_near(x0, y0)
        first_layer = self.graph.layer_ahead_of(s_line0, min_lead=0.35 * p.layer_span)

        v_tgt_here = float(self.v_target_of(pose.s))
        v_samples = sorted({max(1.0, v) for v in
                            (v_tgt_here, v_tgt_here - 3.0, v_tgt_here - 7.0, v0)})
        a_hint = float(self.line.interp(s_line0, self.line.ax))
        edges = stps_edges(self.track, self.graph, start, first_layer,
                           v_samples, p, a_end_hint=a_hint)
        if not edges:
            raise PlanningError("no STPS edge produced")

        # Gates: feasibility always; collisions hard first, soft if need be.
        feasible = [e for e in edges if check_feasible(
            e.v, e.a, e.kappa, e.theta, self.limits, self.mass, p.kappa_max)]
        self.stps_dropped += len(edges) - len(feasible)
        if not feasible:
            raise PlanningError("all STPS edges infeasible")
        relaxed = False
        survivors = []
        rel_times = None
        for e in feasible:
            verdict = check_collision(e.x, e.y, e.psi, e.times, predictions,
                                      p, p.t_confident) if predictions else "free"
            if verdict != "hard_colliding":
                e.soft_collision = verdict == "soft_colliding"
                survivors.append(e)
        if not survivors:
            # Relax hard checks to soft with a distance penalty.
            relaxed = True
            for e in feasible:
                e.soft_collision = True
                survivors.append(e)
        for e in survivors:
            v_tgt = self.v_target_of(e.s_track)
            e.cost = edge_cost(e.rl_offset, e.v, v_tgt, e.kappa, e.x, e.y, e.times,
                               predictions, p)
            if e.soft_collision:
                e.cost += p.soft_collision_cost
        result = ltps_search(self.graph, survivors, first_layer, p, self.limits,
                             self.mass, self.v_target_of, predictions)
        plan = self._assemble(start, result, now, relaxed)
        self.prev = plan
        return plan

    def _line_s_near(self, x, y) -> float:
        dx = self.line.x - x
        dy = self.line.y - y
        return float(self.line.s[int(np.argmin(dx * dx + dy * dy))])

    def _assemble(self, start: StartState, result: SearchResult, now: float,
                  relaxed: bool) -> PlanOutput:
        p = self.params
        chain = []
        idx = result.goal
        while idx >= 0:
            chain.append(result.entries[idx])
            idx = result.entries[idx].parent
        chain.reverse()

        times = [np.array([start.t])]
        xs = [np.array([start.x])]
        ys = [np.array([start.y])]
        vs = [np.array([start.v])]
        accs = [np.array([start.a])]
        kaps = [np.array([0.0])]
        t_cursor = start.t
        for entry in chain:
            if entry.st_edge is not None:
                e = entry.st_edge
                times.append(start.t + e.times[1:])
                xs.append(e.x[1:])
                ys.append(e.y[1:])
                vs.append(e.v[1:])
                accs.append(e.a[1:])
                kaps.append(e.kappa[1:])
                t_cursor = start.t + e.t_end
            else:
                sedge = entry.spatial_edge
                v_start = result.entries[entry.parent].v if entry.parent >= 0 else start.v
                v_prof = np.sqrt(np.maximum(v_start ** 2 + 2.0 * entry.accel * sedge.arc, 0.25))
                t_prof = t_cursor + 2.0 * sedge.arc / np.maximum(v_prof + v_start, 0.5)
                times.append(t_prof[1:])
                xs.append(sedge.x[1:])
                ys.append(sedge.y[1:])
                vs.append(v_prof[1:])
                accs.append(np.full(len(sedge.arc) - 1, entry.accel))
                kaps.append(sedge.kappa[1:])
                t_cursor = float(t_prof[-1])

        t_raw = np.concatenate(times)
        x_raw = np.concatenate(xs)
        y_raw = np.concatenate(ys)
        v_raw = np.concatenate(vs)
        a_raw = np.concatenate(accs)
        k_raw = np.concatenate(kaps)

        t_out = np.arange(start.t, t_cursor, 0.1)
        x_out = np.interp(t_out, t_raw, x_raw)
        y_out = np.interp(t_out, t_raw, y_raw)
        v_out = np.interp(t_out, t_raw, v_raw)
        a_out = np.interp(t_out, t_raw, a_raw)
        k_out = np.interp(t_out, t_raw, k_raw)
        psi_out = np.empty(len(t_out))
        if len(t_out) > 1:
            psi_out[:-1] = np.arctan2(np.diff(y_out), np.diff(x_out))
            psi_out[-1] = psi_out[-2]
        else:
            psi_out[:] = start.psi
        psi_out[0] = start.psi

        tube = self._tube(x_out, y_out, t_out)
        em = emergency_traj(self.track, x_out, y_out, psi_out, k_out, v_out[0],
                            self.limits)
        return PlanOutput(t=t_out, x=x_out, y=y_out, psi=psi_out, v=v_out, a=a_out,
                          kappa=k_out, tube=tube,
                          em_t=em[0] + start.t, em_x=em[1], em_y=em[2], em_psi=em[3],
                          em_v=em[4], em_a=em[5], created=now, cost=result.cost,
                          expansions=result.expansions,
                          generated_edges=result.generated_edges,
                          interrupted=result.interrupted,
                          discontinuity=start.discontinuity,
                          relaxed_collision=relaxed)

    def _tube(self, xs, ys, ts) -> np.ndarray:
        p = self.params
        cap = p.tube_cap_factor * p.vehicle_width
        out = np.empty(len(xs))
        s_hint = None
        for i in range(len(xs)):
            try:
                pose = self.track.to_frenet(xs[i], ys[i], s_hint=s_hint)
            except Exception:
                out[i] = 0.3
                continue
            s_hint = pose.s
            left = self.track.width_left_at(pose.s) - p.margin * 0.5 - pose.n
            right = pose.n + self.track.width_right_at(pose.s) - p.margin * 0.5
            out[i] = max(0.25, min(cap, left, right))
        return out

    def _fallback(self, ego, now: float) -> PlanOutput:
        """Re-emit the previous trajectory's remainder with its emergency branch."""
        if self.prev is not None:
            plan = self.prev
            plan.fallback = True
            return plan
        # No history at all: brake straight ahead from the ego state.
        t, x, y, psi, v, a = _straight_brake(self.track, ego, self.limits)
        tube = np.full(len(t), 1.0)
        return PlanOutput(t=t + now, x=x, y=y, psi=psi, v=v, a=a,
                          kappa=np.zeros(len(t)), tube=tube,
                          em_t=t + now, em_x=x, em_y=y, em_psi=psi, em_v=v, em_a=a,
                          created=now, fallback=True, discontinuity=True)


def _straight_brake(track, ego, limits):
    n = 40
    step = max(ego.v, 1.0) * 0.25
    xs = ego.x + np.arange(n) * step * math.cos(ego.psi)
    ys = ego.y + np.arange(n) * step * math.sin(ego.psi)
    psis = np.full(n, ego.psi)
    return emergency_traj(track, xs, ys, psis, np.zeros(n), ego.v, limits)
