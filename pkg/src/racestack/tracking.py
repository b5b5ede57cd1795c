"""Late fusion and multi-object tracking: Hungarian association + CTRV EKF.

Detection lists from up to four asynchronous pipelines arrive with their own
sensor timestamps. Each list is transformed to the global frame using the ego
state at that timestamp, deduplicated, map-filtered, and associated against
the track states *at that timestamp* (rewound from the 3 s / 100 Hz object
storage). After the EKF update the affected track is re-propagated forward to
the ego time in 10 ms CTRV steps, which is what keeps 200 ms-late inputs from
dragging the estimate behind a fast opponent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .perception import Detection
from .track import TrackMap, wrap_angle

FILTER_DT = 0.01
STORAGE_SECONDS = 3.0
STORAGE_LEN = int(STORAGE_SECONDS / FILTER_DT)


@dataclass
class PipelineCounterConfig:
    x_up: int = 1
    x_low: int = 1
    c0: int = 2
    # Two-zone distance weighting: beyond the boundary the up/down increments
    # are scaled (radar counts more, lidar less, far away).
    far_boundary: float = 80.0
    x_up_far: int | None = None
    x_low_far: int | None = None
    pos_noise: float = 0.5
    vel_noise: float = 0.6

    def increments(self, distance: float) -> tuple[int, int]:
        if distance > self.far_boundary:
            return (self.x_up_far if self.x_up_far is not None else self.x_up,
                    self.x_low_far if self.x_low_far is not None else self.x_low)
        return self.x_up, self.x_low


@dataclass
class TrackerConfig:
    x_max: int = 10
    max_match_distance: float = 3.0
    adaptive_gate: bool = False
    gate_delay_gain: float = 1.0   # extra metres per (m/s of closing speed * s of delay)
    duplicate_distance: float = 1.5
    max_input_age: float = 0.2
    heading_noise_from_map: float = 1.0  # rad 1-sigma when yaw comes from the centerline
    process_accel: float = 2.0
    process_yaw_acc: float = 0.4
    pipelines: dict = field(default_factory=lambda: {
        "lidar_cluster": PipelineCounterConfig(x_up=2, x_low=1, c0=2, pos_noise=0.3),
        "lidar_dl": PipelineCounterConfig(x_up=2, x_low=1, c0=2, pos_noise=0.25),
        "camera": PipelineCounterConfig(x_up=1, x_low=1, c0=1, pos_noise=1.0,
                                        x_up_far=2, x_low_far=1),
        "radar": PipelineCounterConfig(x_up=1, x_low=1, c0=2, pos_noise=0.6,
                                       x_up_far=3, x_low_far=1),
    })

    def pipeline(self, name: str) -> PipelineCounterConfig:
        return self.pipelines.get(name, PipelineCounterConfig())


# --------------------------------------------------------------------------
# CTRV model
# --------------------------------------------------------------------------

def ctrv_predict(state: np.ndarray, dt: float) -> np.ndarray:
    """Closed-form CTRV propagation of [x, y, psi, v, yaw_rate]."""
    x, y, psi, v, w = state
    if abs(w) < 1e-4:
        nx = x + v * math.cos(psi) * dt
        ny = y + v * math.sin(psi) * dt
    else:
        nx = x + v / w * (math.sin(psi + w * dt) - math.sin(psi))
        ny = y + v / w * (-math.cos(psi + w * dt) + math.cos(psi))
    return np.array([nx, ny, wrap_angle(psi + w * dt), v, w])


def ctrv_jacobian(state: np.ndarray, dt: float) -> np.ndarray:
    x, y, psi, v, w = state
    f = np.eye(5)
    if abs(w) < 1e-4:
        f[0, 2] = -v * math.sin(psi) * dt
        f[0, 3] = math.cos(psi) * dt
        f[1, 2] = v * math.cos(psi) * dt
        f[1, 3] = math.sin(psi) * dt
        f[0, 4] = -0.5 * v * math.sin(psi) * dt * dt
        f[1, 4] = 0.5 * v * math.cos(psi) * dt * dt
    else:
        s1, c1 = math.sin(psi), math.cos(psi)
        s2, c2 = math.sin(psi + w * dt), math.cos(psi + w * dt)
        f[0, 2] = v / w * (c2 - c1)
        f[0, 3] = (s2 - s1) / w
        f[0, 4] = v * (dt * c2 * w - (s2 - s1)) / (w * w)
        f[1, 2] = v / w * (s2 - s1)
        f[1, 3] = (-c2 + c1) / w
        f[1, 4] = v * (dt * s2 * w + (c2 - c1)) / (w * w)
    f[2, 4] = dt
    return f


def process_noise(dt: float, accel_std: float, yaw_acc_std: float) -> np.ndarray:
    q = np.zeros((5, 5))
    q[0, 0] = q[1, 1] = 0.25 * dt ** 4 * accel_std ** 2
    q[3, 3] = dt ** 2 * accel_std ** 2
    q[0, 3] = q[3, 0] = 0.5 * dt ** 3 * accel_std ** 2
    q[1, 3] = q[3, 1] = 0.5 * dt ** 3 * accel_std ** 2
    q[2, 2] = 0.25 * dt ** 4 * yaw_acc_std ** 2
    q[4, 4] = dt ** 2 * yaw_acc_std ** 2
    q[2, 4] = q[4, 2] = 0.5 * dt ** 3 * yaw_acc_std ** 2
    return q


def ekf_update(state: np.ndarray, cov: np.ndarray, measurement: np.ndarray,
               h_idx: list[int], noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standard EKF update on the measured state subset (linear H here).

    `h_idx` selects the measured components, e.g. [0, 1] for position only.
    Angle innovations (index 2) are wrapped. Raises on non-PSD covariance.
    """
    if np.any(np.linalg.eigvalsh(cov) < -1e-9):
        raise ValueError("covariance lost positive semidefiniteness")
    h = np.zeros((len(h_idx), 5))
    for row, idx in enumerate(h_idx):
        h[row, idx] = 1.0
    innov = measurement - state[h_idx]
    for row, idx in enumerate(h_idx):
        if idx == 2:
            innov[row] = wrap_angle(innov[row])
    s_mat = h @ cov @ h.T + noise
    gain = cov @ h.T @ np.linalg.inv(s_mat)
    new_state = state + gain @ innov
    new_state[2] = wrap_angle(new_state[2])
    i_kh = np.eye(5) - gain @ h
    new_cov = i_kh @ cov @ i_kh.T + gain @ noise @ gain.T
    return new_state, 0.5 * (new_cov + new_cov.T)


# --------------------------------------------------------------------------
# association and list preprocessing
# --------------------------------------------------------------------------

def associate(old_xy: np.ndarray, new_xy: np.ndarray, max_distance: float):
    """Minimum-total-distance assignment with a validity gate.

    Returns (matches, unmatched_new, unmatched_old); matches are (old, new)
    index pairs. Pairs further apart than `max_distance` are demoted.
    """
    n_old = len(old_xy)
    n_new = len(new_xy)
    if n_old == 0 or n_new == 0:
        return [], list(range(n_new)), list(range(n_old))
    cost = np.linalg.norm(old_xy[:, None, :] - new_xy[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    matches = []
    matched_old, matched_new = set(), set()
    for r, c in zip(rows, cols):
        if cost[r, c] <= max_distance:
            matches.append((int(r), int(c)))
            matched_old.add(int(r))
            matched_new.add(int(c))
    unmatched_new = [j for j in range(n_new) if j not in matched_new]
    unmatched_old = [i for i in range(n_old) if i not in matched_old]
    return matches, unmatched_new, unmatched_old


@dataclass
class GlobalObject:
    x: float
    y: float
    psi: float
    psi_measured: bool
    v_abs: float | None
    pipeline: str
    timestamp: float


def preprocess_list(detections: list[Detection], ego_state, track: TrackMap) -> list[GlobalObject]:
    """Vehicle-frame detections -> global objects with a heading for everyone.

    `ego_state` provides (x, y, psi, v) at the sensor timestamp. Headings
    missing from the measurement are filled from the centerline tangent and
    flagged so the EKF treats them as weak evidence.
    """
    ex, ey, epsi, ev = ego_state
    cos_e, sin_e = math.cos(epsi), math.sin(epsi)
    out = []
    for det in detections:
        gx = ex + det.x * cos_e - det.y * sin_e
        gy = ey + det.x * sin_e + det.y * cos_e
        if det.heading is not None:
            psi = wrap_angle(epsi + det.heading)
            measured = True
        else:
            try:
                pose = track.to_frenet(gx, gy)
                psi = track.heading_at(pose.s)
            except Exception:
                psi = epsi
            measured = False
        v_abs = None
        if det.v_rel is not None:
            v_abs = ev + det.v_rel
        out.append(GlobalObject(x=gx, y=gy, psi=psi, psi_measured=measured,
                                v_abs=v_abs, pipeline=det.pipeline,
                                timestamp=det.timestamp))
    return out


def merge_duplicates(objects: list[GlobalObject], cluster_distance: float) -> list[GlobalObject]:
    """kd-tree single-linkage merge of near-coincident detections."""
    if len(objects) <= 1:
        return list(objects)
    pts = np.array([[o.x, o.y] for o in objects])
    tree = cKDTree(pts)
    pairs = tree.query_pairs(cluster_distance, output_type="ndarray")
    parent = list(range(len(objects)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in pairs:
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(len(objects)):
        groups.setdefault(find(i), []).append(i)
    merged = []
    for root in sorted(groups):
        idx = groups[root]
        if len(idx) == 1:
            merged.append(objects[idx[0]])
            continue
        base = objects[idx[0]]
        mx = float(np.mean([objects[i].x for i in idx]))
        my = float(np.mean([objects[i].y for i in idx]))
        vels = [objects[i].v_abs for i in idx if objects[i].v_abs is not None]
        psis = [objects[i].psi for i in idx if objects[i].psi_measured]
        merged.append(replace(base, x=mx, y=my,
                              v_abs=float(np.mean(vels)) if vels else base.v_abs,
                              psi=psis[0] if psis else base.psi,
                              psi_measured=bool(psis)))
    return merged


def map_filter(objects: list[GlobalObject], track: TrackMap) -> list[GlobalObject]:
    """Drop everything outside the global track boundaries (wall reflections)."""
    return [o for o in objects if track.contains(o.x, o.y, 0.0)]


def update_counter(c: int, matched: bool, x_up: int, x_low: int, x_max: int) -> int:
    if matched:
        return min(c + x_up, x_max)
    return max(c - x_low, 0)


# --------------------------------------------------------------------------
# tracked object and tracker
# --------------------------------------------------------------------------

@dataclass
class TrackedObject:
    object_id: int
    state: np.ndarray          # [x, y, psi, v, yaw_rate] at head time
    cov: np.ndarray
    counter: int
    head_time: float
    storage: list = field(default_factory=list)  # (state, cov) at 10 ms spacing, oldest first

    @property
    def x(self) -> float:
        return float(self.state[0])

    @property
    def y(self) -> float:
        return float(self.state[1])

    @property
    def speed(self) -> float:
        return float(self.state[3])

    def state_at(self, t: float):
        """Stored (state, cov) at time t, or None outside the storage window."""
        steps_back = int(round((self.head_time - t) / FILTER_DT))
        if steps_back < 0 or steps_back >= len(self.storage):
            return None
        return self.storage[len(self.storage) - 1 - steps_back]


class ObjectTracker:
    """Owns all track state; single-threaded, stepped on perception input."""

    def __init__(self, cfg: TrackerConfig, track: TrackMap, t0: float = 0.0):
        self.cfg = cfg
        self.track = track
        self.tracks: list[TrackedObject] = []
        self.now = t0
        self._next_id = 1
        self.rejected_inputs = 0

    # -- time keeping ------------------------------------------------------

    def advance(self, t: float) -> None:
        """Predict all tracks forward to time t in 10 ms steps."""
        while self.now + FILTER_DT <= t + 1e-9:
            self.now = round((self.now + FILTER_DT) / FILTER_DT) * FILTER_DT
            for tr in self.tracks:
                self._propagate_track(tr, self.now)

    def _propagate_track(self, tr: TrackedObject, t: float) -> None:
        while tr.head_time + FILTER_DT <= t + 1e-9:
            f = ctrv_jacobian(tr.state, FILTER_DT)
            tr.state = ctrv_predict(tr.state, FILTER_DT)
            tr.cov = f @ tr.cov @ f.T + process_noise(
                FILTER_DT, self.cfg.process_accel, self.cfg.process_yaw_acc)
            tr.head_time += FILTER_DT
            tr.storage.append((tr.state.copy(), tr.cov.copy()))
            if len(tr.storage) > STORAGE_LEN:
                tr.storage.pop(0)

    # -- main step ---------------------------------------------------------

    def step(self, t: float, inputs: list[tuple[str, float, list]], ego_at) -> list[TrackedObject]:
        """Process pipeline inputs and return tracks synchronized to time t.

        `inputs` are (pipeline, T_i, detections); `ego_at(T_i)` must return the
        interpolated ego state (x, y, psi, v) at the sensor timestamp.
        Lists older than the configured age limit are rejected and counted.
        """
        self.advance(t)
        for pipeline, t_meas, detections in sorted(inputs, key=lambda e: (e[1], e[0])):
            if t - t_meas > self.cfg.max_input_age + 1e-9:
                self.rejected_inputs += 1
                continue
            self._process_list(pipeline, t_meas, detections, ego_at, t)
        self.tracks = [tr for tr in self.tracks if tr.counter > 0]
        return [replace(tr, state=tr.state.copy(), cov=tr.cov.copy(),
                        storage=[]) for tr in self.tracks]

    def _process_list(self, pipeline: str, t_meas: float, detections, ego_at, t_now) -> None:
        cfg = self.cfg
        pcfg = cfg.pipeline(pipeline)
        ego_state = ego_at(t_meas)
        objects = preprocess_list(detections, ego_state, self.track)
        objects = merge_duplicates(objects, cfg.duplicate_distance)
        objects = map_filter(objects, self.track)

        # Historical track states at the sensor time for matching.
        hist = []
        for tr in self.tracks:
            snap = tr.state_at(t_meas)
            hist.append(snap[0][:2] if snap is not None else tr.state[:2])
        old_xy = np.array(hist) if hist else np.empty((0, 2))
        new_xy = np.array([[o.x, o.y] for o in objects]) if objects else np.empty((0, 2))

        gate = cfg.max_match_distance
        if cfg.adaptive_gate and len(self.tracks):
            # The fixed gate fails at high closing speed under delay; widen it
            # with the expected motion during the input age.
            delay = max(0.0, t_now - t_meas)
            v_scale = max([abs(tr.state[3] - ego_state[3]) for tr in self.tracks] + [0.0])
            gate = cfg.max_match_distance + cfg.gate_delay_gain * v_scale * delay
        matches, unmatched_new, unmatched_old = associate(old_xy, new_xy, gate)

        ego_dist = lambda o: math.hypot(o.x - ego_state[0], o.y - ego_state[1])

        for old_i, new_j in matches:
            tr = self.tracks[old_i]
            obj = objects[new_j]
            self._rewind_update(tr, obj, t_meas, pcfg)
            x_up, _ = pcfg.increments(ego_dist(obj))
            tr.counter = update_counter(tr.counter, True, x_up, 0, cfg.x_max)
        for old_i in unmatched_old:
            tr = self.tracks[old_i]
            dist = math.hypot(tr.state[0] - ego_state[0], tr.state[1] - ego_state[1])
            _, x_low = pcfg.increments(dist)
            tr.counter = update_counter(tr.counter, False, 0, x_low, cfg.x_max)
        for new_j in unmatched_new:
            self._init_track(objects[new_j], t_meas, pcfg)

    def _rewind_update(self, tr: TrackedObject, obj: GlobalObject, t_meas: float,
                       pcfg: PipelineCounterConfig) -> None:
        snap = tr.state_at(t_meas)
        if snap is None:
            state, cov = tr.state, tr.cov
            t_base = tr.head_time
        else:
            state, cov = snap
            t_base = t_meas
        meas, h_idx, noise = self._measurement_of(obj, pcfg)
        state, cov = ekf_update(state.copy(), cov.copy(), meas, h_idx, noise)
        # Re-propagate to the head, overwriting the stored tail with the
        # corrected history (backward-forward iteration).
        steps = int(round((tr.head_time - t_base) / FILTER_DT))
        start = len(tr.storage) - 1 - steps
        if 0 <= start:
            tr.storage[start] = (state.copy(), cov.copy())
        for k in range(steps):
            f = ctrv_jacobian(state, FILTER_DT)
            state = ctrv_predict(state, FILTER_DT)
            cov = f @ cov @ f.T + process_noise(
                FILTER_DT, self.cfg.process_accel, self.cfg.process_yaw_acc)
            idx = start + 1 + k
            if 0 <= idx < len(tr.storage):
                tr.storage[idx] = (state.copy(), cov.copy())
        tr.state = state
        tr.cov = cov

    def _measurement_of(self, obj: GlobalObject, pcfg: PipelineCounterConfig):
        meas = [obj.x, obj.y]
        h_idx = [0, 1]
        noise_diag = [pcfg.pos_noise ** 2, pcfg.pos_noise ** 2]
        meas.append(obj.psi)
        h_idx.append(2)
        noise_diag.append((0.3 if obj.psi_measured else self.cfg.heading_noise_from_map) ** 2)
        if obj.v_abs is not None:
            meas.append(obj.v_abs)
            h_idx.append(3)
            noise_diag.append(pcfg.vel_noise ** 2)
        return np.array(meas), h_idx, np.diag(noise_diag)

    def _init_track(self, obj: GlobalObject, t_meas: float,
                    pcfg: PipelineCounterConfig) -> None:
        state = np.array([obj.x, obj.y, obj.psi,
                          obj.v_abs if obj.v_abs is not None else 0.0, 0.0])
        cov = np.diag([pcfg.pos_noise ** 2, pcfg.pos_noise ** 2, 0.5 ** 2,
                       (3.0 if obj.v_abs is not None else 25.0) ** 2, 0.2 ** 2])
        # Align the filter grid with the tracker clock.
        head = math.floor(t_meas / FILTER_DT) * FILTER_DT
        tr = TrackedObject(object_id=self._next_id, state=state, cov=cov,
                           counter=min(pcfg.c0, self.cfg.x_max), head_time=head,
                           storage=[(state.copy(), cov.copy())])
        self._next_id += 1
        self._propagate_track(tr, self.now)
        self.tracks.append(tr)
