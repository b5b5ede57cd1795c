"""Deterministic vehicle plant and synthetic sensor generators.

The plant is a nonlinear single-track model with a saturating lateral tire
curve, combined-slip coupling on the driven/braked axles, aero drag and
downforce, banking-induced gravity force, a first-order turbo boost lag, and a
steering actuator modeled as transport delay + first-order lag + constant
offset. It integrates at a fixed 1 ms step with commands held between control
cycles.

Sensor synthesis covers both cheap per-pipeline object detections (used by the
closed-loop scenarios) and ray-cast point clouds (used by the perception
tests); both are bit-deterministic under a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .track import GRAVITY, TrackMap
from .perception import Detection, PointCloud

AIR_DENSITY = 1.2


@dataclass
class VehicleParams:
    """Plausible open-wheel parameters; not calibrated to any specific car."""

    mass: float = 750.0
    inertia_z: float = 1000.0
    lf: float = 1.60
    lr: float = 1.38
    c_alpha_f: float = 150e3
    c_alpha_r: float = 190e3
    mu: float = 1.6
    cl_a: float = 2.0           # downforce area * coefficient
    cd_a: float = 0.9           # drag area * coefficient
    roll_resist: float = 180.0  # N, constant
    aero_balance_front: float = 0.44  # front share of downforce; rear-biased keeps
                                      # the limit behavior on the understeer side
    length: float = 4.9
    width: float = 1.9
    height: float = 1.2
    # drivetrain
    engine_force: float = 7000.0
    boost_fraction: float = 0.45
    boost_tau: float = 0.65
    power_max: float = 335e3
    brake_force: float = 16000.0
    brake_front_share: float = 0.6
    # steering actuator
    steer_limit: float = 0.30
    steer_tau: float = 0.06
    steer_offset: float = math.radians(0.1)
    steer_delay: float = 0.06
    friction_scale: float = 1.0  # cold tires use < 1

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr


@dataclass
class VehicleTruth:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    yaw_rate: float = 0.0
    delta_actual: float = 0.0
    boost: float = 0.0
    util_front: float = 0.0
    util_rear: float = 0.0

    @property
    def speed(self) -> float:
        return math.hypot(self.v_x, self.v_y)

    @property
    def beta(self) -> float:
        if abs(self.v_x) < 0.5 and abs(self.v_y) < 0.5:
            return 0.0
        return math.atan2(self.v_y, max(self.v_x, 0.3))


def _tire_lateral(alpha: float, c_alpha: float, fy_max: float) -> float:
    """Saturating arctangent lateral force: linear stiffness, asymptote fy_max."""
    if fy_max < 1.0:
        return 0.0
    return fy_max * (2.0 / math.pi) * math.atan(math.pi * c_alpha * alpha / (2.0 * fy_max))


def vehicle_step(truth: VehicleTruth, params: VehicleParams,
                 delta_cmd: float, throttle: float, brake: float,
                 theta: float, dt: float = 1e-3) -> VehicleTruth:
    """One integration step; `delta_cmd` is the post-transport-delay request."""
    p = params
    t = truth

    # Steering actuator: lag towards the (offset) request, saturated.
    target = max(-p.steer_limit, min(p.steer_limit, delta_cmd)) - p.steer_offset
    delta = t.delta_actual + dt * (target - t.delta_actual) / p.steer_tau

    # Turbo boost pressure follows the throttle with a lag.
    boost = t.boost + dt * (throttle - t.boost) / p.boost_tau

    v_x = max(t.v_x, 0.0)
    safe_vx = max(v_x, 0.5)

    f_down = 0.5 * AIR_DENSITY * p.cl_a * v_x ** 2
    f_drag = 0.5 * AIR_DENSITY * p.cd_a * v_x ** 2 + (p.roll_resist if v_x > 0.1 else 0.0)

    fz_front = (p.mass * GRAVITY * p.lr / p.wheelbase) + p.aero_balance_front * f_down
    fz_rear = (p.mass * GRAVITY * p.lf / p.wheelbase) + (1.0 - p.aero_balance_front) * f_down
    grip_f = p.mu * p.friction_scale * fz_front
    grip_r = p.mu * p.friction_scale * fz_rear

    # Longitudinal forces: engine on the rear axle, brakes split front/rear.
    f_engine = throttle * p.engine_force * (1.0 - p.boost_fraction + p.boost_fraction * boost)
    f_engine = min(f_engine, p.power_max / safe_vx)
    f_brake = brake * p.brake_force if v_x > 0.05 else 0.0
    fx_front = -f_brake * p.brake_front_share
    fx_rear = f_engine - f_brake * (1.0 - p.brake_front_share)

    # Combined slip: longitudinal usage shrinks the lateral budget per axle.
    fy_max_f = math.sqrt(max(0.0, grip_f ** 2 - min(abs(fx_front), grip_f) ** 2))
    fy_max_r = math.sqrt(max(0.0, grip_r ** 2 - min(abs(fx_rear), grip_r) ** 2))

    alpha_f = delta - math.atan2(t.v_y + p.lf * t.yaw_rate, safe_vx)
    alpha_r = -math.atan2(t.v_y - p.lr * t.yaw_rate, safe_vx)
    fy_front = _tire_lateral(alpha_f, p.c_alpha_f, fy_max_f)
    fy_rear = _tire_lateral(alpha_r, p.c_alpha_r, fy_max_r)

    # Banking pulls the car towards the inside (left-positive n convention;
    # the fixtures are CCW so positive banking assists left turns).
    f_bank = p.mass * GRAVITY * math.tan(theta)

    ax_body = (fx_front * math.cos(delta) + fx_rear - fy_front * math.sin(delta)
               - f_drag) / p.mass
    ay_body = (fy_front * math.cos(delta) + fy_rear + fx_front * math.sin(delta)
               + f_bank) / p.mass
    yaw_acc = (p.lf * (fy_front * math.cos(delta) + fx_front * math.sin(delta))
               - p.lr * fy_rear) / p.inertia_z

    v_x_new = t.v_x + dt * (ax_body + t.yaw_rate * t.v_y)
    v_y_new = t.v_y + dt * (ay_body - t.yaw_rate * t.v_x)
    if v_x_new < 0.0:
        v_x_new = 0.0
        if abs(v_y_new) < 0.05:
            v_y_new = 0.0
    r_new = t.yaw_rate + dt * yaw_acc
    psi_new = t.psi + dt * t.yaw_rate
    x_new = t.x + dt * (t.v_x * math.cos(t.psi) - t.v_y * math.sin(t.psi))
    y_new = t.y + dt * (t.v_x * math.sin(t.psi) + t.v_y * math.cos(t.psi))

    return VehicleTruth(x=x_new, y=y_new, psi=psi_new, v_x=v_x_new, v_y=v_y_new,
                        yaw_rate=r_new, delta_actual=delta, boost=boost,
                        util_front=abs(fy_front) / max(grip_f, 1.0),
                        util_rear=math.hypot(fy_rear, fx_rear) / max(grip_r, 1.0))


def imu_measurement(truth: VehicleTruth, accel_plane: tuple[float, float],
                    theta: float) -> tuple[float, float]:
    """Invert the banking compensation: plane accelerations -> IMU readings."""
    ax_plane, ay_plane = accel_plane
    denom = math.cos(theta) + math.tan(theta) * math.sin(theta)
    return ax_plane, (ay_plane - GRAVITY * math.tan(theta)) / denom


class TransportDelay:
    """Pure transport delay: emits the input stream shifted by exactly `delay`."""

    def __init__(self, delay: float, initial):
        self.delay = delay
        self._buf: list[tuple[float, object]] = [(-math.inf, initial)]

    def push(self, t: float, value) -> None:
        if self._buf and t < self._buf[-1][0]:
            raise ValueError("non-monotonic command timestamps")
        self._buf.append((t, value))

    def sample(self, t: float):
        """Value the receiver sees at time t (input as of t - delay)."""
        cutoff = t - self.delay
        out = self._buf[0][1]
        keep = 0
        for i, (ts, value) in enumerate(self._buf):
            if ts <= cutoff + 1e-12:
                out = value
                keep = i
            else:
                break
        if keep > 0:
            del self._buf[:keep]
        return out


# --------------------------------------------------------------------------
# synthetic sensors
# --------------------------------------------------------------------------

@dataclass
class PipelineSensorConfig:
    pipeline: str
    rate_hz: float = 20.0
    latency: float = 0.1
    pos_noise: float = 0.25
    vel_noise: float = 0.5
    detect_range: float = 150.0
    p_detect: float = 0.98
    false_positive_rate: float = 0.0
    measures_velocity: bool = False


@dataclass
class SensorModelConfig:
    pipelines: list[PipelineSensorConfig] = field(default_factory=lambda: [
        PipelineSensorConfig("lidar_cluster", rate_hz=20.0, latency=0.22, pos_noise=0.20),
        PipelineSensorConfig("lidar_dl", rate_hz=12.0, latency=0.15, pos_noise=0.15),
        PipelineSensorConfig("camera", rate_hz=25.0, latency=0.10, pos_noise=0.80,
                             detect_range=250.0, p_detect=0.9),
        PipelineSensorConfig("radar", rate_hz=20.0, latency=0.08, pos_noise=0.45,
                             detect_range=250.0, measures_velocity=True, vel_noise=0.4),
    ])


def synth_detections(objects, ego: VehicleTruth, cfg: PipelineSensorConfig,
                     rng: np.random.Generator, timestamp: float,
                     track: TrackMap | None = None) -> list[Detection]:
    """Noisy detections of true objects in the ego vehicle frame.

    `objects` are (x, y, psi, v) tuples in the global frame. False positives,
    when configured, are placed uniformly around the ego inside the corridor
    (or just outside it when `track` is None).
    """
    out: list[Detection] = []
    cos_e, sin_e = math.cos(ego.psi), math.sin(ego.psi)
    for ox, oy, opsi, ov in objects:
        dx, dy = ox - ego.x, oy - ego.y
        rel_x = dx * cos_e + dy * sin_e
        rel_y = -dx * sin_e + dy * cos_e
        rng_dist = math.hypot(rel_x, rel_y)
        p = cfg.p_detect if rng_dist <= cfg.detect_range else max(
            0.0, cfg.p_detect * (1.0 - (rng_dist - cfg.detect_range) / 100.0))
        if rng.random() >= p:
            continue
        nx, ny = rng.normal(0.0, cfg.pos_noise, size=2)
        det = Detection(x=rel_x + nx, y=rel_y + ny, pipeline=cfg.pipeline,
                        timestamp=timestamp)
        if cfg.measures_velocity:
            ego_v = ego.v_x
            det = replace(det, v_rel=ov - ego_v + rng.normal(0.0, cfg.vel_noise))
        out.append(det)
    n_fp = rng.poisson(cfg.false_positive_rate) if cfg.false_positive_rate > 0 else 0
    for _ in range(n_fp):
        r = rng.uniform(20.0, cfg.detect_range)
        ang = rng.uniform(-math.pi / 3, math.pi / 3)
        out.append(Detection(x=r * math.cos(ang), y=r * math.sin(ang),
                             pipeline=cfg.pipeline, timestamp=timestamp))
    return out


@dataclass
class LidarConfig:
    azimuth_step_deg: float = 0.2
    n_layers: int = 32
    vertical_fov_deg: float = 17.5
    sensor_height: float = 0.6
    max_range: float = 250.0
    range_noise: float = 0.01


def synth_point_cloud(ego_pose, objects, lidar: LidarConfig, track: TrackMap,
                      rng: np.random.Generator, timestamp: float = 0.0,
                      wall_offset: float = 1.0, wall_height: float = 2.0) -> PointCloud:
    """Ray-cast point cloud of ground + boundary walls + object boxes.

    The scene is evaluated in the ego vehicle frame. Ground banking is taken
    from the track at the ego position (locally planar approximation).
    `objects` are (x, y, psi, length, width, height) in the global frame.
    """
    ex, ey, epsi = ego_pose
    pose = track.to_frenet(ex, ey, epsi)
    theta = track.banking_at(pose.s)

    az = np.radians(np.arange(-180.0, 180.0, lidar.azimuth_step_deg))
    elev = np.radians(np.linspace(-lidar.vertical_fov_deg / 2.0,
                                  lidar.vertical_fov_deg / 2.0, lidar.n_layers))
    az_g, el_g = np.meshgrid(az, elev, indexing="ij")
    az_f = az_g.ravel()
    el_f = el_g.ravel()
    dx = np.cos(el_f) * np.cos(az_f)
    dy = np.cos(el_f) * np.sin(az_f)
    dz = np.sin(el_f)

    best_r = np.full(az_f.shape, np.inf)

    # Ground plane in the vehicle frame: z = -h + slope_y * y (banked laterally).
    slope = -math.tan(theta)
    denom = dz - slope * dy
    with np.errstate(divide="ignore", invalid="ignore"):
        r_ground = np.where(np.abs(denom) > 1e-9, -lidar.sensor_height / denom, np.inf)
    ok = (r_ground > 0.1) & (r_ground < lidar.max_range)
    best_r = np.where(ok & (r_ground < best_r), r_ground, best_r)

    # Boundary walls: vertical planes offset laterally from the ego.
    for side, width in (("left", track.width_left_at(pose.s)),
                        ("right", track.width_right_at(pose.s))):
        lat = (width + wall_offset - pose.n) if side == "left" else -(width + wall_offset + pose.n)
        with np.errstate(divide="ignore", invalid="ignore"):
            r_wall = np.where(np.abs(dy) > 1e-9, lat / dy, np.inf)
        z_hit = -lidar.sensor_height + r_wall * dz
        ok = (r_wall > 0.1) & (r_wall < lidar.max_range) & (z_hit > -1.0) & (z_hit < wall_height)
        best_r = np.where(ok & (r_wall < best_r), r_wall, best_r)

    # Objects as axis-aligned boxes in the vehicle frame (coarse but cheap).
    cos_e, sin_e = math.cos(epsi), math.sin(epsi)
    for ox, oy, _opsi, length, width, height in objects:
        rel_x = (ox - ex) * cos_e + (oy - ey) * sin_e
        rel_y = -(ox - ex) * sin_e + (oy - ey) * cos_e
        with np.errstate(divide="ignore", invalid="ignore"):
            tx1 = (rel_x - length / 2) / np.where(np.abs(dx) > 1e-9, dx, np.nan)
            tx2 = (rel_x + length / 2) / np.where(np.abs(dx) > 1e-9, dx, np.nan)
            ty1 = (rel_y - width / 2) / np.where(np.abs(dy) > 1e-9, dy, np.nan)
            ty2 = (rel_y + width / 2) / np.where(np.abs(dy) > 1e-9, dy, np.nan)
        t_near = np.fmax(np.fmin(tx1, tx2), np.fmin(ty1, ty2))
        t_far = np.fmin(np.fmax(tx1, tx2), np.fmax(ty1, ty2))
        z_hit = -lidar.sensor_height + t_near * dz
        ok = (np.nan_to_num(t_near, nan=-1.0) > 0.1) & (t_near <= np.nan_to_num(t_far, nan=-np.inf)) \
            & (z_hit > -lidar.sensor_height + 0.05) & (z_hit < -lidar.sensor_height + height)
        best_r = np.where(ok & (t_near < best_r), t_near, best_r)

    hit = np.isfinite(best_r)
    r = best_r[hit] + rng.normal(0.0, lidar.range_noise, size=int(np.sum(hit)))
    pts = np.stack([r * dx[hit], r * dy[hit], -lidar.sensor_height + r * dz[hit],
                    np.full(r.shape, 1.0)], axis=1)
    return PointCloud(points=pts, timestamp=timestamp)
