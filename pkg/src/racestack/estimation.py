"""Ego state estimation: IMU + position fixes fused on a 2D point-mass model.

Runs at a fixed 100 Hz step. Measured accelerations are banking-compensated
before entering the filter, so the filter itself operates on a flat plane.
Heading comes from the smoothed velocity direction (the heading itself is not
a filter state); below a low-speed threshold the last heading is held.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .track import GRAVITY, TrackMap, wrap_angle

ACCEL_PLAUSIBLE = 60.0  # m/s^2, sensor gate


@dataclass(frozen=True)
class ImuSample:
    a_x_meas: float
    a_y_meas: float
    yaw_rate: float
    timestamp: float


@dataclass(frozen=True)
class PositionFix:
    x: float
    y: float
    timestamp: float
    quality: float = 1.0
    receiver_id: int = 0
    heading: float | None = None


@dataclass(frozen=True)
class EgoEstimate:
    """Immutable snapshot of the fused ego state (plane-compensated accelerations)."""

    x: float
    y: float
    psi: float
    v: float
    beta: float
    a_x: float
    a_y: float
    yaw_rate: float
    covariance: np.ndarray
    timestamp: float

    def velocity(self) -> tuple[float, float]:
        return self.v * math.cos(self.psi), self.v * math.sin(self.psi)


def compensate_banking(a_x_meas: float, a_y_meas: float, theta: float) -> tuple[float, float]:
    """Project measured accelerations into the horizontal plane.

    Only the lateral channel is affected:
    a'_y = a_y_meas * (cos(theta) + tan(theta)*sin(theta)) + g*tan(theta).
    """
    if abs(theta) >= math.pi / 2:
        raise ValueError(f"banking angle {theta!r} out of domain (|theta| < 90 deg)")
    t = math.tan(theta)
    a_y = a_y_meas * (math.cos(theta) + t * math.sin(theta)) + GRAVITY * t
    return a_x_meas, a_y


def heading_from_velocity(velocities, dt: float, min_speed: float = 3.0,
                          tau: float = 0.1, fallback: float = 0.0) -> tuple[float, bool]:
    """Heading of the exponentially smoothed velocity vector.

    Returns (psi, confident). When the smoothed speed stays below `min_speed`
    the fallback heading is returned with confident=False.
    """
    alpha = 1.0 - math.exp(-dt / tau)
    vx = vy = 0.0
    first = True
    for wx, wy in velocities:
        if first:
            vx, vy = wx, wy
            first = False
        else:
            vx += alpha * (wx - vx)
            vy += alpha * (wy - vy)
    if math.hypot(vx, vy) < min_speed:
        return fallback, False
    return math.atan2(vy, vx), True


@dataclass
class EstimatorConfig:
    dt: float = 0.01
    accel_noise: float = 0.6        # m/s^2 process noise on acceleration input
    fix_noise: float = 0.08         # m, 1-sigma for a quality-1.0 receiver
    innovation_clamp: float = 0.2   # m max position correction per step (0 disables)
    min_speed_heading: float = 3.0
    heading_tau: float = 0.1


class EgoStateFilter:
    """Kalman filter on [x, y, vx, vy] with banking-compensated acceleration input."""

    def __init__(self, cfg: EstimatorConfig, track: TrackMap,
                 x0=(0.0, 0.0), v0=(0.0, 0.0), psi0: float = 0.0, t0: float = 0.0):
        self.cfg = cfg
        self.track = track
        self.state = np.array([x0[0], x0[1], v0[0], v0[1]], dtype=float)
        self.cov = np.diag([1.0, 1.0, 0.5, 0.5])
        self.psi = psi0
        self._vx_f, self._vy_f = v0
        self.t = t0
        self.yaw_rate = 0.0
        self.a_plane = (0.0, 0.0)
        self.rejected_samples = 0
        self.clamped_corrections = 0
        self._s_hint: float | None = None

    def estimate(self) -> EgoEstimate:
        v = float(math.hypot(self.state[2], self.state[3]))
        return EgoEstimate(x=float(self.state[0]), y=float(self.state[1]), psi=self.psi,
                           v=v, beta=0.0, a_x=self.a_plane[0], a_y=self.a_plane[1],
                           yaw_rate=self.yaw_rate, covariance=self.cov.copy(),
                           timestamp=self.t)

    def step(self, imu: ImuSample, fixes=()) -> EgoEstimate:
        """One 10 ms predict/update cycle. Bad IMU samples degrade to predict-only."""
        cfg = self.cfg
        dt = cfg.dt
        imu_ok = (math.isfinite(imu.a_x_meas) and math.isfinite(imu.a_y_meas)
                  and math.isfinite(imu.yaw_rate)
                  and math.hypot(imu.a_x_meas, imu.a_y_meas) <= ACCEL_PLAUSIBLE
                  and imu.timestamp >= self.t)
        if not imu_ok:
            self.rejected_samples += 1
            ax = ay = 0.0
        else:
            theta = self._banking_here()
            ax, ay = compensate_banking(imu.a_x_meas, imu.a_y_meas, theta)
            self.yaw_rate = imu.yaw_rate
        self.a_plane = (ax, ay)

        # Body accelerations rotated into the global frame with current heading.
        c, s = math.cos(self.psi), math.sin(self.psi)
        agx = ax * c - ay * s
        agy = ax * s + ay * c
        x = self.state
        x[0] += x[2] * dt + 0.5 * agx * dt * dt
        x[1] += x[3] * dt + 0.5 * agy * dt * dt
        x[2] += agx * dt
        x[3] += agy * dt

        f = np.eye(4)
        f[0, 2] = f[1, 3] = dt
        q_a = cfg.accel_noise ** 2
        g = np.array([[0.5 * dt * dt, 0.0], [0.0, 0.5 * dt * dt], [dt, 0.0], [0.0, dt]])
        self.cov = f @ self.cov @ f.T + g @ (q_a * np.eye(2)) @ g.T

        for fix in fixes:
            self._update_fix(fix)

        self._update_heading(dt)
        self.cov = 0.5 * (self.cov + self.cov.T)
        self.t = imu.timestamp if imu_ok else self.t + dt
        return self.estimate()

    def _update_fix(self, fix: PositionFix) -> None:
        if not (math.isfinite(fix.x) and math.isfinite(fix.y)) or fix.quality <= 0.0:
            self.rejected_samples += 1
            return
        h = np.zeros((2, 4))
        h[0, 0] = h[1, 1] = 1.0
        r = (self.cfg.fix_noise ** 2 / fix.quality) * np.eye(2)
        innov = np.array([fix.x - self.state[0], fix.y - self.state[1]])
        s_mat = h @ self.cov @ h.T + r
        k = self.cov @ h.T @ np.linalg.inv(s_mat)
        corr = k @ innov
        clamp = self.cfg.innovation_clamp
        pos_corr = math.hypot(corr[0], corr[1])
        if clamp > 0.0 and pos_corr > clamp:
            # A delayed or offset fix must not yank the estimate in one step.
            corr *= clamp / pos_corr
            self.clamped_corrections += 1
        self.state += corr
        i_kh = np.eye(4) - k @ h
        self.cov = i_kh @ self.cov @ i_kh.T + k @ r @ k.T

    def _update_heading(self, dt: float) -> None:
        alpha = 1.0 - math.exp(-dt / self.cfg.heading_tau)
        self._vx_f += alpha * (self.state[2] - self._vx_f)
        self._vy_f += alpha * (self.state[3] - self._vy_f)
        if math.hypot(self._vx_f, self._vy_f) >= self.cfg.min_speed_heading:
            self.psi = math.atan2(self._vy_f, self._vx_f)
        else:
            # Hold the last heading, advanced by the gyro, at low speed.
            self.psi = wrap_angle(self.psi + self.yaw_rate * dt)

    def _banking_here(self) -> float:
        try:
            pose = self.track.to_frenet(self.state[0], self.state[1], self.psi,
                                        s_hint=self._s_hint)
        except Exception:
            return 0.0
        self._s_hint = pose.s
        return self.track.banking_at(pose.s)
