"""Three-layer motion control: tube MPC, PI acceleration matching, steering cascade.

Layer 1 re-optimizes lateral deviation / deviation rate / speed error over a
3 s horizon on a limited-friction point-mass model. The lateral motion is
shaped mostly by the driving-tube constraints (enforced for every disturbance
scenario in the uncertainty set) rather than by a stiff tracking cost; a
piecewise slack penalty makes the response much more aggressive once the
deviation exceeds the 1 m knee. Layer 2 turns acceleration targets into
steering/throttle/brake with feedforward plus PI correction. Layer 3 closes a
PI loop around the steering actuator so constant actuator offsets vanish.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .qp import QPSolver
from .raceline import GGLimits
from .track import GRAVITY, wrap_angle


@dataclass(frozen=True)
class ControlCommand:
    delta_req: float
    throttle: float
    brake: float
    timestamp: float


@dataclass
class TubeConstraint:
    """Per-step lateral bounds and the disturbance scenario set (0 = nominal)."""

    bounds: np.ndarray
    scenarios: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if len(self.scenarios) == 0:
            raise ValueError("scenario set must be non-empty")
        if np.any(self.bounds <= 0.0):
            raise ValueError("tube bounds must contain 0")


def default_scenarios(lat: float = 0.25, friction: float = 0.9) -> dict:
    """Five realizations: nominal, +/- lateral drift ramp, +/- friction scale."""
    return {"lateral": (0.0, lat, -lat), "friction": (1.0, friction)}


@dataclass
class MpcParams:
    horizon: int = 30
    dt: float = 0.1
    w_d: float = 6.0
    w_drate: float = 8.0
    w_v: float = 2.0
    r_uy: float = 0.35
    r_ux: float = 0.5
    slack_knee: float = 1.0
    slack_lin: float = 30.0
    slack_quad: float = 500.0
    u_y_max: float = 12.0
    u_x_max: float = 9.0
    n_polytope: int = 12
    latency_comp: float = 0.10
    max_iter: int = 80
    eps: float = 1e-5


class TubeMpc:
    """Convex QP over [u_y, u_x, slack] with cached KKT factorization.

    The friction polytope rows are fixed directions; speed-dependent limits
    and the banking-assist term enter through the row bounds, so consecutive
    solves only update q/l/u and warm-start.
    """

    def __init__(self, params: MpcParams, gg: GGLimits,
                 scenarios: dict | None = None):
        self.p = params
        self.gg = gg
        sc = scenarios or default_scenarios()
        self.lat_scenarios = tuple(sc.get("lateral", (0.0,)))
        self.friction_scenarios = tuple(sc.get("friction", (1.0,)))
        n = params.horizon
        dt = params.dt

        # Prediction of d (double integrator in u_y) and ev (integrator in u_x).
        g_d = np.zeros((n, n))
        g_dr = np.zeros((n, n))
        for k in range(n):
            for j in range(k + 1):
                # effect of u_y[j] on d[k+1], dr[k+1]
                g_dr[k, j] = dt
                g_d[k, j] = 0.5 * dt * dt + dt * dt * (k - j)
        g_v = np.tril(np.full((n, n), dt))
        self._g_d, self._g_dr, self._g_v = g_d, g_dr, g_v

        nv = 3 * n  # u_y, u_x, slack
        p_mat = np.zeros((nv, nv))
        p_mat[:n, :n] = 2.0 * (params.w_d * g_d.T @ g_d
                               + params.w_drate * g_dr.T @ g_dr
                               + params.r_uy * np.eye(n))
        p_mat[n:2 * n, n:2 * n] = 2.0 * (params.w_v * g_v.T @ g_v + params.r_ux * np.eye(n))
        p_mat[2 * n:, 2 * n:] = 2.0 * params.slack_quad * np.eye(n)

        rows = []
        # Tube rows: ±(d_k + w_j) - eps_k <= b_k for each lateral scenario.
        for _ in self.lat_scenarios:
            for sign in (1.0, -1.0):
                block = np.zeros((n, nv))
                block[:, :n] = sign * g_d
                block[:, 2 * n:] = -np.eye(n)
                rows.append(block)
        # Friction polytope rows (fixed directions; bounds updated per solve).
        angles = np.linspace(0.0, 2.0 * math.pi, params.n_polytope, endpoint=False)
        self._poly_dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        fric = np.zeros((params.n_polytope * n, nv))
        for i, (cx, cy) in enumerate(self._poly_dirs):
            for k in range(n):
                fric[i * n + k, n + k] = cx   # on u_x
                fric[i * n + k, k] = cy       # on u_y
        rows.append(fric)
        # Box rows on inputs and slack.
        box = np.zeros((3 * n, nv))
        box[:, :] = np.eye(nv)
        rows.append(box)
        a_mat = np.vstack(rows)
        self._n_tube_rows = 2 * n * len(self.lat_scenarios)
        self._n_fric_rows = params.n_polytope * n
        self.solver = QPSolver(p_mat, a_mat)
        self._nv = nv
        self._n = n
        self._p_mat = p_mat

    def solve(self, x0, tube: TubeConstraint, v_ref, a_x_ref, ay_ff,
              bank_assist=None, max_iter: int | None = None, eps: float | None = None):
        """First-step (a_x_target, a_y_target) for the current cycle.

        x0 = (d, d_rate, ev). `ay_ff` is the plane feedforward v_ref^2 * kappa;
        `bank_assist` (optional, per step) is subtracted from the lateral tire
        demand inside the friction rows.
        """
        p = self.p
        n = self._n
        d0, dr0, ev0 = x0
        v_ref = np.asarray(v_ref, dtype=float)
        a_x_ref = np.asarray(a_x_ref, dtype=float)
        ay_ff = np.asarray(ay_ff, dtype=float)
        assist = np.zeros(n) if bank_assist is None else np.asarray(bank_assist, dtype=float)

        steps = np.arange(1, n + 1)
        phi_d = d0 + dr0 * steps * p.dt
        phi_ev = np.full(n, ev0)

        q = np.zeros(self._nv)
        q[:n] = 2.0 * (p.w_d * (self._g_d.T @ phi_d) + p.w_drate * (self._g_dr.T @ np.full(n, dr0)))
        q[n:2 * n] = 2.0 * p.w_v * (self._g_v.T @ phi_ev)
        q[2 * n:] = p.slack_lin

        fric_scale = min(self.friction_scenarios)
        axm = self.gg.ax_max(v_ref) * fric_scale
        aym = self.gg.ay_max(v_ref) * fric_scale
        shrink = math.cos(math.pi / p.n_polytope)  # inscribed polygon stays inside the ellipse

        lower = np.full(self.solver.m, -np.inf)
        upper = np.full(self.solver.m, np.inf)
        r = 0
        for w in self.lat_scenarios:
            drift = w * steps / n
            upper[r:r + n] = tube.bounds[:n] - phi_d - drift
            r += n
            upper[r:r + n] = tube.bounds[:n] + phi_d + drift
            r += n
        for i, (cx, cy) in enumerate(self._poly_dirs):
            h = shrink * np.sqrt((cx * axm) ** 2 + (cy * aym) ** 2)
            upper[r:r + n] = h - cx * a_x_ref - cy * (ay_ff - assist)
            r += n
        lower[r:r + n] = -p.u_y_max
        upper[r:r + n] = p.u_y_max
        lower[r + n:r + 2 * n] = -p.u_x_max
        upper[r + n:r + 2 * n] = p.u_x_max
        lower[r + 2 * n:] = 0.0
        upper[r + 2 * n:] = 4.0

        x, info = self.solver.solve(q, lower, upper,
                                    max_iter=max_iter or p.max_iter, eps=eps or p.eps)
        u_y0 = float(x[0])
        u_x0 = float(x[n])
        info["u_y"] = x[:n].copy()
        info["u_x"] = x[n:2 * n].copy()
        info["slack_max"] = float(np.max(x[2 * n:]))
        return float(a_x_ref[0] + u_x0), float(ay_ff[0] + u_y0), info


@dataclass
class AccelTrackerParams:
    mass_est: float = 760.0
    wheelbase_est: float = 3.0
    lf_est: float = 1.60
    lr_est: float = 1.40
    c_alpha_f_est: float = 145e3
    c_alpha_r_est: float = 185e3
    mu_est: float = 1.5
    downforce_est: float = 1.15    # N per (m/s)^2, total
    aero_front_share: float = 0.45
    drag_est: float = 0.52        # 0.5 * rho * cd_a estimate
    roll_est: float = 170.0
    engine_force_est: float = 6800.0
    power_est: float = 330e3
    brake_force_est: float = 15500.0
    kp_long: float = 0.06
    ki_long: float = 0.05
    kp_lat: float = 0.3
    ki_lat: float = 1.0
    integrator_limit: float = 5.0
    deadband_n: float = 120.0


class AccelTracker:
    """PI acceleration matching with physical feedforward (100 Hz)."""

    def __init__(self, params: AccelTrackerParams | None = None, dt: float = 0.01):
        self.p = params or AccelTrackerParams()
        self.dt = dt
        self._int_long = 0.0
        self._int_lat = 0.0

    def reset(self) -> None:
        self._int_long = 0.0
        self._int_lat = 0.0

    def step(self, a_x_target: float, a_y_target: float,
             a_x_meas: float, a_y_meas: float, v: float,
             bank_assist: float = 0.0) -> tuple[float, float, float]:
        """Returns (delta_target, throttle, brake)."""
        p = self.p
        v_safe = max(v, 3.0)

        # Lateral feedforward: kinematic steering for the full path curvature
        # plus the slip-angle difference from the inverted saturating tire
        # curve. Banking carries part of the force, so only the tire share
        # drives the slip terms; near the grip limit the needed slip grows far
        # beyond the linear estimate, which is exactly where this matters.
        tire_ay = a_y_target - bank_assist
        fy_f = p.mass_est * tire_ay * p.lr_est / p.wheelbase_est
        fy_r = p.mass_est * tire_ay * p.lf_est / p.wheelbase_est
        df = p.downforce_est * v * v
        grip_f = p.mu_est * (p.mass_est * GRAVITY * p.lr_est / p.wheelbase_est
                             + p.aero_front_share * df)
        grip_r = p.mu_est * (p.mass_est * GRAVITY * p.lf_est / p.wheelbase_est
                             + (1.0 - p.aero_front_share) * df)
        alpha_f = _inverse_tire(fy_f, p.c_alpha_f_est, grip_f)
        alpha_r = _inverse_tire(fy_r, p.c_alpha_r_est, grip_r)
        delta_ff = math.atan(p.wheelbase_est * a_y_target / (v_safe * v_safe)) \
            + alpha_f - alpha_r
        err_lat = a_y_target - a_y_meas
        self._int_lat = _clamp(self._int_lat + err_lat * self.dt,
                               p.integrator_limit)
        corr = (p.kp_lat * err_lat + p.ki_lat * self._int_lat) \
            * p.wheelbase_est / (v_safe * v_safe)
        delta_target = delta_ff + corr

        # Longitudinal: force balance feedforward + PI on the accel error.
        err_long = a_x_target - a_x_meas
        self._int_long = _clamp(self._int_long + err_long * self.dt,
                                p.integrator_limit)
        pi = p.kp_long * err_long + p.ki_long * self._int_long
        force = p.mass_est * a_x_target + p.drag_est * v * v + p.roll_est
        throttle = brake = 0.0
        if force >= -p.deadband_n:
            f_max = min(p.engine_force_est, p.power_est / v_safe)
            throttle = _clamp(max(0.0, force) / f_max + pi, 1.0, lo=0.0)
        else:
            brake = _clamp(-force / p.brake_force_est - pi, 1.0, lo=0.0)
        return delta_target, throttle, brake


def _clamp(x: float, hi: float, lo: float | None = None) -> float:
    lo = -hi if lo is None else lo
    return max(lo, min(hi, x))


def _inverse_tire(force: float, c_alpha: float, f_max: float) -> float:
    """Slip angle producing `force` on a saturating arctangent tire curve."""
    if f_max < 1.0:
        return 0.0
    u = _clamp(force / f_max, 0.97)
    return math.tan(0.5 * math.pi * u) * 2.0 * f_max / (math.pi * c_alpha)


@dataclass
class SteeringCascadeParams:
    kp: float = 0.4
    ki: float = 4.0
    integrator_limit: float = math.radians(2.5)
    rate_limit: float = math.radians(3.0)  # per 10 ms cycle
    delta_limit: float = 0.30


class SteeringCascade:
    """PI loop on reported actuator angle; removes constant offsets."""

    def __init__(self, params: SteeringCascadeParams | None = None, dt: float = 0.01):
        self.p = params or SteeringCascadeParams()
        self.dt = dt
        self._int = 0.0
        self._last_req: float | None = None

    def reset(self) -> None:
        self._int = 0.0
        self._last_req = None

    def step(self, delta_target: float, delta_actual: float) -> float:
        p = self.p
        err = delta_target - delta_actual
        self._int = _clamp(self._int + p.ki * err * self.dt, p.integrator_limit)
        req = delta_target + p.kp * err + self._int
        req = _clamp(req, p.delta_limit)
        if self._last_req is not None:
            req = _clamp(req, self._last_req + p.rate_limit, lo=self._last_req - p.rate_limit)
        self._last_req = req
        return req
