"""Offline racing line: path optimization, quasi-steady velocity profile, lap time.

The path optimizer solves a box-constrained quadratic program over lateral
offsets from the centerline, with the curvature linearized around the current
path and re-linearized a few times. Two objectives are supported: summed
squared curvature, and summed squared curvature *rate* (which trades a little
apex speed for much smoother steering demand).

The velocity profile is a three-pass solver (lateral cap, forward traction and
power, backward braking) over speed-dependent combined acceleration limits.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .track import TrackMap, wrap_angle


@dataclass
class GGLimits:
    """Speed-dependent acceleration envelope plus power and top-speed caps.

    `ax_max` is the tire-limited longitudinal capability (used for braking and
    as the traction ceiling); the engine power cap applies on top of it when
    accelerating. `p` is the combination exponent: 1 is a diamond, 2 an ellipse.
    """

    v_grid: np.ndarray
    ax_table: np.ndarray
    ay_table: np.ndarray
    p: float = 2.0
    power_w: float = 340e3
    v_cap: float = 88.0

    def ax_max(self, v):
        return np.interp(v, self.v_grid, self.ax_table)

    def ay_max(self, v):
        return np.interp(v, self.v_grid, self.ay_table)

    def combined_usage(self, ax, ay, v):
        """(ax/ax_max)^p + (ay/ay_max)^p; feasible iff <= 1."""
        return (np.abs(ax) / self.ax_max(v)) ** self.p + (np.abs(ay) / self.ay_max(v)) ** self.p

    def scaled(self, factor: float) -> "GGLimits":
        return GGLimits(self.v_grid, self.ax_table * factor, self.ay_table * factor,
                        self.p, self.power_w, self.v_cap)


@dataclass
class RacingLine:
    """Closed racing line sampled along its own arc length."""

    s: np.ndarray
    x: np.ndarray
    y: np.ndarray
    kappa: np.ndarray
    v: np.ndarray
    ax: np.ndarray
    lap_time_s: float = 0.0
    length: float = field(init=False)

    def __post_init__(self):
        seg = np.hypot(np.diff(self.x, append=self.x[:1]),
                       np.diff(self.y, append=self.y[:1]))
        self.length = float(np.sum(seg))

    def interp(self, s, values):
        s = np.asarray(s) % self.length
        s_ext = np.concatenate([self.s, [self.length]])
        v_ext = np.concatenate([values, values[:1]])
        return np.interp(s, s_ext, v_ext)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["s_m", "x_m", "y_m", "kappa_radpm", "v_mps", "ax_mps2"])
            for i in range(len(self.s)):
                writer.writerow([f"{self.s[i]:.4f}", f"{self.x[i]:.6f}", f"{self.y[i]:.6f}",
                                 f"{self.kappa[i]:.8f}", f"{self.v[i]:.4f}", f"{self.ax[i]:.4f}"])

    @classmethod
    def from_csv(cls, path) -> "RacingLine":
        data = np.genfromtxt(path, delimiter=",", skip_header=1)
        return cls(s=data[:, 0], x=data[:, 1], y=data[:, 2], kappa=data[:, 3],
                   v=data[:, 4], ax=data[:, 5])


class ProfileError(Exception):
    """Velocity profile could not be computed (curvature spike, bad inputs)."""


# --------------------------------------------------------------------------
# path optimization
# --------------------------------------------------------------------------

def _path_curvature(x: np.ndarray, y: np.ndarray, ds: np.ndarray) -> np.ndarray:
    """Discrete curvature of a closed polyline via central heading differences."""
    dx = np.roll(x, -1) - np.roll(x, 1)
    dy = np.roll(y, -1) - np.roll(y, 1)
    psi = np.arctan2(dy, dx)
    dpsi = np.mod(np.roll(psi, -1) - np.roll(psi, 1) + math.pi, 2.0 * math.pi) - math.pi
    return dpsi / (ds + np.roll(ds, -1))


def _seg_lengths(x, y):
    return np.hypot(np.roll(x, -1) - x, np.roll(y, -1) - y)


def _curvature_of_offsets(cx, cy, nx, ny, alpha):
    x = cx + alpha * nx
    y = cy + alpha * ny
    return _path_curvature(x, y, _seg_lengths(x, y))


def _curvature_jacobian(cx, cy, nx, ny, alpha, eps: float = 1e-4):
    """Sparse (banded) d kappa / d alpha estimated by grouped finite differences.

    kappa_i depends on alpha_{i-2..i+2} only, so perturbing every 5th offset
    simultaneously recovers the full Jacobian in 5 curvature evaluations.
    """
    n = len(alpha)
    k0 = _curvature_of_offsets(cx, cy, nx, ny, alpha)
    jac = np.zeros((n, n))
    idx = np.arange(n)
    for r in range(5):
        pert = alpha.copy()
        pert[r::5] += eps
        dk = (_curvature_of_offsets(cx, cy, nx, ny, pert) - k0) / eps
        for off in range(-2, 3):
            cols = idx[r::5]
            rows = (cols + off) % n
            jac[rows, cols] += dk[rows]
    return k0, jac


def optimize_path(track: TrackMap, mode: str = "min_curvature", margin: float = 1.2,
                  ds: float = 2.0, iterations: int = 3) -> RacingLine:
    """Optimize lateral offsets within the track corridor.

    mode 'min_curvature' minimizes sum kappa^2, mode 'min_curvature_rate'
    minimizes sum (dkappa/ds)^2. The returned line has zero velocity profile;
    run `velocity_profile` afterwards.
    """
    if mode not in ("min_curvature", "min_curvature_rate"):
        raise ValueError(f"unknown mode {mode!r}")
    ref = track.resample(ds)
    n = ref.n_nodes
    cx, cy = ref.x, ref.y
    nx = -ref._seg_dir[:, 1]
    ny = ref._seg_dir[:, 0]
    lo = -(ref.w_right - margin)
    hi = ref.w_left - margin
    if np.any(lo >= hi):
        raise ValueError("margin leaves no feasible corridor")

    alpha = np.zeros(n)
    reg = 1e-4
    for _ in range(iterations):
        k0, jac = _curvature_jacobian(cx, cy, nx, ny, alpha)
        if mode == "min_curvature_rate":
            seg = _seg_lengths(cx + alpha * nx, cy + alpha * ny)
            inv_ds = (1.0 / seg)[:, None]
            a_mat = (np.roll(jac, -1, axis=0) - jac) * inv_ds
            b_vec = (np.roll(k0, -1) - k0) / seg
        else:
            a_mat = jac
            b_vec = k0

        def obj(delta, a_mat=a_mat, b_vec=b_vec):
            r = b_vec + a_mat @ delta
            g = 2.0 * (a_mat.T @ r) + 2.0 * reg * delta
            return float(r @ r + reg * delta @ delta), g

        res = minimize(obj, np.zeros(n), jac=True, method="L-BFGS-B",
                       bounds=list(zip(lo - alpha, hi - alpha)),
                       options={"maxiter": 200, "ftol": 1e-14, "gtol": 1e-10})
        step = res.x

        def true_obj(a):
            k = _curvature_of_offsets(cx, cy, nx, ny, a)
            if mode == "min_curvature_rate":
                k = (np.roll(k, -1) - k) / _seg_lengths(cx + a * nx, cy + a * ny)
            return float(k @ k)

        # The linearization is only locally valid: backtrack on the true
        # objective so every outer iteration is an improvement.
        base = true_obj(alpha)
        best_alpha, best_val, moved = alpha, base, False
        for frac in (1.0, 0.5, 0.25, 0.125):
            cand = np.clip(alpha + frac * step, lo, hi)
            val = true_obj(cand)
            if val < best_val:
                best_alpha, best_val, moved = cand, val, True
        alpha = best_alpha
        if not moved or np.max(np.abs(step)) < 1e-4:
            break

    px = cx + alpha * nx
    py = cy + alpha * ny
    seg_out = np.hypot(np.roll(px, -1) - px, np.roll(py, -1) - py)
    s_out = np.concatenate(([0.0], np.cumsum(seg_out[:-1])))
    kappa = _path_curvature(px, py, seg_out)
    zeros = np.zeros(n)
    return RacingLine(s=s_out, x=px, y=py, kappa=kappa, v=zeros.copy(), ax=zeros.copy())


# --------------------------------------------------------------------------
# velocity profile
# --------------------------------------------------------------------------

def velocity_profile(line: RacingLine, gg: GGLimits, mass: float,
                     max_sweeps: int = 8) -> RacingLine:
    """Fill in v(s) and ax(s) for a closed path with known curvature.

    Three passes: a pointwise lateral cap (fixed-point in v because the limits
    are speed-dependent), a forward pass limited by the combined-acceleration
    remainder and engine power, and a backward pass limited by combined
    braking. Passes are swept until the profile is a periodic fixed point.
    """
    kappa = np.abs(line.kappa)
    n = len(kappa)
    seg = np.hypot(np.roll(line.x, -1) - line.x, np.roll(line.y, -1) - line.y)

    # Pointwise lateral cap.
    v = np.full(n, gg.v_cap)
    for _ in range(60):
        ay = gg.ay_max(v)
        with np.errstate(divide="ignore"):
            v_new = np.where(kappa > 1e-9, np.sqrt(ay / np.maximum(kappa, 1e-9)), gg.v_cap)
        v_new = np.minimum(v_new, gg.v_cap)
        if np.max(np.abs(v_new - v)) < 1e-10:
            v = v_new
            break
        v = v_new
    if np.any(v < 0.5):
        bad = int(np.argmin(v))
        raise ProfileError(f"curvature spike at sample {bad} (s={line.s[bad]:.1f} m) "
                           f"forces v={v[bad]:.2f} m/s")
    v_lat = v * (1.0 - 1e-9)

    eps = 1e-12

    def ax_remaining(vj, kj):
        ay = vj ** 2 * kj
        frac = min(1.0, (ay / max(gg.ay_max(vj), eps)) ** gg.p)
        return gg.ax_max(vj) * max(0.0, 1.0 - frac) ** (1.0 / gg.p)

    for _ in range(max_sweeps):
        v_prev_sweep = v.copy()
        # Forward: traction + power limited. The combined limit is evaluated at
        # the segment start, which is also where the audit evaluates usage.
        for i in range(2 * n):
            j = i % n
            k = (i + 1) % n
            ax_avail = min(ax_remaining(v[j], kappa[j]),
                           gg.power_w / (mass * max(v[j], 1.0)))
            v_reach = math.sqrt(max(0.0, v[j] ** 2 + 2.0 * ax_avail * seg[j]))
            v[k] = min(v[k], v_reach, v_lat[k])
        # Backward: combined braking. The usage limit is evaluated at the
        # segment start (the unknown), so solve u^2 <= v_j^2 + 2*ds*ax_rem(u)
        # for the largest feasible u by bisection; the left side grows and the
        # right side shrinks with u, so the crossing is unique.
        for i in range(2 * n, 0, -1):
            j = i % n
            jm = (i - 1) % n
            hi_u = min(v[jm], v_lat[jm])
            if hi_u ** 2 <= v[j] ** 2 + 2.0 * seg[jm] * ax_remaining(hi_u, kappa[jm]):
                v[jm] = hi_u
                continue
            lo_u = min(hi_u, v[j])
            for _ in range(40):
                mid = 0.5 * (lo_u + hi_u)
                if mid ** 2 <= v[j] ** 2 + 2.0 * seg[jm] * ax_remaining(mid, kappa[jm]):
                    lo_u = mid
                else:
                    hi_u = mid
                if hi_u - lo_u < 1e-12:
                    break
            v[jm] = lo_u
        if np.max(np.abs(v - v_prev_sweep)) < 1e-9:
            break

    ax = (np.roll(v, -1) ** 2 - v ** 2) / (2.0 * seg)
    return RacingLine(s=line.s, x=line.x, y=line.y, kappa=line.kappa,
                      v=v, ax=ax, lap_time_s=lap_time(seg, v))


def combined_limit_audit(line: RacingLine, gg: GGLimits) -> float:
    """Maximum combined-acceleration usage over the line (should be <= 1 + 1e-6)."""
    ay = line.v ** 2 * np.abs(line.kappa)
    return float(np.max(gg.combined_usage(line.ax, ay, line.v)))


# --------------------------------------------------------------------------
# lap time
# --------------------------------------------------------------------------

def lap_time(ds, v, n=None, kappa=None, xi=None, beta=None) -> float:
    """Travel time over a closed loop via the transformed arc-length integrand.

    `ds` are reference-line segment lengths. With offsets n and reference
    curvature kappa, the integrand per metre of reference line is
    (1 - n*kappa) / (v * cos(xi + beta)); the plain case reduces to ds / v.
    """
    ds = np.asarray(ds, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0.0):
        raise ValueError("lap_time requires v > 0 everywhere")
    scale = np.ones_like(v)
    if n is not None and kappa is not None:
        nk = np.asarray(n) * np.asarray(kappa)
        if np.any(np.abs(nk) >= 1.0):
            bad = int(np.argmax(np.abs(nk)))
            raise ValueError(f"|n*kappa| >= 1 at sample {bad}")
        scale = scale * (1.0 - nk)
    ang = np.zeros_like(v)
    if xi is not None:
        ang = ang + np.asarray(xi)
    if beta is not None:
        ang = ang + np.asarray(beta)
    if np.any(np.abs(ang) >= math.pi / 2):
        bad = int(np.argmax(np.abs(ang)))
        raise ValueError(f"|xi + beta| >= pi/2 at sample {bad}")
    integrand = scale / (v * np.cos(ang))
    # Trapezoid over segments of the closed loop.
    nxt = np.roll(integrand, -1)
    return float(np.sum(0.5 * (integrand + nxt) * ds))


def default_gg(ay_peak: float = 28.0, ax_peak: float = 19.0, mu_g: float = 13.6,
               downforce_gain: float = 1.5e-4, p: float = 2.0,
               power_w: float = 335e3, v_cap: float = 84.0) -> GGLimits:
    """Reference acceleration envelope: friction floor plus aero gain, capped.

    The defaults produce a lateral peak of ~28 m/s^2 in the 70+ m/s range,
    which is where the shipped plant saturates as well.
    """
    v = np.linspace(0.0, v_cap, 45)
    ay = np.minimum(ay_peak, mu_g * (1.0 + downforce_gain * v ** 2))
    ax = np.minimum(ax_peak, 0.93 * mu_g * (1.0 + downforce_gain * v ** 2))
    return GGLimits(v_grid=v, ax_table=ax, ay_table=ay, p=p, power_w=power_w, v_cap=v_cap)
