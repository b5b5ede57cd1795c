"""Closed-track geometry: centerline, Frenet conversions, banking and membership.

A track is described by an ordered list of centerline samples with lateral
widths to the left/right boundary and a 1D banking profile along arc length.
Arc length is always recomputed from the coordinates, never read from a file.
The lateral offset convention is left-positive everywhere in this package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

GRAVITY = 9.81

MAX_BANKING_RAD = math.radians(25.0)


class TrackError(Exception):
    """Base class for track loading/geometry failures."""


class TrackParseError(TrackError):
    """Malformed track file (bad row, bad header, non-monotonic s column)."""


class TrackValidationError(TrackError):
    """Track data violates a geometric invariant (open loop, widths, banking)."""


class OutOfCorridorError(TrackError):
    """Queried point is too far from the track to project reliably."""


@dataclass(frozen=True)
class FrenetPose:
    """Curvilinear pose: arc length s, left-positive lateral offset n, relative heading xi."""

    s: float
    n: float
    xi: float


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


class TrackMap:
    """Immutable closed-track map.

    Stores unique centerline nodes (the closing point is implicit), per-node
    widths and banking, and precomputed segment geometry for fast projection.
    Safe to share across threads after construction.
    """

    def __init__(self, x, y, w_left, w_right, banking, closed: bool = True,
                 min_corridor: float = 3.8):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        w_left = np.asarray(w_left, dtype=float)
        w_right = np.asarray(w_right, dtype=float)
        banking = np.asarray(banking, dtype=float)
        if x.shape != y.shape or x.ndim != 1:
            raise TrackValidationError("x/y must be matching 1D arrays")
        # Drop an explicit closing point so nodes are unique.
        if len(x) >= 2 and math.hypot(x[-1] - x[0], y[-1] - y[0]) <= 1e-6:
            x, y = x[:-1], y[:-1]
            w_left, w_right, banking = w_left[:-1], w_right[:-1], banking[:-1]
        if len(x) < 3:
            raise TrackValidationError("need at least 3 centerline samples")
        seg = np.hypot(np.diff(x, append=x[:1]), np.diff(y, append=y[:1]))
        if np.any(seg < 1e-9):
            raise TrackValidationError("duplicate consecutive centerline points")
        if closed:
            # A closing segment far longer than the rest means the data is not a loop.
            gap = seg[-1]
            limit = max(5.0 * float(np.median(seg[:-1])), 1e-6)
            if gap > limit:
                raise TrackValidationError(
                    f"track is not closed: gap {gap:.3f} m between last and first sample")
        if np.any(w_left + w_right < min_corridor):
            raise TrackValidationError("track narrower than the minimum corridor somewhere")
        if np.any(np.abs(banking) > MAX_BANKING_RAD + 1e-12):
            raise TrackValidationError("banking magnitude exceeds 25 deg")

        self.closed = closed
        self.x = x
        self.y = y
        self.w_left = w_left
        self.w_right = w_right
        self.banking = banking
        self.s = np.concatenate(([0.0], np.cumsum(seg[:-1])))
        self.total_length = float(self.s[-1] + seg[-1])

        # Per-segment unit directions and headings; segment i runs node i -> i+1 (mod N).
        dx = np.diff(x, append=x[:1])
        dy = np.diff(y, append=y[:1])
        self._seg_len = seg
        self._seg_dir = np.stack([dx / seg, dy / seg], axis=1)
        self._seg_heading = np.arctan2(dy, dx)
        # Node curvature from heading change across adjacent segments.
        dpsi = np.array([wrap_angle(self._seg_heading[i] - self._seg_heading[i - 1])
                         for i in range(len(x))])
        ds_node = 0.5 * (seg + np.roll(seg, 1))
        self._node_kappa = dpsi / ds_node

    @property
    def n_nodes(self) -> int:
        return len(self.x)

    # -- interpolation helpers -----------------------------------------------

    def _wrap_s(self, s: float) -> float:
        return float(s % self.total_length)

    def _segment_index(self, s: float) -> tuple[int, float]:
        """Segment containing arc length s and the offset into it."""
        s = self._wrap_s(s)
        i = int(np.searchsorted(self.s, s, side="right") - 1)
        i = max(0, min(i, self.n_nodes - 1))
        return i, s - self.s[i]

    def _interp_node_value(self, values: np.ndarray, s: float) -> float:
        i, ds = self._segment_index(s)
        j = (i + 1) % self.n_nodes
        f = ds / self._seg_len[i]
        return float(values[i] + f * (values[j] - values[i]))

    def banking_at(self, s: float) -> float:
        """Banking angle in rad at arc length s (linear interpolation, periodic)."""
        return self._interp_node_value(self.banking, s)

    def width_left_at(self, s: float) -> float:
        return self._interp_node_value(self.w_left, s)

    def width_right_at(self, s: float) -> float:
        return self._interp_node_value(self.w_right, s)

    def curvature_at(self, s: float) -> float:
        return self._interp_node_value(self._node_kappa, s)

    def heading_at(self, s: float) -> float:
        i, _ = self._segment_index(s)
        return float(self._seg_heading[i])

    # -- Frenet conversions ---------------------------------------------------

    def to_frenet(self, x: float, y: float, psi: float = 0.0,
                  s_hint: float | None = None) -> FrenetPose:
        """Project a global pose onto the centerline.

        A `s_hint` restricts the segment search to a local window, which keeps
        repeated queries O(1); the full track is searched when no hint is given
        or the windowed result looks invalid.
        """
        p = np.array([x, y])
        idx, t, d2 = self._project(p, s_hint)
        if s_hint is not None:
            # Fall back to a global search if the seeded window was off.
            w = self.width_left_at(self.s[idx]) + self.width_right_at(self.s[idx])
            if d2 > (2.0 * w) ** 2:
                idx, t, d2 = self._project(p, None)
        corridor = self.w_left[idx] + self.w_right[idx]
        if d2 > (2.0 * corridor) ** 2:
            raise OutOfCorridorError(
                f"point ({x:.1f}, {y:.1f}) is {math.sqrt(d2):.1f} m from the centerline")
        d = self._seg_dir[idx]
        rel = p - np.array([self.x[idx], self.y[idx]])
        n = d[0] * rel[1] - d[1] * rel[0]
        s = self._wrap_s(self.s[idx] + t)
        xi = wrap_angle(psi - self._seg_heading[idx])
        return FrenetPose(s=s, n=float(n), xi=xi)

    def _project(self, p: np.ndarray, s_hint: float | None,
                 window: int = 30) -> tuple[int, float, float]:
        if s_hint is None:
            cand = np.arange(self.n_nodes)
        else:
            i0, _ = self._segment_index(s_hint)
            cand = (np.arange(i0 - window, i0 + window + 1)) % self.n_nodes
        p0x = self.x[cand]
        p0y = self.y[cand]
        dirs = self._seg_dir[cand]
        lens = self._seg_len[cand]
        relx = p[0] - p0x
        rely = p[1] - p0y
        t = np.clip(relx * dirs[:, 0] + rely * dirs[:, 1], 0.0, lens)
        cx = p0x + t * dirs[:, 0]
        cy = p0y + t * dirs[:, 1]
        d2 = (p[0] - cx) ** 2 + (p[1] - cy) ** 2
        k = int(np.argmin(d2))
        return int(cand[k]), float(t[k]), float(d2[k])

    def from_frenet(self, pose: FrenetPose) -> tuple[float, float, float]:
        """Inverse of `to_frenet`: global (x, y, heading)."""
        i, ds = self._segment_index(pose.s)
        d = self._seg_dir[i]
        px = self.x[i] + ds * d[0] - pose.n * d[1]
        py = self.y[i] + ds * d[1] + pose.n * d[0]
        return float(px), float(py), wrap_angle(self._seg_heading[i] + pose.xi)

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        """True iff the point lies on the track, `margin` metres inside the boundary."""
        try:
            pose = self.to_frenet(x, y)
        except OutOfCorridorError:
            return False
        if pose.n >= 0.0:
            limit = self.width_left_at(pose.s)
        else:
            limit = self.width_right_at(pose.s)
        return abs(pose.n) <= limit - margin + 1e-9

    # -- derived geometry ------------------------------------------------------

    def resample(self, ds: float) -> "TrackMap":
        """New map with uniform node spacing close to `ds` (same geometry)."""
        n = max(8, int(round(self.total_length / ds)))
        s_new = np.linspace(0.0, self.total_length, n, endpoint=False)
        s_ext = np.concatenate([self.s, [self.total_length]])

        def per(v):
            return np.interp(s_new, s_ext, np.concatenate([v, v[:1]]))

        return TrackMap(per(self.x), per(self.y), per(self.w_left),
                        per(self.w_right), per(self.banking), closed=self.closed)

    def boundary_points(self, side: str) -> np.ndarray:
        """Polyline of the left or right boundary at the node locations."""
        sign = 1.0 if side == "left" else -1.0
        w = self.w_left if side == "left" else self.w_right
        normal = np.stack([-self._seg_dir[:, 1], self._seg_dir[:, 0]], axis=1)
        return np.stack([self.x, self.y], axis=1) + sign * w[:, None] * normal


TRACK_HEADER = ["x_m", "y_m", "w_left_m", "w_right_m", "banking_deg"]


def load_track(path, closed: bool = True) -> TrackMap:
    """Load a track CSV with columns x_m,y_m,w_left_m,w_right_m,banking_deg.

    An optional leading ``s_m`` column is tolerated but only sanity-checked
    (strictly increasing); arc length is recomputed from the coordinates.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TrackParseError(f"{path}: empty file")
        header = [h.strip() for h in header]
        has_s = header[:1] == ["s_m"]
        expected = (["s_m"] + TRACK_HEADER) if has_s else TRACK_HEADER
        if header != expected:
            raise TrackParseError(f"{path}: expected header {','.join(expected)}")
        prev_s = None
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(expected):
                raise TrackParseError(f"{path}:{line_no}: expected {len(expected)} columns")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise TrackParseError(f"{path}:{line_no}: {exc}") from None
            if has_s:
                if prev_s is not None and vals[0] <= prev_s:
                    raise TrackParseError(f"{path}:{line_no}: s column not increasing")
                prev_s = vals[0]
                vals = vals[1:]
            rows.append(vals)
    if len(rows) < 3:
        raise TrackParseError(f"{path}: need at least 3 samples")
    arr = np.array(rows)
    return TrackMap(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3],
                    np.radians(arr[:, 4]), closed=closed)


def save_track(track: TrackMap, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACK_HEADER)
        for i in range(track.n_nodes):
            writer.writerow([f"{track.x[i]:.6f}", f"{track.y[i]:.6f}",
                             f"{track.w_left[i]:.3f}", f"{track.w_right[i]:.3f}",
                             f"{math.degrees(track.banking[i]):.4f}"])
