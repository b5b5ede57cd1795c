"""Geometric detection pipelines over synthetic sensor data.

Point-cloud preprocessing runs three stages in a fixed order: conditional
removal (ROI crop in vehicle coordinates), voxel downsampling (per-axis mean
per occupied voxel, far points passed through), and a ray ground filter.
Object detection is a two-stage grid/Euclidean clustering; camera ranging
recovers distance from bounding-box height through a pinhole model; the radar
path gates targets on absolute velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class PointCloud:
    """Points (N, 4) as x, y, z, intensity in the vehicle frame."""

    points: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError("point cloud must be (N, 4)")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Detection:
    """Single object detection in the sensor/vehicle frame."""

    x: float
    y: float
    pipeline: str
    timestamp: float
    z: float | None = None
    heading: float | None = None
    v_rel: float | None = None
    extent: tuple[float, float, float] | None = None


@dataclass(frozen=True)
class CameraBBox:
    u: float            # box center column, px
    v: float            # box center row, px
    width_px: float
    height_px: float
    focal_px: float
    vehicle_height: float = 1.2
    width_height_ratio: float = 1.583  # head-on w/h of the known vehicle


@dataclass
class RoiBounds:
    lateral: float = 20.0
    longitudinal_back: float = -10.0
    longitudinal_fwd: float = 250.0
    z_min: float = -1.0
    z_max: float = 3.0


@dataclass
class PreprocessConfig:
    roi: RoiBounds = field(default_factory=RoiBounds)
    voxel_size: tuple[float, float, float] = (0.15, 0.10, 0.05)
    voxel_far_threshold: float = 150.0
    ground_slope_deg: float = 12.0
    ground_height_margin: float = 0.15
    ground_azimuth_bin_deg: float = 0.8
    sensor_height: float = 0.6


def conditional_removal(cloud: PointCloud, roi: RoiBounds) -> PointCloud:
    """Keep points inside the ROI box; order preserved."""
    p = cloud.points
    keep = ((p[:, 0] >= roi.longitudinal_back) & (p[:, 0] <= roi.longitudinal_fwd)
            & (np.abs(p[:, 1]) <= roi.lateral)
            & (p[:, 2] >= roi.z_min) & (p[:, 2] <= roi.z_max))
    return PointCloud(points=p[keep], timestamp=cloud.timestamp)


def voxel_downsample(cloud: PointCloud, voxel_size=(0.15, 0.10, 0.05),
                     far_threshold: float = 150.0) -> PointCloud:
    """One output point per occupied voxel (per-axis mean); far points pass through."""
    p = cloud.points
    if len(p) == 0:
        return cloud
    rng_xy = np.hypot(p[:, 0], p[:, 1])
    near = rng_xy <= far_threshold
    near_pts = p[near]
    far_pts = p[~near]
    if len(near_pts):
        size = np.asarray(voxel_size)
        keys = np.floor(near_pts[:, :3] / size).astype(np.int64)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        sums = np.zeros((len(uniq), 4))
        np.add.at(sums, inv, near_pts)
        counts = np.bincount(inv, minlength=len(uniq)).astype(float)
        voxelized = sums / counts[:, None]
    else:
        voxelized = near_pts
    return PointCloud(points=np.vstack([voxelized, far_pts]), timestamp=cloud.timestamp)


def ray_ground_filter(cloud: PointCloud, slope_deg: float = 12.0,
                      height_margin: float = 0.15, azimuth_bin_deg: float = 0.8,
                      sensor_height: float = 0.6) -> PointCloud:
    """Remove ground points by walking each azimuth ray outward.

    A point is ground when its slope relative to the previous ground point on
    the same ray stays below the threshold, or when it sits within the height
    margin of the extrapolated ground. Everything else is kept.
    """
    p = cloud.points
    if len(p) == 0:
        return cloud
    az = np.arctan2(p[:, 1], p[:, 0])
    r = np.hypot(p[:, 0], p[:, 1])
    nbins = int(round(360.0 / azimuth_bin_deg))
    bins = np.minimum(((az + math.pi) / (2 * math.pi) * nbins).astype(int), nbins - 1)
    slope_tan = math.tan(math.radians(slope_deg))

    order = np.lexsort((r, bins))
    keep = np.zeros(len(p), dtype=bool)
    i = 0
    while i < len(order):
        j = i
        b = bins[order[i]]
        prev_r = 0.0
        prev_z = -sensor_height
        while j < len(order) and bins[order[j]] == b:
            k = order[j]
            dr = r[k] - prev_r
            dz = p[k, 2] - prev_z
            is_ground = False
            if dr > 1e-6 and abs(dz) / dr <= slope_tan:
                is_ground = True
            elif abs(dz) <= height_margin:
                is_ground = True
            if is_ground:
                prev_r, prev_z = r[k], p[k, 2]
            else:
                keep[k] = True
            j += 1
        i = j
    return PointCloud(points=p[keep], timestamp=cloud.timestamp)


def preprocess(cloud: PointCloud, cfg: PreprocessConfig | None = None) -> PointCloud:
    """Conditional removal, voxel downsampling, ground filter — in that order."""
    cfg = cfg or PreprocessConfig()
    out = conditional_removal(cloud, cfg.roi)
    out = voxel_downsample(out, cfg.voxel_size, cfg.voxel_far_threshold)
    out = ray_ground_filter(out, cfg.ground_slope_deg, cfg.ground_height_margin,
                            cfg.ground_azimuth_bin_deg, cfg.sensor_height)
    return out


# --------------------------------------------------------------------------
# clustering
# --------------------------------------------------------------------------

def _connected_components(points: np.ndarray, radius: float) -> list[np.ndarray]:
    """Single-linkage clusters: connected components of the radius graph."""
    n = len(points)
    if n == 0:
        return []
    tree = cKDTree(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    parent = np.arange(n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(n)])
    return [np.flatnonzero(roots == r) for r in np.unique(roots)]


@dataclass
class ClusterConfig:
    stage1_radius: float = 0.5
    stage2_radius: float = 2.0
    vehicle_size: tuple[float, float, float] = (6.0, 2.5, 1.5)
    min_points: int = 3


def cluster_detect(cloud: PointCloud, cfg: ClusterConfig | None = None) -> list[Detection]:
    """Two-stage Euclidean clustering into at most one box per object.

    Stage 1 finds small part clusters and drops anything already larger than a
    race vehicle (walls). Stage 2 merges the surviving parts into objects and
    applies the size threshold again. Boxes are axis-aligned with the ego.
    """
    cfg = cfg or ClusterConfig()
    p = cloud.points
    if len(p) == 0:
        return []
    lmax, wmax, hmax = cfg.vehicle_size

    stage1 = []
    for idx in _connected_components(p[:, :2], cfg.stage1_radius):
        if len(idx) < cfg.min_points:
            continue
        ext = p[idx, :3].max(axis=0) - p[idx, :3].min(axis=0)
        if ext[0] > lmax or ext[1] > wmax or ext[2] > hmax:
            continue
        stage1.append(idx)
    if not stage1:
        return []

    centroids = np.array([p[idx, :2].mean(axis=0) for idx in stage1])
    detections = []
    for group in _connected_components(centroids, cfg.stage2_radius):
        members = np.concatenate([stage1[g] for g in group])
        lo = p[members, :3].min(axis=0)
        hi = p[members, :3].max(axis=0)
        ext = hi - lo
        if ext[0] > lmax or ext[1] > wmax or ext[2] > hmax:
            continue
        center = 0.5 * (lo + hi)
        detections.append(Detection(
            x=float(center[0]), y=float(center[1]), z=float(center[2]),
            heading=0.0, extent=(float(ext[0]), float(ext[1]), float(ext[2])),
            pipeline="lidar_cluster", timestamp=cloud.timestamp))
    detections.sort(key=lambda d: (d.x, d.y))
    return detections


# --------------------------------------------------------------------------
# camera ranging
# --------------------------------------------------------------------------

def camera_range(bbox: CameraBBox, ego_pose=None, track=None,
                 length_width_ratio: float = 2.6,
                 timestamp: float = 0.0) -> Detection:
    """Pinhole range recovery: d = f*h / n, lateral offset from the pixel column.

    Yaw magnitude comes from comparing the observed width/height ratio against
    the head-on ratio; of the two mirror solutions the one closer to the track
    tangent at the object is picked (both are returned as +/- when no track).
    """
    if bbox.height_px < 1.0:
        raise ValueError("bounding box below 1 px")
    d = bbox.focal_px * bbox.vehicle_height / bbox.height_px
    lateral = -bbox.u * d / bbox.focal_px  # +u right in image -> -y in vehicle frame

    ratio_obs = bbox.width_px / bbox.height_px
    r0 = bbox.width_height_ratio
    # Apparent width of a rotated box: w*cos(g) + l*sin(g).
    c = min(ratio_obs / r0, math.hypot(1.0, length_width_ratio))
    phase = math.atan2(length_width_ratio, 1.0)
    amp = math.hypot(1.0, length_width_ratio)
    if c <= 1.0:
        yaw_mag = 0.0
    else:
        yaw_mag = phase - math.acos(min(1.0, c / amp))
        yaw_mag = max(0.0, yaw_mag)

    heading = None
    if yaw_mag == 0.0:
        heading = 0.0
    elif ego_pose is not None and track is not None:
        ex, ey, epsi = ego_pose
        gx = ex + d * math.cos(epsi) - lateral * math.sin(epsi)
        gy = ey + d * math.sin(epsi) + lateral * math.cos(epsi)
        try:
            pose = track.to_frenet(gx, gy)
            tangent = track.heading_at(pose.s)
            rel_tangent = tangent - epsi
            heading = yaw_mag if abs(yaw_mag - rel_tangent) < abs(-yaw_mag - rel_tangent) \
                else -yaw_mag
        except Exception:
            heading = yaw_mag
    else:
        heading = yaw_mag
    return Detection(x=d, y=lateral, heading=heading, pipeline="camera",
                     timestamp=timestamp)


# --------------------------------------------------------------------------
# radar gating
# --------------------------------------------------------------------------

MAX_RADAR_TARGETS = 64


def radar_filter(targets, ego_speed: float, threshold: float = 5.0,
                 timestamp: float = 0.0) -> list[Detection]:
    """Keep targets whose absolute velocity exceeds the threshold.

    `targets` are ((x, y), v_rel) pairs in the vehicle frame; the static world
    returns v_rel ~ -ego_speed and is dropped.
    """
    if len(targets) > MAX_RADAR_TARGETS:
        raise ValueError(f"radar supplies at most {MAX_RADAR_TARGETS} targets per cycle")
    out = []
    for (x, y), v_rel in targets:
        v_abs = ego_speed + v_rel
        if abs(v_abs) > threshold:
            out.append(Detection(x=float(x), y=float(y), v_rel=float(v_rel),
                                 pipeline="radar", timestamp=timestamp))
    return out
