"""Point-set geometry kernels: sampling, grouping, interpolation, depth
binning and camera/LiDAR coordinate transforms.

Everything here is plain numpy on float64 arrays.  Deterministic
tie-breaking is part of every contract: equal distances resolve to the
smaller index, so identical inputs give identical outputs bit for bit.

Frames: LiDAR x forward / y left / z up; rectified camera x right /
y down / z forward; image u along width, v along height.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    """Inputs violate a geometry contract."""


class CalibrationError(ValueError):
    """Malformed or singular calibration matrices."""


@dataclass
class PointSet:
    """coords [N, 3] plus an optional per-point feature block [N, C]."""

    coords: np.ndarray
    feats: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise GeometryError(f"coords must be [N,3], got {self.coords.shape}")
        if self.feats is not None:
            self.feats = np.asarray(self.feats, dtype=np.float64)
            if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0]:
                raise GeometryError(f"feats must be [N,C] aligned with coords, got {self.feats.shape}")

    def __len__(self):
        return self.coords.shape[0]


# -- sampling and grouping ---------------------------------------------------


def farthest_point_sampling(coords: np.ndarray, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min sampling of m indices; ties go to the smaller index.

    The first pick is ``start`` (default 0) so results are reproducible
    without a random source.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"need 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= start < n:
        raise GeometryError(f"start index {start} out of range")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    best = np.sum((coords - coords[start]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(best))  # argmax takes the first max: smaller index
        chosen[i] = nxt
        best = np.minimum(best, np.sum((coords - coords[nxt]) ** 2, axis=1))
    return chosen


def knn_group(queries: np.ndarray, coords: np.ndarray, k: int) -> np.ndarray:
    """[Mq, k] indices of the k nearest coords per query, each row sorted
    ascending by (distance, index)."""
    queries = np.asarray(queries, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= k <= n:
        raise GeometryError(f"need 1 <= k <= N, got k={k}, N={n}")
    d2 = np.sum((queries[:, None, :] - coords[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")  # stable: equal distances keep index order
    return order[:, :k].astype(np.int64)


def idw_interpolate(target: np.ndarray, neighbors: PointSet, k: int = 3, p: float = 2.0) -> np.ndarray:
    """Inverse-distance-weighted feature at one target coordinate.

    Weights are 1/d^p over the k nearest neighbor points; a neighbor
    within 1e-10 of the target short-circuits to its feature row exactly.
    """
    target = np.asarray(target, dtype=np.float64).reshape(3)
    if neighbors.feats is None or len(neighbors) == 0:
        raise GeometryError("idw needs a non-empty neighbor set with features")
    k_eff = min(k, len(neighbors))
    idx = knn_group(target[None, :], neighbors.coords, k_eff)[0]
    d = np.sqrt(np.sum((neighbors.coords[idx] - target) ** 2, axis=1))
    exact = np.nonzero(d < 1e-10)[0]
    if exact.size:
        return neighbors.feats[idx[exact[0]]].copy()
    w = 1.0 / d ** p
    return (w[:, None] * neighbors.feats[idx]).sum(axis=0) / w.sum()


# -- grid interpolation -------------------------------------------------------


def clamp_coord(c: np.ndarray, n: int):
    """Clamp continuous grid coordinates to [0, n-1]; also report whether
    any clamping happened (callers flag out-of-bounds reads)."""
    c = np.asarray(c, dtype=np.float64)
    clamped = np.clip(c, 0.0, n - 1.0)
    return clamped, bool(np.any(clamped != c))


def bilinear_sample(grid: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Sample grid [H, W, C] at a single continuous (u, v) -> [C].

    u runs along W, v along H; out-of-range positions clamp to the border.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3:
        raise GeometryError(f"grid must be [H,W,C], got {grid.shape}")
    h, w, _ = grid.shape
    u, _ = clamp_coord(np.asarray(uv, dtype=np.float64)[0], w)
    v, _ = clamp_coord(np.asarray(uv, dtype=np.float64)[1], h)
    u0 = min(int(np.floor(u)), w - 2) if w > 1 else 0
    v0 = min(int(np.floor(v)), h - 2) if h > 1 else 0
    u1, v1 = min(u0 + 1, w - 1), min(v0 + 1, h - 1)
    fu, fv = u - u0, v - v0
    return ((1 - fu) * (1 - fv) * grid[v0, u0] + fu * (1 - fv) * grid[v0, u1]
            + (1 - fu) * fv * grid[v1, u0] + fu * fv * grid[v1, u1])


def trilinear_sample(volume: np.ndarray, uvd: np.ndarray) -> np.ndarray:
    """Sample volume [H, W, D, C] at a single continuous (u, v, d) -> [C]."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.ndim != 4:
        raise GeometryError(f"volume must be [H,W,D,C], got {volume.shape}")
    h, w, d, _ = volume.shape
    pos = np.asarray(uvd, dtype=np.float64)
    u, _ = clamp_coord(pos[0], w)
    v, _ = clamp_coord(pos[1], h)
    z, _ = clamp_coord(pos[2], d)
    u0 = min(int(np.floor(u)), w - 2) if w > 1 else 0
    v0 = min(int(np.floor(v)), h - 2) if h > 1 else 0
    z0 = min(int(np.floor(z)), d - 2) if d > 1 else 0
    u1, v1, z1 = min(u0 + 1, w - 1), min(v0 + 1, h - 1), min(z0 + 1, d - 1)
    fu, fv, fz = u - u0, v - v0, z - z0
    out = 0.0
    for cv, wv in ((v0, 1 - fv), (v1, fv)):
        for cu, wu in ((u0, 1 - fu), (u1, fu)):
            for cz, wz in ((z0, 1 - fz), (z1, fz)):
                out = out + wv * wu * wz * volume[cv, cu, cz]
    return out


# -- LID depth binning ---------------------------------------------------------
#
# Bin widths grow linearly with depth: edge(i) = d_min + (d_max - d_min)
# * i*(i+1) / (D*(D+1)).  Near bins are fine, far bins are coarse.


@dataclass
class LidBinning:
    d_min: float = 0.0
    d_max: float = 70.4
    n_bins: int = 80
    edges: np.ndarray = field(init=False)

    def __post_init__(self):
        if not (self.d_max > self.d_min and self.n_bins >= 1):
            raise GeometryError("need d_max > d_min and n_bins >= 1")
        i = np.arange(self.n_bins + 1, dtype=np.float64)
        self.edges = self.d_min + (self.d_max - self.d_min) * i * (i + 1) / (self.n_bins * (self.n_bins + 1))

    def width(self, b) -> np.ndarray:
        return self.edges[np.asarray(b) + 1] - self.edges[np.asarray(b)]


def lid_bin_edges(binning: LidBinning) -> np.ndarray:
    return binning.edges.copy()


def lid_encode(depth, binning: LidBinning):
    """depth -> (bin index, fractional residual inside the bin).

    Depths outside [d_min, d_max] clamp (callers decide whether to flag).
    Bins are half-open except the last, which closes at d_max so the
    encode/decode round trip is exact across the whole range; there the
    residual reaches 1.0.
    """
    d = np.asarray(depth, dtype=np.float64)
    scalar = d.ndim == 0
    d = np.clip(np.atleast_1d(d), binning.d_min, binning.d_max)
    span = binning.d_max - binning.d_min
    s = (d - binning.d_min) / span * binning.n_bins * (binning.n_bins + 1)
    b = np.floor((-1.0 + np.sqrt(1.0 + 4.0 * s)) / 2.0).astype(np.int64)
    b = np.clip(b, 0, binning.n_bins - 1)
    # guard the quadratic inversion against float rounding at bin edges
    b = np.where(d < binning.edges[b], b - 1, b)
    b = np.clip(b, 0, binning.n_bins - 1)
    b = np.where(d >= binning.edges[b + 1], b + 1, b)
    b = np.clip(b, 0, binning.n_bins - 1)
    res = (d - binning.edges[b]) / binning.width(b)
    if scalar:
        return int(b[0]), float(res[0])
    return b, res


def lid_decode(b, residual, binning: LidBinning):
    """(bin, residual) -> depth, the exact inverse of lid_encode."""
    b_arr = np.asarray(b)
    if np.any(b_arr < 0) or np.any(b_arr >= binning.n_bins):
        raise GeometryError(f"bin index out of [0, {binning.n_bins})")
    out = binning.edges[b_arr] + np.asarray(residual, dtype=np.float64) * binning.width(b_arr)
    if np.isscalar(b) or (isinstance(b, np.ndarray) and b.ndim == 0):
        return float(out)
    return out


# -- calibration ------------------------------------------------------------------


def _homogeneous(mat34: np.ndarray) -> np.ndarray:
    out = np.eye(4)
    out[:3, :] = mat34
    return out


class Calibration:
    """KITTI-style projective calibration.

    p2             [3,4] rectified camera projection
    r0_rect        [3,3] reference-to-rectified rotation
    tr_velo_to_cam [3,4] LiDAR-to-reference-camera transform

    The inverse maps are precomputed; singular inputs fail here rather
    than at first use.
    """

    def __init__(self, p2, r0_rect, tr_velo_to_cam):
        self.p2 = np.asarray(p2, dtype=np.float64)
        self.r0_rect = np.asarray(r0_rect, dtype=np.float64)
        self.tr_velo_to_cam = np.asarray(tr_velo_to_cam, dtype=np.float64)
        if self.p2.shape != (3, 4) or self.r0_rect.shape != (3, 3) or self.tr_velo_to_cam.shape != (3, 4):
            raise CalibrationError(
                f"bad shapes: P2 {self.p2.shape}, R0 {self.r0_rect.shape}, Tr {self.tr_velo_to_cam.shape}")
        for name, arr in (("P2", self.p2), ("R0_rect", self.r0_rect), ("Tr_velo_to_cam", self.tr_velo_to_cam)):
            if not np.all(np.isfinite(arr)):
                raise CalibrationError(f"non-finite entries in {name}")
        try:
            r0_h = np.eye(4)
            r0_h[:3, :3] = self.r0_rect
            self._velo_to_rect = r0_h @ _homogeneous(self.tr_velo_to_cam)
            self._rect_to_velo = np.linalg.inv(self._velo_to_rect)
            self._k_inv = np.linalg.inv(self.p2[:, :3])
        except np.linalg.LinAlgError as exc:
            raise CalibrationError(f"singular calibration: {exc}") from exc

    @classmethod
    def identity(cls, fx: float = 1.0, fy: float = 1.0, cx: float = 0.0, cy: float = 0.0) -> "Calibration":
        p2 = np.array([[fx, 0.0, cx, 0.0], [0.0, fy, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
        return cls(p2, np.eye(3), np.hstack([np.eye(3), np.zeros((3, 1))]))

    @property
    def k_inv(self) -> np.ndarray:
        """Inverse of the left 3x3 of P2 (image -> rectified camera rays)."""
        return self._k_inv

    @property
    def rect_to_velo(self) -> np.ndarray:
        """[4,4] rectified camera -> LiDAR."""
        return self._rect_to_velo

    @property
    def velo_to_rect(self) -> np.ndarray:
        """[4,4] LiDAR -> rectified camera."""
        return self._velo_to_rect

    # points are [N,3] or [3]; single points come back with their shape

    def lidar_to_camera(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        single = pts.ndim == 1
        p = np.atleast_2d(pts)
        out = p @ self._velo_to_rect[:3, :3].T + self._velo_to_rect[:3, 3]
        return out[0] if single else out

    def camera_to_lidar(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        single = pts.ndim == 1
        p = np.atleast_2d(pts)
        out = p @ self._rect_to_velo[:3, :3].T + self._rect_to_velo[:3, 3]
        return out[0] if single else out

    def project_to_image(self, pts_cam: np.ndarray):
        """Rectified-camera points -> (uv [N,2], depth [N]).

        Raises for non-positive projective depth; use project_points for
        the masked bulk variant.
        """
        pts_cam = np.asarray(pts_cam, dtype=np.float64)
        single = pts_cam.ndim == 1
        p = np.atleast_2d(pts_cam)
        h = p @ self.p2[:, :3].T + self.p2[:, 3]
        depth = h[:, 2]
        if np.any(depth <= 0.0):
            raise GeometryError("point at or behind the image plane")
        uv = h[:, :2] / depth[:, None]
        if single:
            return uv[0], float(depth[0])
        return uv, depth

    def project_points(self, pts_lidar: np.ndarray):
        """LiDAR points -> (uv [N,2], depth [N], in-front mask).

        Rows with depth <= 0 carry zeros in uv and False in the mask.
        """
        cam = self.lidar_to_camera(np.atleast_2d(np.asarray(pts_lidar, dtype=np.float64)))
        h = cam @ self.p2[:, :3].T + self.p2[:, 3]
        depth = h[:, 2]
        ok = depth > 1e-9
        uv = np.zeros((cam.shape[0], 2))
        uv[ok] = h[ok, :2] / depth[ok, None]
        return uv, depth, ok

    def image_to_camera(self, uv: np.ndarray, depth) -> np.ndarray:
        """(u, v, projective depth) -> rectified-camera point; inverse of
        project_to_image."""
        uv = np.asarray(uv, dtype=np.float64)
        single = uv.ndim == 1
        uvm = np.atleast_2d(uv)
        d = np.atleast_1d(np.asarray(depth, dtype=np.float64))
        target = np.stack([uvm[:, 0] * d, uvm[:, 1] * d, d], axis=1) - self.p2[:, 3]
        out = target @ self._k_inv.T
        return out[0] if single else out

    def image_to_lidar(self, uv: np.ndarray, depth) -> np.ndarray:
        return self.camera_to_lidar(self.image_to_camera(uv, depth))


def lidar_to_camera(p: np.ndarray, calib: Calibration) -> np.ndarray:
    return calib.lidar_to_camera(p)


def camera_to_lidar(p: np.ndarray, calib: Calibration) -> np.ndarray:
    return calib.camera_to_lidar(p)


def project_to_image(p_cam: np.ndarray, calib: Calibration):
    return calib.project_to_image(p_cam)


# -- scene cropping ------------------------------------------------------------

SCENE_BOUNDS = ((0.0, 70.4), (-40.0, 40.0), (-3.0, 1.0))  # LiDAR x/y/z extents


def crop_points(points: PointSet, bounds=SCENE_BOUNDS):
    """Drop points outside the axis-aligned scene bounds.

    Returns (cropped PointSet, number removed); bounds are closed.
    """
    c = points.coords
    keep = np.ones(len(points), dtype=bool)
    for axis, (lo, hi) in enumerate(bounds):
        keep &= (c[:, axis] >= lo) & (c[:, axis] <= hi)
    removed = int((~keep).sum())
    feats = points.feats[keep] if points.feats is not None else None
    return PointSet(c[keep], feats), removed
