"""Evaluation metrics: scale-aligned depth, relative-pose AUC, Sim(3)
alignment, and Chamfer completeness/accuracy.

All math here is float64.  Conventions: depths are meters; poses are
camera-to-world (X_world = R @ X_cam + t) with translations in meters;
rotation errors are geodesic degrees and translation errors centimeters when
thresholded against the 30-unit AUC cutoffs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, DomainError, ParameterError, ShapeError
from .layout import LayoutDescriptor
from .maskgen import MergeMask


@dataclass
class DepthMap:
    values: np.ndarray    # (H, W) meters
    validity: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError("depth values must be a 2-D grid")
        if self.validity is None:
            self.validity = np.ones(self.values.shape, dtype=bool)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.validity.shape != self.values.shape:
            raise ShapeError("validity mask must match depth shape")
        valid = self.values[self.validity]
        if valid.size and (not np.all(np.isfinite(valid)) or np.any(valid <= 0)):
            raise DomainError("valid depth entries must be positive and finite")


@dataclass
class PoseSet:
    rotations: np.ndarray     # (F, 3, 3) orthonormal, det +1
    translations: np.ndarray  # (F, 3) meters

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        if self.rotations.ndim != 3 or self.rotations.shape[1:] != (3, 3):
            raise ShapeError("rotations must be (frames, 3, 3)")
        if self.translations.shape != (self.rotations.shape[0], 3):
            raise ShapeError("translations must be (frames, 3)")
        eye = np.eye(3)
        for idx, rot in enumerate(self.rotations):
            if not np.allclose(rot.T @ rot, eye, atol=1e-6):
                raise DomainError(f"rotation {idx} is not orthonormal")
            if np.linalg.det(rot) < 0:
                raise DomainError(f"rotation {idx} has negative determinant")

    def __len__(self) -> int:
        return self.rotations.shape[0]


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3) meters

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise DomainError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# depth

def align_scale(pred: DepthMap, gt: DepthMap) -> float:
    """Least-squares global scale: s minimizing sum (s*pred - gt)^2."""
    both = pred.validity & gt.validity
    if not both.any():
        raise DomainError("no jointly valid pixels for scale alignment")
    p = pred.values[both]
    g = gt.values[both]
    denom = float(np.sum(p * p))
    if denom == 0.0:
        raise DomainError("predicted depth is identically zero on valid pixels")
    return float(np.sum(p * g) / denom)


@dataclass(frozen=True)
class DepthMetrics:
    l1: float
    delta_125: float


def depth_metrics(pred: DepthMap, gt: DepthMap,
                  exclude: np.ndarray | None = None) -> DepthMetrics:
    """Mean |d_hat - d| and the max(d_hat/d, d/d_hat) < 1.25 inlier fraction.

    Evaluated on jointly valid pixels, minus any excluded (merged) region.
    Inputs are assumed already scale-aligned.
    """
    if pred.values.shape != gt.values.shape:
        raise ShapeError("depth maps must have equal shapes")
    keep = pred.validity & gt.validity
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=bool)
        if exclude.shape != pred.values.shape:
            raise ShapeError("exclusion mask must match depth shape")
        keep &= ~exclude
    if not keep.any():
        raise DomainError("no pixels left to evaluate")
    p = pred.values[keep]
    g = gt.values[keep]
    l1 = float(np.mean(np.abs(p - g)))
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(l1=l1, delta_125=float(np.mean(ratio < 1.25)))


def merged_pixel_exclusion(mask: MergeMask, layout: LayoutDescriptor,
                           grid: tuple[int, int], patch_px: int,
                           sample: int = 0, frame: int = 0) -> np.ndarray:
    """Expand one frame's merged tokens to their pixel footprints.

    Returns an (H*patch_px, W*patch_px) boolean grid, True where the pixel
    belongs to a patch inside a flagged group.
    """
    h, w = grid
    if h * w != layout.patches_per_frame:
        raise ShapeError("grid does not tile patches_per_frame")
    flagged_patch = np.zeros(layout.patches_per_frame, dtype=bool)
    base = frame * layout.groups_per_frame
    for slot in range(layout.groups_per_frame):
        if mask.flags[sample, base + slot]:
            start = slot * layout.group_size
            flagged_patch[start:start + layout.group_size] = True
    grid_mask = flagged_patch.reshape(h, w)
    return np.kron(grid_mask, np.ones((patch_px, patch_px), dtype=bool))


# ---------------------------------------------------------------------------
# poses

def relative_pose(poses: PoseSet, i: int, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Transform of frame j expressed in frame i coordinates."""
    if not (0 <= i < len(poses) and 0 <= j < len(poses)):
        raise ParameterError("frame index out of range")
    if i == j:
        raise ParameterError("identical frames form an excluded pair")
    r_i, t_i = poses.rotations[i], poses.translations[i]
    r_j, t_j = poses.rotations[j], poses.translations[j]
    r_rel = r_i.T @ r_j
    t_rel = r_i.T @ (t_j - t_i)
    return r_rel, t_rel


def rotation_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    """Geodesic angle between two rotations, degrees."""
    cos = (np.trace(r_a.T @ r_b) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def auc_at_30(pred: PoseSet, gt: PoseSet) -> tuple[float, float]:
    """(AUC_r30, AUC_t30) over all unordered frame pairs.

    Accuracy-vs-threshold curves are averaged at thresholds 1..30 (degrees
    for rotation, centimeters for translation), normalizing the integral to
    [0, 1].  Inputs are assumed already Sim(3)-aligned.
    """
    if len(pred) != len(gt):
        raise ShapeError("pose sets must have the same number of frames")
    if len(pred) < 2:
        raise DomainError("need at least two frames for relative pose AUC")
    rot_errors = []
    tr_errors_cm = []
    for i in range(len(pred)):
        for j in range(i + 1, len(pred)):
            r_g, t_g = relative_pose(gt, i, j)
            r_p, t_p = relative_pose(pred, i, j)
            rot_errors.append(rotation_angle_deg(r_g, r_p))
            tr_errors_cm.append(100.0 * float(np.linalg.norm(t_g - t_p)))
    rot = np.asarray(rot_errors)
    tra = np.asarray(tr_errors_cm)
    thresholds = np.arange(1, 31, dtype=np.float64)
    auc_r = float(np.mean(rot[None, :] < thresholds[:, None]))
    auc_t = float(np.mean(tra[None, :] < thresholds[:, None]))
    return auc_r, auc_t


# ---------------------------------------------------------------------------
# Sim(3) alignment

@dataclass(frozen=True)
class Sim3:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation


def umeyama_sim3(src: PointCloud, dst: PointCloud,
                 correspondences: np.ndarray | None = None) -> Sim3:
    """Closed-form similarity transform minimizing sum ||s R x + t - y||^2.

    Covariance SVD with the determinant-sign correction matrix; raises on
    collinear/degenerate configurations (covariance rank < 2).
    """
    if correspondences is None:
        if len(src) != len(dst):
            raise ShapeError("equal-size clouds required without correspondences")
        x = src.points
        y = dst.points
    else:
        idx = np.asarray(correspondences, dtype=np.int64).reshape(-1, 2)
        x = src.points[idx[:, 0]]
        y = dst.points[idx[:, 1]]
    n = x.shape[0]
    if n < 3:
        raise DomainError("need at least 3 correspondences")

    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    rank = int(np.sum(d > d[0] * 1e-12)) if d[0] > 0 else 0
    if rank < 2:
        raise DegenerateGeometryError("correspondences are collinear or coincident")

    sign = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[2, 2] = -1.0
    rotation = u @ sign @ vt
    var_x = float(np.mean(np.sum(xc**2, axis=1)))
    if var_x == 0.0:
        raise DegenerateGeometryError("source points are coincident")
    scale = float(np.trace(np.diag(d) @ sign) / var_x)
    translation = mu_y - scale * rotation @ mu_x
    return Sim3(scale=scale, rotation=rotation, translation=translation)


# ---------------------------------------------------------------------------
# Chamfer

def _nearest_brute(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    d2 = np.sum((queries[:, None, :] - refs[None, :, :]) ** 2, axis=2)
    return np.sqrt(d2.min(axis=1))


def _nearest_grid(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Nearest-neighbor distances via a uniform spatial hash.

    Cell size approximates the mean nearest-neighbor spacing of the
    reference cloud; shells of cells are expanded until no closer point can
    exist outside the searched radius.
    """
    span = refs.max(axis=0) - refs.min(axis=0)
    volume = float(np.prod(np.where(span > 0, span, 1.0)))
    cell = (volume / len(refs)) ** (1.0 / 3.0)
    if cell <= 0 or not math.isfinite(cell):
        cell = 1.0

    buckets: dict[tuple[int, int, int], list[int]] = {}
    ref_cells = np.floor(refs / cell).astype(np.int64)
    for idx, key in enumerate(map(tuple, ref_cells)):
        buckets.setdefault(key, []).append(idx)
    cell_lo = ref_cells.min(axis=0)
    cell_hi = ref_cells.max(axis=0)

    out = np.empty(len(queries))
    for qi, point in enumerate(queries):
        qcell = np.floor(point / cell).astype(np.int64)
        # Chebyshev cell distance to the occupied bounding box; rings below
        # it are empty, and a query far outside the box gains nothing from
        # the grid, so fall back to a direct scan there.
        start = int(np.maximum(np.maximum(cell_lo - qcell, qcell - cell_hi), 0).max())
        if start > 4:
            out[qi] = np.sqrt(((refs - point) ** 2).sum(axis=1).min())
            continue
        cx, cy, cz = qcell
        best = math.inf
        ring = start
        # Any point in a cell at Chebyshev ring r is at least (r - 1) * cell
        # away, so once that exceeds the best distance no farther shell can
        # help.  The loop always terminates: refs is non-empty, so best
        # becomes finite by the time the rings reach the nearest point.
        while (ring - 1) * cell <= best:
            for key in _ring_cells(cx, cy, cz, ring):
                members = buckets.get(key)
                if not members:
                    continue
                d = np.linalg.norm(refs[members] - point, axis=1).min()
                if d < best:
                    best = d
            ring += 1
        out[qi] = best
    return out


def _ring_cells(cx: int, cy: int, cz: int, ring: int):
    if ring == 0:
        yield (cx, cy, cz)
        return
    r = ring
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dz in range(-r, r + 1):
                if max(abs(dx), abs(dy), abs(dz)) == r:
                    yield (cx + dx, cy + dy, cz + dz)


def chamfer(pred: PointCloud, gt: PointCloud, method: str = "auto") -> tuple[float, float]:
    """(completeness, accuracy): mean gt->pred and pred->gt NN distances.

    Inputs are assumed already Sim(3)-aligned.  method is "brute", "grid",
    or "auto" (brute below ~4e6 pairs).
    """
    if len(pred) == 0 or len(gt) == 0:
        raise DomainError("chamfer requires non-empty point clouds")
    if method not in ("auto", "brute", "grid"):
        raise ParameterError(f"unknown chamfer method {method!r}")
    if method == "auto":
        method = "brute" if len(pred) * len(gt) <= 4_000_000 else "grid"
    nearest = _nearest_brute if method == "brute" else _nearest_grid
    completeness = float(np.mean(nearest(gt.points, pred.points)))
    accuracy = float(np.mean(nearest(pred.points, gt.points)))
    return completeness, accuracy
