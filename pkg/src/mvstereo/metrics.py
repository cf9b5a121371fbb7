"""Point-cloud and depth-map evaluation metrics."""

from __future__ import annotations

import numpy as np

from .autodiff import ContractError
from .fusion import PointCloud

__all__ = [
    "MetricError", "GridIndex", "cloud_metrics", "depth_metrics",
    "nearest_distances_bruteforce",
]

DEPTH_NORMALIZATION_SPAN = 128.0


class MetricError(ContractError):
    """Metric undefined for the given inputs (e.g. empty cloud)."""


class GridIndex:
    """Uniform-voxel spatial index for exact nearest-neighbor queries.

    Cells are scanned in growing Chebyshev rings around the query; a point
    in a ring-(r+1) cell is at least r * cell_size away, so the search can
    stop as soon as the best distance found is within r * cell_size.
    """

    def __init__(self, points: np.ndarray, cell_size: float | None = None):
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] == 0:
            raise MetricError("cannot index an empty point cloud")
        self.origin = self.points.min(axis=0)
        extent = self.points.max(axis=0) - self.origin
        if cell_size is None:
            # Size cells from the largest extent so flat or degenerate
            # clouds cannot explode the key space.
            side = max(float(extent.max()), 1e-9)
            cell_size = side / max(round(self.points.shape[0] ** (1 / 3)), 1)
        self.cell = float(cell_size)
        keys = np.floor((self.points - self.origin) / self.cell).astype(np.int64)
        self.max_key = keys.max(axis=0)
        self.cells: dict[tuple[int, int, int], list[int]] = {}
        for i, key in enumerate(map(tuple, keys)):
            self.cells.setdefault(key, []).append(i)
        self.max_ring = int(np.max(self.max_key)) + 2

    def _ring_cells(self, center: np.ndarray, r: int):
        """Occupied-box cells at exact Chebyshev distance r from center."""
        lo = np.maximum(center - r, 0)
        hi = np.minimum(center + r, self.max_key)
        for x in range(lo[0], hi[0] + 1):
            for y in range(lo[1], hi[1] + 1):
                for z in range(lo[2], hi[2] + 1):
                    if max(abs(x - center[0]), abs(y - center[1]), abs(z - center[2])) == r:
                        yield (x, y, z)

    def nearest(self, query: np.ndarray) -> tuple[float, int]:
        """Distance and index of the closest indexed point.

        The search starts from the query's cell clamped into the occupied
        box: cells outside it are empty, and any existing cell at
        Chebyshev ring r from the clamped start is at least (r-1) * cell
        from the query, so the (r * cell) stop bound stays valid.
        """
        q = np.asarray(query, dtype=np.float64)
        raw = np.floor((q - self.origin) / self.cell).astype(np.int64)
        center = np.clip(raw, 0, self.max_key)
        coverage = int(np.maximum(center, self.max_key - center).max())
        best_d2 = np.inf
        best_i = -1
        for r in range(coverage + 1):
            for key in self._ring_cells(center, r):
                idxs = self.cells.get(key)
                if not idxs:
                    continue
                d2 = ((self.points[idxs] - q) ** 2).sum(axis=1)
                j = int(np.argmin(d2))
                if d2[j] < best_d2:
                    best_d2 = float(d2[j])
                    best_i = idxs[j]
            if best_i >= 0 and best_d2 <= (r * self.cell) ** 2:
                break
        return float(np.sqrt(best_d2)), best_i

    def nearest_distances(self, queries: np.ndarray) -> np.ndarray:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        return np.array([self.nearest(p)[0] for p in q])


def nearest_distances_bruteforce(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """O(N*M) exact nearest distances; the oracle for the grid index."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d2 = ((q[:, None, :] - p[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def cloud_metrics(recon: PointCloud | np.ndarray, reference: PointCloud | np.ndarray,
                  clamp: float) -> tuple[float, float, float]:
    """(Accuracy, Completeness, Overall) between two clouds.

    Accuracy: mean distance from reconstruction points to their nearest
    reference point; Completeness: the reverse; distances are clamped at
    ``clamp`` before averaging; Overall is the mean of the two.
    """
    rp = recon.points if isinstance(recon, PointCloud) else np.asarray(recon, dtype=np.float64)
    gp = reference.points if isinstance(reference, PointCloud) else np.asarray(reference, dtype=np.float64)
    rp = rp.reshape(-1, 3)
    gp = gp.reshape(-1, 3)
    if rp.shape[0] == 0 or gp.shape[0] == 0:
        raise MetricError("cloud metrics are undefined for empty clouds")
    acc = float(np.minimum(GridIndex(gp).nearest_distances(rp), clamp).mean())
    comp = float(np.minimum(GridIndex(rp).nearest_distances(gp), clamp).mean())
    return acc, comp, (acc + comp) / 2.0


def depth_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray,
                  d_min: float, d_max: float) -> tuple[float, float, float]:
    """(EPE, e1, e3) with depths normalized so the range spans 128 units.

    EPE is the mean absolute normalized error over valid pixels; e1/e3 are
    the percentages of valid pixels whose normalized error exceeds 1 / 3.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or mask.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape} vs {mask.shape}")
    if not mask.any():
        raise MetricError("depth metrics are undefined with no valid pixels")
    scale = DEPTH_NORMALIZATION_SPAN / (d_max - d_min)
    err = np.abs(pred - gt)[mask] * scale
    epe = float(err.mean())
    e1 = float((err > 1.0).mean() * 100.0)
    e3 = float((err > 3.0).mean() * 100.0)
    return epe, e1, e3
