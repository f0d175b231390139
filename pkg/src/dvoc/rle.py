"""Binary mask codec and geometry overlap primitives.

Masks travel as column-major run-length counts (RleMask); dense bool
grids appear only at codec boundaries. Overlap is computed directly on
the runs with a merge scan so evaluation never decodes full frames.
"""
from __future__ import annotations

import numpy as np

from .errors import CodecError, GeometryError, InputError
from .types import BBox, RleMask


def rle_decode(mask: RleMask) -> np.ndarray:
    """Expand run counts to a bool grid of shape (height, width)."""
    counts = np.asarray(mask.counts, dtype=np.int64)
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    # Runs follow column-major order: fill columns first, then transpose.
    return flat.reshape((mask.width, mask.height)).T


def rle_encode(grid: np.ndarray) -> RleMask:
    """Encode a bool grid into canonical column-major run counts."""
    grid = np.asarray(grid)
    if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise InputError(f"grid must be 2-D with positive dimensions, got shape {grid.shape}")
    h, w = grid.shape
    flat = grid.astype(bool).T.ravel()
    changes = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask(height=h, width=w, counts=tuple(int(c) for c in counts))


def mask_area(mask: RleMask) -> int:
    """Foreground pixel count, taken from the runs without decoding."""
    return mask.area


def run_bounds(mask: RleMask) -> np.ndarray:
    """Cumulative run end positions; the parity of the covering run index
    tells fore/background. Shared by the overlap routines."""
    return np.cumsum(np.asarray(mask.counts, dtype=np.int64))


def iou_from_bounds(bounds_a: np.ndarray, bounds_b: np.ndarray) -> float:
    """Overlap over union for two run-bound arrays of equal total length."""
    cuts = np.union1d(bounds_a, bounds_b)
    starts = np.concatenate(([0], cuts[:-1]))
    lengths = cuts - starts
    fg_a = (np.searchsorted(bounds_a, starts, side="right") % 2).astype(bool)
    fg_b = (np.searchsorted(bounds_b, starts, side="right") % 2).astype(bool)
    inter = int(lengths[fg_a & fg_b].sum())
    union = int(lengths[fg_a | fg_b].sum())
    if union == 0:
        return 0.0
    return inter / union


def mask_iou(a: RleMask, b: RleMask) -> float:
    """Intersection over union of two masks of identical dimensions.

    Two empty masks overlap nothing, so their IoU is 0 by convention.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise GeometryError(
            f"mask dimensions differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    return iou_from_bounds(run_bounds(a), run_bounds(b))


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def mask_to_bbox(mask: RleMask) -> BBox | None:
    """Tight pixel-aligned bounding box of the foreground, or None when
    the mask is empty. Works on the runs directly."""
    h = mask.height
    min_row = min_col = None
    max_row = max_col = None
    pos = 0
    for i, count in enumerate(mask.counts):
        if count and i % 2 == 1:
            start, end = pos, pos + count - 1  # inclusive linear range
            c0, c1 = start // h, end // h
            r0, r1 = start % h, end % h
            if min_col is None or c0 < min_col:
                min_col = c0
            if max_col is None or c1 > max_col:
                max_col = c1
            if c0 == c1:
                lo, hi = r0, r1
            else:
                # The run wraps across columns, covering full rows.
                lo, hi = 0, h - 1
            if min_row is None or lo < min_row:
                min_row = lo
            if max_row is None or hi > max_row:
                max_row = hi
        pos += count
    if min_col is None:
        return None
    return BBox(
        x=float(min_col),
        y=float(min_row),
        w=float(max_col - min_col + 1),
        h=float(max_row - min_row + 1),
    )


def rle_from_string(encoded: str, height: int, width: int) -> RleMask:
    """Decode the compressed ascii run-length form used by COCO payloads.

    Counts are stored as 6-bit chunks offset by 48, little-endian, with
    a continuation bit; from the third count onward values are deltas
    against the count two places back.
    """
    counts: list[int] = []
    pos = 0
    n = len(encoded)
    while pos < n:
        value = 0
        shift = 0
        while True:
            if pos >= n:
                raise CodecError("truncated compressed run string")
            chunk = ord(encoded[pos]) - 48
            if chunk < 0 or chunk > 63:
                raise CodecError(f"invalid character at position {pos} in run string")
            pos += 1
            value |= (chunk & 0x1F) << shift
            shift += 5
            if not chunk & 0x20:
                if chunk & 0x10:
                    value |= -1 << shift
                break
        if len(counts) > 2:
            value += counts[-2]
        counts.append(value)
    try:
        return RleMask(height=height, width=width, counts=tuple(counts))
    except CodecError as exc:
        raise CodecError(f"compressed run string decodes to invalid counts: {exc}") from exc


def rle_to_string(mask: RleMask) -> str:
    """Inverse of rle_from_string, kept for round-trip checks."""
    out: list[str] = []
    counts = mask.counts
    for i, count in enumerate(counts):
        value = count
        if i > 2:
            value -= counts[i - 2]
        while True:
            chunk = value & 0x1F
            value >>= 5
            more = (value != -1) if chunk & 0x10 else (value != 0)
            if more:
                chunk |= 0x20
            out.append(chr(chunk + 48))
            if not more:
                break
    return "".join(out)


def polygons_to_mask(polygons: list[list[float]], height: int, width: int) -> RleMask:
    """Rasterize one or more flat [x0, y0, x1, y1, ...] polygons.

    Each polygon is filled with the even-odd rule sampled at pixel
    centers; multiple polygons are unioned.
    """
    if height < 1 or width < 1:
        raise InputError("raster dimensions must be positive")
    grid = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        if len(poly) < 6 or len(poly) % 2 != 0:
            raise InputError(f"polygon needs >= 3 (x, y) points, got {len(poly)} values")
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        xs, ys = pts[:, 0], pts[:, 1]
        xs_next, ys_next = np.roll(xs, -1), np.roll(ys, -1)
        for row in range(height):
            cy = row + 0.5
            crossing = (np.minimum(ys, ys_next) <= cy) & (cy < np.maximum(ys, ys_next))
            if not crossing.any():
                continue
            y0, y1 = ys[crossing], ys_next[crossing]
            x0, x1 = xs[crossing], xs_next[crossing]
            cross_x = np.sort(x0 + (cy - y0) * (x1 - x0) / (y1 - y0))
            for left, right in cross_x.reshape(-1, 2):
                # Pixels whose center x lies inside [left, right).
                first = max(0, int(np.ceil(left - 0.5)))
                last = min(width, int(np.ceil(right - 0.5)))
                if last > first:
                    grid[row, first:last] = True
    return rle_encode(grid)
