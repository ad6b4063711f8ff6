"""Wrinkle-line structure: binary line maps, exact distance fields, edits.

The distance transform is the exact unsigned Euclidean transform computed by
the separable lower-envelope (parabola) method: a vertical 1-D pass producing
per-column distances, then a horizontal pass minimizing over parabolas seated
at those values. Results are exact squared integers under the hood, so the
transform commutes bit-exactly with the 8 square symmetries.

Line extraction follows a classical ridge recipe: 3x3 median denoise, a
threshold at k standard deviations of the denoised map, two-subiteration
morphological thinning to single-pixel width, then pruning of short spurs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidEditError
from .raster import (
    VALID_WIDTHS,
    DisplacementMap,
    DistanceField,
    truncation_for_width,
)


@dataclass(frozen=True, eq=False)
class LineMap:
    """Square binary mask of wrinkle-line pixels (uint8, values 0/1)."""

    mask: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.mask)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise InvalidInputError(f"LineMap must be square 2-D, got shape {arr.shape}")
        if arr.shape[0] not in VALID_WIDTHS:
            raise InvalidInputError(
                f"LineMap width must be one of {VALID_WIDTHS}, got {arr.shape[0]}"
            )
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise InvalidInputError("LineMap mask must contain only 0/1")
        frozen = np.ascontiguousarray(arr, dtype=np.uint8)
        frozen.setflags(write=False)
        object.__setattr__(self, "mask", frozen)

    @property
    def width(self) -> int:
        return self.mask.shape[1]


# ---------------------------------------------------------------------------
# Exact Euclidean distance transform


def _edt1d_sq(f: np.ndarray) -> np.ndarray:
    """Exact 1-D squared-distance lower envelope of parabolas rooted at f.

    f holds squared offsets (np.inf where no site influences the column).
    """
    n = f.shape[0]
    d = np.empty(n, dtype=np.float64)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == np.inf:
            continue
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        while True:
            p = v[k]
            s = ((fq + q * q) - (f[p] + p * p)) / (2.0 * (q - p))
            if s <= z[k]:
                k -= 1
                if k < 0:
                    break
            else:
                break
        k += 1
        v[k] = q
        z[k] = s if k > 0 else -np.inf
        z[k + 1] = np.inf
    if k < 0:
        d[:] = np.inf
        return d
    j = 0
    for q in range(n):
        while z[j + 1] < q:
            j += 1
        p = v[j]
        d[q] = (q - p) * (q - p) + f[p]
    return d


def edt_squared(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance to the nearest nonzero pixel.

    Returns float64; all finite entries are exact integers. An all-zero mask
    yields +inf everywhere.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InvalidInputError("mask must be 2-D")
    h, w = mask.shape
    big = h + w + 1
    col = np.full((h, w), big, dtype=np.int64)
    col[mask != 0] = 0
    for i in range(1, h):
        np.minimum(col[i], col[i - 1] + 1, out=col[i])
    for i in range(h - 2, -1, -1):
        np.minimum(col[i], col[i + 1] + 1, out=col[i])
    f = col.astype(np.float64) ** 2
    f[col >= big] = np.inf
    out = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        out[i] = _edt1d_sq(f[i])
    return out


def truncated_distance(mask: np.ndarray, truncation: float) -> np.ndarray:
    """Exact Euclidean distances clipped at truncation (also covers empty masks)."""
    sq = edt_squared(mask)
    out = np.full(sq.shape, truncation, dtype=np.float64)
    finite = np.isfinite(sq)
    np.minimum(np.sqrt(sq, where=finite, out=np.full_like(sq, np.inf)), truncation, out=out, where=finite)
    return out


def distance_transform(lines: LineMap) -> DistanceField:
    """Truncated exact distance field of a line map (truncation = 5% of width)."""
    trunc = truncation_for_width(lines.width)
    return DistanceField(truncated_distance(lines.mask, trunc), truncation=trunc)


# ---------------------------------------------------------------------------
# Thinning and pruning


def _neighbors(padded: np.ndarray):
    # P2..P9 clockwise starting north; row 0 is the top of the map.
    center = padded[1:-1, 1:-1]
    p2 = padded[:-2, 1:-1]
    p3 = padded[:-2, 2:]
    p4 = padded[1:-1, 2:]
    p5 = padded[2:, 2:]
    p6 = padded[2:, 1:-1]
    p7 = padded[2:, :-2]
    p8 = padded[1:-1, :-2]
    p9 = padded[:-2, :-2]
    return center, (p2, p3, p4, p5, p6, p7, p8, p9)


def thin(mask: np.ndarray) -> np.ndarray:
    """Two-subiteration morphological thinning to 1-px skeletons.

    Both subiterations mark all removable pixels simultaneously and delete
    them together, so the result is independent of scan order. Runs to a
    fixed point; thin(thin(x)) == thin(x).
    """
    img = (np.asarray(mask) != 0).astype(np.uint8)
    while True:
        changed = False
        for phase in (0, 1):
            padded = np.pad(img, 1)
            center, ps = _neighbors(padded)
            p2, p3, p4, p5, p6, p7, p8, p9 = ps
            seq = [p2, p3, p4, p5, p6, p7, p8, p9, p2]
            b = sum(ps)
            a = sum(((seq[i] == 0) & (seq[i + 1] == 1)) for i in range(8))
            cond = (center == 1) & (b >= 2) & (b <= 6) & (a == 1)
            if phase == 0:
                cond &= (p2 * p4 * p6 == 0) & (p4 * p6 * p8 == 0)
            else:
                cond &= (p2 * p4 * p8 == 0) & (p2 * p6 * p8 == 0)
            if cond.any():
                img[cond] = 0
                changed = True
        if not changed:
            break
    _remove_staircase_doubles(img)
    return img


def _remove_staircase_doubles(img: np.ndarray) -> None:
    """Serial cleanup of the corner doubles parallel thinning leaves behind.

    On diagonal runs the parallel passes keep both pixels of an L-corner;
    the pair reads as a spurious junction and its extra adjacency inflates
    any length count. A pixel is deleted (in fixed raster order, so the
    result is deterministic) when its remaining neighbours stay mutually
    8-connected without it, checked on the actual neighbour graph rather
    than on ring adjacency, and it is not an endpoint. Runs to a fixed
    point, so repeated thinning is stable.
    """
    h, w = img.shape
    changed = True
    while changed:
        changed = False
        ys, xs = np.nonzero(img)
        for y, x in zip(ys.tolist(), xs.tolist()):
            if not img[y, x]:
                continue
            nbrs = [
                (y + dy, x + dx)
                for dy, dx in _OFFSETS8
                if 0 <= y + dy < h and 0 <= x + dx < w and img[y + dy, x + dx]
            ]
            if not (2 <= len(nbrs) <= 6):
                continue
            seen = {nbrs[0]}
            stack = [nbrs[0]]
            while stack:
                cy, cx = stack.pop()
                for q in nbrs:
                    if q not in seen and abs(q[0] - cy) <= 1 and abs(q[1] - cx) <= 1:
                        seen.add(q)
                        stack.append(q)
            if len(seen) == len(nbrs):
                img[y, x] = 0
                changed = True


_OFFSETS8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _skeleton_graph(mask: np.ndarray):
    """Adjacency dict over 8-connected skeleton pixels."""
    pts = set(zip(*np.nonzero(mask)))
    adj = {}
    for p in pts:
        nbrs = []
        for dy, dx in _OFFSETS8:
            q = (p[0] + dy, p[1] + dx)
            if q in pts:
                nbrs.append(q)
        adj[p] = nbrs
    return adj


def prune_short(mask: np.ndarray, min_len: int = 4) -> np.ndarray:
    """Drop spur branches and whole components with fewer than min_len pixels.

    From each endpoint, walk while exactly one unvisited continuation exists.
    Reaching a branch point (several continuations) ends a spur; running out
    of continuations means the whole chain is isolated. Either way the walked
    pixels are deleted when fewer than min_len.
    """
    img = (np.asarray(mask) != 0).astype(np.uint8)
    adj = _skeleton_graph(img)
    removed = set()

    def degree(p):
        return sum(1 for q in adj[p] if q not in removed)

    endpoints = sorted(p for p in adj if degree(p) <= 1)
    for start in endpoints:
        if start in removed or degree(start) > 1:
            continue
        path = [start]
        on_path = {start}
        keep = False
        while len(path) < min_len:
            cont = [q for q in adj[path[-1]] if q not in removed and q not in on_path]
            if len(cont) == 1:
                path.append(cont[0])
                on_path.add(cont[0])
            elif len(cont) == 0:
                break  # isolated chain, shorter than min_len
            else:
                break  # branch point: path is a spur hanging off a junction
        else:
            keep = True
        if not keep:
            removed.update(path)
    for p in removed:
        img[p] = 0
    # spur removal can orphan pixels (and endpoint-free blobs never joined a
    # walk), so finish with a sweep over whole components
    adj = _skeleton_graph(img)
    seen: set = set()
    for p in adj:
        if p in seen:
            continue
        comp = [p]
        seen.add(p)
        stack = [p]
        while stack:
            cur = stack.pop()
            for q in adj[cur]:
                if q not in seen:
                    seen.add(q)
                    comp.append(q)
                    stack.append(q)
        if len(comp) < min_len:
            for q in comp:
                img[q] = 0
    return img


def skeleton_components(mask: np.ndarray) -> int:
    """Number of 8-connected components among nonzero pixels."""
    adj = _skeleton_graph(np.asarray(mask))
    seen = set()
    count = 0
    for p in sorted(adj):
        if p in seen:
            continue
        count += 1
        stack = [p]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(q for q in adj[cur] if q not in seen)
    return count


def skeleton_length(mask: np.ndarray) -> float:
    """Total polyline length: unit steps count 1, diagonal steps sqrt(2).

    Each 8-adjacency between skeleton pixels is counted once.
    """
    pts = set(zip(*np.nonzero(np.asarray(mask))))
    total = 0.0
    for (y, x) in pts:
        for dy, dx in ((0, 1), (1, -1), (1, 0), (1, 1)):
            if (y + dy, x + dx) in pts:
                total += math.hypot(dy, dx)
    return total


# ---------------------------------------------------------------------------
# Extraction


def smooth3(values: np.ndarray) -> np.ndarray:
    """Separable 3x3 binomial blur with reflect boundary.

    A linear blur keeps a strict one-pixel crest strictly maximal, which a
    rank filter does not: the median of a symmetric peak equals its
    shoulders and turns the crest into a plateau.
    """
    a = np.asarray(values, dtype=np.float64)
    padded = np.pad(a, 1, mode="reflect")
    h, w = a.shape
    rows = (
        padded[:-2, 1:-1] + 2.0 * padded[1:-1, 1:-1] + padded[2:, 1:-1]
    )
    padded = np.pad(rows, ((0, 0), (1, 1)), mode="reflect")
    return (padded[:, :-2] + 2.0 * padded[:, 1:-1] + padded[:, 2:]) / 16.0


def extract_lines(
    disp: DisplacementMap,
    level: float = 0.12,
    min_len: int = 4,
    ridge_mode: str = "negative",
) -> LineMap:
    """Classical ridge extraction from a high-passed displacement map.

    The detection threshold is absolute, in displacement units, so the set
    of detected lines depends only on each line's own depth, never on how
    much other content the map holds. A relative (per-map variance) cut
    would make detections appear and vanish as unrelated detail is added,
    which breaks any count- or length-based comparison across edits.

    ridge_mode selects which excursions count as ridges: "negative"
    (creases only, the default since wrinkles cut into the surface),
    "positive" (raised welts), or "abs" (both).

    Centerlines come from non-maximum suppression rather than from
    morphological erosion of a thresholded blob: a pixel survives when it
    is a local maximum of the response across the line direction. A crest
    pixel stays a crest as the line deepens, so the extracted skeleton
    only gains pixels when amplitudes grow, where erosion-based thinning
    reshuffles junction pixels unpredictably.
    """
    if ridge_mode not in ("abs", "negative", "positive"):
        raise InvalidInputError(f"unknown ridge_mode {ridge_mode!r}")
    if level <= 0.0:
        raise InvalidInputError("level must be positive")
    smoothed = smooth3(disp.values)
    if ridge_mode == "abs":
        response = np.abs(smoothed)
    elif ridge_mode == "negative":
        response = -smoothed
    else:
        response = smoothed
    mask = _crest_mask(response, level)
    skel = thin(mask)
    skel = prune_short(skel, min_len=min_len)
    return LineMap(skel)


def _crest_mask(response: np.ndarray, level: float) -> np.ndarray:
    """Superthreshold pixels that are maxima across their own line direction.

    For each pixel the cross-line direction is the axis (of the four
    half-pixel-neighbour axes) with the most negative second difference;
    the pixel is kept when it is not smaller than either neighbour along
    that axis. Flat areas have no negative curvature and drop out.
    """
    h, w = response.shape
    padded = np.pad(response, 1, mode="edge")
    best_d2 = np.full((h, w), np.inf)
    keep = np.zeros((h, w), dtype=bool)
    for dy, dx in ((0, 1), (1, 0), (1, 1), (1, -1)):
        a = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        b = padded[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        d2 = a + b - 2.0 * response
        better = d2 < best_d2
        best_d2 = np.where(better, d2, best_d2)
        keep = np.where(better, (response >= a) & (response >= b), keep)
    return keep & (best_d2 < -1e-9) & (response > level)


# ---------------------------------------------------------------------------
# Edits


def bresenham(y0: int, x0: int, y1: int, x1: int):
    """Integer line rasterization; yields (y, x) inclusive of both endpoints."""
    dy = abs(y1 - y0)
    dx = abs(x1 - x0)
    sy = 1 if y1 >= y0 else -1
    sx = 1 if x1 >= x0 else -1
    if dx >= dy:
        err = dx // 2
        y = y0
        for x in range(x0, x1 + sx, sx):
            yield (y, x)
            err -= dy
            if err < 0:
                y += sy
                err += dx
    else:
        err = dy // 2
        x = x0
        for y in range(y0, y1 + sy, sy):
            yield (y, x)
            err -= dx
            if err < 0:
                x += sx
                err += dy


@dataclass(frozen=True)
class Stroke:
    """One ordered stroke of a line edit. Points are (x, y) pixel coordinates."""

    mode: str
    radius: float
    points: tuple

    def __post_init__(self):
        if self.mode not in ("draw", "erase"):
            raise InvalidEditError(f"stroke mode must be draw/erase, got {self.mode!r}")
        if self.mode == "erase" and not (self.radius > 0):
            raise InvalidEditError(f"erase stroke needs positive radius, got {self.radius}")
        if len(self.points) < 1:
            raise InvalidEditError("stroke needs at least one point")


@dataclass(frozen=True)
class LineEdit:
    """Ordered list of strokes applied to a line map."""

    strokes: tuple

    @staticmethod
    def from_obj(obj) -> "LineEdit":
        """Parse the document form: a list of {mode, radius, points:[[x,y],..]}."""
        if not isinstance(obj, (list, tuple)):
            raise InvalidEditError("line edit document must be a list of strokes")
        strokes = []
        for item in obj:
            if not isinstance(item, dict):
                raise InvalidEditError("each stroke must be an object")
            try:
                mode = item["mode"]
                points = item["points"]
            except KeyError as exc:
                raise InvalidEditError(f"stroke missing field {exc}") from exc
            radius = float(item.get("radius", 0.0))
            pts = []
            for p in points:
                if len(p) != 2:
                    raise InvalidEditError(f"stroke point must be [x, y], got {p!r}")
                pts.append((float(p[0]), float(p[1])))
            strokes.append(Stroke(mode=str(mode), radius=radius, points=tuple(pts)))
        return LineEdit(tuple(strokes))

    def to_obj(self):
        return [
            {"mode": s.mode, "radius": s.radius, "points": [[p[0], p[1]] for p in s.points]}
            for s in self.strokes
        ]


def _check_bounds(points, width: int) -> None:
    for (x, y) in points:
        if not (0.0 <= x <= width - 1 and 0.0 <= y <= width - 1):
            raise InvalidEditError(f"stroke point ({x}, {y}) outside map of width {width}")


def _segment_distance_mask(shape, points, radius: float) -> np.ndarray:
    """Boolean raster of pixels within radius of the polyline."""
    h, w = shape
    hit = np.zeros(shape, dtype=bool)
    ys, xs = np.mgrid[0:h, 0:w]
    pts = [np.array([x, y], dtype=np.float64) for (x, y) in points]
    segs = list(zip(pts[:-1], pts[1:])) if len(pts) > 1 else [(pts[0], pts[0])]
    for a, b in segs:
        lo_x = max(0, int(math.floor(min(a[0], b[0]) - radius)))
        hi_x = min(w - 1, int(math.ceil(max(a[0], b[0]) + radius)))
        lo_y = max(0, int(math.floor(min(a[1], b[1]) - radius)))
        hi_y = min(h - 1, int(math.ceil(max(a[1], b[1]) + radius)))
        if lo_x > hi_x or lo_y > hi_y:
            continue
        px = xs[lo_y : hi_y + 1, lo_x : hi_x + 1].astype(np.float64)
        py = ys[lo_y : hi_y + 1, lo_x : hi_x + 1].astype(np.float64)
        ab = b - a
        denom = float(ab @ ab)
        if denom == 0.0:
            dx = px - a[0]
            dy = py - a[1]
        else:
            t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0.0, 1.0)
            dx = px - (a[0] + t * ab[0])
            dy = py - (a[1] + t * ab[1])
        hit[lo_y : hi_y + 1, lo_x : hi_x + 1] |= dx * dx + dy * dy <= radius * radius
    return hit


def apply_line_edit(lines: LineMap, edit: LineEdit) -> LineMap:
    """Apply strokes in order (draw: 1-px Bresenham; erase: clear within radius),
    then re-skeletonize so the result stays single-pixel wide."""
    mask = lines.mask.copy().astype(np.uint8)
    w = lines.width
    for stroke in edit.strokes:
        _check_bounds(stroke.points, w)
        if stroke.mode == "draw":
            rounded = [(int(round(y)), int(round(x))) for (x, y) in stroke.points]
            if len(rounded) == 1:
                mask[rounded[0]] = 1
            for (y0, x0), (y1, x1) in zip(rounded[:-1], rounded[1:]):
                for (y, x) in bresenham(y0, x0, y1, x1):
                    mask[y, x] = 1
        else:
            hit = _segment_distance_mask(mask.shape, stroke.points, stroke.radius)
            mask[hit] = 0
    return LineMap(thin(mask))


def chamfer(from_mask: np.ndarray, to_mask: np.ndarray) -> tuple[float, float]:
    """Directed chamfer statistics from one pixel set to another.

    Returns (mean, max) of the exact Euclidean distance from each nonzero
    pixel of from_mask to the nearest nonzero pixel of to_mask. Raises if
    either set is empty.
    """
    src = np.asarray(from_mask) != 0
    if not src.any():
        raise InvalidInputError("chamfer: empty source set")
    sq = edt_squared(to_mask)
    if not np.isfinite(sq).any():
        raise InvalidInputError("chamfer: empty target set")
    d = np.sqrt(sq[src])
    return float(d.mean()), float(d.max())
