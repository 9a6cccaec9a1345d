"""Visual part extraction: the largest text-free rectangle of an image meme.

The search is over a fixed grid of 17 area fractions x 10 aspect ratios x
10 x 10 centre positions (17,000 candidates). Candidates that overlap any
word box are dropped, the survivors with the largest area fraction are
kept and one of them is drawn uniformly at random.
"""

from __future__ import annotations

import gc
import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

P_VALUES = 17
GRID_STEPS = 10
P_MIN, P_MAX = 0.1, 0.9

# Edge contacts closer than this (relative to the image extent) count as touching.
OVERLAP_TOL = 1e-9

KINDS = ("word", "letter", "other")


class InvalidParameter(ValueError):
    pass


class NoValidRectangle(RuntimeError):
    """Every candidate rectangle intersects some word box."""


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidParameter(f"image dims must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True)
class BoundingBox:
    x0: float
    y0: float
    x1: float
    y1: float
    kind: str = "word"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameter(f"unknown box kind {self.kind!r}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise InvalidParameter(f"degenerate box {self}")

    def within(self, dims: ImageDims) -> bool:
        return self.x0 >= 0 and self.y0 >= 0 and self.x1 <= dims.width and self.y1 <= dims.height


class RectParams(NamedTuple):
    p: float
    r: float
    f_w: float
    f_h: float


class Rect(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0


@dataclass
class VpuResult:
    chosen_rect: Rect
    achieved_p: float
    tie_count: int
    crop_pixels: np.ndarray = field(repr=False)
    params: RectParams | None = None
    pixel_rect: tuple[int, int, int, int] | None = None


def filter_word_boxes(detections: Iterable[BoundingBox]) -> list[BoundingBox]:
    return [b for b in detections if b.kind == "word"]


def p_grid() -> np.ndarray:
    # rounding removes linspace noise so p values print as 0.15, 0.2, ...
    return np.round(np.linspace(P_MIN, P_MAX, P_VALUES), 12)


def param_bounds(p: float, r: float | None = None):
    """Closed ranges for r given p, or for (f_W, f_H) given p and r."""
    s = math.sqrt(p)
    if r is None:
        return s, 1.0 / s
    half_w = s / (2.0 * r)
    half_h = r * s / 2.0
    return (half_w, 1.0 - half_w), (half_h, 1.0 - half_h)


def rect_from_params(params: RectParams, dims: ImageDims, tol: float = 1e-9) -> Rect:
    p, r = params.p, params.r
    if not 0.0 < p < 1.0:
        raise InvalidParameter(f"area fraction must lie in (0, 1), got {p}")
    r_lo, r_hi = param_bounds(p)
    (fw_lo, fw_hi), (fh_lo, fh_hi) = param_bounds(p, r)
    if not (r_lo - tol <= r <= r_hi + tol):
        raise InvalidParameter(f"aspect knob r={r} outside [{r_lo}, {r_hi}] for p={p}")
    if not (fw_lo - tol <= params.f_w <= fw_hi + tol):
        raise InvalidParameter(f"f_W={params.f_w} outside [{fw_lo}, {fw_hi}]")
    if not (fh_lo - tol <= params.f_h <= fh_hi + tol):
        raise InvalidParameter(f"f_H={params.f_h} outside [{fh_lo}, {fh_hi}]")
    s = math.sqrt(p)
    W, H = dims.width, dims.height
    half_w = W * s / (2.0 * r)
    half_h = s * H * r / 2.0
    cx, cy = params.f_w * W, params.f_h * H
    return Rect(cx - half_w, cy - half_h, cx + half_w, cy + half_h)


def candidate_grid() -> np.ndarray:
    """All 17,000 (p, r, f_W, f_H) tuples as an array of shape (17000, 4).

    Image-size independent: the bounds on r, f_W and f_H depend only on p and r.
    """
    rows = []
    steps = GRID_STEPS
    for p in p_grid():
        s = np.sqrt(p)
        for r in np.linspace(s, 1.0 / s, steps):
            half_w = s / (2.0 * r)
            half_h = r * s / 2.0
            fw = np.linspace(half_w, 1.0 - half_w, steps)
            fh = np.linspace(half_h, 1.0 - half_h, steps)
            FW, FH = np.meshgrid(fw, fh, indexing="ij")
            block = np.empty((steps * steps, 4))
            block[:, 0] = p
            block[:, 1] = r
            block[:, 2] = FW.ravel()
            block[:, 3] = FH.ravel()
            rows.append(block)
    return np.concatenate(rows)


_GRID_CACHE: np.ndarray | None = None


def _grid() -> np.ndarray:
    global _GRID_CACHE
    if _GRID_CACHE is None:
        _GRID_CACHE = candidate_grid()
        _GRID_CACHE.setflags(write=False)
    return _GRID_CACHE


def candidate_rects(dims: ImageDims) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised candidate enumeration: (params (17000, 4), rects (17000, 4))."""
    params = _grid()
    p, r, fw, fh = params.T
    s = np.sqrt(p)
    W, H = float(dims.width), float(dims.height)
    half_w = W * s / (2.0 * r)
    half_h = s * H * r / 2.0
    rects = np.stack([fw * W - half_w, fh * H - half_h, fw * W + half_w, fh * H + half_h], axis=1)
    return params, rects


def enumerate_candidates(dims: ImageDims) -> list[tuple[RectParams, Rect]]:
    params, rects = candidate_rects(dims)
    # 34k acyclic tuples; cyclic GC passes during the build only cost time
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        return list(zip(map(RectParams._make, params.tolist()), map(Rect._make, rects.tolist())))
    finally:
        if was_enabled:
            gc.enable()


def _overlap_tol(W: float, H: float) -> float:
    return OVERLAP_TOL * max(W, H, 1.0)


def overlaps(rect: Rect, box: BoundingBox, tol: float = 0.0) -> bool:
    """True iff the intersection has strictly positive area.

    Touching edges or corners do not count. ``tol`` absorbs floating-point
    noise in edge coordinates.
    """
    dx = min(rect.x1, box.x1) - max(rect.x0, box.x0)
    dy = min(rect.y1, box.y1) - max(rect.y0, box.y0)
    return dx > tol and dy > tol


def _overlap_mask(rects: np.ndarray, boxes: Sequence[BoundingBox], tol: float) -> np.ndarray:
    hit = np.zeros(len(rects), dtype=bool)
    for b in boxes:
        dx = np.minimum(rects[:, 2], b.x1) - np.maximum(rects[:, 0], b.x0)
        dy = np.minimum(rects[:, 3], b.y1) - np.maximum(rects[:, 1], b.y0)
        hit |= (dx > tol) & (dy > tol)
    return hit


def image_seed(seed: int, image_id: str | None) -> np.random.Generator:
    """Per-image generator, independent of processing order."""
    if image_id is None:
        return np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    digest = hashlib.blake2b(image_id.encode("utf-8"), digest_size=8).digest()
    key = int.from_bytes(digest, "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), key]))


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


def pixel_bounds(rect: Rect, dims: ImageDims) -> tuple[int, int, int, int]:
    """Round-half-up each corner, then clamp to the image."""
    x0 = min(max(_round_half_up(rect.x0), 0), dims.width)
    y0 = min(max(_round_half_up(rect.y0), 0), dims.height)
    x1 = min(max(_round_half_up(rect.x1), 0), dims.width)
    y1 = min(max(_round_half_up(rect.y1), 0), dims.height)
    return x0, y0, x1, y1


def _inner_pixel_bounds(rect: Rect, dims: ImageDims, tol: float) -> tuple[int, int, int, int]:
    x0 = max(math.ceil(rect.x0 - tol), 0)
    y0 = max(math.ceil(rect.y0 - tol), 0)
    x1 = min(math.floor(rect.x1 + tol), dims.width)
    y1 = min(math.floor(rect.y1 + tol), dims.height)
    return x0, y0, x1, y1


def crop(image: np.ndarray, rect: Rect) -> np.ndarray:
    dims = ImageDims(image.shape[1], image.shape[0])
    x0, y0, x1, y1 = pixel_bounds(rect, dims)
    return crop_pixels(image, (x0, y0, x1, y1))


def crop_pixels(image: np.ndarray, bounds: tuple[int, int, int, int]) -> np.ndarray:
    x0, y0, x1, y1 = bounds
    if x1 <= x0 or y1 <= y0:
        raise InvalidParameter(f"empty crop region {bounds}")
    return image[y0:y1, x0:x1].copy()


def extract_visual_part(
    image: np.ndarray,
    boxes: Sequence[BoundingBox],
    seed: int,
    image_id: str | None = None,
) -> VpuResult:
    """Find and crop the largest grid rectangle that overlaps no word box.

    ``boxes`` should already be word-filtered. The tie among maximum-area
    survivors is broken by a generator derived from ``(seed, image_id)``.

    Raises:
        NoValidRectangle: when every candidate intersects a box.
    """
    if image.ndim < 2 or image.shape[0] == 0 or image.shape[1] == 0:
        raise InvalidParameter(f"empty image of shape {image.shape}")
    dims = ImageDims(image.shape[1], image.shape[0])
    tol = _overlap_tol(dims.width, dims.height)
    params, rects = candidate_rects(dims)
    free = ~_overlap_mask(rects, boxes, tol)
    if not free.any():
        raise NoValidRectangle(f"no text-free rectangle among {len(rects)} candidates")

    p_best = params[free, 0].max()
    ties = np.flatnonzero(free & (params[:, 0] == p_best))
    rng = image_seed(seed, image_id)
    pick = int(ties[rng.integers(len(ties))])

    rect = Rect(*map(float, rects[pick]))
    bounds = pixel_bounds(rect, dims)
    if any(overlaps(Rect(*bounds), b, tol) for b in boxes):
        # rounding outward pushed an edge into a box with fractional coordinates
        bounds = _inner_pixel_bounds(rect, dims, tol)
    return VpuResult(
        chosen_rect=rect,
        achieved_p=float(p_best),
        tie_count=len(ties),
        crop_pixels=crop_pixels(image, bounds),
        params=RectParams(*map(float, params[pick])),
        pixel_rect=bounds,
    )


@dataclass
class AreaFractionSummary:
    count: int
    failures: int
    mean_p: float | None
    min_p: float | None
    max_p: float | None


def area_fraction_report(results: Iterable[VpuResult | None]) -> AreaFractionSummary:
    """Summarise extraction outcomes; ``None`` entries stand for failures."""
    results = list(results)
    ps = [r.achieved_p for r in results if r is not None]
    failures = len(results) - len(ps)
    if not ps:
        return AreaFractionSummary(len(results), failures, None, None, None)
    return AreaFractionSummary(len(results), failures, float(np.mean(ps)), min(ps), max(ps))


# -- box files --------------------------------------------------------------
def parse_box_document(doc: dict) -> tuple[str, ImageDims, list[BoundingBox]]:
    dims = ImageDims(int(doc["width"]), int(doc["height"]))
    boxes = [
        BoundingBox(float(b["x0"]), float(b["y0"]), float(b["x1"]), float(b["y1"]), b.get("kind", "word"))
        for b in doc.get("boxes", [])
    ]
    for b in boxes:
        if not b.within(dims):
            raise InvalidParameter(f"box {b} lies outside {dims.width}x{dims.height}")
    return str(doc["image_id"]), dims, boxes


def box_document(image_id: str, dims: ImageDims, boxes: Sequence[BoundingBox]) -> dict:
    return {
        "image_id": image_id,
        "width": dims.width,
        "height": dims.height,
        "boxes": [{"x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1, "kind": b.kind} for b in boxes],
    }
