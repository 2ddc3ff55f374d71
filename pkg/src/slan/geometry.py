"""Box algebra for normalized center-size regions.

All boxes are tensors of shape (..., 4) holding (cx, cy, w, h) as fractions
of image width/height.  Centers may lie outside [0, 1] (e.g. neighborhood
cells near a border); sizes must stay positive.  Everything here is pure,
differentiable where it claims to be, and safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

# Boxes thinner than this are rejected as degenerate.
MIN_SIDE = 1e-6


@dataclass(frozen=True)
class Region:
    """A single normalized box, convenient for datasets and manifests."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not (v == v and abs(v) != float("inf")):
                raise ValueError(f"region field {name} is not finite: {v}")
        if self.w < MIN_SIDE or self.h < MIN_SIDE:
            raise ValueError(f"degenerate region size {self.w}x{self.h}")

    def as_tensor(self, dtype: torch.dtype = torch.float32) -> Tensor:
        return torch.tensor([self.cx, self.cy, self.w, self.h], dtype=dtype)

    @staticmethod
    def from_tensor(t: Tensor) -> "Region":
        cx, cy, w, h = (float(v) for v in t.reshape(4))
        return Region(cx, cy, w, h)

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )


def validate_boxes(boxes: Tensor) -> None:
    """Reject non-finite or degenerate (w or h < MIN_SIDE) boxes."""
    if boxes.shape[-1] != 4:
        raise ValueError(f"expected (...,4) boxes, got {tuple(boxes.shape)}")
    if not torch.isfinite(boxes).all():
        raise ValueError("non-finite box coordinates")
    if (boxes[..., 2:] < MIN_SIDE).any():
        raise ValueError("degenerate box: w or h below minimum size")


def box_corners(boxes: Tensor) -> Tensor:
    """(cx, cy, w, h) -> (x0, y0, x1, y1)."""
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def iou(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise IoU of broadcastable (...,4) center-size boxes."""
    validate_boxes(a)
    validate_boxes(b)
    ca, cb = box_corners(a), box_corners(b)
    lt = torch.maximum(ca[..., :2], cb[..., :2])
    rb = torch.minimum(ca[..., 2:], cb[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def giou(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise generalized IoU in [-1, 1]: IoU - (hull - union) / hull."""
    validate_boxes(a)
    validate_boxes(b)
    ca, cb = box_corners(a), box_corners(b)
    lt = torch.maximum(ca[..., :2], cb[..., :2])
    rb = torch.minimum(ca[..., 2:], cb[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    hlt = torch.minimum(ca[..., :2], cb[..., :2])
    hrb = torch.maximum(ca[..., 2:], cb[..., 2:])
    hwh = hrb - hlt
    hull = hwh[..., 0] * hwh[..., 1]
    return inter / union - (hull - union) / hull


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Sum of absolute differences over (cx, cy, w, h)."""
    return (a - b).abs().sum(dim=-1)


def clamp_boxes(boxes: Tensor, straight_through: bool = False) -> Tensor:
    """Clamp boxes so they lie inside [0, 1]^2 with sides in [MIN_SIDE, 1].

    With straight_through=True the clamp acts as identity for gradients.
    """
    cx, cy, w, h = boxes.unbind(-1)
    w = w.clamp(MIN_SIDE, 1.0)
    h = h.clamp(MIN_SIDE, 1.0)
    cx = torch.minimum(torch.maximum(cx, w / 2), 1 - w / 2)
    cy = torch.minimum(torch.maximum(cy, h / 2), 1 - h / 2)
    out = torch.stack([cx, cy, w, h], dim=-1)
    if straight_through:
        out = boxes + (out - boxes).detach()
    return out


def make_grid(center: Tensor, extent_h: float, extent_w: float, k: int) -> Tensor:
    """Tile a (extent_h x extent_w) neighborhood centered on each box into
    k x k equal cells, returned as (..., k*k, 4) in row-major order
    (cell 0 is top-left, cell k*k//2 coincides with the center).
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"grid side k must be odd and positive, got {k}")
    if not (0 < extent_h <= 1 and 0 < extent_w <= 1):
        raise ValueError(f"extents must lie in (0, 1], got ({extent_h}, {extent_w})")
    cell_h = extent_h / k
    cell_w = extent_w / k
    idx = torch.arange(k * k, device=center.device)
    row = (torch.div(idx, k, rounding_mode="floor") - k // 2).to(center.dtype)
    col = (idx % k - k // 2).to(center.dtype)
    cx = center[..., 0:1] + col * cell_w
    cy = center[..., 1:2] + row * cell_h
    w = torch.full_like(cx, cell_w)
    h = torch.full_like(cy, cell_h)
    return torch.stack([cx, cy, w, h], dim=-1)


def grid_offsets(k: int, device=None, dtype=None) -> tuple[Tensor, Tensor]:
    """Signed (col, row) offsets from the center cell for row-major index j."""
    idx = torch.arange(k * k, device=device)
    row = torch.div(idx, k, rounding_mode="floor") - k // 2
    col = idx % k - k // 2
    dtype = dtype or torch.get_default_dtype()
    return col.to(dtype), row.to(dtype)


def _axis_weights(lo: Tensor, hi: Tensor, n: int, dtype, device) -> Tensor:
    """Integrals over [lo, hi] of the n border-clamped hat basis functions
    that define bilinear interpolation along one axis of the unit interval.

    lo, hi: (N,) clipped to [0, 1].  Returns (N, n); rows sum to hi - lo.
    """
    if n == 1:
        return (hi - lo).unsqueeze(-1)
    step = 1.0 / n
    centers = (torch.arange(n, device=device, dtype=dtype) + 0.5) * step

    def cumulative(x: Tensor) -> Tensor:
        # x: (N, 1) -> (N, n): integral of each basis function over [0, x].
        s = ((x - centers) / step).clamp(-1.0, 1.0)
        tri = torch.where(s < 0, (s + 1) ** 2 / 2, 0.5 + s - s**2 / 2) * step
        # first pixel: plateau down to the image edge, then a falling ramp
        s0 = ((x.squeeze(-1) - centers[0]) / step).clamp(0.0, 1.0)
        first = torch.minimum(x.squeeze(-1), centers[0]) + step * (s0 - s0**2 / 2)
        # last pixel: rising ramp, then a plateau up to the far edge
        sn = ((x.squeeze(-1) - centers[-2]) / step).clamp(0.0, 1.0)
        last = step * sn**2 / 2 + (x.squeeze(-1) - centers[-1]).clamp(min=0.0)
        tri = torch.cat([first.unsqueeze(-1), tri[:, 1:-1], last.unsqueeze(-1)], dim=-1)
        return tri

    return cumulative(hi.unsqueeze(-1)) - cumulative(lo.unsqueeze(-1))


def pool_regions(
    fmap: Tensor, boxes: Tensor, samples: int | None = None
) -> tuple[Tensor, Tensor]:
    """Average the bilinear interpolation field of a feature map over the
    part of each box inside the image.

    fmap: (B, D, H, W); boxes: (B, N, 4).  Returns (values (B, N, D),
    valid (B, N)); boxes with empty image intersection get zeros and
    valid=False.  samples=None integrates the field exactly; samples=S
    averages an S x S grid of midpoint samples instead (faster, approximate).
    Differentiable w.r.t. both fmap and box coordinates.
    """
    B, D, H, W = fmap.shape
    corners = box_corners(boxes)
    x0 = corners[..., 0].clamp(0.0, 1.0)
    y0 = corners[..., 1].clamp(0.0, 1.0)
    x1 = corners[..., 2].clamp(0.0, 1.0)
    y1 = corners[..., 3].clamp(0.0, 1.0)
    width = x1 - x0
    height = y1 - y0
    valid = (width > 0) & (height > 0)

    if samples is None:
        wx = _axis_weights(x0.reshape(-1), x1.reshape(-1), W, fmap.dtype, fmap.device)
        wy = _axis_weights(y0.reshape(-1), y1.reshape(-1), H, fmap.dtype, fmap.device)
        wx = wx.reshape(B, -1, W)
        wy = wy.reshape(B, -1, H)
        pooled = torch.einsum("bnh,bnw,bdhw->bnd", wy, wx, fmap)
        area = (width * height).clamp(min=MIN_SIDE**2).unsqueeze(-1)
        pooled = pooled / area
    else:
        if samples < 1:
            raise ValueError("samples must be positive")
        ticks = (torch.arange(samples, device=fmap.device, dtype=fmap.dtype) + 0.5) / samples
        px = x0.unsqueeze(-1) + width.unsqueeze(-1) * ticks  # (B, N, S)
        py = y0.unsqueeze(-1) + height.unsqueeze(-1) * ticks
        gx = (px * 2 - 1).unsqueeze(-2).expand(-1, -1, samples, -1)  # (B, N, S, S)
        gy = (py * 2 - 1).unsqueeze(-1).expand(-1, -1, -1, samples)
        grid = torch.stack([gx, gy], dim=-1).reshape(B, -1, samples * samples, 2)
        sampled = torch.nn.functional.grid_sample(
            fmap, grid, mode="bilinear", padding_mode="border", align_corners=False
        )  # (B, D, N, S*S)
        pooled = sampled.mean(dim=-1).transpose(1, 2)

    return pooled * valid.unsqueeze(-1), valid


def pool_region(fmap: Tensor, region: Tensor | Region, samples: int | None = None) -> Tensor:
    """Pool a single region from an (H, W, D) feature map into a (D,) vector.

    Returns zeros when the region misses the image entirely.
    """
    if isinstance(region, Region):
        region = region.as_tensor(dtype=fmap.dtype)
    validate_boxes(region)
    chw = fmap.permute(2, 0, 1).unsqueeze(0)
    pooled, _ = pool_regions(chw, region.reshape(1, 1, 4).to(fmap.dtype), samples=samples)
    return pooled[0, 0]
