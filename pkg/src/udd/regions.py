"""Fixed candidate windows, differentiable crop/upsample, and image-to-feature-map mapping."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .autodiff import Node

SCALE_GROUPS = (("third", Fraction(1, 3)), ("half", Fraction(1, 2)), ("two_thirds", Fraction(2, 3)))
CORNERS = ("TL", "TR", "BL", "BR")


@dataclass(frozen=True)
class RegionSpec:
    x0: int
    y0: int
    w: int
    h: int
    scale_group: str = ""
    corner: str = ""

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0 or self.w < 1 or self.h < 1:
            raise ValueError(f"invalid region {self}")

    def fits(self, H: int, W: int) -> bool:
        return self.x0 + self.w <= W and self.y0 + self.h <= H

    def contains(self, y: int, x: int) -> bool:
        return self.y0 <= y < self.y0 + self.h and self.x0 <= x < self.x0 + self.w


def generate_candidates(H: int, W: int) -> list[RegionSpec]:
    """Twelve windows: sizes floor(s*H) x floor(s*W) for s in 1/3, 1/2, 2/3, flush with each corner.

    Order is group-major (third, half, two_thirds) then TL, TR, BL, BR.
    """
    if H < 3 or W < 3:
        raise ValueError(f"image {H}x{W} too small for candidate regions (needs >= 3x3)")
    out = []
    for group, s in SCALE_GROUPS:
        h, w = int(s * H), int(s * W)
        for corner in CORNERS:
            y0 = 0 if corner[0] == "T" else H - h
            x0 = 0 if corner[1] == "L" else W - w
            out.append(RegionSpec(x0, y0, w, h, group, corner))
    return out


def crop_region(image: Node, r: RegionSpec) -> Node:
    """Window view over the last two axes; the gradient scatters back into the window."""
    H, W = image.shape[-2:]
    if not r.fits(H, W):
        raise ValueError(f"region {r} outside {H}x{W} image")
    return image.graph.apply("crop", [image], y0=r.y0, x0=r.x0, h=r.h, w=r.w)


def upsample_to(node: Node, H: int, W: int) -> Node:
    """Align-corners bilinear resize of the last two axes."""
    return node.graph.apply("bilinear_resize", [node], size=(H, W))


def _round_half_up(v: Fraction) -> int:
    # round-to-nearest with .5 going up, so results do not depend on banker's rounding
    return int(v + Fraction(1, 2)) if v >= 0 else -int(-v + Fraction(1, 2))


def map_to_feature_coords(r: RegionSpec, reduction: int, fh: int, fw: int) -> RegionSpec:
    """Divide by ``reduction``, round to nearest, then clamp into an ``fh x fw`` map."""
    if reduction < 1:
        raise ValueError("reduction must be >= 1")
    x0 = _round_half_up(Fraction(r.x0, reduction))
    y0 = _round_half_up(Fraction(r.y0, reduction))
    w = min(max(_round_half_up(Fraction(r.w, reduction)), 1), fw)
    h = min(max(_round_half_up(Fraction(r.h, reduction)), 1), fh)
    x0 = min(max(x0, 0), fw - w)
    y0 = min(max(y0, 0), fh - h)
    return RegionSpec(x0, y0, w, h, r.scale_group, r.corner)
