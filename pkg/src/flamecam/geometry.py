"""Flame geometry: length, lift-off distance and area from a segmentation mask,
given the nozzle pixel and the metre-per-pixel scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

HORIZONTAL = "horizontal"  # flame develops toward +x
VERTICAL = "vertical"      # flame develops toward -y (upward)

_CONN8 = np.ones((3, 3), dtype=int)


class NoFlameDetected(Exception):
    """No flame pixels survive the minimum-component filter."""


@dataclass(frozen=True)
class SceneCalib:
    metres_per_pixel: float
    nozzle_px: tuple[int, int]  # (x, y)
    axis: str = HORIZONTAL
    min_component_px: int = 50

    def __post_init__(self):
        if self.metres_per_pixel <= 0:
            raise ValueError("metres_per_pixel must be positive")
        if self.axis not in (HORIZONTAL, VERTICAL):
            raise ValueError(f"unknown axis {self.axis!r}")


@dataclass(frozen=True)
class FlameGeometry:
    length_m: float        # L, base of the stable flame to its tip
    liftoff_m: float       # S, nozzle exit to flame base (clamped at 0)
    area_m2: float         # A, component pixel count * mpp^2
    flame_px_count: int
    bounding_box: tuple[int, int, int, int]  # (x0, y0, x1, y1) inclusive
    component_count: int   # components surviving the size filter
    zone_px_counts: tuple[int, int, int]  # outer, middle, central pixels in the component


def connected_components(binary: np.ndarray) -> tuple[np.ndarray, int]:
    """8-connected labeling; labels are assigned in row-major first-pixel order."""
    labels, n = ndimage.label(np.asarray(binary, dtype=bool), structure=_CONN8)
    return labels, int(n)


def characterize(mask: np.ndarray, calib: SceneCalib) -> FlameGeometry:
    """Measure the largest flame component along the configured axis.

    The flame region is the union of the three zone classes; components
    below min_component_px are treated as detached puffs and ignored.
    """
    h, w = mask.shape
    nx, ny = calib.nozzle_px
    if not (0 <= nx < w and 0 <= ny < h):
        raise ValueError(f"nozzle {calib.nozzle_px} outside {w}x{h} mask")

    labels, n = connected_components(mask > 0)
    if n == 0:
        raise NoFlameDetected("no flame pixels in mask")
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
    surviving = [i + 1 for i, s in enumerate(sizes) if s >= calib.min_component_px]
    if not surviving:
        raise NoFlameDetected(
            f"all {n} components below min_component_px={calib.min_component_px}")
    # largest surviving component is the stable flame; ties to the earliest label
    main = max(surviving, key=lambda i: (sizes[i - 1], -i))
    ys, xs = np.nonzero(labels == main)

    mpp = calib.metres_per_pixel
    if calib.axis == HORIZONTAL:
        base, tip = int(xs.min()), int(xs.max())
        liftoff = max(0, base - nx)
    else:
        base, tip = int(ys.max()), int(ys.min())
        liftoff = max(0, ny - base)
    length = abs(tip - base)

    comp = labels == main
    zone_counts = tuple(int(((mask == c) & comp).sum()) for c in (1, 2, 3))
    return FlameGeometry(
        length_m=length * mpp,
        liftoff_m=liftoff * mpp,
        area_m2=len(xs) * mpp * mpp,
        flame_px_count=len(xs),
        bounding_box=(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())),
        component_count=len(surviving),
        zone_px_counts=zone_counts,
    )


# ---------------------------------------------------------------------------
# Overlay rendering (display path)
# ---------------------------------------------------------------------------

_FONT = {  # 3x5 glyphs, rows top to bottom, bit 2 = left pixel
    "0": (0b111, 0b101, 0b101, 0b101, 0b111),
    "1": (0b010, 0b110, 0b010, 0b010, 0b111),
    "2": (0b111, 0b001, 0b111, 0b100, 0b111),
    "3": (0b111, 0b001, 0b111, 0b001, 0b111),
    "4": (0b101, 0b101, 0b111, 0b001, 0b001),
    "5": (0b111, 0b100, 0b111, 0b001, 0b111),
    "6": (0b111, 0b100, 0b111, 0b101, 0b111),
    "7": (0b111, 0b001, 0b010, 0b010, 0b010),
    "8": (0b111, 0b101, 0b111, 0b101, 0b111),
    "9": (0b111, 0b101, 0b111, 0b001, 0b111),
    ".": (0b000, 0b000, 0b000, 0b000, 0b010),
    "=": (0b000, 0b111, 0b000, 0b111, 0b000),
    " ": (0b000, 0b000, 0b000, 0b000, 0b000),
    "L": (0b100, 0b100, 0b100, 0b100, 0b111),
    "S": (0b111, 0b100, 0b111, 0b001, 0b111),
    "A": (0b111, 0b101, 0b111, 0b101, 0b101),
    "m": (0b000, 0b110, 0b111, 0b101, 0b101),
}


def _draw_text(img: np.ndarray, x: int, y: int, text: str,
               color=(255, 255, 255)) -> None:
    for ch in text:
        glyph = _FONT.get(ch, _FONT[" "])
        for r, row in enumerate(glyph):
            for c in range(3):
                if row & (4 >> c) and 0 <= y + r < img.shape[0] and 0 <= x + c < img.shape[1]:
                    img[y + r, x + c] = color
        x += 4


def render_overlay(image: np.ndarray, geom: FlameGeometry) -> np.ndarray:
    """Draw the flame bounding box and L/S/A readouts into an RGB frame."""
    out = image.copy()
    x0, y0, x1, y1 = geom.bounding_box
    color = (0, 255, 0)
    out[y0, x0:x1 + 1] = color
    out[y1, x0:x1 + 1] = color
    out[y0:y1 + 1, x0] = color
    out[y0:y1 + 1, x1] = color
    lines = [
        f"L={geom.length_m:.2f}m",
        f"S={geom.liftoff_m:.2f}m",
        f"A={geom.area_m2:.2f}m2",
    ]
    for i, line in enumerate(lines):
        _draw_text(out, 2, 2 + 7 * i, line)
    return out
