"""Synthetic flame scenes with exact ground truth, plus the geometric
augmentation pipeline used to stretch small datasets.

Scenes are pseudo-IR frames of a horizontal jet: three nested teardrop
zones (central hottest) starting lift_off_px downstream of the nozzle,
with per-zone intensity bands and seeded Gaussian noise on the frame only.
Masks and geometry are exact by construction.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from pathlib import Path

import cv2
import numpy as np

from .geometry import FlameGeometry, SceneCalib
from .netpbm import write_pgm

# inner zones as (start, end) fractions of the flame length and width scale
_ZONES = ((0.0, 1.0, 1.0), (0.12, 0.92, 0.62), (0.25, 0.82, 0.32))

DEFAULT_SPLIT = (96, 50, 55)  # train / val / test proportions at n=201


@dataclass(frozen=True)
class FlameSceneSpec:
    seed: int = 0
    height: int = 480
    width: int = 640
    nozzle_px: tuple[int, int] = (40, 240)
    lift_off_px: int = 30
    length_px: int = 360
    max_width_px: int = 140
    intensities: tuple[int, int, int, int] = (20, 120, 180, 230)  # bg, outer, middle, central
    noise_sigma: float = 6.0
    metres_per_pixel: float = 0.01

    def __post_init__(self):
        bg, outer, middle, central = self.intensities
        if not bg < outer < middle < central:
            raise ValueError("zone intensities must be strictly ordered")
        nx, ny = self.nozzle_px
        if not (0 <= nx < self.width and 0 <= ny < self.height):
            raise ValueError("nozzle outside image")
        if nx + self.lift_off_px + self.length_px >= self.width:
            raise ValueError("flame does not fit in the image")
        if self.lift_off_px < 0 or self.length_px < 1 or self.max_width_px < 2:
            raise ValueError("invalid flame dimensions")

    def calib(self, min_component_px: int = 50) -> SceneCalib:
        return SceneCalib(metres_per_pixel=self.metres_per_pixel,
                          nozzle_px=self.nozzle_px,
                          min_component_px=min_component_px)


def _teardrop_halfwidth(t: np.ndarray, half_width: float) -> np.ndarray:
    """Half-width profile along the axis: tapered toward the nozzle, rounded tip."""
    prof = np.sqrt(np.clip(t, 0, 1) ** 0.7 * (1.0 - np.clip(t, 0, 1)))
    return half_width * prof / prof.max() if prof.max() > 0 else prof


def generate_scene(spec: FlameSceneSpec) -> tuple[np.ndarray, np.ndarray, FlameGeometry]:
    """Render one scene; returns (frame uint8, mask uint8, exact geometry)."""
    nx, ny = spec.nozzle_px
    x0 = nx + spec.lift_off_px
    x1 = x0 + spec.length_px

    mask = np.zeros((spec.height, spec.width), dtype=np.uint8)
    xs = np.arange(spec.width)
    ys = np.arange(spec.height)
    dy = np.abs(ys[:, None] - ny).astype(float)

    for zone, (f0, f1, wscale) in enumerate(_ZONES, start=1):
        za = x0 + spec.length_px * f0
        zb = x0 + spec.length_px * f1
        t = (xs - za) / max(zb - za, 1e-9)
        inside_x = (xs >= za) & (xs <= zb)
        hw = _teardrop_halfwidth(t, spec.max_width_px * wscale / 2.0)
        zone_mask = inside_x[None, :] & (dy <= hw[None, :])
        mask[zone_mask] = zone

    bands = np.array(spec.intensities, dtype=np.float64)
    frame = bands[mask]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        frame = frame + rng.normal(0.0, spec.noise_sigma, size=frame.shape)
    frame = np.clip(np.round(frame), 0, 255).astype(np.uint8)

    flame_px = int((mask > 0).sum())
    mpp = spec.metres_per_pixel
    truth = FlameGeometry(
        length_m=spec.length_px * mpp,
        liftoff_m=spec.lift_off_px * mpp,
        area_m2=flame_px * mpp * mpp,
        flame_px_count=flame_px,
        bounding_box=(x0, int(ny - spec.max_width_px / 2), x1, int(ny + spec.max_width_px / 2)),
        component_count=1,
        zone_px_counts=tuple(int((mask == c).sum()) for c in (1, 2, 3)),
    )
    return frame, mask, truth


def split_sizes(n: int, split: tuple[int, int, int] | None = None) -> tuple[int, int, int]:
    """Partition n into train/val/test. Defaults mirror the 96/50/55 proportions."""
    if split is not None:
        if sum(split) > n:
            raise ValueError(f"split {split} exceeds n={n}")
        return tuple(split)
    total = sum(DEFAULT_SPLIT)
    val = round(n * DEFAULT_SPLIT[1] / total)
    test = round(n * DEFAULT_SPLIT[2] / total)
    return n - val - test, val, test


def generate_dataset(n: int, base_spec: FlameSceneSpec, out_dir,
                     split: tuple[int, int, int] | None = None) -> str:
    """Write n varied scenes (frame + mask PGMs) and return the manifest CSV text.

    Lift-off, length and width are randomized around the base spec; each
    scene derives its own seed from the base seed and index.
    """
    sizes = split_sizes(n, split)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2]
    names += ["extra"] * (n - len(names))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame", "mask", "split", "L_m", "S_m", "A_m2", "seed"])
    rng = np.random.default_rng(base_spec.seed)
    for i in range(n):
        spec = vary_spec(base_spec, rng, seed=base_spec.seed * 100_003 + i)
        frame, mask, truth = generate_scene(spec)
        frame_path = out_dir / f"frame_{i:04d}.pgm"
        mask_path = out_dir / f"mask_{i:04d}.pgm"
        write_pgm(frame_path, frame)
        write_pgm(mask_path, mask)
        writer.writerow([frame_path.name, mask_path.name, names[i],
                         f"{truth.length_m:.6f}", f"{truth.liftoff_m:.6f}",
                         f"{truth.area_m2:.8f}", spec.seed])
    manifest = buf.getvalue()
    (out_dir / "manifest.csv").write_text(manifest)
    return manifest


def vary_spec(base: FlameSceneSpec, rng: np.random.Generator,
              seed: int) -> FlameSceneSpec:
    lift = int(rng.integers(max(base.lift_off_px // 2, 5), base.lift_off_px * 2 + 1))
    length = int(base.length_px * rng.uniform(0.6, 1.15))
    width = int(base.max_width_px * rng.uniform(0.7, 1.2))
    max_len = base.width - base.nozzle_px[0] - lift - 2
    return replace(base, seed=seed, lift_off_px=lift,
                   length_px=min(length, max_len), max_width_px=width)


# ---------------------------------------------------------------------------
# Augmentation (flips -> shifts -> rotation, in that fixed order)
# ---------------------------------------------------------------------------

def augment(frame: np.ndarray, mask: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded geometric augmentation applied identically to frame and mask.

    Vertical flip p=0.5, horizontal flip p=0.5, horizontal/vertical shift
    p=0.66 within +/-10% of the image size, rotation p=0.66 within +/-30
    degrees. The frame is resampled bilinearly, the mask nearest-neighbor;
    borders fill with background.
    """
    if frame.shape[:2] != mask.shape[:2]:
        raise ValueError(f"frame {frame.shape} and mask {mask.shape} sizes differ")
    rng = np.random.default_rng(seed)
    h, w = mask.shape[:2]
    f, m = frame, mask

    if rng.random() < 0.5:
        f, m = f[::-1], m[::-1]
    if rng.random() < 0.5:
        f, m = f[:, ::-1], m[:, ::-1]

    dx = dy = 0
    if rng.random() < 0.66:
        dx = int(round(rng.uniform(-0.1, 0.1) * w))
    if rng.random() < 0.66:
        dy = int(round(rng.uniform(-0.1, 0.1) * h))
    angle = rng.uniform(-30.0, 30.0) if rng.random() < 0.66 else 0.0

    if dx or dy:
        mat = np.float32([[1, 0, dx], [0, 1, dy]])
        f = cv2.warpAffine(np.ascontiguousarray(f), mat, (w, h),
                           flags=cv2.INTER_LINEAR, borderValue=0)
        m = cv2.warpAffine(np.ascontiguousarray(m), mat, (w, h),
                           flags=cv2.INTER_NEAREST, borderValue=0)
    if angle:
        f, m = rotate_pair(f, m, angle)
    return np.ascontiguousarray(f), np.ascontiguousarray(m)


def rotate_pair(frame: np.ndarray, mask: np.ndarray,
                angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    h, w = mask.shape[:2]
    mat = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle_deg, 1.0)
    f = cv2.warpAffine(np.ascontiguousarray(frame), mat, (w, h),
                       flags=cv2.INTER_LINEAR, borderValue=0)
    m = cv2.warpAffine(np.ascontiguousarray(mask), mat, (w, h),
                       flags=cv2.INTER_NEAREST, borderValue=0)
    return f, m
