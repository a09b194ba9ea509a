"""Synthetic few-shot segmentation episodes.

Twelve parametric silhouette classes in three families (polygons, rings,
crosses), split 9 base / 3 novel with the middle member of each family
held out.  Foreground and background share the same low-frequency noise
texture family, so classes are separable by shape only.  Silhouettes are
rasterized analytically: each pixel center is pulled back through the
inverse of (viewpoint homography after instance placement) and
evaluated against the canonical indicator, which keeps masks exactly
binary under any view.

Everything is a pure function of its RNG, so episodes regenerate
bit-identically from a manifest of seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DegenerateViewError, Homography, identity_homography, \
    perturb_corners

MIN_FG_AREA = 16


@dataclass(frozen=True)
class ShapeClass:
    class_id: int
    family: str       # "ngon" | "ring" | "cross"
    param: float      # vertex count, ring thickness, or arm ratio
    aspect: float = 1.0

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Indicator of the canonical silhouette at N x 2 points.

        Canonical shapes are centered at the origin with outer radius 1.
        """
        x = pts[:, 0] / self.aspect
        y = pts[:, 1]
        if self.family == "ngon":
            n = int(self.param)
            angles = 2.0 * np.pi * np.arange(n) / n + np.pi / 2.0
            vx, vy = np.cos(angles), np.sin(angles)
            inside = np.ones(len(pts), dtype=bool)
            for i in range(n):
                j = (i + 1) % n
                ex, ey = vx[j] - vx[i], vy[j] - vy[i]
                inside &= ex * (y - vy[i]) - ey * (x - vx[i]) >= 0.0
            return inside
        if self.family == "ring":
            r2 = x * x + y * y
            inner = 1.0 - self.param
            return (r2 <= 1.0) & (r2 >= inner * inner)
        if self.family == "cross":
            arm = self.param
            return ((np.abs(x) <= 1.0) & (np.abs(y) <= arm)) \
                | ((np.abs(y) <= 1.0) & (np.abs(x) <= arm))
        raise ValueError(f"unknown shape family {self.family!r}")


# family members are ordered by parameter; the middle of each family is
# held out as novel, giving 9 base / 3 novel with disjoint pools
SHAPE_CLASSES = (
    ShapeClass(0, "ngon", 3),
    ShapeClass(1, "ngon", 4, aspect=0.6),
    ShapeClass(2, "ngon", 5),
    ShapeClass(3, "ngon", 6, aspect=0.6),
    ShapeClass(4, "ngon", 7),
    ShapeClass(5, "ngon", 8, aspect=0.6),
    ShapeClass(6, "ring", 0.2),
    ShapeClass(7, "ring", 0.45),
    ShapeClass(8, "ring", 0.7),
    ShapeClass(9, "cross", 0.2),
    ShapeClass(10, "cross", 0.35),
    ShapeClass(11, "cross", 0.5),
)

NOVEL_CLASS_IDS = frozenset({3, 7, 10})
BASE_CLASS_IDS = frozenset(c.class_id for c in SHAPE_CLASSES) - NOVEL_CLASS_IDS

assert not (BASE_CLASS_IDS & NOVEL_CLASS_IDS)


@dataclass
class Episode:
    supports: list            # K (image 3xHxW, mask HxW) pairs
    query_image: np.ndarray   # 3 x H x W
    query_mask: np.ndarray    # H x W binary
    class_id: int


@dataclass(frozen=True)
class _Placement:
    """Affine instance placement: canonical -> normalized image coords."""

    center: np.ndarray
    scale: float
    angle: float

    def pull_back(self, pts: np.ndarray) -> np.ndarray:
        d = (pts - self.center) / self.scale
        c, s = math.cos(-self.angle), math.sin(-self.angle)
        return np.stack([c * d[:, 0] - s * d[:, 1],
                         s * d[:, 0] + c * d[:, 1]], axis=1)


def _draw_placement(rng: np.random.Generator) -> _Placement:
    return _Placement(
        center=rng.uniform(0.32, 0.68, size=2),
        scale=rng.uniform(0.16, 0.28),
        angle=rng.uniform(0.0, 2.0 * np.pi),
    )


def _pixel_centers(size: int) -> np.ndarray:
    g = (np.arange(size) + 0.5) / size
    xx, yy = np.meshgrid(g, g)
    return np.stack([xx.reshape(-1), yy.reshape(-1)], axis=1)


def _silhouette(shape: ShapeClass, place: _Placement, view_h: Homography,
                size: int) -> np.ndarray:
    pts = _pixel_centers(size)
    if not view_h.is_identity():
        pts = view_h.inverse().apply(pts)
    return shape.contains(place.pull_back(pts)).reshape(size, size)


def _noise_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Per-channel low-frequency noise in [0, 1] (bilinear blow-up of 5x5)."""
    coarse = rng.uniform(0.1, 0.9, size=(3, 5, 5))
    s = np.clip((np.arange(size) + 0.5) * 5.0 / size - 0.5, 0.0, 4.0)
    i0 = np.minimum(s.astype(np.intp), 3)
    w = s - i0
    rows = coarse[:, i0, :] * (1.0 - w)[None, :, None] \
        + coarse[:, i0 + 1, :] * w[None, :, None]
    return rows[:, :, i0] * (1.0 - w)[None, None, :] \
        + rows[:, :, i0 + 1] * w[None, None, :]


def render_sample(shape: ShapeClass, view_h: Homography, clutter_n: int,
                  rng: np.random.Generator, size: int = 64,
                  occlusion: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """One textured instance of ``shape`` under ``view_h`` plus clutter.

    Distractor shapes from other classes render beneath the foreground
    and stay outside the mask.  A degenerate view (under ``MIN_FG_AREA``
    foreground pixels) is redrawn at the homography's own delta_max up
    to 8 times.  With ``occlusion`` > 0 a random box may cover part of
    the foreground; the mask keeps only visible pixels.
    """
    if size < 32:
        raise ValueError(f"image size must be >= 32, got {size}")
    place = _draw_placement(rng)
    mask = _silhouette(shape, place, view_h, size)
    for _ in range(8):
        if mask.sum() >= MIN_FG_AREA:
            break
        view_h = perturb_corners(view_h.delta_max, rng)
        mask = _silhouette(shape, place, view_h, size)
    else:
        raise DegenerateViewError(
            f"class {shape.class_id}: foreground below {MIN_FG_AREA} px "
            f"after 8 view redraws")

    image = _noise_texture(size, rng)
    others = [c for c in SHAPE_CLASSES if c.class_id != shape.class_id]
    for _ in range(clutter_n):
        distractor = others[rng.integers(len(others))]
        d_mask = _silhouette(distractor, _draw_placement(rng),
                             identity_homography(), size)
        d_mask &= ~mask  # clutter never overwrites foreground
        image = np.where(d_mask[None], _noise_texture(size, rng), image)

    image = np.where(mask[None], _noise_texture(size, rng), image)
    if occlusion > 0.0 and rng.uniform() < occlusion:
        oy, ox = rng.integers(0, size, size=2)
        oh, ow = rng.integers(size // 8, size // 3, size=2)
        box = np.zeros((size, size), dtype=bool)
        box[oy:oy + oh, ox:ox + ow] = True
        image = np.where(box[None], _noise_texture(size, rng), image)
        mask = mask & ~box
    return image, mask.astype(np.float64)


def split_pool(split: str) -> list[ShapeClass]:
    if split == "base":
        ids = BASE_CLASS_IDS
    elif split == "novel":
        ids = NOVEL_CLASS_IDS
    else:
        raise ValueError(f"unknown split {split!r}")
    return [c for c in SHAPE_CLASSES if c.class_id in ids]


def sample_episode(split: str, k: int, view_shift: float,
                   rng: np.random.Generator, size: int = 64,
                   clutter_n: int = 2, occlusion: float = 0.0) -> Episode:
    """Draw one episode: K supports at the identity view, one query whose
    view is shifted by ``view_shift`` (corner perturbation magnitude)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    pool = split_pool(split)
    shape = pool[rng.integers(len(pool))]
    supports = [render_sample(shape, identity_homography(), clutter_n, rng,
                              size=size, occlusion=occlusion)
                for _ in range(k)]
    query_view = perturb_corners(view_shift, rng) if view_shift > 0 \
        else identity_homography()
    q_img, q_mask = render_sample(shape, query_view, clutter_n, rng, size=size)
    return Episode(supports=supports, query_image=q_img, query_mask=q_mask,
                   class_id=shape.class_id)


# ---------------------------------------------------------------------------
# metrics


def _check_binary(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.isin(a, (0.0, 1.0)).all():
        raise ValueError(f"{name} must be binary")
    return a


def miou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean of foreground and background IoU; empty unions count as 1."""
    pred = _check_binary(pred, "pred")
    gt = _check_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    ious = []
    for p, g in ((pred, gt), (1.0 - pred, 1.0 - gt)):
        union = float(np.maximum(p, g).sum())
        inter = float((p * g).sum())
        ious.append(inter / union if union > 0 else 1.0)
    return 0.5 * (ious[0] + ious[1])


def fg_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Foreground-only IoU (secondary metric)."""
    pred = _check_binary(pred, "pred")
    gt = _check_binary(gt, "gt")
    union = float(np.maximum(pred, gt).sum())
    return float((pred * gt).sum()) / union if union > 0 else 1.0


def precision(pred: np.ndarray, gt: np.ndarray) -> float:
    """TP/(TP+FP); with no predicted positives: 1.0 if gt empty else 0.0."""
    pred = _check_binary(pred, "pred")
    gt = _check_binary(gt, "gt")
    positives = float(pred.sum())
    if positives == 0.0:
        return 1.0 if gt.sum() == 0.0 else 0.0
    return float((pred * gt).sum()) / positives


# ---------------------------------------------------------------------------
# manifest and PGM I/O


@dataclass(frozen=True)
class ManifestRow:
    seed: int
    class_id: int
    split: str
    k: int
    view_shift: float

    def line(self) -> str:
        return f"{self.seed} {self.class_id} {self.split} {self.k} {self.view_shift}"


def write_manifest(path: str, rows: list[ManifestRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(row.line() + "\n")


def read_manifest(path: str) -> list[ManifestRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, "
                                 f"got {len(parts)}")
            rows.append(ManifestRow(seed=int(parts[0]), class_id=int(parts[1]),
                                    split=parts[2], k=int(parts[3]),
                                    view_shift=float(parts[4])))
    return rows


def episode_from_row(row: ManifestRow, size: int = 64, clutter_n: int = 2,
                     occlusion: float = 0.0) -> Episode:
    """Regenerate an episode bit-identically from its manifest row."""
    ep = sample_episode(row.split, row.k, row.view_shift,
                        np.random.default_rng(row.seed), size=size,
                        clutter_n=clutter_n, occlusion=occlusion)
    if ep.class_id != row.class_id:
        raise ValueError(
            f"manifest corrupt: seed {row.seed} regenerates class "
            f"{ep.class_id}, manifest says {row.class_id}")
    return ep


def write_pgm(path: str, gray: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) of a [0, 1] grayscale array."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise ValueError(f"PGM wants a 2-D array, got {gray.shape}")
    data = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read a binary PGM back to a [0, 1] float array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError(f"{path}: unsupported maxval")
    data = np.frombuffer(parts[3][:w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated payload")
    return data.reshape(h, w).astype(np.float64) / 255.0


def image_luminance(image: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of a 3 x H x W image, for PGM export."""
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
