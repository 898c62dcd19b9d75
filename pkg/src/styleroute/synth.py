"""Procedural content scenes and style families.

Content images are single shapes on a uniform background. Backgrounds draw
every channel from [30, 90] and shape fills from [170, 250], so foreground
and background stay far apart in every channel; all style transforms below
preserve that separation, which keeps the binarized shape mask recoverable
(and its IoU against the source mask >= 0.7 by construction).

Twelve default families span four depths of style:
  color    per-pixel color maps (warm / cool / neon channel swap / mono)
  line     strokes painted inside the shape (dark or light outline, hatch)
  texture  foreground-only fills (grain noise, checker, stripes)
  semantic structural edits of the shape (center cutout, corner studs),
           each capped so the mask change stays within the IoU bound
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ContentImage",
    "StyleFamily",
    "CATEGORIES",
    "generate_content",
    "default_families",
    "identity_family",
    "apply_style",
    "shape_mask",
    "mask_iou",
    "raw_caption",
]

CATEGORIES = ("circle", "square", "triangle", "cross")
MASK_TOLERANCE = 20  # max-channel distance from the modal color that still counts as background


@dataclass
class ContentImage:
    content_id: str
    category: str
    image: np.ndarray
    mask: np.ndarray
    caption: str
    seed: int


@dataclass(frozen=True)
class StyleFamily:
    style_id: str
    level: str
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __hash__(self):
        return hash((self.style_id, self.level, self.kind, self.seed))


def _draw_shape(category: str, size: int, rng: np.random.Generator) -> np.ndarray:
    r = int(rng.integers(3, 6))
    cx = int(rng.integers(r + 1, size - r - 1))
    cy = int(rng.integers(r + 1, size - r - 1))
    yy, xx = np.mgrid[0:size, 0:size]
    if category == "circle":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    elif category == "square":
        mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    elif category == "triangle":
        rel = yy - (cy - r)
        mask = (rel >= 0) & (rel <= 2 * r) & (np.abs(xx - cx) * 2 <= rel)
    elif category == "cross":
        mask = ((np.abs(xx - cx) <= 1) | (np.abs(yy - cy) <= 1)) & (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
    else:
        raise ValueError(f"unknown content category: {category!r}")
    return mask


_COLOR_WORDS = (
    ("red", (220, 60, 60)),
    ("green", (60, 200, 80)),
    ("blue", (70, 90, 220)),
    ("yellow", (230, 220, 70)),
    ("purple", (170, 80, 200)),
    ("orange", (240, 150, 60)),
)


def _nearest_color_word(rgb: np.ndarray) -> str:
    dists = [np.sum((rgb.astype(float) - np.array(ref)) ** 2) for _, ref in _COLOR_WORDS]
    return _COLOR_WORDS[int(np.argmin(dists))][0]


def raw_caption(category: str, fg: np.ndarray, bg: np.ndarray) -> str:
    shade = "dark" if bg.mean() < 60 else "bright"
    return f"a {_nearest_color_word(fg)} {category} on a {shade} background"


def generate_content(count: int, categories=CATEGORIES, seed: int = 0, size: int = 16) -> list[ContentImage]:
    """Deterministic shape scenes; categories cycle so divisible counts split evenly."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    contents = []
    for i in range(count):
        category = categories[i % len(categories)]
        bg = rng.integers(30, 91, size=3).astype(np.uint8)
        fg = rng.integers(170, 251, size=3).astype(np.uint8)
        mask = _draw_shape(category, size, rng)
        image = np.empty((size, size, 3), dtype=np.uint8)
        image[:] = bg
        image[mask] = fg
        contents.append(
            ContentImage(
                content_id=f"c{i:04d}",
                category=category,
                image=image,
                mask=mask,
                caption=raw_caption(category, fg, bg),
                seed=seed,
            )
        )
    return contents


def default_families(seed: int = 0) -> list[StyleFamily]:
    """Twelve families. Each remaps the scene to a fixed two-tone palette
    (its color identity) and then applies its level-specific structure."""
    maps = [
        ("warm-palette", "color", "duotone", {"dark": (110, 45, 25), "bright": (240, 170, 90)}),
        ("cool-palette", "color", "duotone", {"dark": (25, 45, 110), "bright": (120, 190, 240)}),
        ("neon-glow", "color", "duotone", {"dark": (30, 10, 40), "bright": (90, 250, 180)}),
        ("mono-wash", "color", "duotone", {"dark": (40, 40, 40), "bright": (200, 200, 200)}),
        ("ink-outline", "line", "outline", {"dark": (235, 225, 205), "bright": (180, 170, 150), "stroke": (0, 0, 0)}),
        ("chalk-outline", "line", "outline", {"dark": (45, 45, 60), "bright": (85, 85, 110), "stroke": (255, 255, 255)}),
        ("hatch-strokes", "line", "hatch", {"dark": (250, 245, 235), "bright": (205, 195, 170), "stroke": (40, 30, 30), "period": 3}),
        ("grain-noise", "texture", "grain", {"dark": (70, 60, 60), "bright": (160, 150, 140), "amplitude": 35}),
        ("checker-fill", "texture", "checker", {"dark": (90, 70, 50), "bright": (200, 180, 140), "alt": (140, 120, 90), "cell": 2}),
        ("stripe-fill", "texture", "stripes", {"dark": (50, 70, 90), "bright": (180, 200, 220), "alt": (120, 140, 160), "period": 2}),
        ("hollow-core", "semantic", "cutout", {"dark": (60, 50, 70), "bright": (190, 170, 210), "max_fraction": 0.25}),
        ("studded-rim", "semantic", "studs", {"dark": (80, 85, 60), "bright": (210, 220, 170), "stud": (255, 255, 255), "count": 4}),
    ]
    return [StyleFamily(style_id=s, level=lv, kind=k, params=p, seed=seed) for s, lv, k, p in maps]


def identity_family() -> StyleFamily:
    return StyleFamily(style_id="identity", level="color", kind="identity")


def shape_mask(image: np.ndarray) -> np.ndarray:
    """Foreground = pixels whose max-channel distance from the modal color
    exceeds the tolerance. The modal color is the uniform background."""
    flat = image.reshape(-1, 3)
    colors, counts = np.unique(flat, axis=0, return_counts=True)
    modal = colors[np.argmax(counts)]
    dist = np.abs(image.astype(np.int16) - modal.astype(np.int16)).max(axis=2)
    return dist > MASK_TOLERANCE


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _duotone(image: np.ndarray, dark, bright) -> np.ndarray:
    """Map pixels with luma < 128 to the dark palette color, others to bright."""
    y = 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]
    out = np.empty_like(image)
    out[:] = np.array(dark, dtype=np.uint8)
    out[y >= 128] = np.array(bright, dtype=np.uint8)
    return out


def apply_style(content: ContentImage, family: StyleFamily, seed: int = 0) -> np.ndarray:
    """Deterministic style transform of one content image."""
    rng = np.random.default_rng([family.seed, seed])
    mask = content.mask
    kind, p = family.kind, family.params
    if kind == "identity":
        return content.image.copy()
    img = _duotone(content.image, p["dark"], p["bright"])
    if kind == "duotone":
        return img
    if kind == "outline":
        interior = mask.copy()
        interior[1:-1, 1:-1] = (
            mask[1:-1, 1:-1] & mask[:-2, 1:-1] & mask[2:, 1:-1] & mask[1:-1, :-2] & mask[1:-1, 2:]
        )
        interior[0, :] = interior[-1, :] = interior[:, 0] = interior[:, -1] = False
        img[mask & ~interior] = np.array(p["stroke"], dtype=np.uint8)
        return img
    if kind == "hatch":
        yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
        lines = ((xx + yy) % p["period"]) == 0
        img[mask & lines] = np.array(p["stroke"], dtype=np.uint8)
        return img
    if kind == "grain":
        noise = rng.integers(-p["amplitude"], p["amplitude"] + 1, size=img.shape)
        noisy = np.clip(img.astype(np.int16) + noise, 0, 255).astype(np.uint8)
        img[mask] = noisy[mask]
        return img
    if kind == "checker":
        yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
        cells = ((xx // p["cell"]) + (yy // p["cell"])) % 2 == 0
        img[mask & cells] = np.array(p["alt"], dtype=np.uint8)
        return img
    if kind == "stripes":
        yy = np.mgrid[0 : img.shape[0], 0 : img.shape[1]][0]
        rows = (yy % (2 * p["period"])) < p["period"]
        img[mask & rows] = np.array(p["alt"], dtype=np.uint8)
        return img
    if kind == "cutout":
        area = int(mask.sum())
        ys, xs = np.nonzero(mask)
        cy, cx = int(round(ys.mean())), int(round(xs.mean()))
        yy, xx = np.mgrid[0 : img.shape[0], 0 : img.shape[1]]
        radius = max(1.0, np.sqrt(p["max_fraction"] * area / np.pi))
        hole = ((xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius) & mask
        while hole.sum() > p["max_fraction"] * area and radius > 1.0:
            radius -= 0.5
            hole = ((xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius) & mask
        img[hole] = np.array(p["dark"], dtype=np.uint8)
        return img
    if kind == "studs":
        ys, xs = np.nonzero(mask)
        y0, y1, x0, x1 = ys.min(), ys.max(), xs.min(), xs.max()
        corners = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)][: p["count"]]
        # at most 4 added pixels against a shape of >= 25, so IoU stays >= 0.85
        for cy, cx in corners:
            img[cy, cx] = np.array(p["stud"], dtype=np.uint8)
        return img
    raise ValueError(f"unknown style kind: {kind!r}")
