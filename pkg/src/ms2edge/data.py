"""Image/GT pairs on disk and a seeded synthetic shapes dataset."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from skimage import draw

IGNORE = -1.0
EXTS = (".png", ".pgm")
GT_IGNORE_VALUE = 64       # written for ignore pixels; any value in (0, 128) reads back as ignore
LEVELS = np.linspace(0.15, 0.85, 5)


@dataclass
class Sample:
    image: np.ndarray       # [3,H,W] float32 in [0,1]
    gt: np.ndarray          # [1,H,W] float32 in {0, 1, IGNORE}
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image, np.float32)
        self.gt = np.asarray(self.gt, np.float32)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.id}: image must be [3,H,W], got {self.image.shape}")
        if self.gt.shape != (1,) + self.image.shape[1:]:
            raise ValueError(f"{self.id}: gt shape {self.gt.shape} does not pair with image {self.image.shape}")
        if not np.isin(self.gt, (0.0, 1.0, IGNORE)).all():
            raise ValueError(f"{self.id}: gt values must be 0, 1 or IGNORE")

    @property
    def valid(self):
        return self.gt != IGNORE


# disk I/O ----------------------------------------------------------------------

def gt_from_uint8(v):
    """8-bit GT: >= 128 is an edge, 0 is background, anything between is ignored."""
    v = np.asarray(v)
    out = np.full(v.shape, IGNORE, np.float32)
    out[v >= 128] = 1.0
    out[v == 0] = 0.0
    return out


def gt_to_uint8(gt):
    gt = np.asarray(gt)
    out = np.zeros(gt.shape, np.uint8)
    out[gt == 1] = 255
    out[gt == IGNORE] = GT_IGNORE_VALUE
    return out


def read_image(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB"), np.float32) / 255.0).transpose(2, 0, 1)


def read_gt(path):
    with Image.open(path) as im:
        return gt_from_uint8(np.asarray(im.convert("L")))[None]


def write_png(path, arr_uint8):
    Image.fromarray(np.asarray(arr_uint8, np.uint8)).save(path)


def _files(d):
    if not d.is_dir():
        return {}
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in EXTS}


def _split_dir(root, split):
    root = Path(root)
    return root / split if split else root


def load_dir(path, split=None):
    """Samples from <path>[/<split>]/images and .../gt, paired by file stem."""
    base = _split_dir(path, split)
    images, gts = _files(base / "images"), _files(base / "gt")
    out = []
    for stem in sorted(images):
        if stem not in gts:
            warnings.warn(f"no ground truth for {images[stem]}; skipped")
            continue
        out.append(Sample(read_image(images[stem]), read_gt(gts[stem]), stem))
    return out


def save_dir(samples, path, split=None):
    """Write 8-bit PNGs (RGB images, grayscale GT) plus a manifest of id/image/gt paths."""
    base = _split_dir(path, split)
    (base / "images").mkdir(parents=True, exist_ok=True)
    (base / "gt").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        img = np.clip(np.round(s.image * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        ip, gp = base / "images" / f"{s.id}.png", base / "gt" / f"{s.id}.png"
        write_png(ip, img)
        write_png(gp, gt_to_uint8(s.gt[0]))
        rows.append(f"{s.id}\t{ip.relative_to(base)}\t{gp.relative_to(base)}")
    (base / "manifest.txt").write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")
    return base


def crop_random(sample: Sample, size, seed=0) -> Sample:
    ch, cw = (size, size) if np.isscalar(size) else size
    h, w = sample.image.shape[1:]
    if ch > h or cw > w or ch < 1 or cw < 1:
        raise ValueError(f"crop {ch}x{cw} does not fit image {h}x{w}")
    rng = np.random.default_rng(seed)
    y, x = int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
    return Sample(sample.image[:, y:y + ch, x:x + cw], sample.gt[:, y:y + ch, x:x + cw], sample.id)


# synthetic shapes --------------------------------------------------------------

def boundary_gt(levels):
    """1-pixel boundaries of a region map given by luminance level per pixel.

    A pixel is marked when one of its 4-neighbours belongs to a darker region,
    so every boundary is drawn once, on its brighter side.
    """
    lv = np.asarray(levels)
    gt = np.zeros(lv.shape, bool)
    gt[1:] |= lv[:-1] < lv[1:]
    gt[:-1] |= lv[1:] < lv[:-1]
    gt[:, 1:] |= lv[:, :-1] < lv[:, 1:]
    gt[:, :-1] |= lv[:, 1:] < lv[:, :-1]
    return gt


def _shape_mask(rng, size):
    cy, cx = rng.uniform(0.15, 0.85, 2) * size
    if rng.random() < 0.5:
        ry, rx = rng.uniform(0.12, 0.35, 2) * size
        rr, cc = draw.ellipse(cy, cx, ry, rx, (size, size), rotation=rng.uniform(0, np.pi))
    else:
        k = int(rng.integers(3, 7))
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        rad = rng.uniform(0.12, 0.35, k) * size
        rr, cc = draw.polygon(cy + rad * np.sin(ang), cx + rad * np.cos(ang), (size, size))
    m = np.zeros((size, size), bool)
    m[rr, cc] = True
    return m


def _texture(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = rng.uniform(2, 6)
    th = rng.uniform(0, np.pi)
    wave = 0.03 * np.sin(2 * np.pi * f * (xx * np.cos(th) + yy * np.sin(th)) + rng.uniform(0, 2 * np.pi))
    return wave + rng.normal(0, 0.02, (size, size))


def synth_scene(size, rng):
    """One image and its per-pixel luminance-level map (before rejection checks)."""
    n = int(rng.integers(2, 5))
    order = rng.permutation(len(LEVELS))[:n + 1]  # distinct level per region, background first
    level = np.full((size, size), order[0])
    for k in order[1:]:
        level[_shape_mask(rng, size)] = k
    img = np.empty((3, size, size))
    for k in np.unique(level):
        m = level == k
        chroma = rng.uniform(-0.05, 0.05, 3)
        tex = _texture(rng, size)
        for c in range(3):
            img[c][m] = LEVELS[k] + chroma[c] + tex[m]
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return img.astype(np.float32), level


def _thin_enough(gt):
    # no 2x2 block of edge pixels
    return not (gt[:-1, :-1] & gt[1:, :-1] & gt[:-1, 1:] & gt[1:, 1:]).any()


def synth_shapes(n, size=64, seed=0, max_tries=50):
    """n seeded images of overlapping filled shapes with exact 1-pixel boundary GT.

    Scenes whose boundary map is not thin (a 2x2 block, or pixels a
    non-maximum suppression pass would remove) are redrawn.
    """
    from .evaluation import average_crispness
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(int(n)):
        for _ in range(max_tries):
            img, level = synth_scene(size, rng)
            gt = boundary_gt(level)
            if gt.sum() and _thin_enough(gt) and average_crispness(gt.astype(np.float32)) == 1.0:
                break
        else:
            raise RuntimeError(f"could not draw a thin-boundary scene in {max_tries} tries")
        out.append(Sample(img, gt[None].astype(np.float32), f"synth{seed}_{i:05d}"))
    return out


def batches(samples, batch_size, rng=None):
    """Stack samples into (images [B,3,H,W], gts [B,1,H,W]); shuffled when rng is given."""
    idx = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for s in range(0, len(idx), batch_size):
        part = [samples[i] for i in idx[s:s + batch_size]]
        yield np.stack([p.image for p in part]), np.stack([p.gt for p in part])
