"""Synthetic finger-vein datasets.

Each class ("finger") owns a :class:`VeinTemplate`: a handful of smooth
centerlines with stroke widths. Samples are rendered from the template under
small per-capture perturbations, so that two captures of the same finger share
their vein layout while differing in pose, brightness and noise.

On disk a dataset looks like::

    <root>/manifest.txt
    <root>/session1/class_0/sample_0.png
    <root>/session1/class_0/mask_0.png
    ...

and ``manifest.txt`` holds one ``relpath,maskpath,class_id,session`` record
per line.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.interpolate import CubicSpline
from skimage.transform import resize

from .errors import ConfigError, InvariantError

MANIFEST_NAME = "manifest.txt"

MIN_WIDTH = 1.5
MAX_WIDTH = 8.0


@dataclass
class VeinTemplate:
    """Vascular identity of one class.

    ``centerlines`` holds control points in normalized ``(x, y)`` coordinates,
    x along the finger (image width) and y across it.
    """

    class_id: int
    centerlines: list[np.ndarray]
    widths: list[float]
    depths: list[float] = field(default_factory=list)

    def validate(self) -> None:
        if self.class_id < 0:
            raise InvariantError("class_id must be >= 0")
        if len(self.centerlines) < 2:
            raise InvariantError("a template needs at least 2 curves")
        if len(self.widths) != len(self.centerlines):
            raise InvariantError("one width per curve is required")
        for pts in self.centerlines:
            pts = np.asarray(pts)
            if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
                raise InvariantError("control points must be an (n, 2) array")
            if np.any(pts < 0.0) or np.any(pts > 1.0):
                raise InvariantError("control points must lie in the unit square")
        for w in self.widths:
            if not MIN_WIDTH <= w <= MAX_WIDTH:
                raise InvariantError(f"stroke width {w} outside [{MIN_WIDTH}, {MAX_WIDTH}]")


@dataclass
class PerturbParams:
    """Capture-to-capture variation applied when rendering a template."""

    rotation_deg: float = 0.0
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)
    brightness: float = 0.0
    width_scale: float = 1.0
    noise_sigma: float = 0.03

    @classmethod
    def draw(cls, rng: np.random.Generator, strength: float = 1.0, noise_sigma: float = 0.03):
        """Random perturbation; ``strength`` scales every jitter range."""
        return cls(
            rotation_deg=rng.uniform(-2.0, 2.0) * strength,
            scale=1.0 + rng.uniform(-0.03, 0.03) * strength,
            shift=(rng.uniform(-4.0, 4.0) * strength, rng.uniform(-3.0, 3.0) * strength),
            brightness=rng.uniform(-0.05, 0.05) * strength,
            width_scale=1.0 + rng.uniform(-0.1, 0.1) * strength,
            noise_sigma=noise_sigma,
        )


# session 2 is captured "later", with a wider jitter than session 1
SESSION_STRENGTH = {1: 1.0, 2: 1.5}


class ManifestEntry(NamedTuple):
    image: str
    mask: str
    class_id: int
    session: int


@dataclass
class DatasetManifest:
    root: str
    entries: list[ManifestEntry]
    num_classes: int

    def image_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.image)

    def mask_path(self, entry: ManifestEntry) -> str:
        return os.path.join(self.root, entry.mask)

    def class_ids(self) -> set[int]:
        return {e.class_id for e in self.entries}

    def subset(self, entries) -> "DatasetManifest":
        return DatasetManifest(self.root, list(entries), self.num_classes)

    def validate(self, samples_per_session: int | None = None) -> None:
        counts: dict[tuple[int, int], int] = {}
        for e in self.entries:
            if e.session not in (1, 2):
                raise InvariantError(f"bad session {e.session} for {e.image}")
            counts[(e.class_id, e.session)] = counts.get((e.class_id, e.session), 0) + 1
        for c in range(self.num_classes):
            for s in (1, 2):
                n = counts.get((c, s), 0)
                if n == 0:
                    raise InvariantError(f"class {c} missing from session {s}")
                if samples_per_session is not None and n != samples_per_session:
                    raise InvariantError(
                        f"class {c} session {s} has {n} samples, expected {samples_per_session}"
                    )

    def write(self, path: str | None = None) -> str:
        path = path or os.path.join(self.root, MANIFEST_NAME)
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(f"{e.image},{e.mask},{e.class_id},{e.session}\n")
        return path


def read_manifest(path: str, num_classes: int | None = None) -> DatasetManifest:
    """Load a manifest file. ``path`` may be the file or the dataset root."""
    if os.path.isdir(path):
        path = os.path.join(path, MANIFEST_NAME)
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise InvariantError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            entries.append(ManifestEntry(parts[0], parts[1], int(parts[2]), int(parts[3])))
    n = num_classes if num_classes is not None else 1 + max(e.class_id for e in entries)
    return DatasetManifest(root, entries, n)


def make_template(class_id: int, rng: np.random.Generator) -> VeinTemplate:
    """Random vein layout: 2-3 trunks along the finger plus a few branches."""
    curves, widths, depths = [], [], []
    n_trunks = int(rng.integers(2, 4))
    lanes = np.sort(rng.uniform(0.25, 0.75, n_trunks))
    for y0 in lanes:
        n_ctrl = int(rng.integers(4, 7))
        xs = np.linspace(0.0, 1.0, n_ctrl)
        walk = np.cumsum(rng.uniform(-0.08, 0.08, n_ctrl))
        ys = y0 + walk - walk.mean()
        curves.append(np.column_stack([xs, np.clip(ys, 0.12, 0.88)]))
        widths.append(float(rng.uniform(3.5, 6.5)))
        depths.append(float(rng.uniform(0.22, 0.32)))
    for _ in range(int(rng.integers(1, 4))):
        # branch leaving a trunk towards the top or bottom edge
        parent = curves[int(rng.integers(len(curves)))]
        x_start = rng.uniform(0.15, 0.85)
        y_start = float(np.interp(x_start, parent[:, 0], parent[:, 1]))
        direction = 1.0 if rng.random() < 0.5 else -1.0
        length = rng.uniform(0.2, 0.35)
        n_ctrl = int(rng.integers(4, 6))
        ts = np.linspace(0.0, 1.0, n_ctrl)
        xs = x_start + ts * length * rng.choice([-1.0, 1.0])
        ys = y_start + direction * ts * rng.uniform(0.25, 0.45)
        ys = ys + np.r_[0.0, rng.uniform(-0.03, 0.03, n_ctrl - 1)]
        curves.append(np.column_stack([np.clip(xs, 0.0, 1.0), np.clip(ys, 0.0, 1.0)]))
        widths.append(float(rng.uniform(2.5, 4.5)))
        depths.append(float(rng.uniform(0.18, 0.28)))
    template = VeinTemplate(class_id, curves, widths, depths)
    template.validate()
    return template


def _spline_points(ctrl: np.ndarray, h: int, w: int) -> np.ndarray:
    """Densely sampled spline through control points, in pixel (x, y) units."""
    px = np.column_stack([ctrl[:, 0] * (w - 1), ctrl[:, 1] * (h - 1)])
    seg = np.linalg.norm(np.diff(px, axis=0), axis=1)
    keep = np.r_[True, seg > 1e-9]
    px = px[keep]
    u = np.r_[0.0, np.cumsum(np.linalg.norm(np.diff(px, axis=0), axis=1))]
    if len(px) < 2:
        return px
    spline = CubicSpline(u, px, axis=0, bc_type="natural")
    n = max(int(u[-1] * 3), 8)
    return spline(np.linspace(0.0, u[-1], n))


def _distance_to_curve(points: np.ndarray, h: int, w: int) -> np.ndarray:
    grid = np.zeros((h, w), dtype=bool)
    cols = np.rint(points[:, 0]).astype(int)
    rows = np.rint(points[:, 1]).astype(int)
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    if not inside.any():
        return np.full((h, w), np.inf)
    grid[rows[inside], cols[inside]] = True
    return ndimage.distance_transform_edt(~grid)


def render_sample(
    template: VeinTemplate,
    perturbation: PerturbParams,
    rng: np.random.Generator,
    image_h: int = 128,
    image_w: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one capture of ``template``.

    Returns the image in [0, 1] and the binary mask of pixels whose distance to
    a (perturbed) centerline is at most half the stroke width.
    """
    template.validate()
    h, w = image_h, image_w
    theta = np.deg2rad(perturbation.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    shift = np.asarray(perturbation.shift, dtype=float)

    darkness = np.zeros((h, w))
    mask = np.zeros((h, w), dtype=bool)
    depths = template.depths or [0.25] * len(template.centerlines)
    for ctrl, width, depth in zip(template.centerlines, template.widths, depths):
        pts = _spline_points(np.asarray(ctrl, dtype=float), h, w)
        pts = (pts - center) @ rot.T * perturbation.scale + center + shift
        dist = _distance_to_curve(pts, h, w)
        half = 0.5 * width * perturbation.width_scale
        mask |= dist <= half
        profile = depth * np.exp(-0.5 * (dist / (0.8 * half)) ** 2)
        darkness = np.maximum(darkness, profile)

    rows = (np.arange(h) + 0.5) / h
    background = 0.38 + 0.4 * np.sin(np.pi * rows)[:, None] + perturbation.brightness
    image = np.broadcast_to(background, (h, w)) - darkness
    if perturbation.noise_sigma > 0:
        image = image + rng.normal(0.0, perturbation.noise_sigma, size=(h, w))
    return np.clip(image, 0.0, 1.0), mask.astype(np.uint8)


def save_png(path: str, array: np.ndarray, binary: bool = False) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    data = array.astype(np.uint8) * 255 if binary else np.rint(np.clip(array, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def load_png(path: str, binary: bool = False) -> np.ndarray:
    data = np.asarray(Image.open(path).convert("L"))
    if binary:
        return (data >= 128).astype(np.uint8)
    return data.astype(np.float64) / 255.0


def generate_dataset(
    root: str,
    num_classes: int,
    samples_per_session: int,
    image_h: int = 128,
    image_w: int = 256,
    seed: int = 0,
) -> DatasetManifest:
    """Render a two-session dataset under ``root`` and write its manifest."""
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    if samples_per_session < 1:
        raise ConfigError("samples_per_session must be >= 1")
    if image_h < 64 or image_w < 64:
        raise ConfigError("image dimensions must be >= 64")

    entries = []
    class_seeds = np.random.SeedSequence(seed).spawn(num_classes)
    for class_id, class_seed in enumerate(class_seeds):
        template_seed, *sample_seeds = class_seed.spawn(1 + 2 * samples_per_session)
        template = make_template(class_id, np.random.default_rng(template_seed))
        for session in (1, 2):
            for k in range(samples_per_session):
                rng = np.random.default_rng(sample_seeds[(session - 1) * samples_per_session + k])
                perturb = PerturbParams.draw(rng, SESSION_STRENGTH[session])
                image, mask = render_sample(template, perturb, rng, image_h, image_w)
                folder = f"session{session}/class_{class_id}"
                img_rel = f"{folder}/sample_{k}.png"
                mask_rel = f"{folder}/mask_{k}.png"
                save_png(os.path.join(root, img_rel), image)
                save_png(os.path.join(root, mask_rel), mask, binary=True)
                entries.append(ManifestEntry(img_rel, mask_rel, class_id, session))

    manifest = DatasetManifest(os.path.abspath(root), entries, num_classes)
    manifest.validate(samples_per_session)
    manifest.write()
    return manifest


def split_by_session(manifest: DatasetManifest) -> tuple[DatasetManifest, DatasetManifest]:
    """Session 1 for training, session 2 for testing."""
    manifest.validate()
    train = manifest.subset(e for e in manifest.entries if e.session == 1)
    test = manifest.subset(e for e in manifest.entries if e.session == 2)
    return train, test


@dataclass
class AugmentParams:
    out_size: int = 224
    crop: bool = True
    crop_scale: tuple[float, float] = (0.85, 1.0)
    # fraction of the free travel along the long side that the crop may use
    max_shift: float = 0.25
    contrast: tuple[float, float] = (0.8, 1.2)
    blur_sigma: tuple[float, float] = (0.0, 1.0)
    blur_prob: float = 0.5

    @classmethod
    def identity(cls, out_size: int = 224) -> "AugmentParams":
        return cls(out_size=out_size, crop=False, contrast=(1.0, 1.0), blur_sigma=(0.0, 0.0), blur_prob=0.0)


def _resize_pair(image, mask, box, out_size):
    r0, c0, side = box
    img = image[r0 : r0 + side, c0 : c0 + side]
    msk = mask[r0 : r0 + side, c0 : c0 + side].astype(np.float64)
    img = resize(img, (out_size, out_size), order=1, mode="edge", anti_aliasing=False)
    msk = resize(msk, (out_size, out_size), order=1, mode="edge", anti_aliasing=False)
    return img, (msk >= 0.5).astype(np.uint8)


def center_square(image: np.ndarray, mask: np.ndarray, out_size: int = 224):
    """Deterministic evaluation view: centered full-height square, resized."""
    if image.shape != mask.shape:
        raise InvariantError(f"image {image.shape} and mask {mask.shape} differ")
    h, w = image.shape
    side = min(h, w)
    box = ((h - side) // 2, (w - side) // 2, side)
    return _resize_pair(image, mask, box, out_size)


def augment(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    params: AugmentParams | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Random square crop, resize, then contrast jitter and blur on the image."""
    params = params or AugmentParams()
    if image.shape != mask.shape:
        raise InvariantError(f"image {image.shape} and mask {mask.shape} differ")
    h, w = image.shape
    if min(h, w) < 64:
        raise InvariantError("augment needs min(H, W) >= 64")

    full = min(h, w)
    if params.crop:
        side = int(round(full * rng.uniform(*params.crop_scale)))
        side = max(1, min(side, full))
        offsets = []
        for extent in (h, w):
            travel = extent - side
            mid = travel / 2.0
            offsets.append(int(round(mid + rng.uniform(-1.0, 1.0) * params.max_shift * mid)))
        box = (offsets[0], offsets[1], side)
    else:
        box = ((h - full) // 2, (w - full) // 2, full)
    img, msk = _resize_pair(image, mask, box, params.out_size)

    c = rng.uniform(*params.contrast)
    if c != 1.0:
        mean = img.mean()
        img = (img - mean) * c + mean
    if params.blur_prob > 0 and rng.random() < params.blur_prob:
        sigma = rng.uniform(*params.blur_sigma)
        if sigma > 0:
            img = ndimage.gaussian_filter(img, sigma, mode="reflect")
    return np.clip(img, 0.0, 1.0), msk

