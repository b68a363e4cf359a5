"""Classical vein extractors and majority-vote mask fusion.

All extractors take a grayscale image in [0, 1] with dark veins and return a
vein-probability map in [0, 1] of the same shape. A constant image yields an
all-zero map.
"""

from __future__ import annotations

import os
import shutil
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DatasetError, InvariantError
from .synthdata import load_png, save_png

# responses below this are treated as "no structure" before normalization
_FLAT_TOL = 1e-10


def _normalize(score: np.ndarray) -> np.ndarray:
    score = np.maximum(score, 0.0)
    peak = score.max() if score.size else 0.0
    if not np.isfinite(peak) or peak < _FLAT_TOL:
        return np.zeros_like(score, dtype=np.float64)
    return score / peak


def _check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InvariantError(f"expected a 2-D image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise InvariantError("image contains non-finite values")
    return image


@dataclass
class GaborBank:
    orientations: list[float] = field(default_factory=lambda: [k * np.pi / 8 for k in range(8)])
    wavelength: float = 10.0
    sigma: float = 4.0
    aspect: float = 0.5

    def validate(self) -> None:
        if len(self.orientations) < 4:
            raise ConfigError("need at least 4 orientations")
        if self.wavelength <= 0 or self.sigma <= 0 or self.aspect <= 0:
            raise ConfigError("wavelength, sigma and aspect must be positive")

    def kernel(self, theta: float) -> np.ndarray:
        """Zero-mean even-symmetric kernel; the carrier oscillates along ``theta``."""
        half = int(np.ceil(3.0 * self.sigma))
        y, x = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
        along = x * np.cos(theta) + y * np.sin(theta)
        across = -x * np.sin(theta) + y * np.cos(theta)
        envelope = np.exp(-(along**2 + (self.aspect * across) ** 2) / (2.0 * self.sigma**2))
        k = envelope * np.cos(2.0 * np.pi * along / self.wavelength)
        return k - k.mean()


def gabor_extract(image, bank: GaborBank | None = None) -> np.ndarray:
    """Max over orientations of the even Gabor response to the inverted image."""
    bank = bank or GaborBank()
    bank.validate()
    inv = 1.0 - _check_image(image)
    response = np.full(inv.shape, -np.inf)
    for theta in bank.orientations:
        response = np.maximum(response, ndimage.correlate(inv, bank.kernel(theta), mode="reflect"))
    return _normalize(response)


def curvature_regions(profile, sigma: float = 2.0):
    """Positive-curvature regions of a 1-D intensity profile.

    Returns a list of ``(center, kappa, width)`` with the index of the curvature
    peak, its value and the length of the region in samples.
    """
    p = np.asarray(profile, dtype=np.float64)
    d1 = ndimage.gaussian_filter1d(p, sigma, order=1, mode="nearest")
    d2 = ndimage.gaussian_filter1d(p, sigma, order=2, mode="nearest")
    kappa = d2 / (1.0 + d1**2) ** 1.5
    return _regions(kappa)


def _regions(kappa: np.ndarray):
    pos = np.concatenate([[False], kappa > 0, [False]])
    edges = np.flatnonzero(pos[1:] != pos[:-1])
    out = []
    for start, stop in zip(edges[::2], edges[1::2]):
        seg = kappa[start:stop]
        i = int(np.argmax(seg))
        out.append((start + i, float(seg[i]), int(stop - start)))
    return out


def _lines(shape, direction):
    """Index arrays for every 1-D profile of the image along ``direction``."""
    h, w = shape
    rows, cols = np.indices(shape)
    if direction == "h":
        return [(rows[r], cols[r]) for r in range(h)]
    if direction == "v":
        return [(rows[:, c], cols[:, c]) for c in range(w)]
    if direction == "d1":
        return [(np.diagonal(rows, k), np.diagonal(cols, k)) for k in range(-h + 1, w)]
    flip_r, flip_c = rows[:, ::-1], cols[:, ::-1]
    return [(np.diagonal(flip_r, k), np.diagonal(flip_c, k)) for k in range(-h + 1, w)]


_DIRECTIONS = {
    "h": (1.0, 0.0),
    "v": (0.0, 1.0),
    "d1": (np.sqrt(0.5), np.sqrt(0.5)),
    "d2": (-np.sqrt(0.5), np.sqrt(0.5)),
}


def max_curvature_extract(image, sigma: float = 2.0) -> np.ndarray:
    """Maximum-curvature vein scores over four profile directions.

    Along every profile the curvature of the smoothed intensity is computed;
    each positive-curvature region deposits ``kappa_max * width`` at its peak.
    Directions are combined by per-pixel maximum.
    """
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    img = _check_image(image)
    fx = ndimage.gaussian_filter(img, sigma, order=(0, 1), mode="nearest")
    fy = ndimage.gaussian_filter(img, sigma, order=(1, 0), mode="nearest")
    fxx = ndimage.gaussian_filter(img, sigma, order=(0, 2), mode="nearest")
    fyy = ndimage.gaussian_filter(img, sigma, order=(2, 0), mode="nearest")
    fxy = ndimage.gaussian_filter(img, sigma, order=(1, 1), mode="nearest")

    combined = np.zeros_like(img)
    for name, (cx, cy) in _DIRECTIONS.items():
        d1 = fx * cx + fy * cy
        d2 = fxx * cx * cx + 2.0 * fxy * cx * cy + fyy * cy * cy
        kappa = d2 / (1.0 + d1**2) ** 1.5
        plane = np.zeros_like(img)
        for rr, cc in _lines(img.shape, name):
            for idx, k, width in _regions(kappa[rr, cc]):
                plane[rr[idx], cc[idx]] += k * width
        combined = np.maximum(combined, plane)
    return _normalize(combined)


def enhanced_curvature_extract(image, sigma: float = 2.0) -> np.ndarray:
    """Hessian valley strength gated by local gradient-orientation coherence."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    img = _check_image(image)
    # truncated derivative kernels do not sum to exactly zero
    img = img - img.mean()
    s2 = sigma**2
    hxx = s2 * ndimage.gaussian_filter(img, sigma, order=(0, 2), mode="nearest")
    hyy = s2 * ndimage.gaussian_filter(img, sigma, order=(2, 0), mode="nearest")
    hxy = s2 * ndimage.gaussian_filter(img, sigma, order=(1, 1), mode="nearest")
    lam_big = 0.5 * (hxx + hyy) + np.sqrt(0.25 * (hxx - hyy) ** 2 + hxy**2)

    gx = ndimage.gaussian_filter(img, sigma, order=(0, 1), mode="nearest")
    gy = ndimage.gaussian_filter(img, sigma, order=(1, 0), mode="nearest")
    rho = 2.0 * sigma
    jxx = ndimage.gaussian_filter(gx * gx, rho, mode="nearest")
    jyy = ndimage.gaussian_filter(gy * gy, rho, mode="nearest")
    jxy = ndimage.gaussian_filter(gx * gy, rho, mode="nearest")
    trace = jxx + jyy
    coherence = np.sqrt((jxx - jyy) ** 2 + 4.0 * jxy**2) / np.maximum(trace, 1e-12)
    coherence = np.where(trace > 1e-12, np.clip(coherence, 0.0, 1.0), 0.0)
    return _normalize(np.maximum(lam_big, 0.0) * coherence)


def adaptive_threshold_extract(image, window: int = 15, offset: float = 0.02) -> np.ndarray:
    """Dark-below-local-mean detector: ``max(local_mean - pixel - offset, 0)``."""
    if window < 3 or window % 2 == 0:
        raise ConfigError("window must be odd and >= 3")
    img = _check_image(image)
    local = ndimage.uniform_filter(img, size=window, mode="reflect")
    return _normalize(local - img - offset)


def otsu_threshold(values) -> float | None:
    """Exact Otsu split: the data value ``t`` maximizing between-class variance
    of ``{v < t}`` and ``{v >= t}``. ``None`` when all values are equal."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    uniq, first = np.unique(v, return_index=True)
    if len(uniq) < 2:
        return None
    n = v.size
    csum = np.concatenate([[0.0], np.cumsum(v)])
    k = first[1:]  # size of the lower class for each candidate threshold
    w0 = k / n
    mu0 = csum[k] / k
    mu1 = (csum[-1] - csum[k]) / (n - k)
    between = w0 * (1.0 - w0) * (mu0 - mu1) ** 2
    return float(uniq[1:][int(np.argmax(between))])


def binarize(mask, method="otsu") -> np.ndarray:
    """Threshold a probability map: pixel is 1 iff score >= threshold.

    ``method`` is ``"otsu"`` or a float. A constant map has no Otsu split and
    binarizes to all zeros.
    """
    score = np.asarray(mask, dtype=np.float64)
    if isinstance(method, str):
        if method != "otsu":
            raise ConfigError(f"unknown binarization method {method!r}")
        threshold = otsu_threshold(score) if score.size else None
        if threshold is None:
            return np.zeros(score.shape, dtype=np.uint8)
        return (score >= threshold).astype(np.uint8)
    return (score >= float(method)).astype(np.uint8)


def majority_vote(masks, threshold: int = 3) -> np.ndarray:
    """Pixel is foreground iff at least ``threshold`` masks mark it."""
    masks = [np.asarray(m) for m in masks]
    if len(masks) < 2:
        raise InvariantError("majority vote needs at least 2 masks")
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise InvariantError("all masks must share one shape")
    if not 1 <= threshold <= len(masks):
        raise ConfigError(f"threshold must be in [1, {len(masks)}]")
    votes = np.sum([m.astype(bool) for m in masks], axis=0)
    return (votes >= threshold).astype(np.uint8)


@dataclass
class FusionConfig:
    gabor: GaborBank = field(default_factory=GaborBank)
    lmc_sigma: float = 2.0
    emc_sigma: float = 2.0
    adaptive_window: int = 15
    adaptive_offset: float = 0.02
    vote_threshold: int = 3
    binarization: object = "otsu"
    # Gaussian denoising applied once before any voter sees the image
    presmooth: float = 1.0


VOTERS = ("lmc", "emc", "gabor", "adaptive")


def voter_masks(image, config: FusionConfig | None = None) -> dict[str, np.ndarray]:
    config = config or FusionConfig()
    image = _check_image(image)
    if config.presmooth > 0:
        image = ndimage.gaussian_filter(image, config.presmooth, mode="nearest")
    scores = {
        "lmc": max_curvature_extract(image, config.lmc_sigma),
        "emc": enhanced_curvature_extract(image, config.emc_sigma),
        "gabor": gabor_extract(image, config.gabor),
        "adaptive": adaptive_threshold_extract(image, config.adaptive_window, config.adaptive_offset),
    }
    return {name: binarize(s, config.binarization) for name, s in scores.items()}


def fuse_masks(image, config: FusionConfig | None = None, return_voters: bool = False):
    """Ground-truth mask by majority vote over the four classical voters."""
    config = config or FusionConfig()
    voters = voter_masks(image, config)
    fused = majority_vote([voters[v] for v in VOTERS], config.vote_threshold)
    if return_voters:
        return fused, voters
    return fused


def write_fused_masks(manifest, config: FusionConfig | None = None, debug: bool = False,
                      keep_rendered: bool = True) -> int:
    """Replace every mask listed in ``manifest`` by the fused classical mask.

    The rendered masks are first copied to ``<root>/render_masks/`` (once), and
    with ``debug`` the per-voter masks go to ``<root>/debug_masks/<voter>/``.
    Returns the number of masks written.
    """
    config = config or FusionConfig()
    for entry in manifest.entries:
        image_path = manifest.image_path(entry)
        if not os.path.exists(image_path):
            raise DatasetError(f"missing file: {image_path}")
        mask_path = manifest.mask_path(entry)
        backup = os.path.join(manifest.root, "render_masks", entry.mask)
        if keep_rendered and os.path.exists(mask_path) and not os.path.exists(backup):
            os.makedirs(os.path.dirname(backup), exist_ok=True)
            shutil.copyfile(mask_path, backup)
        fused, voters = fuse_masks(load_png(image_path), config, return_voters=True)
        save_png(mask_path, fused, binary=True)
        if debug:
            for name, m in voters.items():
                save_png(os.path.join(manifest.root, "debug_masks", name, entry.mask), m, binary=True)
    return len(manifest.entries)
