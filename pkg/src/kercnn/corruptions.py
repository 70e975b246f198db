"""Test-time image corruptions: Gaussian occlusions, strip shifts, FGSM.

All generators work on ``(H, W, C)`` images in whatever intensity space they
are given; the patch and strip corruptions commute with the affine z-score
map, so applying them before or after normalization gives the same result.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .models import ModelConfig, ModelState, forward

__all__ = [
    "CorruptionSpec",
    "KINDS",
    "background",
    "gaussian_patches",
    "strip_shift",
    "fgsm",
    "corrupt_batch",
]

KINDS = ("none", "patches", "strips", "fgsm")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "none"
    severity: float = 0.0
    patch_count: int = 4
    strip_thickness: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity < 0 or self.patch_count < 0:
            raise ValueError("severity and patch count must be non-negative")
        if self.strip_thickness < 1:
            raise ValueError("strip thickness must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def background(image: np.ndarray) -> np.ndarray:
    """Per-channel value of the upper-left pixel."""
    return image[0, 0, :]


def gaussian_patches(image: np.ndarray, gamma: float, count: int = 4, rng: np.random.Generator | None = None) -> np.ndarray:
    """Fade ``count`` Gaussian bubbles of std ``gamma`` pixels into the background.

    Each bubble applies ``I <- (I - b) * (1 - g) + b`` with the peak-one
    profile ``g(u) = exp(-|u - c|^2 / (2 gamma^2))`` centred on a uniformly
    drawn pixel ``c``; at the centre the pixel becomes exactly ``b``.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    image = np.asarray(image)
    if gamma == 0 or count == 0:
        return image.copy()
    rng = rng if rng is not None else np.random.default_rng()
    h, w = image.shape[:2]
    b = background(image)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    out = image.astype(np.float64)
    for _ in range(count):
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        g = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * gamma**2))[..., None]
        out = (out - b) * (1.0 - g) + b
    return out.astype(image.dtype)


def _shift_rows(image: np.ndarray, shift: int, fill: np.ndarray) -> np.ndarray:
    out = np.empty_like(image)
    out[...] = fill
    w = image.shape[1]
    if abs(shift) >= w:
        return out
    if shift >= 0:
        out[:, shift:] = image[:, :w - shift]
    else:
        out[:, :w + shift] = image[:, -shift:]
    return out


def strip_shift(image: np.ndarray, max_shift: int, thickness: int = 2, rng: np.random.Generator | None = None) -> np.ndarray:
    """Scramble local contours by shifting strips.

    Rows are cut into horizontal strips of ``thickness`` pixels, each moved
    sideways by ``d * s`` pixels (``d`` uniform in ``0..max_shift``, ``s`` a
    random sign); then the same is done with vertical strips moved up/down.
    Vacated pixels take the background value.
    """
    if max_shift < 0:
        raise ValueError("max_shift must be non-negative")
    if thickness < 1:
        raise ValueError("thickness must be >= 1")
    image = np.asarray(image)
    if max_shift == 0:
        return image.copy()
    rng = rng if rng is not None else np.random.default_rng()
    b = background(image)
    out = image.copy()
    for axis in (0, 1):
        view = out if axis == 0 else out.transpose(1, 0, 2)
        n = view.shape[0]
        starts = range(0, n, min(thickness, n))
        mags = rng.integers(0, max_shift + 1, size=len(starts))
        signs = rng.choice(np.array([-1, 1]), size=len(starts))
        moved = view.copy()
        for start, d, s in zip(starts, mags, signs):
            stop = min(start + thickness, n)
            moved[start:stop] = _shift_rows(view[start:stop], int(d * s), b)
        out = moved if axis == 0 else moved.transpose(1, 0, 2).copy()
    return out


def _clamp_step(x: np.ndarray, x_adv: np.ndarray, eps: float) -> np.ndarray:
    # rounding in x + eps*s can overshoot eps by an ulp; walk back toward x.
    # The gap is measured in double precision, where float32 differences are exact.
    eps = float(eps)
    x64 = x.astype(np.float64)
    for _ in range(8):
        over = np.abs(x_adv.astype(np.float64) - x64) > eps
        if not over.any():
            break
        x_adv = np.where(over, np.nextafter(x_adv, x), x_adv)
    return x_adv


def fgsm(state: ModelState, config: ModelConfig, images: np.ndarray, labels, eps: float) -> np.ndarray:
    """One signed-gradient ascent step on the cross-entropy loss.

    ``images`` is one ``(H, W, C)`` image with an integer label, or a batch
    with one label per image. The sign of a zero gradient is zero, and no
    clipping to a pixel range is applied.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    images = np.asarray(images)
    if eps == 0:
        return images.copy()
    single = images.ndim == 3
    batch = images[None] if single else images
    labels = np.atleast_1d(np.asarray(labels))
    x = ad.Tensor(batch.astype(ad.get_dtype()), requires_grad=True)
    loss = ad.cross_entropy(forward(state, config, x), labels)
    (gx,) = ad.grad(loss, [x])
    step = np.sign(gx).astype(batch.dtype)
    adv = _clamp_step(batch, batch + batch.dtype.type(eps) * step, eps)
    return adv[0] if single else adv


def corrupt_batch(
    images: np.ndarray,
    labels: np.ndarray,
    spec: CorruptionSpec,
    indices: np.ndarray | None = None,
    state: ModelState | None = None,
    config: ModelConfig | None = None,
) -> np.ndarray:
    """Corrupt a batch; random corruptions draw from ``seed ^ image_index``."""
    if spec.kind == "none" or spec.severity == 0:
        return images.copy()
    if spec.kind == "fgsm":
        if state is None or config is None:
            raise ValueError("fgsm needs a model")
        return fgsm(state, config, images, labels, spec.severity)
    indices = np.arange(len(images)) if indices is None else indices
    out = np.empty_like(images)
    for k, (img, idx) in enumerate(zip(images, indices)):
        rng = np.random.default_rng(spec.seed ^ int(idx))
        if spec.kind == "patches":
            out[k] = gaussian_patches(img, spec.severity, spec.patch_count, rng)
        else:
            out[k] = strip_shift(img, int(spec.severity), spec.strip_thickness, rng)
    return out
