"""Lateral connectivity kernels derived from a layer's feedforward filters.

A kernel has shape ``(2d-1, 2d-1, n, n)``. Entry ``K[i, j, f, g]`` is the
coupling from feature ``f`` at some position ``p`` to feature ``g`` at
position ``p + (i - d + 1, j - d + 1)``. After normalization the outgoing
mass of every source feature is one, so ``apply_kernel`` moves activation
around like one step of a Markov chain and ``kernel_action`` is the matching
averaging operator on functions.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, _as_tensor, div, reshape, sigmoid, tsum

__all__ = [
    "RawKernel",
    "LateralKernel",
    "filter_correlation",
    "build_raw_kernel",
    "normalize_kernel",
    "lateral_kernel",
    "apply_kernel",
    "adjoint_kernel",
    "kernel_action",
    "propagate_kernel",
    "identity_kernel",
    "save_kernel",
    "load_kernel",
    "kernel_montage",
    "write_pgm",
]

DENOM_FLOOR = 1e-12


def filter_checksum(filters) -> str:
    data = filters.data if isinstance(filters, Tensor) else np.asarray(filters)
    return hashlib.sha256(np.ascontiguousarray(data, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass
class RawKernel:
    values: Tensor
    source_layer: int | None = None
    filter_checksum: str = ""


@dataclass
class LateralKernel:
    values: Tensor
    normalized: bool = True
    source_layer: int | None = None
    filter_checksum: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape


def _reflect_swap(a: np.ndarray) -> np.ndarray:
    return a[::-1, ::-1].transpose(0, 1, 3, 2)


def filter_correlation(filters) -> Tensor:
    """Spatial cross-correlation between every pair of filters.

    ``C[i, j, f, g] = sum_{x, y, c} w[x, y, f, c] * w[x - i + d - 1, y - j + d - 1, g, c]``
    for filters ``w`` of shape ``(d, d, n, c)``. The result is symmetrized so
    that ``C[i, j, f, g] == C[-i, -j, g, f]`` holds bit for bit.
    """
    w = _as_tensor(filters)
    d, d2, n, c = w.shape
    if d != d2:
        raise ValueError("filters must be square")
    s = 2 * d - 1
    wd = w.data
    padded = np.pad(wd, ((d - 1, d - 1), (d - 1, d - 1), (0, 0), (0, 0)))
    # win[s1, s2, g, c, x, y] = padded[s1 + x, s2 + y, g, c]
    win = sliding_window_view(padded, (d, d), axis=(0, 1))
    flipped = np.einsum("xyfc,stgcxy->stfg", wd, win, optimize=True)
    corr = flipped[::-1, ::-1]
    out = 0.5 * (corr + _reflect_swap(corr))

    def _bw(g):
        g = 0.5 * (g + _reflect_swap(g))
        gf = np.ascontiguousarray(g[::-1, ::-1])
        # first slot: sum_{s,g} G'[s,f,g] padded[s+x, g, c]
        big = sliding_window_view(padded, (s, s), axis=(0, 1))
        grad_w = np.einsum("stfg,xygcst->xyfc", gf, big, optimize=True)
        # second slot: scatter G'[s,f,g] * w[x,f,c] into padded[s+x, g, c]
        contrib = np.einsum("stfg,xyfc->xystgc", gf, wd, optimize=True)
        gpad = np.zeros_like(padded)
        for x in range(d):
            for y in range(d):
                gpad[x:x + s, y:y + s] += contrib[x, y]
        grad_w = grad_w + gpad[d - 1:2 * d - 1, d - 1:2 * d - 1]
        return (grad_w,)

    return Tensor.from_op(np.ascontiguousarray(out), (w,), _bw, "filter_correlation")


def build_raw_kernel(filters, source_layer: int | None = None) -> RawKernel:
    """Sigmoid of the pairwise filter correlations, shape ``(2d-1, 2d-1, n, n)``."""
    values = sigmoid(filter_correlation(filters))
    return RawKernel(values, source_layer, filter_checksum(filters))


def normalize_kernel(raw: RawKernel | Tensor) -> LateralKernel:
    """Two-stage normalization turning a positive kernel into a transition kernel.

    Each entry is first divided by the product of its target-feature total and
    its source-feature total; the result is then rescaled so that every source
    feature ``f`` distributes a total mass of one over ``(i, j, g)``.
    """
    if isinstance(raw, RawKernel):
        values, layer, digest = raw.values, raw.source_layer, raw.filter_checksum
    else:
        values, layer, digest = _as_tensor(raw), None, ""
    if np.any(values.data <= 0):
        raise ValueError("raw kernel entries must be positive")
    into_g = tsum(values, axis=(0, 1, 2), keepdims=True)
    from_f = tsum(values, axis=(0, 1, 3), keepdims=True)
    stage1 = div(values, into_g * from_f + DENOM_FLOOR)
    mass = tsum(stage1, axis=(0, 1, 3), keepdims=True)
    return LateralKernel(div(stage1, mass + DENOM_FLOOR), True, layer, digest)


def lateral_kernel(filters, source_layer: int | None = None, detach: bool = False) -> LateralKernel:
    """Build the normalized lateral kernel of a filter bank."""
    if detach:
        filters = Tensor(filters.data if isinstance(filters, Tensor) else filters)
    return normalize_kernel(build_raw_kernel(filters, source_layer))


def identity_kernel(d: int, n: int, dtype=np.float64) -> np.ndarray:
    """Kernel whose only mass sits at zero offset on each ``(f, f)`` slice."""
    k = np.zeros((2 * d - 1, 2 * d - 1, n, n), dtype=dtype)
    k[d - 1, d - 1] = np.eye(n, dtype=dtype)
    return k


def _kernel_values(kernel) -> Tensor:
    if isinstance(kernel, LateralKernel):
        return kernel.values
    return _as_tensor(kernel)


def _circular_kernel(k: np.ndarray, lh: int, lw: int) -> np.ndarray:
    """Place a centred ``(s, r, ...)`` kernel on an ``lh x lw`` torus, offset 0 at index 0."""
    s, r = k.shape[0], k.shape[1]
    out = np.zeros((lh, lw) + k.shape[2:], dtype=k.dtype)
    out[:s, :r] = k
    return np.roll(out, (-(s // 2), -(r // 2)), axis=(0, 1))


def apply_kernel(kernel, h) -> Tensor:
    """Convolve an activation with a lateral kernel, keeping its spatial size.

    ``out[p, g] = sum_{delta, f} K[delta, f, g] * h[p - delta, f]`` with zero
    padding outside ``h``. The feature axis of ``h`` binds to the kernel's
    source slot ``f``. ``h`` is ``(H, W, n)`` or ``(N, H, W, n)``.
    """
    k = _kernel_values(kernel)
    h = _as_tensor(h)
    single = h.ndim == 3
    if single:
        h = reshape(h, (1,) + h.shape)
    s, r, nf, ng = k.shape
    if s % 2 == 0 or r % 2 == 0:
        raise ValueError("kernel spatial extent must be odd")
    n, hh, ww, c = h.shape
    if c != nf:
        raise ValueError(f"activation has {c} features, kernel expects {nf}")
    # a torus of H + d - 1 keeps every wrapped product on zero padding
    lh, lw = max(hh + s // 2, s), max(ww + r // 2, r)
    shape = (lh, lw)
    # channel-first so the transforms run over contiguous trailing axes
    h_hat = sfft.rfft2(np.ascontiguousarray(h.data.transpose(0, 3, 1, 2)), s=shape)
    # batched matmul is an order of magnitude slower on strided operands
    h_hat = np.ascontiguousarray(h_hat.transpose(2, 3, 0, 1))  # (u, v, N, f)
    k_hat = sfft.rfft2(_circular_kernel(k.data, lh, lw), axes=(0, 1))  # (u, v, f, g)
    y_hat = np.matmul(h_hat, k_hat)  # (u, v, N, g)
    y = sfft.irfft2(np.ascontiguousarray(y_hat.transpose(2, 3, 0, 1)), s=shape)
    out = np.ascontiguousarray(y[:, :, :hh, :ww].transpose(0, 2, 3, 1), dtype=h.dtype)

    def _bw(g):
        d_hat = sfft.rfft2(np.ascontiguousarray(g.transpose(0, 3, 1, 2)), s=shape)
        d_hat = np.ascontiguousarray(d_hat.transpose(2, 3, 0, 1))
        gh = gk = None
        if h.requires_grad:
            gh_hat = np.matmul(d_hat, np.ascontiguousarray(np.conj(k_hat).transpose(0, 1, 3, 2)))
            gh = sfft.irfft2(np.ascontiguousarray(gh_hat.transpose(2, 3, 0, 1)), s=shape)
            gh = np.ascontiguousarray(gh[:, :, :hh, :ww].transpose(0, 2, 3, 1), dtype=h.dtype)
        if k.requires_grad:
            gk_hat = np.matmul(np.ascontiguousarray(np.conj(h_hat).transpose(0, 1, 3, 2)), d_hat)
            gk = sfft.irfft2(gk_hat, s=shape, axes=(0, 1))
            gk = np.roll(gk, (s // 2, r // 2), axis=(0, 1))[:s, :r].astype(k.dtype)
        return gk, gh

    res = Tensor.from_op(out, (k, h), _bw, "apply_kernel")
    return reshape(res, res.shape[1:]) if single else res


def adjoint_kernel(kernel) -> np.ndarray:
    """Kernel of the transposed operator: ``K'[delta, g, f] = K[-delta, f, g]``."""
    k = _kernel_values(kernel).data
    return np.ascontiguousarray(k[::-1, ::-1].transpose(0, 1, 3, 2))


def kernel_action(kernel, activation) -> Tensor:
    """Average an activation against the kernel's transition probabilities.

    ``out[p, f] = sum_{delta, g} K[delta, f, g] * F[p + delta, g]``. Because
    every source feature carries unit mass, constants are fixed points away
    from the border.
    """
    return apply_kernel(adjoint_kernel(kernel), activation)


def propagate_kernel(kernel, steps: int, feature: int | None = None) -> np.ndarray:
    """Kernel obtained by chaining ``steps`` transitions of ``kernel``.

    Returns an array of spatial extent ``steps * (s - 1) + 1`` holding the
    multi-step transition probabilities, or only the slice anchored at source
    ``feature`` (shape ``(E, E, n)``) when given. Applying the result once
    equals applying ``kernel`` ``steps`` times, both for ``apply_kernel`` and
    for ``kernel_action``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    k = _kernel_values(kernel).data
    s, _, nf, ng = k.shape
    if nf != ng:
        raise ValueError("propagation needs a square feature map")
    half = s // 2
    # one anchored field per source feature, stacked on the batch axis
    fields = np.ascontiguousarray(k.transpose(2, 0, 1, 3))
    for _ in range(steps - 1):
        fields = np.pad(fields, ((0, 0), (half, half), (half, half), (0, 0)))
        fields = apply_kernel(k, Tensor(fields)).data
    out = fields.transpose(1, 2, 0, 3)
    return np.ascontiguousarray(out[:, :, feature, :] if feature is not None else out)


# ---------------------------------------------------------------- export

_KERNEL_MAGIC = b"KCNNKER1"


def save_kernel(path, kernel) -> None:
    """Flat binary dump: magic, rank, extents (uint32 LE), float64 LE values."""
    k = np.ascontiguousarray(_kernel_values(kernel).data if not isinstance(kernel, np.ndarray) else kernel)
    with open(path, "wb") as fh:
        fh.write(_KERNEL_MAGIC)
        fh.write(struct.pack("<I", k.ndim))
        fh.write(struct.pack(f"<{k.ndim}I", *k.shape))
        fh.write(k.astype("<f8").tobytes())


def load_kernel(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != _KERNEL_MAGIC:
        raise ValueError(f"{path}: not a kernel dump")
    (ndim,) = struct.unpack_from("<I", raw, 8)
    shape = struct.unpack_from(f"<{ndim}I", raw, 12)
    offset = 12 + 4 * ndim
    count = int(np.prod(shape))
    if len(raw) - offset != 8 * count:
        raise ValueError(f"{path}: truncated kernel dump")
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape).astype(np.float64)


def kernel_montage(kernel, feature: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile kernel slices into one 2-d image.

    With ``feature`` set, the tiles are ``K[:, :, feature, g]`` for every ``g``;
    otherwise one row per source feature. Each tile is scaled to [0, 1].
    """
    k = _kernel_values(kernel).data if not isinstance(kernel, np.ndarray) else kernel
    if k.ndim == 3:
        k = k[:, :, None, :]
        feature = 0
    rows = [feature] if feature is not None else list(range(k.shape[2]))
    s, r = k.shape[:2]
    n = k.shape[3]
    ncol = n if feature is None else int(np.ceil(np.sqrt(n)))
    nrow = len(rows) if feature is None else int(np.ceil(n / ncol))
    canvas = np.zeros((nrow * (s + pad) + pad, ncol * (r + pad) + pad))
    tiles = [(f, g) for f in rows for g in range(n)]
    for t, (f, g) in enumerate(tiles):
        tile = k[:, :, f, g].astype(np.float64)
        lo, hi = tile.min(), tile.max()
        tile = (tile - lo) / (hi - lo) if hi > lo else np.zeros_like(tile)
        row, col = divmod(t, ncol)
        y, x = pad + row * (s + pad), pad + col * (r + pad)
        canvas[y:y + s, x:x + r] = tile
    return canvas


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] grayscale image as binary PGM."""
    img = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
