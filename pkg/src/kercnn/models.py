"""Base CNN, KerCNN and RecCNN built on the autodiff core."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .lateral import LateralKernel, apply_kernel, lateral_kernel

__all__ = [
    "ModelConfig",
    "ModelState",
    "mnist_cnn",
    "mnist_kercnn",
    "mnist_reccnn",
    "layer_shapes",
    "parameter_shapes",
    "count_parameters",
    "lrn",
    "forward",
    "cnn_forward",
    "kercnn_forward",
    "reccnn_forward",
    "predict",
    "layer_kernels",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("cnn", "kercnn", "reccnn")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "cnn"
    layers: tuple[tuple[int, int], ...] = ((5, 16), (5, 16))
    stopping_times: tuple[int, ...] = (1, 1)
    rec_time_steps: int = 1
    recurrent_layers: tuple[int, ...] = ()
    rec_filter_size: int = 4
    class_count: int = 10
    input_shape: tuple[int, int, int] = (28, 28, 1)
    padding: str = "valid"
    pools: tuple[int, ...] = (2, 4)
    pool_ceil: bool = False
    detach_kernel: bool = False
    recurrent_dropout: float = 0.2
    lrn_radius: int = 2
    lrn_alpha: float = 1e-4
    lrn_beta: float = 0.75
    lrn_k: float = 1.0

    def __post_init__(self):
        # JSON round trips hand us lists
        for name in ("layers", "stopping_times", "recurrent_layers", "pools", "input_shape"):
            value = getattr(self, name)
            if name == "layers":
                value = tuple(tuple(int(v) for v in pair) for pair in value)
            else:
                value = tuple(int(v) for v in value)
            object.__setattr__(self, name, value)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.pools) != len(self.layers):
            raise ValueError("one pool size per layer is required")
        if len(self.stopping_times) != len(self.layers):
            raise ValueError("one stopping time per layer is required")
        if min(self.stopping_times) < 1 or self.rec_time_steps < 1:
            raise ValueError("stopping times must be >= 1")
        if not 0.0 <= self.recurrent_dropout < 1.0:
            raise ValueError("recurrent dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def tag(self) -> str:
        if self.variant == "kercnn":
            return "kercnn" + "".join(f"-{t}" for t in self.stopping_times)
        if self.variant == "reccnn":
            layers = "".join(str(i + 1) for i in self.recurrent_layers)
            return f"reccnn-L{layers}-T{self.rec_time_steps}"
        return "cnn"


def mnist_cnn(**kw) -> ModelConfig:
    return ModelConfig(variant="cnn", **kw)


def mnist_kercnn(t1: int, t2: int, **kw) -> ModelConfig:
    return ModelConfig(variant="kercnn", stopping_times=(t1, t2), **kw)


def mnist_reccnn(steps: int, layer: int = 0, **kw) -> ModelConfig:
    """Parameter-matched RecCNN: 4x4 lateral weights, 3x3 second-layer filters."""
    return ModelConfig(
        variant="reccnn", layers=((5, 16), (3, 16)), rec_time_steps=steps,
        recurrent_layers=(layer,), **kw,
    )


@dataclass
class ModelState:
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "ModelState":
        return ModelState({k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()})

    def astype(self, dtype) -> "ModelState":
        return ModelState({k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()})


# ------------------------------------------------------------- bookkeeping


def layer_shapes(config: ModelConfig) -> list[tuple[int, int, int]]:
    """Spatial shape after each conv and each pool, starting from the input."""
    h, w, c = config.input_shape
    shapes = [(h, w, c)]
    for (d, n), pool in zip(config.layers, config.pools):
        if config.padding == "same":
            pass
        elif config.padding == "valid":
            h, w = h - d + 1, w - d + 1
        else:
            raise ValueError(f"unknown padding {config.padding!r}")
        shapes.append((h, w, n))
        if config.pool_ceil:
            h, w = -(-h // pool), -(-w // pool)
        else:
            h, w = h // pool, w // pool
        if h < 1 or w < 1:
            raise ValueError("architecture shrinks the input to nothing")
        shapes.append((h, w, n))
    return shapes


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c = config.input_shape[2]
    for i, (d, n) in enumerate(config.layers, start=1):
        shapes[f"conv{i}.w"] = (d, d, n, c)
        shapes[f"conv{i}.b"] = (n,)
        if config.variant == "reccnn" and (i - 1) in config.recurrent_layers:
            r = config.rec_filter_size
            shapes[f"rec{i}.w"] = (r, r, n, n)
        c = n
    h, w, n = layer_shapes(config)[-1]
    shapes["dense.w"] = (h * w * n, config.class_count)
    shapes["dense.b"] = (config.class_count,)
    return shapes


def count_parameters(config_or_state) -> int:
    if isinstance(config_or_state, ModelState):
        return int(sum(t.size for t in config_or_state.tensors()))
    return int(sum(np.prod(s) for s in parameter_shapes(config_or_state).values()))


# ---------------------------------------------------------------- layers


def lrn(h, radius: int = 2, alpha: float = 1e-4, beta: float = 0.75, k: float = 1.0) -> Tensor:
    """Across-channel local response normalization.

    ``out[..., c] = h[..., c] / (k + alpha * sum_{|c' - c| <= radius} h[..., c']**2) ** beta``
    """
    h = ad._as_tensor(h)
    if radius < 0 or beta < 0 or k <= 0 or alpha < 0:
        raise ValueError("lrn parameters must be non-negative (k positive)")
    n = h.shape[-1]
    idx = np.arange(n)
    band = (np.abs(idx[:, None] - idx[None, :]) <= radius).astype(h.dtype)
    energy = ad.matmul(h * h, Tensor(band))
    return h / ((energy * alpha + k) ** beta)


def _conv_padding(config: ModelConfig, d: int):
    return "same" if config.padding == "same" else 0


def _pool(config: ModelConfig, h: Tensor, layer: int) -> Tensor:
    return ad.maxpool(h, config.pools[layer], ceil_mode=config.pool_ceil)


def _head(state: ModelState, h: Tensor) -> Tensor:
    return ad.dense(ad.flatten(h), state["dense.w"], state["dense.b"])


def _batched(image) -> tuple[Tensor, bool]:
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=ad.get_dtype()))
    if x.ndim == 3:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected (H,W,C) or (N,H,W,C) image, got shape {x.shape}")
    return x, False


def _check_input(config: ModelConfig, x: Tensor) -> None:
    if tuple(x.shape[1:]) != tuple(config.input_shape):
        raise ValueError(f"input shape {x.shape[1:]} does not match config {config.input_shape}")


def _dropout_mask(rng: np.random.Generator, shape, p: float, dtype) -> Tensor:
    keep = rng.random(shape) >= p
    return Tensor((keep / (1.0 - p)).astype(dtype))


def cnn_forward(state: ModelState, config: ModelConfig, image) -> Tensor:
    """conv -> ReLU -> max pool per layer, then the dense head; returns logits."""
    x, single = _batched(image)
    _check_input(config, x)
    h = x
    for i, (d, _) in enumerate(config.layers):
        h = ad.relu(ad.conv2d(h, state[f"conv{i + 1}.w"], state[f"conv{i + 1}.b"], _conv_padding(config, d)))
        h = _pool(config, h, i)
    logits = _head(state, h)
    return ad.reshape(logits, logits.shape[1:]) if single else logits


def layer_kernels(state: ModelState, config: ModelConfig) -> list[LateralKernel]:
    """Lateral kernels of every layer, rebuilt from the current filters."""
    return [
        lateral_kernel(state[f"conv{i + 1}.w"], source_layer=i + 1, detach=config.detach_kernel)
        for i in range(len(config.layers))
    ]


def kercnn_forward(
    state: ModelState,
    config: ModelConfig,
    image,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Feedforward step followed by ``T_l - 1`` lateral updates per layer.

    ``h <- (K * h + h) / 2`` with the kernel rebuilt from the layer's live
    filters. In training mode the lateral term is masked by a per-sample
    dropout mask that stays fixed across the iterations of the pass.
    """
    x, single = _batched(image)
    _check_input(config, x)
    h = x
    p = config.recurrent_dropout if train else 0.0
    if p > 0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    for i, (d, _) in enumerate(config.layers):
        w = state[f"conv{i + 1}.w"]
        h = ad.relu(ad.conv2d(h, w, state[f"conv{i + 1}.b"], _conv_padding(config, d)))
        steps = config.stopping_times[i]
        if steps > 1:
            kernel = lateral_kernel(w, source_layer=i + 1, detach=config.detach_kernel)
            mask = _dropout_mask(rng, h.shape, p, h.dtype) if p > 0 else None
            for _ in range(steps - 1):
                lateral = apply_kernel(kernel, h)
                if mask is not None:
                    lateral = lateral * mask
                h = (lateral + h) * 0.5
        h = _pool(config, h, i)
    logits = _head(state, h)
    return ad.reshape(logits, logits.shape[1:]) if single else logits


def reccnn_forward(
    state: ModelState,
    config: ModelConfig,
    image,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Recurrent CNN unrolled on a global clock.

    At every step ``t`` each layer reads the pooled output of the layer below
    at the same ``t`` and, if recurrent, its own output at ``t - 1``. LRN
    follows every recurrent layer. Logits come from the last step.
    """
    x, single = _batched(image)
    _check_input(config, x)
    p = config.recurrent_dropout if train else 0.0
    if p > 0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    n_layers = len(config.layers)
    prev: list[Tensor | None] = [None] * n_layers
    masks: list[Tensor | None] = [None] * n_layers
    out = x
    for t in range(config.rec_time_steps):
        out = x
        for i, (d, _) in enumerate(config.layers):
            pre = ad.conv2d(out, state[f"conv{i + 1}.w"], state[f"conv{i + 1}.b"], _conv_padding(config, d))
            recurrent = i in config.recurrent_layers
            if recurrent and prev[i] is not None:
                lateral = ad.conv2d(prev[i], state[f"rec{i + 1}.w"], None, "same")
                if p > 0:
                    if masks[i] is None:
                        masks[i] = _dropout_mask(rng, lateral.shape, p, lateral.dtype)
                    lateral = lateral * masks[i]
                pre = pre + lateral
            h = ad.relu(pre)
            if recurrent:
                h = lrn(h, config.lrn_radius, config.lrn_alpha, config.lrn_beta, config.lrn_k)
            prev[i] = h
            out = _pool(config, h, i)
    logits = _head(state, out)
    return ad.reshape(logits, logits.shape[1:]) if single else logits


def forward(state: ModelState, config: ModelConfig, image, train: bool = False, rng=None) -> Tensor:
    if config.variant == "cnn":
        return cnn_forward(state, config, image)
    if config.variant == "kercnn":
        return kercnn_forward(state, config, image, train=train, rng=rng)
    return reccnn_forward(state, config, image, train=train, rng=rng)


def predict(state: ModelState, config: ModelConfig, image) -> tuple[np.ndarray | int, np.ndarray]:
    """Class index (lowest index on ties) and softmax probabilities."""
    with ad.no_grad():
        logits = forward(state, config, image)
        probs = ad.softmax(logits).data
    return (np.argmax(probs, axis=-1) if probs.ndim > 1 else int(np.argmax(probs))), probs


# ------------------------------------------------------------ checkpoints

_CKPT_MAGIC = b"KCNNCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, state: ModelState, config: ModelConfig, meta: dict | None = None) -> None:
    """Write the binary checkpoint and a ``.txt`` manifest next to it.

    Layout (little-endian): magic, u32 version, u32 header length, UTF-8 JSON
    header, u32 tensor count, then per tensor: u16 name length, name, u8 rank,
    u32 extents, float64 row-major values.
    """
    path = Path(path)
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(state.params)))
        for name, t in state.params.items():
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    lines = [f"checkpoint v{CKPT_VERSION}: {config.tag()}", f"parameters: {count_parameters(state)}"]
    lines += [f"{k} = {v}" for k, v in sorted(config.to_dict().items())]
    lines += [f"{name}: {tuple(t.shape)} norm={float(np.linalg.norm(t.data)):.6g}" for name, t in state.params.items()]
    path.with_name(path.name + ".txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[ModelState, ModelConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(raw[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        nbytes = 8 * int(np.prod(shape))
        if pos + nbytes > len(raw):
            raise ValueError(f"{path}: truncated checkpoint")
        data = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)), offset=pos).reshape(shape)
        params[name] = Tensor(data.astype(ad.get_dtype()), requires_grad=True)
        pos += nbytes
    return ModelState(params), ModelConfig.from_dict(header["config"]), header.get("meta", {})

