"""ViT encoder with a trainable multi-layer attention module (ViTa).

Pipeline for a batch of images ``x`` of shape (B, H, W, C):

    patches  (B, N, P*P*C)    row-major patch order, channel-last inside a patch
    z_0      (B, N+1, D)      projection + class token + position embeddings
    z_l      (B, N+1, D)      pre-norm encoder layers, l = 1..L
    y        (B, D)           LN of the class token after the last layer
    c        (B, D')          attention-weighted patch averages of odd layers
    prob     (B,)             sigmoid(w3 . gelu(w2 gelu(w1 c)))

The ``vit`` variant skips the attention module and feeds ``y`` to the head.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor

HEAD_HIDDEN = (2048, 1024)
INIT_STD = 0.02
VARIANTS = ("vit", "vita")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ViTaConfig:
    height: int = 250
    width: int = 250
    channels: int = 3
    patch: int = 25
    dim: int = 64
    depth: int = 8
    heads: int = 4
    variant: str = "vita"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if min(self.height, self.width, self.channels, self.patch, self.dim, self.depth, self.heads) < 1:
            raise ConfigError(f"all config extents must be positive: {self}")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"image {self.height}x{self.width} not divisible by patch size {self.patch}")
        if self.dim % self.heads:
            raise ConfigError(f"embedding width {self.dim} not divisible by {self.heads} heads")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def context_dim(self) -> int:
        """Width of the head input: D' for ViTa, D for plain ViT."""
        if self.variant == "vit":
            return self.dim
        return len(attended_layers(self.depth)) * self.dim

    def replace(self, **changes) -> "ViTaConfig":
        return ViTaConfig(**{**asdict(self), **changes})


REFERENCE_CONFIG = ViTaConfig()
TOY_CONFIG = ViTaConfig(height=10, width=10, channels=3, patch=5, dim=8, depth=2, heads=2)


def attended_layers(depth: int) -> list[int]:
    """Odd layers 1, 3, ..., n with n = L-1 for even L and n = L for odd L."""
    if depth < 1:
        raise ConfigError(f"depth must be >= 1, got {depth}")
    n = depth - 1 if depth % 2 == 0 else depth
    return list(range(1, n + 1, 2))


# -- parameters ---------------------------------------------------------------
def parameter_shapes(config: ViTaConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in canonical order."""
    D, N = config.dim, config.num_patches
    shapes: dict[str, tuple[int, ...]] = {
        "patch.weight": (config.patch_dim, D),
        "patch.bias": (D,),
        "cls_token": (D,),
        "pos_embed": (N + 1, D),
    }
    for l in range(1, config.depth + 1):
        pre = f"layer{l}."
        shapes[pre + "ln1.gain"] = (D,)
        shapes[pre + "ln1.bias"] = (D,)
        for proj in ("query", "key", "value", "out"):
            shapes[pre + f"attn.{proj}.weight"] = (D, D)
            shapes[pre + f"attn.{proj}.bias"] = (D,)
        shapes[pre + "ln2.gain"] = (D,)
        shapes[pre + "ln2.bias"] = (D,)
        shapes[pre + "mlp.fc1.weight"] = (D, 2 * D)
        shapes[pre + "mlp.fc1.bias"] = (2 * D,)
        shapes[pre + "mlp.fc2.weight"] = (2 * D, D)
        shapes[pre + "mlp.fc2.bias"] = (D,)
    shapes["final_ln.gain"] = (D,)
    shapes["final_ln.bias"] = (D,)
    if config.variant == "vita":
        shapes["attention.v"] = (2 * D,)
    h1, h2 = HEAD_HIDDEN
    shapes["head.w1"] = (h1, config.context_dim)
    shapes["head.w2"] = (h2, h1)
    shapes["head.w3"] = (h2,)
    return shapes


def param_count(config: ViTaConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def _glorot(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_in, fan_out = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ViTaParams:
    """Named learnable tensors of a ViT / ViTa model."""

    def __init__(self, config: ViTaConfig, tensors: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            if missing:
                raise ConfigError(f"parameter names do not match config: {sorted(missing)[:5]}")
            tensors = {name: tensors[name] for name in expected}
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ViTaConfig, seed: int = 0, dtype=None) -> "ViTaParams":
        dtype = np.dtype(dtype or ag.get_default_dtype())
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(config).items():
            if name in ("cls_token", "pos_embed"):
                data = (rng.standard_normal(shape) * INIT_STD).astype(dtype)
            elif name.endswith(".gain"):
                data = np.ones(shape, dtype)
            elif name.endswith(".bias"):
                data = np.zeros(shape, dtype)
            else:
                data = _glorot(rng, shape, dtype)
            tensors[name] = Tensor(data, requires_grad=True, name=name, dtype=dtype)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def copy(self, dtype=None) -> "ViTaParams":
        return ViTaParams(self.config, {
            n: Tensor(t.data.copy(), requires_grad=True, name=n, dtype=dtype or t.dtype)
            for n, t in self.tensors.items()
        })

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}


# -- building blocks ------------------------------------------------------------
def patchify(x, patch: int) -> Tensor:
    """(B, H, W, C) or (H, W, C) image(s) -> (B, N, P*P*C) or (N, P*P*C)."""
    x = ag.as_tensor(x)
    single = x.ndim == 3
    if single:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise ConfigError(f"expected image of rank 3 or 4, got shape {x.shape}")
    B, H, W, C = x.shape
    if H % patch or W % patch:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {patch}")
    rows, cols = H // patch, W // patch
    out = x.reshape(B, rows, patch, cols, patch, C).transpose(0, 1, 3, 2, 4, 5)
    out = out.reshape(B, rows * cols, patch * patch * C)
    return out[0] if single else out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    return out if bias is None else out + bias


def embed(params: ViTaParams, patches: Tensor) -> Tensor:
    B = patches.shape[0]
    D = params.config.dim
    tokens = linear(patches, params["patch.weight"], params["patch.bias"])
    cls = ag.broadcast_to(params["cls_token"].reshape(1, 1, D), (B, 1, D))
    return ag.concat([cls, tokens], axis=1) + params["pos_embed"]


def multi_head_attention(x: Tensor, params: ViTaParams, prefix: str, heads: int) -> Tensor:
    B, T, D = x.shape
    d = D // heads

    def split_heads(t):
        return t.reshape(B, T, heads, d).transpose(0, 2, 1, 3)

    q = split_heads(linear(x, params[prefix + "query.weight"], params[prefix + "query.bias"]))
    k = split_heads(linear(x, params[prefix + "key.weight"], params[prefix + "key.bias"]))
    v = split_heads(linear(x, params[prefix + "value.weight"], params[prefix + "value.bias"]))
    scores = ag.scale(q @ k.transpose(0, 1, 3, 2), 1.0 / np.sqrt(d))
    weights = ag.softmax(scores, axis=-1)
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return linear(mixed, params[prefix + "out.weight"], params[prefix + "out.bias"])


def encoder_layer(params: ViTaParams, z: Tensor, l: int) -> tuple[Tensor, Tensor]:
    """One pre-norm encoder layer; returns (z'_l, z_l)."""
    pre = f"layer{l}."
    h = ag.layer_norm(z, params[pre + "ln1.gain"], params[pre + "ln1.bias"])
    z_mid = multi_head_attention(h, params, pre + "attn.", params.config.heads) + z
    h = ag.layer_norm(z_mid, params[pre + "ln2.gain"], params[pre + "ln2.bias"])
    h = ag.gelu(linear(h, params[pre + "mlp.fc1.weight"], params[pre + "mlp.fc1.bias"]))
    h = ag.gelu(linear(h, params[pre + "mlp.fc2.weight"], params[pre + "mlp.fc2.bias"]))
    return z_mid, h + z_mid


def summary(params: ViTaParams, z_last: Tensor) -> Tensor:
    return ag.layer_norm(z_last[:, 0, :], params["final_ln.gain"], params["final_ln.bias"])


@dataclass
class AttentionContext:
    scores: dict[int, Tensor]
    weights: dict[int, Tensor]
    contexts: dict[int, Tensor]
    context: Tensor


def attention_context(y: Tensor, layers: dict[int, Tensor], v: Tensor) -> AttentionContext:
    """Compatibility scores <v, [y; z_l^i]> over patch tokens, softmax, weighted sums.

    ``layers`` maps layer index to that layer's patch embeddings (B, N, D),
    class token excluded.
    """
    D = y.shape[-1]
    v_summary, v_patch = v[:D], v[D:]
    y_score = (y @ v_summary).reshape(y.shape[0], 1)
    scores, weights, contexts = {}, {}, {}
    for l in sorted(layers):
        z = layers[l]
        s = (z @ v_patch) + y_score
        a = ag.softmax(s, axis=-1)
        c = (a.reshape(a.shape[0], 1, a.shape[1]) @ z).reshape(z.shape[0], D)
        scores[l], weights[l], contexts[l] = s, a, c
    context = ag.concat([contexts[l] for l in sorted(layers)], axis=-1)
    return AttentionContext(scores, weights, contexts, context)


def classify_logit(params: ViTaParams, features: Tensor) -> Tensor:
    h = ag.gelu(features @ params["head.w1"].T)
    h = ag.gelu(h @ params["head.w2"].T)
    return h @ params["head.w3"]


def classify(params: ViTaParams, features: Tensor) -> Tensor:
    return ag.sigmoid(classify_logit(params, features))


@dataclass
class ForwardResult:
    prob: Tensor
    attention: dict[int, np.ndarray]
    y: Tensor
    layers: list[Tensor]


def forward_patches(params: ViTaParams, patches: Tensor) -> ForwardResult:
    config = params.config
    z = embed(params, ag.as_tensor(patches))
    outputs = []
    for l in range(1, config.depth + 1):
        _, z = encoder_layer(params, z, l)
        outputs.append(z)
    y = summary(params, z)
    attention: dict[int, np.ndarray] = {}
    if config.variant == "vita":
        picked = {l: outputs[l - 1][:, 1:, :] for l in attended_layers(config.depth)}
        ctx = attention_context(y, picked, params["attention.v"])
        features = ctx.context
        attention = {l: a.data for l, a in ctx.weights.items()}
    else:
        features = y
    prob = classify(params, features)
    return ForwardResult(prob, attention, y, outputs)


def forward(params: ViTaParams, images) -> ForwardResult:
    """Run a batch (B, H, W, C) or a single (H, W, C) preprocessed image."""
    config = params.config
    images = ag.as_tensor(images, like=params["patch.weight"])
    if images.ndim == 3:
        images = images.reshape((1,) + images.shape)
    if images.shape[1:] != (config.height, config.width, config.channels):
        raise ConfigError(
            f"input {images.shape[1:]} does not match config "
            f"{(config.height, config.width, config.channels)}"
        )
    return forward_patches(params, patchify(images, config.patch))


def predict(params: ViTaParams, images, batch_size: int = 64) -> np.ndarray:
    """Probabilities for a stack of preprocessed images, no graph recorded."""
    images = np.asarray(images)
    out = []
    frozen = ViTaParams(params.config, {n: Tensor(t.data, dtype=t.dtype) for n, t in params.items()})
    for start in range(0, len(images), batch_size):
        out.append(forward(frozen, images[start:start + batch_size]).prob.data)
    return np.concatenate(out) if out else np.zeros(0, dtype=params["head.w3"].dtype)
