"""Patch-token encoder, up-projecting decoder and the two heads.

Every learnable projection is a linear layer ``y = x W^T + b`` with
``W`` of shape ``(out, in)``. An encoder block is two pre-normalized
residual MLPs: one mixing across tokens, one across channels.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Callable, Mapping

import numpy as np

from . import numerics as nx
from .numerics import Rng, ShapeError, Tensor

GROUPS = ("encoder", "decoder", "seg_head", "ssl_head")


class ConfigError(ValueError):
    """Architecture or task configuration is invalid."""


@dataclasses.dataclass(frozen=True)
class ArchMeta:
    image_size: int = 32
    in_channels: int = 1
    patch_size: int = 4
    width: int = 32
    depth: int = 4
    channel_hidden: int = 64
    token_hidden: int = 32
    decoder_widths: tuple[int, ...] = (32, 16)
    classes: int = 2
    token_mixing: bool = True
    use_norm: bool = True
    activation: str = "gelu"
    use_bias: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.patch_size != 2 ** len(self.decoder_widths):
            raise ConfigError(
                f"decoder needs log2(patch_size) blocks: patch_size={self.patch_size}, "
                f"blocks={len(self.decoder_widths)}"
            )
        if self.classes < 2:
            raise ConfigError("classes must be at least 2")
        if self.activation not in ("gelu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size**2


@dataclasses.dataclass
class FeatureMap:
    """Encoder output for a batch: ``values`` is ``(batch * tokens, width)``."""

    values: Tensor
    provenance: str = ""


class ModelState:
    """Named parameters plus the architecture they instantiate."""

    def __init__(self, meta: ArchMeta, params: dict[str, Tensor]):
        self.meta = meta
        self.params = params

    def group(self, group: str) -> dict[str, Tensor]:
        prefix = group + "."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def copy(self) -> ModelState:
        return ModelState(self.meta, {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()})

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, groups=GROUPS) -> None:
        for name, p in self.params.items():
            p.requires_grad = name.split(".", 1)[0] in groups
            p.grad = None

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


# --- layer inventory -------------------------------------------------------------------
def encoder_linear_layers(meta: ArchMeta) -> list[str]:
    """Prefixes of every encoder linear layer, shallow to deep."""
    names = ["encoder.patch_embed"]
    for i in range(meta.depth):
        if meta.token_mixing:
            names += [f"encoder.blocks.{i}.token_fc1", f"encoder.blocks.{i}.token_fc2"]
        names += [f"encoder.blocks.{i}.channel_fc1", f"encoder.blocks.{i}.channel_fc2"]
    return names


def layer_depth(prefix: str) -> int:
    """0 for the patch embedding, ``i + 1`` for anything in block ``i``."""
    parts = prefix.split(".")
    if len(parts) > 2 and parts[1] == "blocks":
        return int(parts[2]) + 1
    return 0


def _shapes(meta: ArchMeta) -> dict[str, tuple[int, ...]]:
    w, t = meta.width, meta.tokens
    shapes: dict[str, tuple[int, ...]] = {
        "encoder.patch_embed.weight": (w, meta.patch_dim),
        "encoder.patch_embed.bias": (w,),
        "encoder.mask_token": (w,),
    }
    for i in range(meta.depth):
        b = f"encoder.blocks.{i}"
        if meta.token_mixing:
            if meta.use_norm:
                shapes[f"{b}.token_norm.weight"] = (w,)
                shapes[f"{b}.token_norm.bias"] = (w,)
            shapes[f"{b}.token_fc1.weight"] = (meta.token_hidden, t)
            shapes[f"{b}.token_fc1.bias"] = (meta.token_hidden,)
            shapes[f"{b}.token_fc2.weight"] = (t, meta.token_hidden)
            shapes[f"{b}.token_fc2.bias"] = (t,)
        if meta.use_norm:
            shapes[f"{b}.channel_norm.weight"] = (w,)
            shapes[f"{b}.channel_norm.bias"] = (w,)
        shapes[f"{b}.channel_fc1.weight"] = (meta.channel_hidden, w)
        shapes[f"{b}.channel_fc1.bias"] = (meta.channel_hidden,)
        shapes[f"{b}.channel_fc2.weight"] = (w, meta.channel_hidden)
        shapes[f"{b}.channel_fc2.bias"] = (w,)
    if meta.use_norm:
        shapes["encoder.norm.weight"] = (w,)
        shapes["encoder.norm.bias"] = (w,)
    width_in = w
    for i, wd in enumerate(meta.decoder_widths):
        shapes[f"decoder.{i}.weight"] = (4 * wd, width_in)
        shapes[f"decoder.{i}.bias"] = (4 * wd,)
        width_in = wd
    shapes["seg_head.weight"] = (meta.classes, width_in)
    shapes["seg_head.bias"] = (meta.classes,)
    shapes["ssl_head.weight"] = (meta.patch_dim, w)
    shapes["ssl_head.bias"] = (meta.patch_dim,)
    if not meta.use_bias:
        shapes = {k: v for k, v in shapes.items() if not k.endswith(".bias") or "norm" in k}
    return shapes


def _init_param(name: str, shape, rng: Rng) -> np.ndarray:
    if name.endswith("norm.weight"):
        return np.ones(shape, dtype=nx.FLOAT)
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=nx.FLOAT)
    if name.endswith("mask_token"):
        return rng.normal(0.0, 0.02, shape)
    bound = 1.0 / np.sqrt(shape[1])
    return rng.uniform(-bound, bound, shape)


def init_model(meta: ArchMeta, seed: int) -> ModelState:
    """Fresh parameters; each tensor draws from its own name-keyed stream."""
    root = Rng(seed, "init")
    params = {name: Tensor(_init_param(name, shape, root.child(name)), name=name) for name, shape in _shapes(meta).items()}
    return ModelState(meta, params)


def reinit_seg_head(model: ModelState, classes: int, seed: int) -> None:
    """Replace the segmentation head with a fresh one for ``classes`` outputs."""
    if classes < 2:
        raise ConfigError("classes must be at least 2")
    meta = dataclasses.replace(model.meta, classes=classes)
    root = Rng(seed, "seg_head")
    for name, shape in _shapes(meta).items():
        if name.startswith("seg_head."):
            model.params[name] = Tensor(_init_param(name, shape, root.child(name)), name=name)
    model.meta = meta


# --- forward -------------------------------------------------------------------------
LinearFn = Callable[[str, Tensor], Tensor]


def dense(params: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    return nx.linear(x, params[prefix + ".weight"], params.get(prefix + ".bias"))


def _act(meta: ArchMeta, x: Tensor) -> Tensor:
    return nx.gelu(x) if meta.activation == "gelu" else x


def _norm(meta: ArchMeta, params, prefix: str, x: Tensor) -> Tensor:
    if not meta.use_norm:
        return x
    return nx.layer_norm(x, params[prefix + ".weight"], params[prefix + ".bias"])


def patchify(meta: ArchMeta, images: np.ndarray) -> np.ndarray:
    """``(B, C, H, W)`` images to ``(B * tokens, C * p * p)`` rows, row-major over the grid."""
    images = np.asarray(images, dtype=nx.FLOAT)
    if images.ndim == 3:
        images = images[None]
    b, c, h, w = images.shape
    p = meta.patch_size
    if h % p or w % p:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by patch size {p}")
    if (c, h, w) != (meta.in_channels, meta.image_size, meta.image_size):
        raise ShapeError(f"expected images of shape {(meta.in_channels, meta.image_size, meta.image_size)}, got {(c, h, w)}")
    g = h // p
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b * g * g, c * p * p))


def unpatchify(meta: ArchMeta, rows: np.ndarray, batch: int) -> np.ndarray:
    p, g, c = meta.patch_size, meta.grid, meta.in_channels
    x = np.asarray(rows).reshape(batch, g, g, c, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(batch, c, g * p, g * p)


def encode(
    meta: ArchMeta,
    params: Mapping[str, Tensor],
    patches: np.ndarray,
    mask: np.ndarray | None = None,
    linear: LinearFn | None = None,
) -> Tensor:
    """Encoder features ``(batch * tokens, width)`` for patch rows.

    ``mask`` (bool, one entry per row) swaps the embedded patch for the mask
    token. ``linear`` overrides how linear layers are applied (used by LoRA).
    """
    lin = linear or (lambda prefix, x: dense(params, prefix, x))
    t, w = meta.tokens, meta.width
    batch = patches.shape[0] // t
    h = lin("encoder.patch_embed", Tensor(patches.astype(params["encoder.patch_embed.weight"].dtype, copy=False)))
    if mask is not None:
        m = np.asarray(mask, dtype=h.dtype).reshape(-1, 1)
        if m.shape[0] != h.shape[0]:
            raise ShapeError(f"mask length {m.shape[0]} does not match patch count {h.shape[0]}")
        h = h * (1.0 - m) + Tensor(m) * params["encoder.mask_token"]
    for i in range(meta.depth):
        b = f"encoder.blocks.{i}"
        if meta.token_mixing:
            z = _norm(meta, params, f"{b}.token_norm", h)
            z = nx.rearrange(z, (batch, t, w), (0, 2, 1), (batch * w, t))
            z = lin(f"{b}.token_fc2", _act(meta, lin(f"{b}.token_fc1", z)))
            h = h + nx.rearrange(z, (batch, w, t), (0, 2, 1), (batch * t, w))
        z = _norm(meta, params, f"{b}.channel_norm", h)
        h = h + lin(f"{b}.channel_fc2", _act(meta, lin(f"{b}.channel_fc1", z)))
    return _norm(meta, params, "encoder.norm", h)


def decode(meta: ArchMeta, params: Mapping[str, Tensor], feats: Tensor, batch: int) -> Tensor:
    """Up-project token features to per-pixel class logits ``(batch * H * W, classes)``."""
    side = meta.grid
    h = feats
    for i, wd in enumerate(meta.decoder_widths):
        h = _act(meta, dense(params, f"decoder.{i}", h))
        # pixel shuffle: each token becomes a 2x2 block of wd-channel cells
        h = nx.rearrange(h, (batch, side, side, 2, 2, wd), (0, 1, 3, 2, 4, 5), (batch * side * side * 4, wd))
        side *= 2
    return dense(params, "seg_head", h)


def _images(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr[None] if arr.ndim == 3 else arr


def forward_features(model: ModelState, x, mask=None) -> FeatureMap:
    patches = patchify(model.meta, _images(x))
    return FeatureMap(encode(model.meta, model.params, patches, mask), "encoder.norm")


def forward_segmentation(model: ModelState, x, classes: int | None = None) -> Tensor:
    """Per-pixel logits, rows ordered ``(batch, row, col)``."""
    if classes is not None and classes != model.meta.classes:
        raise ConfigError(f"model has {model.meta.classes} classes, task needs {classes}")
    images = _images(x)
    feats = encode(model.meta, model.params, patchify(model.meta, images))
    return decode(model.meta, model.params, feats, images.shape[0])


def forward_ssl(model: ModelState, x, mask) -> Tensor:
    """Reconstructed patch rows for every token; masked tokens see only the mask token."""
    images = _images(x)
    patches = patchify(model.meta, images)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size != patches.shape[0]:
        raise ShapeError(f"mask length {mask.size} does not match patch count {patches.shape[0]}")
    feats = encode(model.meta, model.params, patches, mask)
    return dense(model.params, "ssl_head", feats)


def random_mask(meta: ArchMeta, ratio: float, rng: Rng, batch: int = 1) -> np.ndarray:
    """Exactly ``floor(ratio * tokens)`` masked tokens per image, flattened."""
    n_mask = int(np.floor(ratio * meta.tokens))
    out = np.zeros((batch, meta.tokens), dtype=bool)
    for i in range(batch):
        out[i, rng.permutation(meta.tokens)[:n_mask]] = True
    return out.reshape(-1)


def masked_mse(recon: Tensor, patches: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared reconstruction error over masked patch rows only."""
    m = np.asarray(mask, dtype=recon.dtype).reshape(-1, 1)
    count = int(m.sum())
    if count == 0:
        raise ShapeError("mask selects no patches")
    sq = nx.square(recon - Tensor(patches.astype(recon.dtype, copy=False)))
    return nx.tsum(sq * m) * (1.0 / (count * recon.shape[1]))
