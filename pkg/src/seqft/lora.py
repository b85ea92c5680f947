"""Low-rank adapters on every encoder linear layer, and merging them back."""

from __future__ import annotations

import dataclasses

import numpy as np

from . import numerics as nx
from .nn import ArchMeta, ConfigError, FeatureMap, ModelState, encode, encoder_linear_layers, patchify
from .numerics import Rng, Tensor


@dataclasses.dataclass
class LoraAdapter:
    """``delta_W = scale * B @ A`` for the layer whose weight is ``(d, k)``."""

    layer_name: str
    A: Tensor  # (r, k)
    B: Tensor  # (d, r)
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(self) -> np.ndarray:
        d = self.B.data @ self.A.data
        return d if self.scale == 1.0 else (self.scale * d).astype(d.dtype)


@dataclasses.dataclass
class AdaptedEncoder:
    meta: ArchMeta
    base: dict[str, Tensor]
    adapters: dict[str, LoraAdapter]

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for prefix, ad in self.adapters.items():
            out[prefix + ".lora.A"] = ad.A
            out[prefix + ".lora.B"] = ad.B
        return out


def _encoder_params(encoder) -> tuple[ArchMeta, dict[str, Tensor]]:
    if isinstance(encoder, ModelState):
        return encoder.meta, encoder.group("encoder")
    meta, params = encoder
    return meta, {k: v for k, v in params.items() if k.startswith("encoder.")}


def inject(encoder, rank: int = 2, seed: int = 0, scale: float = 1.0) -> AdaptedEncoder:
    """Attach a rank-``rank`` adapter to each encoder linear layer.

    ``encoder`` is a ModelState or an ``(ArchMeta, params)`` pair. The base
    weights are frozen; ``B`` starts at zero so the adapted encoder initially
    computes exactly what the base does.
    """
    meta, params = _encoder_params(encoder)
    if rank < 1:
        raise ConfigError("LoRA rank must be positive")
    base = {k: Tensor(v.data, name=k) for k, v in params.items()}
    root = Rng(seed, "lora")
    adapters = {}
    for prefix in encoder_linear_layers(meta):
        d, k = base[prefix + ".weight"].shape
        if rank > min(d, k):
            raise ConfigError(f"rank {rank} exceeds min(d, k) = {min(d, k)} for layer {prefix}")
        bound = 1.0 / np.sqrt(k)
        a = root.child(prefix).uniform(-bound, bound, (rank, k))
        adapters[prefix] = LoraAdapter(
            prefix,
            Tensor(a, requires_grad=True, name=prefix + ".lora.A"),
            Tensor(np.zeros((d, rank), dtype=a.dtype), requires_grad=True, name=prefix + ".lora.B"),
            scale,
        )
    return AdaptedEncoder(meta, base, adapters)


def adapted_linear(adapted: AdaptedEncoder):
    """A ``(prefix, x) -> W x + B (A x) + b`` function over the adapted layers."""

    def lin(prefix: str, x: Tensor) -> Tensor:
        y = nx.linear(x, adapted.base[prefix + ".weight"], adapted.base.get(prefix + ".bias"))
        ad = adapted.adapters.get(prefix)
        if ad is None:
            return y
        low = nx.linear(nx.linear(x, ad.A), ad.B)
        return y + (low if ad.scale == 1.0 else low * ad.scale)

    return lin


def adapted_forward(adapted: AdaptedEncoder, x, mask=None) -> FeatureMap:
    """Features with each linear layer computing ``W x + B (A x) + b``."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    patches = patchify(adapted.meta, arr[None] if arr.ndim == 3 else arr)
    feats = encode(adapted.meta, adapted.base, patches, mask, linear=adapted_linear(adapted))
    return FeatureMap(feats, "lora:encoder.norm")


def merge(adapted: AdaptedEncoder) -> dict[str, Tensor]:
    """Fold every adapter into its weight; all other tensors are copied verbatim."""
    out = {k: Tensor(v.data.copy(), name=k) for k, v in adapted.base.items()}
    for prefix, ad in adapted.adapters.items():
        delta = ad.delta()
        if np.any(delta):
            key = prefix + ".weight"
            out[key] = Tensor(adapted.base[key].data + delta, name=key)
    return out


def adapter_params(adapted: AdaptedEncoder) -> dict[str, Tensor]:
    """Serializable view, names suffixed ``.lora.A`` / ``.lora.B``."""
    return adapted.trainable()


def load_adapters(adapted: AdaptedEncoder, raw: dict[str, np.ndarray]) -> None:
    for prefix, ad in adapted.adapters.items():
        ad.A = Tensor(raw[prefix + ".lora.A"], requires_grad=True, name=prefix + ".lora.A")
        ad.B = Tensor(raw[prefix + ".lora.B"], requires_grad=True, name=prefix + ".lora.B")
