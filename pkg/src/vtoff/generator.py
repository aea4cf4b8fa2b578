"""Garment generator network.

Generates the flat garment latent from noise, conditioned three ways: a
pooled attribute embedding through the modulation layers, per-slot
attribute tokens on the text stream, and the feature extractor's
key/value cache spliced into every attention block.  An empty cache turns
the hybrid attention into plain joint attention, which is exactly the
no-extractor ablation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec
from . import tensor as T
from .attributes import AttributeVector
from .config import CATEGORY_NAMES, CATEGORY_SLOTS, SLOT_CARDINALITIES, ModelConfig
from .dit import DiTCore, KVCache
from .errors import ShapeError
from .extractor import FeatureExtractor, build_input
from .flow import PredictionTarget, euler_generate
from .rng import RngState
from .tensor import Tensor


@dataclass
class ConditioningBundle:
    """Everything the generator consumes besides the noisy latent."""

    e_pool: Tensor          # [B, pool_dim] pooled attribute embedding
    e_text: Tensor          # [B, n_slots, text_dim] per-slot tokens
    kv: KVCache             # per-layer extractor keys/values (may be empty)

    @property
    def batch(self) -> int:
        return self.e_pool.shape[0]


class GarmentGenerator:
    """Text-and-feature conditioned transformer plus attribute embeddings."""

    def __init__(self, cfg: ModelConfig, rng: RngState, dtype=np.float32,
                 mode: PredictionTarget | str = PredictionTarget.SAMPLE):
        self.cfg = cfg
        self.mode = PredictionTarget.parse(mode)
        self.core = DiTCore(cfg, cfg.channels, cfg.channels, has_text=True,
                            rng=rng.child("generator"), dtype=dtype)
        emb_rng = rng.child("embeddings")
        p = self.core.params
        dt = self.core.dtype
        p["embed.category.pool"] = Tensor(
            (emb_rng.normal((len(CATEGORY_NAMES), cfg.pool_dim)) * 0.02).astype(dt),
            requires_grad=True)
        for name, card in SLOT_CARDINALITIES.items():
            p[f"embed.{name}.pool"] = Tensor(
                (emb_rng.normal((card, cfg.pool_dim)) * 0.02).astype(dt), requires_grad=True)
            p[f"embed.{name}.text"] = Tensor(
                (emb_rng.normal((card, cfg.text_dim)) * 0.02).astype(dt), requires_grad=True)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.core.params

    def checksum(self) -> str:
        return self.core.checksum()

    def encode_condition(self, attrs: list[AttributeVector],
                         kv: KVCache) -> ConditioningBundle:
        """Embed a homogeneous-category attribute batch and carry the cache.

        The pooled vector is the sum of one table row per slot plus the
        category row; the text sequence holds one learned token per
        structural slot, so its length is the category's slot count.
        """
        if not attrs:
            raise ShapeError("empty attribute batch")
        category = attrs[0].category
        if any(a.category != category for a in attrs):
            raise ShapeError("encode_condition expects a single-category batch")
        slots = CATEGORY_SLOTS[category]
        p = self.core.params

        cat_idx = np.full(len(attrs), CATEGORY_NAMES.index(category))
        e_pool = T.embedding(p["embed.category.pool"], cat_idx)
        text_tokens = []
        for name in slots:
            values = np.array([getattr(a, name) for a in attrs])
            e_pool = e_pool + T.embedding(p[f"embed.{name}.pool"], values)
            tok = T.embedding(p[f"embed.{name}.text"], values)
            text_tokens.append(T.reshape(tok, (len(attrs), 1, self.cfg.text_dim)))
        e_text = T.concat(text_tokens, axis=1)
        return ConditioningBundle(e_pool=e_pool, e_text=e_text, kv=kv)

    def forward(self, z_t, bundle: ConditioningBundle, t,
                tap_block: int | None = None):
        """Predict the clean garment latent (or noise, per mode).

        Returns (prediction, tapped latent tokens or None).
        """
        if len(bundle.kv) not in (0, self.cfg.layers):
            raise ShapeError(
                f"cache depth {len(bundle.kv)} != network depth {self.cfg.layers}")
        pred, _, tap = self.core.forward(
            z_t, bundle.e_pool, t, text_tokens=bundle.e_text,
            kv_cache=bundle.kv, tap_block=tap_block)
        return pred, tap


def generate(extractor: FeatureExtractor, generator: GarmentGenerator,
             ref_encoder, x_model: np.ndarray, mask: np.ndarray,
             attrs: list[AttributeVector], steps: int, rng: RngState,
             use_extractor: bool = True) -> np.ndarray:
    """Full sampling path: capture conditioning, integrate, decode.

    All samples in the call must share one category.  Deterministic given
    (rng state, steps, parameters); output pixels are clipped to [0, 1].
    """
    cfg = generator.cfg
    dtype = generator.core.dtype
    x_model = np.asarray(x_model, dtype=dtype)
    mask = np.asarray(mask, dtype=dtype)
    with T.no_grad():
        if use_extractor:
            e_pool_img = ref_encoder.pooled(x_model).astype(dtype)
            cache = extractor.capture_at_zero(x_model, mask, e_pool_img)
        else:
            cache = KVCache.empty()
        bundle = generator.encode_condition(attrs, cache)
        z_init = rng.normal((x_model.shape[0], cfg.channels, cfg.grid_h, cfg.grid_w),
                            dtype=np.float64).astype(dtype)

        def model(z, t):
            pred, _ = generator.forward(z.astype(dtype, copy=False), bundle, t)
            return pred.data

        z_out = euler_generate(model, z_init, steps, generator.mode)
    images = codec.decode(z_out.astype(np.float64))
    return np.clip(images, 0.0, 1.0)
