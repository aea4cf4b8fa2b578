"""Feature extractor network.

Consumes the person latent concatenated channel-wise with the binary mask
and the masked-person latent, conditioned on a pooled person-image
embedding through the modulation layers.  Trained alone in stage 1 with
the diffusion loss to reconstruct the person; afterwards its per-block
attention keys/values, captured on clean input at t=0, become the
conditioning payload for the generator.
"""

from __future__ import annotations

import numpy as np

from . import codec
from . import tensor as T
from .config import ModelConfig
from .dit import DiTCore, KVCache
from .errors import ShapeError, ValidationError
from .flow import PredictionTarget
from .rng import RngState
from .tensor import Tensor


def downsample_mask(mask: np.ndarray, f: int) -> np.ndarray:
    """Nearest-neighbor mask reduction to the latent grid, re-thresholded.

    Samples the pixel at each latent cell center (offset f//2), which keeps
    values exactly binary; thresholding at 0.5 is a no-op for clean masks
    but pins the contract for any interpolated input.
    """
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise ShapeError(f"expected [B, 1, H, W] mask, got {mask.shape}")
    off = f // 2
    coarse = mask[:, :, off::f, off::f]
    return (coarse >= 0.5).astype(mask.dtype)


def build_input(x_model: np.ndarray, mask: np.ndarray,
                z_noisy: np.ndarray, f: int) -> np.ndarray:
    """Channel-wise [z_noisy, mask, masked-person latent] in that order."""
    x_model = np.asarray(x_model)
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("mask must be binary at pixel scale")
    if mask.shape[0] != x_model.shape[0] or mask.shape[2:] != x_model.shape[2:]:
        raise ShapeError(f"mask {mask.shape} inconsistent with image {x_model.shape}")
    x_masked = codec.encode((x_model * mask).astype(x_model.dtype), f)
    m_lat = downsample_mask(mask, f)
    if z_noisy.shape != x_masked.shape:
        raise ShapeError(f"latent {z_noisy.shape} inconsistent with {x_masked.shape}")
    return np.concatenate([z_noisy, m_lat.astype(z_noisy.dtype), x_masked], axis=1)


class FeatureExtractor:
    """Latent-stream-only transformer with per-block key/value capture."""

    def __init__(self, cfg: ModelConfig, rng: RngState, dtype=np.float32,
                 mode: PredictionTarget | str = PredictionTarget.NOISE):
        self.cfg = cfg
        self.mode = PredictionTarget.parse(mode)
        self.core = DiTCore(cfg, cfg.extractor_in_channels, cfg.channels,
                            has_text=False, rng=rng.child("extractor"), dtype=dtype)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.core.params

    def checksum(self) -> str:
        return self.core.checksum()

    def freeze(self) -> None:
        self.core.freeze()

    def forward(self, inp, e_pool_img, t) -> Tensor:
        pred, _, _ = self.core.forward(inp, e_pool_img, t)
        return pred

    def forward_capture(self, inp, e_pool_img, t) -> tuple[Tensor, KVCache]:
        """Run all blocks recording each block's latent-stream keys/values.

        For conditioning use, call on the clean person input with t=0; the
        cache is then reused unchanged for every generator timestep.
        """
        pred, cache, _ = self.core.forward(inp, e_pool_img, t, capture=True)
        return pred, cache

    def capture_at_zero(self, x_model, mask, e_pool_img) -> KVCache:
        """Convenience: clean-input capture at the fixed timestep 0."""
        z0 = codec.encode(np.asarray(x_model, dtype=self.core.dtype), self.cfg.patch)
        inp = build_input(x_model, mask, z0, self.cfg.patch)
        with T.no_grad():
            _, cache = self.forward_capture(inp, e_pool_img, 0.0)
        return cache
