"""Transformer backbone: patch projection, adaptive layer-norm modulation,
and joint attention with optional per-layer key/value injection.

Both networks share this module.  The feature extractor runs a latent-only
stream and exposes each block's attention keys/values; the generator adds
a text stream and splices injected keys/values into every block's
attention, in the fixed concatenation order [latent, injected, text].
Queries come from the latent and text streams only.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ShapeError
from .rng import RngState
from .tensor import Tensor


class KVCache:
    """Per-layer attention keys/values captured from the feature extractor.

    Immutable after construction; an empty cache disables injection, which
    reduces every block to plain joint attention.
    """

    def __init__(self, layers):
        self.layers = list(layers)
        for k, v in self.layers:
            if k.shape != v.shape:
                raise ShapeError(f"cache K {k.shape} and V {v.shape} differ")

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def __iter__(self):
        return iter(self.layers)

    @classmethod
    def empty(cls) -> "KVCache":
        return cls([])

    def astype(self, dtype) -> "KVCache":
        return KVCache([(Tensor(k.data.astype(dtype, copy=False)),
                         Tensor(v.data.astype(dtype, copy=False)))
                        for k, v in self.layers])


# -- core operations ----------------------------------------------------------


def patchify(z, w: Tensor, b: Tensor, pos: Tensor) -> Tensor:
    """Per-site linear projection of a latent grid plus positional table.

    z: [B, C, h, w] -> tokens [B, h*w, d].
    """
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    if z.ndim != 4:
        raise ShapeError(f"expected [B, C, h, w] latent, got {z.shape}")
    if z.shape[1] != w.shape[0]:
        raise ShapeError(f"latent has {z.shape[1]} channels, projector expects {w.shape[0]}")
    bsz, c, h, wd = z.shape
    tokens = T.reshape(T.transpose(z, (0, 2, 3, 1)), (bsz, h * wd, c))
    tokens = T.linear(tokens, w, b)
    if pos.shape[0] != h * wd:
        raise ShapeError(f"positional table for {pos.shape[0]} sites, grid has {h * wd}")
    return tokens + pos


def unpatchify(tokens: Tensor, w: Tensor, b: Tensor, grid_hw: tuple[int, int]) -> Tensor:
    """Per-token linear head rearranged back onto the latent grid."""
    h, wd = grid_hw
    if tokens.shape[1] != h * wd:
        raise ShapeError(f"{tokens.shape[1]} tokens do not form a {h}x{wd} grid")
    out = T.linear(tokens, w, b)
    bsz = out.shape[0]
    return T.transpose(T.reshape(out, (bsz, h, wd, out.shape[-1])), (0, 3, 1, 2))


def adaln_modulate(x: Tensor, y: Tensor, w: Tensor, b: Tensor,
                   eps: float = 1e-6) -> Tensor:
    """Normalize tokens, then apply conditioning scale and shift.

    The modulation head emits [shift, scale_hat] per channel; the scale is
    parameterized as (1 + scale_hat) so a zero-initialized head is the
    identity on the normalized tokens.
    """
    if y.shape[-1] != w.shape[0]:
        raise ShapeError(f"conditioning width {y.shape[-1]} != modulation input {w.shape[0]}")
    d = x.shape[-1]
    if w.shape[-1] != 2 * d:
        raise ShapeError(f"modulation head emits {w.shape[-1]}, tokens need {2 * d}")
    mods = T.linear(y, w, b)
    shift = T.reshape(T.narrow(mods, 1, 0, d), (-1, 1, d))
    scale_hat = T.reshape(T.narrow(mods, 1, d, d), (-1, 1, d))
    xn = T.layer_norm(x, eps=eps)
    return xn * (scale_hat + 1.0) + shift


def _split_heads(x: Tensor, heads: int) -> Tensor:
    bsz, s, d = x.shape
    return T.transpose(T.reshape(x, (bsz, s, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    bsz, heads, s, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (bsz, s, heads * dh))


def mha_attention(q_lat: Tensor, q_text: Tensor | None,
                  k_lat: Tensor, k_text: Tensor | None,
                  v_lat: Tensor, v_text: Tensor | None,
                  kv: tuple[Tensor, Tensor] | None = None,
                  heads: int = 1) -> tuple[Tensor, Tensor | None]:
    """Joint attention over concatenated key/value streams.

    Keys and values are stacked in the order [latent, injected, text];
    queries are [latent, text].  One softmax runs over the whole key axis,
    so latent and text queries both see every stream.  With no injected
    pair this is bit-identical to plain joint attention.
    """
    d = q_lat.shape[-1]
    streams_k = [k_lat]
    streams_v = [v_lat]
    if kv is not None:
        k_e, v_e = kv
        if k_e.shape[1] != v_e.shape[1]:
            raise ShapeError(f"injected K length {k_e.shape[1]} != V length {v_e.shape[1]}")
        if k_e.shape[-1] != d or v_e.shape[-1] != d:
            raise ShapeError(f"injected K/V width {k_e.shape[-1]} != {d}")
        streams_k.append(k_e)
        streams_v.append(v_e)
    if (q_text is None) != (k_text is None) or (k_text is None) != (v_text is None):
        raise ShapeError("text q/k/v must all be present or all absent")
    if q_text is not None:
        for t in (q_text, k_text, v_text):
            if t.shape[-1] != d:
                raise ShapeError(f"text stream width {t.shape[-1]} != {d}")
        streams_k.append(k_text)
        streams_v.append(v_text)
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")

    q = q_lat if q_text is None else T.concat([q_lat, q_text], axis=1)
    k = streams_k[0] if len(streams_k) == 1 else T.concat(streams_k, axis=1)
    v = streams_v[0] if len(streams_v) == 1 else T.concat(streams_v, axis=1)
    out = _merge_heads(T.scaled_attention(
        _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)))
    s_lat = q_lat.shape[1]
    if q_text is None:
        return out, None
    out_lat = T.narrow(out, 1, 0, s_lat)
    out_text = T.narrow(out, 1, s_lat, q_text.shape[1])
    return out_lat, out_text


def timestep_features(t, dim: int, batch: int, dtype) -> np.ndarray:
    """Sinusoidal features of the diffusion time, one row per sample.

    ``t`` may be a scalar (shared across the batch) or a length-``batch``
    vector of per-sample times.
    """
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    t_vec = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,)) \
        if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
    if t_vec.shape != (batch,):
        raise ShapeError(f"timestep vector {t_vec.shape} does not match batch {batch}")
    args = np.outer(t_vec, freqs)
    feats = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((batch, 1))], axis=1)
    return feats.astype(dtype)


# -- parameter construction ----------------------------------------------------

_INIT_STD = 0.02


def _normal(rng: RngState, shape, dtype):
    return Tensor((rng.normal(shape) * _INIT_STD).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class DiTCore:
    """Stack of dual-stream blocks with AdaLN conditioning.

    ``has_text=False`` drops the text stream entirely (the feature
    extractor's configuration); the injected key/value path is controlled
    per call.  Zero-initialized output projections, modulation heads, and
    the final head make the whole network the identity on its residual
    stream at initialization, with a zero prediction output.
    """

    def __init__(self, cfg: ModelConfig, in_channels: int, out_channels: int,
                 has_text: bool, rng: RngState, dtype=np.float32):
        self.cfg = cfg
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.has_text = has_text
        self.dtype = np.dtype(dtype)
        d, hid = cfg.dim, cfg.mlp_hidden
        p: dict[str, Tensor] = {}

        p["in_proj.w"] = _normal(rng, (in_channels, d), dtype)
        p["in_proj.b"] = _zeros((d,), dtype)
        p["pos_latent"] = _normal(rng, (cfg.seq_len, d), dtype)
        if has_text:
            p["text_proj.w"] = _normal(rng, (cfg.text_dim, d), dtype)
            p["text_proj.b"] = _zeros((d,), dtype)
            p["pos_text"] = _normal(rng, (cfg.text_capacity, d), dtype)
        # conditioning trunk: y = MLP(timestep features, pooled vector)
        p["y_mlp.w1"] = _normal(rng, (cfg.t_dim + cfg.pool_dim, d), dtype)
        p["y_mlp.b1"] = _zeros((d,), dtype)
        p["y_mlp.w2"] = _normal(rng, (d, d), dtype)
        p["y_mlp.b2"] = _zeros((d,), dtype)

        streams = ("lat", "text") if has_text else ("lat",)
        for l in range(cfg.layers):
            for s in streams:
                pre = f"block{l}.{s}."
                for name in ("wq", "wk", "wv"):
                    p[pre + name] = _normal(rng, (d, d), dtype)
                    p[pre + name.replace("w", "b")] = _zeros((d,), dtype)
                p[pre + "wo"] = _zeros((d, d), dtype)
                p[pre + "bo"] = _zeros((d,), dtype)
                p[pre + "mod1.w"] = _zeros((d, 2 * d), dtype)
                p[pre + "mod1.b"] = _zeros((2 * d,), dtype)
                p[pre + "mod2.w"] = _zeros((d, 2 * d), dtype)
                p[pre + "mod2.b"] = _zeros((2 * d,), dtype)
                p[pre + "mlp.w1"] = _normal(rng, (d, hid), dtype)
                p[pre + "mlp.b1"] = _zeros((hid,), dtype)
                p[pre + "mlp.w2"] = _zeros((hid, d), dtype)
                p[pre + "mlp.b2"] = _zeros((d,), dtype)
        p["final_mod.w"] = _zeros((d, 2 * d), dtype)
        p["final_mod.b"] = _zeros((2 * d,), dtype)
        p["head.w"] = _zeros((d, out_channels), dtype)
        p["head.b"] = _zeros((out_channels,), dtype)
        self.params = p

    # -- parameter plumbing ------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------------

    def conditioning(self, t, e_pool, batch: int) -> Tensor:
        feats = timestep_features(t, self.cfg.t_dim, batch, self.dtype)
        e_pool = e_pool if isinstance(e_pool, Tensor) else Tensor(np.asarray(e_pool, dtype=self.dtype))
        if e_pool.shape != (batch, self.cfg.pool_dim):
            raise ShapeError(f"pooled conditioning {e_pool.shape} != ({batch}, {self.cfg.pool_dim})")
        y = T.concat([Tensor(feats), e_pool], axis=1)
        y = T.silu(T.linear(y, self.params["y_mlp.w1"], self.params["y_mlp.b1"]))
        return T.linear(y, self.params["y_mlp.w2"], self.params["y_mlp.b2"])

    def _block(self, l: int, x: Tensor, txt: Tensor | None, y: Tensor,
               kv: tuple[Tensor, Tensor] | None, capture: list | None):
        p = self.params
        pre = f"block{l}.lat."
        xm = adaln_modulate(x, y, p[pre + "mod1.w"], p[pre + "mod1.b"])
        q_lat = T.linear(xm, p[pre + "wq"], p[pre + "bq"])
        k_lat = T.linear(xm, p[pre + "wk"], p[pre + "bk"])
        v_lat = T.linear(xm, p[pre + "wv"], p[pre + "bv"])
        if capture is not None:
            capture.append((k_lat, v_lat))
        q_txt = k_txt = v_txt = None
        if txt is not None:
            tp = f"block{l}.text."
            tm = adaln_modulate(txt, y, p[tp + "mod1.w"], p[tp + "mod1.b"])
            q_txt = T.linear(tm, p[tp + "wq"], p[tp + "bq"])
            k_txt = T.linear(tm, p[tp + "wk"], p[tp + "bk"])
            v_txt = T.linear(tm, p[tp + "wv"], p[tp + "bv"])
        out_lat, out_txt = mha_attention(q_lat, q_txt, k_lat, k_txt, v_lat, v_txt,
                                         kv=kv, heads=self.cfg.heads)
        x = x + T.linear(out_lat, p[pre + "wo"], p[pre + "bo"])
        xm2 = adaln_modulate(x, y, p[pre + "mod2.w"], p[pre + "mod2.b"])
        x = x + T.linear(T.gelu(T.linear(xm2, p[pre + "mlp.w1"], p[pre + "mlp.b1"])),
                         p[pre + "mlp.w2"], p[pre + "mlp.b2"])
        if txt is not None:
            tp = f"block{l}.text."
            txt = txt + T.linear(out_txt, p[tp + "wo"], p[tp + "bo"])
            tm2 = adaln_modulate(txt, y, p[tp + "mod2.w"], p[tp + "mod2.b"])
            txt = txt + T.linear(T.gelu(T.linear(tm2, p[tp + "mlp.w1"], p[tp + "mlp.b1"])),
                                 p[tp + "mlp.w2"], p[tp + "mlp.b2"])
        return x, txt

    def forward(self, z, e_pool, t, text_tokens=None,
                kv_cache: KVCache | None = None, capture: bool = False,
                tap_block: int | None = None):
        """Run all blocks; returns (prediction latent, captures, tapped tokens).

        ``kv_cache`` must be empty or hold exactly ``layers`` entries.
        ``tap_block`` exposes the latent tokens after that 1-indexed block.
        """
        cfg = self.cfg
        p = self.params
        z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=self.dtype))
        bsz = z.shape[0]
        if kv_cache is not None and len(kv_cache) not in (0, cfg.layers):
            raise ShapeError(f"cache has {len(kv_cache)} layers, network has {cfg.layers}")
        if tap_block is not None and not 1 <= tap_block <= cfg.layers:
            raise ShapeError(f"tap block {tap_block} outside 1..{cfg.layers}")

        x = patchify(z, p["in_proj.w"], p["in_proj.b"], p["pos_latent"])
        txt = None
        if self.has_text:
            if text_tokens is None:
                raise ShapeError("this network expects text tokens")
            txt = text_tokens if isinstance(text_tokens, Tensor) else \
                Tensor(np.asarray(text_tokens, dtype=self.dtype))
            n = txt.shape[1]
            if n > cfg.text_capacity:
                raise ShapeError(f"{n} text tokens exceed capacity {cfg.text_capacity}")
            txt = T.linear(txt, p["text_proj.w"], p["text_proj.b"]) \
                + T.narrow(p["pos_text"], 0, 0, n)
        elif text_tokens is not None:
            raise ShapeError("this network has no text stream")

        y = self.conditioning(t, e_pool, bsz)
        captures: list = [] if capture else None
        tap = None
        for l in range(cfg.layers):
            kv = kv_cache[l] if (kv_cache is not None and len(kv_cache)) else None
            x, txt = self._block(l, x, txt, y, kv, captures)
            if tap_block is not None and l + 1 == tap_block:
                tap = x
        xm = adaln_modulate(x, y, p["final_mod.w"], p["final_mod.b"])
        pred = unpatchify(xm, p["head.w"], p["head.b"], (cfg.grid_h, cfg.grid_w))
        return pred, (KVCache(captures) if capture else None), tap
