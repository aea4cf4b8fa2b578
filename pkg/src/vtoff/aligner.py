"""Garment aligner: a frozen convolutional reference encoder, a trainable
token projector, and the cosine alignment loss.

The reference encoder stands in for a large pretrained vision model: a
small conv stack frozen at creation from a fixed recorded seed, emitting a
square token grid plus a pooled vector.  The projector maps the
generator's intermediate token grid into that token space; the alignment
loss pushes projected tokens toward the reference tokens of the clean
garment.  Everything here is training-time only and never ships in an
inference checkpoint.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .rng import RngState
from .tensor import Tensor

REFERENCE_SEED = 0x5EED
COS_EPS = 1e-8


_AXIS_MOVES = ((2, 1), (2, 0), (1, 0))  # (stride, padding) for kernel 3


def _axis_out(n: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - 3) // stride + 1


def _plan_axis(n: int, target: int) -> list[tuple[int, int]]:
    """Shortest (stride, padding) sequence of 3-wide convs mapping n -> target."""
    if n < target:
        raise ConfigError(f"cannot grow extent {n} to {target} with convolutions")
    frontier = {n: []}
    seen = {n}
    while frontier:
        nxt: dict[int, list] = {}
        for cur, path in frontier.items():
            if cur == target:
                return path
            for stride, pad in _AXIS_MOVES:
                if cur + 2 * pad < 3:
                    continue
                out = _axis_out(cur, stride, pad)
                if target <= out < cur and out not in seen:
                    seen.add(out)
                    nxt[out] = path + [(stride, pad)]
        frontier = nxt
    raise ConfigError(f"cannot reach extent {target} from {n} with 3-wide convs")


def downsample_plan(in_hw: tuple[int, int], out_hw: tuple[int, int]):
    """Layer list of (stride_hw, padding_hw) with kernel 3, equal depth per axis."""
    rows = _plan_axis(in_hw[0], out_hw[0])
    cols = _plan_axis(in_hw[1], out_hw[1])
    depth = max(len(rows), len(cols), 1)
    rows += [(1, 1)] * (depth - len(rows))
    cols += [(1, 1)] * (depth - len(cols))
    return [((r[0], c[0]), (r[1], c[1])) for r, c in zip(rows, cols)]


class ReferenceEncoder:
    """Frozen strided conv stack: image -> token grid [B, g*g, ref_dim] and a
    pooled vector [B, pool_dim].

    Parameters are drawn once from the recorded seed and never receive
    gradients; identical inputs give bit-identical features.  Nonzero bias
    draws keep token rows away from exact zero.
    """

    def __init__(self, cfg: ModelConfig, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = RngState(REFERENCE_SEED)
        plan = downsample_plan((cfg.image_h, cfg.image_w), (cfg.ref_grid, cfg.ref_grid))
        widths = [3] + [32] * (len(plan) - 1) + [cfg.ref_dim]
        if len(plan) == 1:
            widths = [3, cfg.ref_dim]
        self.layers = []
        for (stride, pad), cin, cout in zip(plan, widths[:-1], widths[1:]):
            w = (rng.normal((cout, cin, 3, 3)) * (1.0 / np.sqrt(9 * cin))).astype(self.dtype)
            b = (rng.uniform((cout,)) * 0.4 + 0.1).astype(self.dtype)
            self.layers.append((w, b, stride, pad))
        self.pool_w = (rng.normal((cfg.ref_dim, cfg.pool_dim)) / np.sqrt(cfg.ref_dim)).astype(self.dtype)
        self.pool_b = (rng.uniform((cfg.pool_dim,)) * 0.2 - 0.1).astype(self.dtype)

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for w, b, _, _ in self.layers:
            h.update(w.tobytes())
            h.update(b.tobytes())
        h.update(self.pool_w.tobytes())
        h.update(self.pool_b.tobytes())
        return h.hexdigest()

    def encode(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (tokens [B, g*g, ref_dim], pooled [B, pool_dim])."""
        cfg = self.cfg
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (cfg.image_h, cfg.image_w):
            raise ShapeError(
                f"expected [B, 3, {cfg.image_h}, {cfg.image_w}] images, got {x.shape}")
        with T.no_grad():
            h = Tensor(x)
            for w, b, stride, pad in self.layers:
                h = T.tanh(T.conv2d(h, Tensor(w), Tensor(b), stride=stride, padding=pad))
            feat = h.data  # [B, ref_dim, g, g]
        bsz = feat.shape[0]
        tokens = feat.transpose(0, 2, 3, 1).reshape(bsz, cfg.ref_grid ** 2, cfg.ref_dim)
        pooled = np.tanh(tokens.mean(axis=1) @ self.pool_w + self.pool_b)
        return tokens, pooled

    def tokens(self, images) -> np.ndarray:
        return self.encode(images)[0]

    def pooled(self, images) -> np.ndarray:
        return self.encode(images)[1]


class AlignerHead:
    """Trainable strided conv stack from the generator token grid to the
    reference token grid, with a channel projection to the reference width."""

    def __init__(self, cfg: ModelConfig, rng: RngState, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        plan = downsample_plan((cfg.grid_h, cfg.grid_w), (cfg.ref_grid, cfg.ref_grid))
        widths = [cfg.dim] * len(plan) + [cfg.ref_dim]
        self.plan = plan
        self.params: dict[str, Tensor] = {}
        for i, ((stride, pad), cin, cout) in enumerate(zip(plan, widths[:-1], widths[1:])):
            w = (rng.normal((cout, cin, 3, 3)) * (1.0 / np.sqrt(9 * cin))).astype(self.dtype)
            self.params[f"conv{i}.w"] = Tensor(w, requires_grad=True)
            self.params[f"conv{i}.b"] = Tensor(np.zeros(cout, dtype=self.dtype), requires_grad=True)

    def project(self, tokens: Tensor) -> Tensor:
        """[B, S, dim] generator tokens -> [B, g*g, ref_dim] aligned tokens."""
        cfg = self.cfg
        if tokens.shape[1] != cfg.seq_len:
            raise ShapeError(
                f"{tokens.shape[1]} tokens do not form the {cfg.grid_h}x{cfg.grid_w} grid")
        bsz = tokens.shape[0]
        x = T.transpose(T.reshape(tokens, (bsz, cfg.grid_h, cfg.grid_w, cfg.dim)),
                        (0, 3, 1, 2))
        last = len(self.plan) - 1
        for i, (stride, pad) in enumerate(self.plan):
            x = T.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"],
                         stride=stride, padding=pad)
            if i != last:
                x = T.gelu(x)
        x = T.transpose(x, (0, 2, 3, 1))
        return T.reshape(x, (bsz, cfg.ref_grid ** 2, cfg.ref_dim))


def align_loss(h_proj: Tensor, h_ref) -> Tensor:
    """Negative mean cosine similarity between projected and reference tokens.

    Ranges over [-1, 1]; -1 means every projected token is a positive
    multiple of its reference token.  Zero-norm tokens are guarded by a
    floored denominator.
    """
    h_ref = h_ref if isinstance(h_ref, Tensor) else Tensor(np.asarray(h_ref))
    if h_proj.shape != h_ref.shape:
        raise ShapeError(f"token sets differ: {h_proj.shape} vs {h_ref.shape}")
    dots = (h_proj * h_ref).sum(axis=-1)
    # The tiny offset inside sqrt keeps the gradient finite at exactly zero
    # norm; the floor then removes any influence of such tokens.
    na = T.sqrt((h_proj * h_proj).sum(axis=-1) + 1e-24)
    nb = T.sqrt((h_ref * h_ref).sum(axis=-1) + 1e-24)
    denom = T.maximum_const(na * nb, COS_EPS)
    return -(dots / denom).mean()
