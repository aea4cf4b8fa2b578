"""Procedural worn-garment / flat-garment pairs.

Each sample draws a flat garment whose silhouette encodes its structural
attributes exactly (so a rule-based decoder can recover them), textures it,
then composites it onto a fixed person silhouette through an invertible
affine-plus-shear warp with nearest-neighbor resampling.  The mask marks
exactly the visible warped garment pixels; an optional occluder bar
removes pixels from both the rendering and the mask.

Geometry conventions (garment canvas, rows r0=2 downward, center column cx):
  cloth_length -> total row extent (per-category table)
  fit          -> torso half-width
  cloth_type   -> shoulder taper (upper/dress) or pants/skirt/culottes (lower)
  waist        -> half-width indent over the waist band rows
  sleeve_length-> horizontal extension over the sleeve band rows
  neckline     -> center notch depth at the top edge
  hem          -> bottom-edge shape (straight / cropped corners / center slit)
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attributes import AttributeVector, random_attributes
from .config import CATEGORY_NAMES, RunConfig
from .errors import DatasetError, ValidationError
from .rng import RngState
from .tensor import read_tensor, write_tensor

GARMENT_TOP = 2
LEN_TABLE = {"upper": (12, 15, 18), "dress": (20, 24, 28), "lower": (12, 15, 18)}
FIT_HALF_WIDTH = (5, 6, 7)
WAIST_INDENT = (2, 1, 0)
SHOULDER_TAPER = (0, 1, 2)
NECK_DEPTH = (1, 2, 3, 4)        # boat, square, round, vee
NECK_HALF_WIDTH = (2, 2, 1, 1)
SLEEVE_EXT = (0, 2, 3, 5)
SLEEVE_ROWS = range(2, 5)        # offsets from r0
WAIST_ROWS = range(5, 8)
TORSO_MEASURE_ROW = 8
FLARE = 2                        # skirt/culottes bottom widening

BG_GARMENT = 0.93
BG_PERSON_BASE = 0.5
PERSON_COLOR = (0.76, 0.6, 0.52)
OCCLUDER_COLOR = 0.25
OCCLUDER_WIDTH = 3


@dataclass
class GarmentSample:
    """One paired record: worn view, flat garment, mask, attributes."""

    id: str
    x_model: np.ndarray   # [3, H, W] float32 in [0, 1]
    x_g: np.ndarray       # [3, H, W] float32 in [0, 1]
    mask: np.ndarray      # [1, H, W] float32 binary
    attr: AttributeVector


@dataclass
class WarpParams:
    scale: float = 1.0
    rotation: float = 0.0
    shear: float = 0.0
    shift_r: float = 0.0
    shift_c: float = 0.0

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        shear = np.array([[1.0, self.shear], [0.0, 1.0]])  # vertical shear
        return rot @ shear * self.scale


# -- silhouette ----------------------------------------------------------------


def silhouette(attr: AttributeVector, h: int, w: int) -> np.ndarray:
    """Binary garment shape on the flat canvas, derived only from attributes."""
    if h < 31 or w < 24:
        raise ValidationError(
            f"garment geometry needs at least a 31x24 canvas, got {h}x{w}")
    g = np.zeros((h, w), dtype=bool)
    cx = w // 2
    r0 = GARMENT_TOP
    length = LEN_TABLE[attr.category][attr.cloth_length]
    r1 = r0 + length
    hw = FIT_HALF_WIDTH[attr.fit]
    indent = WAIST_INDENT[attr.waist]

    if attr.category in ("upper", "dress"):
        taper = SHOULDER_TAPER[attr.cloth_type]
        for r in range(r0, r1):
            half = hw
            if r - r0 <= 1:
                half = hw - taper
            elif r - r0 in WAIST_ROWS:
                half = hw - indent
            g[r, cx - half:cx + half] = True
        ext = SLEEVE_EXT[attr.sleeve_length]
        if ext:
            for off in SLEEVE_ROWS:
                lo = max(0, cx - hw - ext)
                g[r0 + off, lo:cx + hw + ext] = True
        depth = NECK_DEPTH[attr.neckline]
        nhw = NECK_HALF_WIDTH[attr.neckline]
        g[r0:r0 + depth, cx - nhw:cx + nhw] = False
        if attr.hem == 1:  # cropped corners
            g[r1 - 1, cx - hw:cx - hw + 2] = False
            g[r1 - 1, cx + hw - 2:cx + hw] = False
            g[r1 - 2, cx - hw] = False
            g[r1 - 2, cx + hw - 1] = False
        elif attr.hem == 2:  # center slit
            g[r1 - 2:r1, cx - 1:cx + 1] = False
    else:  # lower body: 0 pants, 1 skirt, 2 culottes
        g[r0:r0 + 2, cx - hw:cx + hw] = True  # waistband at full width
        flare_rows = max(1, r1 - (r0 + 8))
        for r in range(r0 + 2, r1):
            half = hw - indent if 2 <= r - r0 <= 4 else hw
            grow = 0
            if attr.cloth_type in (1, 2) and r >= r0 + 8:
                grow = round(FLARE * (r - (r0 + 8) + 1) / flare_rows)
            lo, hi = max(0, cx - half - grow), min(w, cx + half + grow)
            if attr.cloth_type in (0, 2):  # legged garments keep a center gap
                g[r, lo:cx - 1] = True
                g[r, cx + 1:hi] = True
            else:
                g[r, lo:hi] = True
    return g


def decode_attributes(x_g: np.ndarray, category: str) -> AttributeVector:
    """Recover the structural slots from flat-garment geometry alone.

    The inverse of ``silhouette``: every slot was drawn with a distinct,
    measurable consequence, so this is exact for rendered samples and
    serves as the consistency oracle in tests.
    """
    occupied = np.any(np.abs(x_g - BG_GARMENT) > 1e-6, axis=0)
    rows = np.where(occupied.any(axis=1))[0]
    if rows.size == 0:
        raise ValidationError("no garment pixels found")
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    cx = x_g.shape[2] // 2

    def width(r):
        cols = np.where(occupied[r])[0]
        return 0 if cols.size == 0 else int(cols[-1] - cols[0] + 1)

    length = r1 - r0
    cloth_length = LEN_TABLE[category].index(length)
    if category in ("upper", "dress"):
        hw = width(r0 + TORSO_MEASURE_ROW) // 2
        fit = FIT_HALF_WIDTH.index(hw)
        waist = WAIST_INDENT.index(hw - width(r0 + WAIST_ROWS[1]) // 2)
        cloth_type = SHOULDER_TAPER.index(hw - width(r0) // 2)
        sleeve = SLEEVE_EXT.index(width(r0 + SLEEVE_ROWS[1]) // 2 - hw)
        depth = 0
        while not occupied[r0 + depth, cx]:
            depth += 1
        neckline = NECK_DEPTH.index(depth)
        if not occupied[r1 - 1, cx]:
            hem = 2
        elif width(r1 - 1) < 2 * hw:
            hem = 1
        else:
            hem = 0
        return AttributeVector(category=category, cloth_type=cloth_type,
                               waist=waist, fit=fit, hem=hem, neckline=neckline,
                               sleeve_length=sleeve, cloth_length=cloth_length)
    hw = width(r0) // 2
    fit = FIT_HALF_WIDTH.index(hw)
    waist = WAIST_INDENT.index(hw - width(r0 + 3) // 2)
    gap = not occupied[r1 - 1, cx]
    flared = width(r1 - 1) > 2 * hw
    cloth_type = (2 if flared else 0) if gap else 1
    return AttributeVector(category=category, cloth_type=cloth_type, waist=waist,
                           fit=fit, cloth_length=cloth_length)


# -- rendering -----------------------------------------------------------------


def _texture(rng: RngState, shape: np.ndarray) -> np.ndarray:
    """Random solid / striped / checkered fill plus an optional 2x2 logo.

    Only pixels inside the silhouette are ever composited, so the logo and
    patterns cannot leak into the background.
    """
    h, w = shape.shape
    c1 = rng.uniform((3,)) * 0.7 + 0.15
    c2 = rng.uniform((3,)) * 0.7 + 0.15
    kind = int(rng.integers(0, 3, ()))
    img = np.empty((3, h, w))
    img[:] = c1[:, None, None]
    if kind == 1:  # horizontal stripes, 2 rows per band
        bands = np.broadcast_to((np.arange(h)[:, None] // 2) % 2 == 1, (h, w))
        img[:, bands] = c2[:, None]
    elif kind == 2:  # checker, 2x2 cells
        cells = ((np.arange(h)[:, None] // 2 + np.arange(w)[None, :] // 2) % 2) == 1
        img[:, cells] = c2[:, None]
    if float(rng.uniform(())) < 0.5:
        rows = np.where(shape.any(axis=1))[0]
        r = int(rows[0]) + TORSO_MEASURE_ROW + int(rng.integers(0, 2, ()))
        c = w // 2 - 2 + int(rng.integers(0, 3, ()))
        c3 = rng.uniform((3,)) * 0.7 + 0.15
        img[:, r:r + 2, c:c + 2] = c3[:, None, None]
    return img


def render_flat(attr: AttributeVector, rng: RngState, h: int, w: int):
    """Flat garment image plus its silhouette."""
    shape = silhouette(attr, h, w)
    tex = _texture(rng, shape)
    x_g = np.full((3, h, w), BG_GARMENT)
    x_g[:, shape] = tex[:, shape]
    return x_g.astype(np.float32), shape


def person_base(rng: RngState, h: int, w: int) -> np.ndarray:
    """Fixed person silhouette over a noisy background."""
    img = BG_PERSON_BASE + (rng.uniform((3, h, w)) - 0.5) * 0.08
    color = np.array(PERSON_COLOR)[:, None, None]
    hr, hc = max(1, h // 10), w // 2
    img[:, 1:1 + hr + 2, hc - 2:hc + 3] = color          # head
    img[:, 1 + hr + 2:h - 2, hc - w // 4:hc + w // 4] = color  # body and legs
    return img


def warp_garment(x_g: np.ndarray, shape: np.ndarray, warp: WarpParams,
                 out_h: int, out_w: int):
    """Inverse-map nearest-neighbor warp of the garment onto the person canvas.

    Returns (pixels [3, H, W], visibility [H, W]); identity parameters
    reproduce the source pixels exactly.
    """
    a_inv = np.linalg.inv(warp.matrix())
    cy, cx = (x_g.shape[1] - 1) / 2.0, (x_g.shape[2] - 1) / 2.0
    ty, tx = (out_h - 1) / 2.0 + warp.shift_r, (out_w - 1) / 2.0 + warp.shift_c
    rows, cols = np.mgrid[0:out_h, 0:out_w]
    rel = np.stack([rows - ty, cols - tx]).reshape(2, -1)
    src = (a_inv @ rel) + np.array([[cy], [cx]])
    sr = np.rint(src[0]).astype(int).reshape(out_h, out_w)
    sc = np.rint(src[1]).astype(int).reshape(out_h, out_w)
    inside = (sr >= 0) & (sr < x_g.shape[1]) & (sc >= 0) & (sc < x_g.shape[2])
    visible = np.zeros((out_h, out_w), dtype=bool)
    pixels = np.zeros((3, out_h, out_w), dtype=x_g.dtype)
    idx = np.where(inside)
    hit = shape[sr[idx], sc[idx]]
    rows_v, cols_v = idx[0][hit], idx[1][hit]
    visible[rows_v, cols_v] = True
    pixels[:, rows_v, cols_v] = x_g[:, sr[rows_v, cols_v], sc[rows_v, cols_v]]
    return pixels, visible


def render_worn(x_g: np.ndarray, shape: np.ndarray, warp: WarpParams,
                occluder: tuple[str, int] | None, rng: RngState,
                h: int, w: int):
    """Person view plus exact mask: warped silhouette minus any occluder."""
    img = person_base(rng, h, w)
    pixels, visible = warp_garment(x_g, shape, warp, h, w)
    img[:, visible] = pixels[:, visible]
    mask = visible.copy()
    if occluder is not None:
        orient, pos = occluder
        if orient == "v":
            img[:, :, pos:pos + OCCLUDER_WIDTH] = OCCLUDER_COLOR
            mask[:, pos:pos + OCCLUDER_WIDTH] = False
        else:
            img[:, pos:pos + OCCLUDER_WIDTH, :] = OCCLUDER_COLOR
            mask[pos:pos + OCCLUDER_WIDTH, :] = False
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def draw_category(rng: RngState, cfg: RunConfig) -> str:
    u = float(rng.uniform(()))
    if u < cfg.mix_upper:
        return "upper"
    if u < cfg.mix_upper + cfg.mix_lower:
        return "lower"
    return "dress"


def synth_pair(rng: RngState, cfg: RunConfig, sample_id: str = "sample") -> GarmentSample:
    """Draw one paired sample; all randomness comes from ``rng``."""
    h, w = cfg.image_h, cfg.image_w
    attr = random_attributes(rng, draw_category(rng, cfg))
    x_g, shape = render_flat(attr, rng, h, w)
    warp = WarpParams(
        scale=0.8 + 0.15 * float(rng.uniform(())),
        rotation=(float(rng.uniform(())) - 0.5) * 0.36,
        shear=(float(rng.uniform(())) - 0.5) * 0.5,
        shift_r=(float(rng.uniform(())) - 0.5) * 4.0,
        shift_c=(float(rng.uniform(())) - 0.5) * 4.0,
    )
    occluder = None
    if float(rng.uniform(())) < cfg.occluder_prob:
        orient = "v" if float(rng.uniform(())) < 0.5 else "h"
        span = w if orient == "v" else h
        pos = int(rng.integers(span // 4, 3 * span // 4, ()))
        occluder = (orient, pos)
    x_model, mask = render_worn(x_g, shape, warp, occluder, rng, h, w)
    return GarmentSample(id=sample_id, x_model=x_model, x_g=x_g,
                         mask=mask[None].astype(np.float32), attr=attr)


# -- dataset io ------------------------------------------------------------------

_SAMPLE_MAGIC = b"VTOS1"


def write_sample(path, sample: GarmentSample) -> None:
    buf = io.BytesIO()
    buf.write(_SAMPLE_MAGIC)
    write_tensor(buf, sample.x_model)
    write_tensor(buf, sample.x_g)
    write_tensor(buf, sample.mask)
    attr = sample.attr.to_array()
    buf.write(bytes([len(attr)]))
    buf.write(attr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_sample(path) -> GarmentSample:
    path = Path(path)
    sample_id = path.stem
    try:
        raw = io.BytesIO(path.read_bytes())
        if raw.read(5) != _SAMPLE_MAGIC:
            raise ValueError("bad sample magic")
        x_model = read_tensor(raw)
        x_g = read_tensor(raw)
        mask = read_tensor(raw)
        n = raw.read(1)[0]
        attr = AttributeVector.from_array(np.frombuffer(raw.read(n), dtype=np.uint8))
    except Exception as err:
        raise DatasetError(f"corrupt sample {sample_id!r}: {err}") from err
    return GarmentSample(id=sample_id, x_model=x_model, x_g=x_g, mask=mask, attr=attr)


def write_dataset(samples, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        write_sample(directory / f"{sample.id}.sample", sample)


def read_dataset(directory) -> list[GarmentSample]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"no dataset directory {directory}")
    return [read_sample(p) for p in sorted(directory.glob("*.sample"))]


def make_dataset(cfg: RunConfig, root) -> None:
    """Synthesize the train/test splits under ``root`` deterministically.

    Every sample derives its own stream from (seed, split, index), so the
    same seed reproduces every file bitwise and generation parallelizes
    across ids.
    """
    root = Path(root)
    base = RngState(cfg.seed)
    for split, count in (("train", cfg.train_size), ("test", cfg.test_size)):
        samples = []
        for i in range(count):
            sid = f"{split}-{i:05d}"
            samples.append(synth_pair(base.child("synth", split, i), cfg, sid))
        write_dataset(samples, root / split)
