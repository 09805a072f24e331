"""Volume I/O (EVL1 format), dataset manifests and the preprocessing chain.

EVL1 layout, all little-endian::

    'E' 'V' 'L' '1'
    u32 C, u32 D, u32 H, u32 W
    f32 sx, f32 sy, f32 sz          (mm per voxel along W, H, D)
    u8 kind (0=image, 1=mask, 2=map), 3 zero pad bytes
    C*D*H*W f32 in (c, d, h, w) row-major order

Chain applied to images: resample -> percentile clip -> CLAHE -> rescale
to [0, 1] -> resize.  Masks only ever go through nearest-neighbour
resampling.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensors import nearest_array, trilinear_array

MAGIC = b"EVL1"
HEADER = struct.Struct("<4s4I3fB3x")
KINDS = ("image", "mask", "map")
MAX_VOXELS = 1 << 31


class VolumeFormatError(ValueError):
    """Malformed EVL1 data; ``field`` names the offending header field."""

    def __init__(self, message, field, code="E_VOLUME_FORMAT"):
        super().__init__(message)
        self.field = field
        self.code = code


@dataclass
class Volume:
    data: np.ndarray                  # [C, D, H, W] float32
    spacing: tuple = (1.0, 1.0, 1.0)  # (sx, sy, sz) mm
    kind: str = "image"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be [C, D, H, W], got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.kind == "mask" and not np.isin(self.data, (0.0, 1.0)).all():
            raise ValueError("mask volumes may only contain 0 and 1")

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, spacing=None):
        return Volume(data, self.spacing if spacing is None else spacing, self.kind)


# ---------------------------------------------------------------- EVL1

def encode_volume(vol):
    c, d, h, w = vol.data.shape
    head = HEADER.pack(MAGIC, c, d, h, w, *vol.spacing, KINDS.index(vol.kind))
    return head + np.ascontiguousarray(vol.data, dtype="<f4").tobytes()


def decode_volume(buf, source="<bytes>"):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise VolumeFormatError(f"{source}: bad magic {bytes(buf[:4])!r}", "magic", "E_BAD_MAGIC")
    if len(buf) < HEADER.size:
        raise VolumeFormatError(f"{source}: truncated header ({len(buf)} bytes)", "header", "E_TRUNCATED")
    _, c, d, h, w, sx, sy, sz, kind = HEADER.unpack_from(buf, 0)
    for name, n in zip("CDHW", (c, d, h, w)):
        if n == 0:
            raise VolumeFormatError(f"{source}: extent {name} is zero", name)
    count = c * d * h * w
    if count >= MAX_VOXELS:
        raise VolumeFormatError(f"{source}: extent product {count} overflows", "extents")
    if kind >= len(KINDS):
        raise VolumeFormatError(f"{source}: unknown kind code {kind}", "kind")
    for name, s in zip(("sx", "sy", "sz"), (sx, sy, sz)):
        if not s > 0:
            raise VolumeFormatError(f"{source}: spacing {name}={s} must be > 0", name)
    want = HEADER.size + 4 * count
    if len(buf) != want:
        what = "truncated payload" if len(buf) < want else "trailing bytes after payload"
        raise VolumeFormatError(f"{source}: {what} ({len(buf)} bytes, expected {want})", "payload", "E_TRUNCATED")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=HEADER.size).reshape(c, d, h, w)
    return Volume(data.astype(np.float32), (sx, sy, sz), KINDS[kind])


def save_vol(vol, path):
    Path(path).write_bytes(encode_volume(vol))


def load_vol(path):
    path = Path(path)
    return decode_volume(path.read_bytes(), str(path))


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestRecord:
    id: str
    volume: str
    organs: str
    labels: tuple
    split: str = "train"
    lesions: str | None = None

    def to_json(self):
        return json.dumps({"id": self.id, "volume": self.volume, "organs": self.organs,
                           "lesions": self.lesions, "labels": list(self.labels),
                           "split": self.split}, sort_keys=True)


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, rel):
        return None if rel is None else self.root / rel

    def split(self, tag):
        return DatasetManifest([r for r in self.records if r.split == tag], self.root)

    def labels(self):
        return np.array([r.labels for r in self.records], dtype=np.int64)

    def save(self, path):
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.records))

    @classmethod
    def load(cls, path, n_diseases=None, check_files=True):
        path = Path(path)
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                rec = ManifestRecord(id=str(d["id"]), volume=d["volume"], organs=d["organs"],
                                     labels=tuple(int(v) for v in d["labels"]),
                                     split=d.get("split", "train"), lesions=d.get("lesions"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
            if n_diseases is not None and len(rec.labels) != n_diseases:
                raise ValueError(f"{path}:{lineno}: label vector length {len(rec.labels)} != {n_diseases}")
            records.append(rec)
        manifest = cls(records, path.parent)
        if check_files:
            for rec in records:
                for rel in (rec.volume, rec.organs, rec.lesions):
                    if rel is not None and not (manifest.root / rel).exists():
                        raise FileNotFoundError(f"{path}: record {rec.id} references missing file {rel}")
        return manifest


# ---------------------------------------------------------------- preprocessing ops

def _round_half_up(x):
    return int(math.floor(x + 0.5))


def resample_spacing(vol, target_spacing=(1.0, 1.0, 3.0)):
    """Resample to a new spacing; trilinear for images/maps, nearest for masks."""
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ValueError(f"target spacing components must be > 0, got {target_spacing}")
    sx, sy, sz = vol.spacing
    tx, ty, tz = target
    _, d, h, w = vol.shape
    extents = (max(1, _round_half_up(d * sz / tz)),
               max(1, _round_half_up(h * sy / ty)),
               max(1, _round_half_up(w * sx / tx)))
    return Volume(_resize_kind(vol.data, extents, vol.kind), target, vol.kind)


def _resize_kind(data, extents, kind):
    if tuple(data.shape[1:]) == tuple(extents):
        return data.copy()
    if kind == "mask":
        return nearest_array(data, extents)
    return trilinear_array(data.astype(np.float64), extents).astype(np.float32)


def percentile_clip(vol, lo_pct=0.5, hi_pct=99.5):
    """Clamp to the volume's own linear-interpolated percentiles."""
    if vol.kind != "image":
        raise ValueError("percentile_clip applies to image volumes only")
    lo, hi = np.percentile(vol.data.astype(np.float64), [lo_pct, hi_pct])
    return vol.with_data(np.clip(vol.data, lo, hi))


def _tile_edges(n, tiles):
    return [(i * n) // tiles for i in range(tiles + 1)]


def _clip_histogram(hist, limit, nbins):
    excess = int(np.maximum(hist - limit, 0).sum())
    hist = np.minimum(hist, limit)
    batch, residual = divmod(excess, nbins)
    hist = hist + batch
    if residual:
        step = max(nbins // residual, 1)
        for i in range(0, nbins, step):
            if residual == 0:
                break
            hist[i] += 1
            residual -= 1
    return hist


def _blend_axis(n, edges):
    """Per-pixel (lower tile, upper tile, upper weight) along one axis."""
    centers = np.array([(edges[i] + edges[i + 1] - 1) / 2.0 for i in range(len(edges) - 1)])
    pos = np.arange(n, dtype=np.float64)
    hi = np.searchsorted(centers, pos, side="right")
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    wgt = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, wgt


def clahe_slice(bins, clip_limit=2.0, tiles=(8, 8), nbins=256):
    """CLAHE of one 2-D slice of integer bin indices; returns values in [0, 1].

    Per-tile histograms are clipped at max(1, int(clip_limit * area / nbins)),
    the excess is spread uniformly (integer batches, remainder stepped across
    bins), and tile lookup tables are blended bilinearly between tile centres.
    """
    h, w = bins.shape
    ty, tx = tiles
    if h < ty or w < tx:
        raise ValueError(f"slice {h}x{w} smaller than the {ty}x{tx} tile grid")
    ey, ex = _tile_edges(h, ty), _tile_edges(w, tx)
    luts = np.empty((ty, tx, nbins))
    for i in range(ty):
        for j in range(tx):
            tile = bins[ey[i]:ey[i + 1], ex[j]:ex[j + 1]]
            area = tile.size
            hist = np.bincount(tile.reshape(-1), minlength=nbins).astype(np.int64)
            if math.isfinite(clip_limit):
                limit = max(1, int(clip_limit * area / nbins))
                hist = _clip_histogram(hist, limit, nbins)
            luts[i, j] = np.cumsum(hist) / area
    ylo, yhi, wy = _blend_axis(h, ey)
    xlo, xhi, wx = _blend_axis(w, ex)
    Y = (slice(None), None)
    X = (None, slice(None))
    l00 = luts[ylo[Y], xlo[X], bins]
    l01 = luts[ylo[Y], xhi[X], bins]
    l10 = luts[yhi[Y], xlo[X], bins]
    l11 = luts[yhi[Y], xhi[X], bins]
    wy, wx = wy[Y], wx[X]
    return (1 - wy) * ((1 - wx) * l00 + wx * l01) + wy * ((1 - wx) * l10 + wx * l11)


def to_bins(data, lo, hi, nbins=256):
    return np.clip(np.floor((data.astype(np.float64) - lo) / (hi - lo) * nbins), 0, nbins - 1).astype(np.int64)


def clahe(vol, clip_limit=2.0, tiles=(8, 8), nbins=256):
    """Slice-wise (axial) CLAHE; output stays within the volume's [min, max]."""
    if vol.kind != "image":
        raise ValueError("clahe applies to image volumes only")
    lo, hi = float(vol.data.min()), float(vol.data.max())
    _, d, h, w = vol.shape
    if h < tiles[0] or w < tiles[1]:
        raise ValueError(f"slice {h}x{w} smaller than the {tiles[0]}x{tiles[1]} tile grid")
    if hi == lo:
        return vol.with_data(vol.data.copy())
    bins = to_bins(vol.data, lo, hi, nbins)
    out = np.empty(vol.shape, dtype=np.float64)
    for c in range(vol.shape[0]):
        for z in range(d):
            out[c, z] = clahe_slice(bins[c, z], clip_limit, tiles, nbins)
    return vol.with_data(lo + (hi - lo) * out)


def rescale_unit(vol):
    lo, hi = float(vol.data.min()), float(vol.data.max())
    if hi == lo:
        return vol.with_data(np.zeros_like(vol.data))
    return vol.with_data((vol.data.astype(np.float64) - lo) / (hi - lo))


def resize_to(vol, target=(64, 128, 128)):
    target = tuple(int(t) for t in target)
    if min(target) < 1:
        raise ValueError(f"zero target extent in {target}")
    _, d, h, w = vol.shape
    sx, sy, sz = vol.spacing
    spacing = (sx * w / target[2], sy * h / target[1], sz * d / target[0])
    return Volume(_resize_kind(vol.data, target, vol.kind), spacing, vol.kind)


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: tuple = (1.0, 1.0, 3.0)
    lo_pct: float = 0.5
    hi_pct: float = 99.5
    clip_limit: float = 2.0
    tiles: tuple = (8, 8)
    target_shape: tuple = (64, 128, 128)


def preprocess_image(vol, cfg=PreprocessConfig()):
    vol = resample_spacing(vol, cfg.target_spacing)
    vol = percentile_clip(vol, cfg.lo_pct, cfg.hi_pct)
    vol = clahe(vol, cfg.clip_limit, tuple(cfg.tiles))
    vol = rescale_unit(vol)
    return resize_to(vol, cfg.target_shape)


def preprocess_mask(vol, cfg=PreprocessConfig()):
    if vol.kind != "mask":
        raise ValueError("preprocess_mask expects a mask volume")
    return resize_to(resample_spacing(vol, cfg.target_spacing), cfg.target_shape)
