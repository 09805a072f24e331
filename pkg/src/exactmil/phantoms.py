"""Synthetic volumes with organ masks, hidden lesion masks and image-level labels.

Two ellipsoidal organs plus a global (union) channel.  Each disease places
intensity-shifted spherical lesions with soft Gaussian edges inside its
assigned organ channel.  Lesion masks are written for evaluation only; the
pre-training loop sees labels and organ masks.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .preprocess import DatasetManifest, ManifestRecord, Volume, save_vol


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (16, 32, 32)
    n_organs: int = 2
    n_diseases: int = 3
    prevalence: tuple = (0.3, 0.3, 0.3)
    disease_organ: tuple = (0, 1, 2)       # index 2 == global channel
    lesion_sign: tuple = (1.0, 1.0, -1.0)
    lesion_radius: tuple = (1.6, 2.4)      # voxels
    lesion_delta: tuple = (0.3, 0.4)       # magnitude range
    lesions_per_positive: tuple = (1, 1)
    edge_sigma: float = 0.7
    noise_sigma: float = 0.15
    background: float = 0.05
    organ_intensity: tuple = (0.5, 0.6)
    intensity_jitter: float = 0.03
    organ_radius: tuple = (0.38, 0.38, 0.21)  # fractions of (D, H, W)
    organ_offset: float = 0.24                # organ centres at W * (0.5 -/+ offset)
    pose_jitter: float = 1.0                  # voxels
    radius_jitter: float = 0.08               # relative
    spacing: tuple = (1.0, 1.0, 3.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("shape", "prevalence", "disease_organ", "lesion_sign", "lesion_radius",
                     "lesion_delta", "lesions_per_positive", "organ_intensity", "organ_radius", "spacing"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        n = self.n_diseases
        if self.n_organs != 2:
            raise ValueError("phantom.n_organs: the generator lays out exactly 2 organs")
        for name in ("prevalence", "disease_organ", "lesion_sign"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"phantom.{name}: expected {n} entries")
        for f in self.prevalence:
            if not 0.0 <= f < 1.0:
                raise ValueError(f"phantom.prevalence: {f} not in [0, 1)")
        for c in self.disease_organ:
            if not 0 <= c <= self.n_organs:
                raise ValueError(f"phantom.disease_organ: channel {c} outside [0, {self.n_organs}]")
        lo, hi = self.lesion_radius
        if not 0 < lo <= hi:
            raise ValueError("phantom.lesion_radius: need 0 < min <= max")
        if not 0 < self.lesion_delta[0] <= self.lesion_delta[1]:
            raise ValueError("phantom.lesion_delta: need 0 < min <= max")
        if self.lesions_per_positive[0] < 1 or self.lesions_per_positive[0] > self.lesions_per_positive[1]:
            raise ValueError("phantom.lesions_per_positive: need 1 <= min <= max")
        if self.noise_sigma < 0:
            raise ValueError("phantom.noise_sigma must be >= 0")
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ValueError("phantom.shape: three extents >= 4 required")

    @property
    def n_channels(self):
        return self.n_organs + 1

    def to_dict(self):
        return asdict(self)


@dataclass
class PhantomSample:
    id: str
    image: Volume     # [1, D, H, W]
    organs: Volume    # [M+1, D, H, W]; last channel = union
    lesions: Volume   # [N, D, H, W]
    labels: np.ndarray


def _ellipsoid(shape, center, radii):
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    r2 = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    return r2 <= 1.0


def organ_layout(spec, rng=None):
    """Organ centres and radii; jittered when an rng is given."""
    d, h, w = spec.shape
    base_r = np.array(spec.organ_radius) * np.array([d, h, w])
    layout = []
    for side in (-1, 1):
        c = np.array([(d - 1) / 2, (h - 1) / 2, (w - 1) / 2 + side * spec.organ_offset * w])
        r = base_r.copy()
        if rng is not None:
            c = c + rng.uniform(-spec.pose_jitter, spec.pose_jitter, 3)
            r = r * (1.0 + rng.uniform(-spec.radius_jitter, spec.radius_jitter, 3))
        layout.append((c, r))
    return layout


def check_geometry(spec):
    """Raise if the smallest possible organ cannot host the largest lesion."""
    worst = []
    for c, r in organ_layout(spec):
        r = r * (1.0 - spec.radius_jitter)
        worst.append(ndimage.distance_transform_edt(_ellipsoid(spec.shape, c, r)).max())
    need = spec.lesion_radius[1] + 0.5
    if min(worst) < need:
        raise ValueError(f"infeasible phantom geometry: organ interior depth {min(worst):.2f} "
                         f"< lesion radius {spec.lesion_radius[1]} + 0.5 voxels")


def _sample_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_sample(spec, index, seed, prefix="s"):
    rng = _sample_rng(seed, index)
    d, h, w = spec.shape
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in spec.shape), indexing="ij")

    organs = np.zeros((spec.n_channels, d, h, w), dtype=np.float32)
    image = np.full((d, h, w), spec.background, dtype=np.float64)
    for m, (c, r) in enumerate(organ_layout(spec, rng)):
        mask = _ellipsoid(spec.shape, c, r)
        organs[m] = mask
        level = spec.organ_intensity[m] + rng.uniform(-spec.intensity_jitter, spec.intensity_jitter)
        image[mask] = level
    organs[spec.n_organs] = organs[:spec.n_organs].max(axis=0)
    depth = [ndimage.distance_transform_edt(organs[ch] > 0) for ch in range(spec.n_channels)]

    labels = np.zeros(spec.n_diseases, dtype=np.int64)
    lesions = np.zeros((spec.n_diseases, d, h, w), dtype=np.float32)
    draws = rng.random(spec.n_diseases)
    for i in range(spec.n_diseases):
        if draws[i] >= spec.prevalence[i]:
            continue
        ch = spec.disease_organ[i]
        count = int(rng.integers(spec.lesions_per_positive[0], spec.lesions_per_positive[1] + 1))
        for _ in range(count):
            radius = rng.uniform(*spec.lesion_radius)
            cand = np.argwhere(depth[ch] >= radius + 0.5)
            if len(cand) == 0:
                raise ValueError(f"infeasible phantom geometry: no room for a lesion of radius {radius:.2f}")
            center = cand[rng.integers(len(cand))] + rng.uniform(-0.5, 0.5, 3)
            dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, center)))
            core = (dist <= radius) & (organs[ch] > 0)
            lesions[i][core] = 1.0
            profile = np.where(dist <= radius, 1.0, np.exp(-((dist - radius) ** 2) / (2 * spec.edge_sigma ** 2)))
            delta = spec.lesion_sign[i] * rng.uniform(*spec.lesion_delta)
            image += delta * profile
        labels[i] = int(lesions[i].any())

    image += rng.normal(0.0, spec.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    sid = f"{prefix}{index:05d}"
    return PhantomSample(
        id=sid,
        image=Volume(image[None].astype(np.float32), spec.spacing, "image"),
        organs=Volume(organs, spec.spacing, "mask"),
        lesions=Volume(lesions, spec.spacing, "mask"),
        labels=labels,
    )


def generate_dataset(spec, n_samples, seed=None, out_dir=None, split="train", prefix=None):
    """Generate ``n_samples`` phantoms; optionally write EVL1 files and a manifest.

    Returns (samples, manifest).  Sample ``i`` depends only on (spec, seed, i).
    """
    seed = spec.seed if seed is None else seed
    check_geometry(spec)
    prefix = prefix if prefix is not None else f"{split}_"
    samples = [generate_sample(spec, i, seed, prefix) for i in range(n_samples)]
    records = [ManifestRecord(id=s.id, volume=f"{s.id}_image.evl", organs=f"{s.id}_organs.evl",
                              lesions=f"{s.id}_lesions.evl", labels=tuple(int(v) for v in s.labels),
                              split=split) for s in samples]
    manifest = DatasetManifest(records, Path(out_dir) if out_dir is not None else Path("."))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s, r in zip(samples, records):
            save_vol(s.image, out / r.volume)
            save_vol(s.organs, out / r.organs)
            save_vol(s.lesions, out / r.lesions)
        manifest.save(out / "manifest.jsonl")
        sidecar = dict(spec.to_dict(), generated_seed=seed, n_samples=n_samples, split=split)
        (out / "phantom_spec.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return samples, manifest


def prevalence_summary(samples):
    labels = np.array([s.labels for s in samples])
    return labels.mean(axis=0) if len(labels) else np.zeros(0)


def lesion_voxel_fraction(sample):
    """Fraction of volume voxels covered by any lesion."""
    return float(sample.lesions.data.max(axis=0).mean())
