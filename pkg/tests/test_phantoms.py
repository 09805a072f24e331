import json

import numpy as np
import pytest

from exactmil.phantoms import (PhantomSpec, check_geometry, generate_dataset, generate_sample,
                               lesion_voxel_fraction, prevalence_summary)
from exactmil.preprocess import DatasetManifest, load_vol

SMALL = PhantomSpec(shape=(8, 16, 16), lesion_radius=(1.0, 1.5), organ_radius=(0.4, 0.38, 0.22))


@pytest.fixture(scope="module")
def default_samples():
    return generate_dataset(PhantomSpec(), 60, seed=0)[0]


def test_sample_contract(default_samples):
    spec = PhantomSpec()
    for s in default_samples:
        assert s.image.shape == (1,) + spec.shape and s.image.kind == "image"
        assert s.organs.shape == (3,) + spec.shape and s.organs.kind == "mask"
        assert s.lesions.shape == (3,) + spec.shape and s.lesions.kind == "mask"
        assert s.labels.shape == (3,)
        np.testing.assert_array_equal(s.organs.data[2], np.maximum(s.organs.data[0], s.organs.data[1]))
        assert 0.0 <= s.image.data.min() and s.image.data.max() <= 1.0
        for i in range(3):
            assert s.labels[i] == int(s.lesions.data[i].any())


def test_lesions_inside_their_organ(default_samples):
    spec = PhantomSpec()
    n_lesion_vox = 0
    for s in default_samples:
        for i, ch in enumerate(spec.disease_organ):
            les = s.lesions.data[i] > 0
            assert not np.any(les & (s.organs.data[ch] == 0))
            n_lesion_vox += les.sum()
    assert n_lesion_vox > 0


def test_lesion_prevalence_small(default_samples):
    positives = [s for s in default_samples if s.labels.any()]
    assert positives
    assert max(lesion_voxel_fraction(s) for s in positives) <= 0.05


def test_lesions_change_intensity(default_samples):
    spec = PhantomSpec()
    for i, sign in enumerate(spec.lesion_sign):
        diffs = []
        for s in default_samples:
            les = s.lesions.data[i] > 0
            if les.any():
                ring = (s.organs.data[spec.disease_organ[i]] > 0) & ~les
                diffs.append(s.image.data[0][les].mean() - s.image.data[0][ring].mean())
        assert np.sign(np.mean(diffs)) == sign


def test_noise_sigma_at_least_half_delta():
    spec = PhantomSpec()
    assert spec.noise_sigma >= 0.5 * spec.lesion_delta[0]


def test_determinism(tmp_path):
    a, _ = generate_dataset(SMALL, 5, seed=3, out_dir=tmp_path / "a")
    b, _ = generate_dataset(SMALL, 5, seed=3, out_dir=tmp_path / "b")
    for x, y in zip(a, b):
        assert x.image.data.tobytes() == y.image.data.tobytes()
        assert x.lesions.data.tobytes() == y.lesions.data.tobytes()
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    c = generate_sample(SMALL, 2, 3, prefix="train_")
    assert c.image.data.tobytes() == a[2].image.data.tobytes()
    d, _ = generate_dataset(SMALL, 5, seed=4)
    assert any(x.image.data.tobytes() != y.image.data.tobytes() for x, y in zip(a, d))


def test_written_files_and_sidecar(tmp_path):
    samples, _ = generate_dataset(SMALL, 4, seed=1, out_dir=tmp_path, split="test")
    m = DatasetManifest.load(tmp_path / "manifest.jsonl", n_diseases=3)
    assert len(m) == 4 and all(r.split == "test" for r in m)
    for s, r in zip(samples, m):
        assert load_vol(m.resolve(r.volume)).data.tobytes() == s.image.data.tobytes()
        assert load_vol(m.resolve(r.lesions)).data.tobytes() == s.lesions.data.tobytes()
        assert tuple(r.labels) == tuple(int(v) for v in s.labels)
    side = json.loads((tmp_path / "phantom_spec.json").read_text())
    assert side["generated_seed"] == 1 and tuple(side["shape"]) == SMALL.shape


def test_zero_prevalence_disease():
    spec = PhantomSpec(shape=(8, 16, 16), lesion_radius=(1.0, 1.5), organ_radius=(0.4, 0.38, 0.22),
                       prevalence=(0.0, 0.5, 0.5))
    samples, _ = generate_dataset(spec, 40, seed=0)
    assert all(s.labels[0] == 0 and not s.lesions.data[0].any() for s in samples)


def test_prevalence_binomial_bound():
    spec = PhantomSpec(shape=(8, 16, 16), lesion_radius=(1.0, 1.5), organ_radius=(0.4, 0.38, 0.22))
    samples, _ = generate_dataset(spec, 1000, seed=11)
    f = np.array(spec.prevalence)
    bound = 3 * np.sqrt(f * (1 - f) / 1000)
    assert np.all(np.abs(prevalence_summary(samples) - f) <= bound)
    assert np.all((0.256 <= prevalence_summary(samples)) & (prevalence_summary(samples) <= 0.344))


def test_infeasible_geometry():
    spec = PhantomSpec(shape=(8, 16, 16), lesion_radius=(3.0, 5.0))
    with pytest.raises(ValueError, match="infeasible"):
        check_geometry(spec)
    with pytest.raises(ValueError, match="infeasible"):
        generate_dataset(spec, 1, seed=0)


@pytest.mark.parametrize("kw", [dict(prevalence=(1.0, 0.3, 0.3)), dict(prevalence=(0.3, 0.3)),
                                dict(disease_organ=(0, 1, 3)), dict(lesion_radius=(2.0, 1.0)),
                                dict(noise_sigma=-0.1), dict(shape=(2, 16, 16))])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw)
