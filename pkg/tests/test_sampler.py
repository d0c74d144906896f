import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vertloc.sampler import (Patch, SamplingError, elastic_deform, load_patches, normalize_intensity,
                             sample_detection_patches, sample_identification_patches, save_patches)
from vertloc.synthetic import phantom, spine_centroids
from vertloc.volume import Geometry, Volume


@pytest.fixture(scope="module")
def scan():
    g = Geometry((96, 96, 200), (1, 1, 1))
    cs = spine_centroids(18, 22, (96, 96, 200), np.random.default_rng(3))
    return phantom(cs, g, noise_hu=20.0)


def test_normalize_window():
    out = normalize_intensity(np.array([-3000, -1000, 500, 2000, 5000]))
    assert np.allclose(out, [-1, -1, 0, 1, 1])


def test_detection_quota_and_shapes(scan):
    vol, lab = scan
    patches = sample_detection_patches(vol, lab, 5, seed=11)
    assert len(patches) == 5
    assert sum(p.label.any() for p in patches) >= 4
    for p in patches:
        assert p.kind == "detection"
        assert p.image.shape == p.label.shape == (64, 64, 80)
        assert set(np.unique(p.label)) <= {0, 1}
        assert all(o + s <= e for o, s, e in zip(p.offset, (64, 64, 80), vol.shape))


@pytest.mark.parametrize("n", [1, 3, 5, 7, 10])
def test_detection_quota_generalizes(scan, n):
    vol, lab = scan
    patches = sample_detection_patches(vol, lab, n, seed=n)
    assert sum(p.label.any() for p in patches) >= math.ceil(0.8 * n)


def test_detection_deterministic(scan):
    vol, lab = scan
    a = sample_detection_patches(vol, lab, 5, seed=7)
    b = sample_detection_patches(vol, lab, 5, seed=7)
    for p, q in zip(a, b):
        assert p.offset == q.offset
        assert p.image.tobytes() == q.image.tobytes() and p.label.tobytes() == q.label.tobytes()


def test_detection_small_volume_padded_with_air():
    rng = np.random.default_rng(0)
    data = rng.uniform(-900, 1900, (32, 32, 40)).astype(np.float32)
    lab = np.zeros((32, 32, 40), np.uint8)
    lab[10:20, 10:20, 10:30] = 21
    patches = sample_detection_patches(Volume(data), Volume(lab), 5, seed=1)
    zeros = sample_detection_patches(Volume(data), Volume(lab), 5, seed=1, pad_value=0.0)
    # symmetric padding: source occupies [16:48, 16:48, 20:60] of the only possible crop
    source = np.zeros((64, 64, 80), bool)
    source[16:48, 16:48, 20:60] = True
    for p in patches:
        assert p.offset == (0, 0, 0) and p.image.shape == (64, 64, 80)
        assert np.all(p.image[~source] == -1.0) and np.all(p.label[~source] == 0)
        assert np.array_equal(p.image[source].reshape(32, 32, 40), normalize_intensity(data))
        assert np.array_equal(p.label[source].reshape(32, 32, 40), (lab > 0).astype(np.uint8))
    assert all(np.all(z.image[~source] == 0) for z in zeros)


def test_detection_unsatisfiable_raises():
    vol = Volume(np.zeros((70, 70, 90), np.float32))
    with pytest.raises(SamplingError):
        sample_detection_patches(vol, vol.with_data(np.zeros((70, 70, 90), np.uint8)), 5, seed=0, max_attempts=20)


def test_identification_patches(scan):
    vol, lab = scan
    patches = sample_identification_patches(vol, lab, 100, seed=5)
    assert len(patches) == 100
    for p in patches:
        assert p.image.shape == (8, 80, 320) and p.label.shape == (80, 320)
        assert p.label.any()
        x, y, z = p.offset
        # label is the dense map of the 4th slab slice (the volume is padded to 320 along axis 2)
        padded = np.pad(lab.data, ((0, 0), (0, 0), (60, 60)))
        assert np.array_equal(p.label, padded[x + 3, y:y + 80, z:z + 320])
    again = sample_identification_patches(vol, lab, 100, seed=5)
    assert [p.offset for p in patches] == [q.offset for q in again]


def test_identification_label_shape_independent_of_source():
    lab = np.zeros((10, 30, 50), np.uint8)
    lab[4:6, 10:20, 10:40] = 9
    patches = sample_identification_patches(Volume(np.zeros((10, 30, 50), np.float32)), Volume(lab), 4, seed=0)
    assert all(p.label.shape == (80, 320) and p.label.any() for p in patches)


def _id_patch(rng, values=(3, 4, 5)):
    lab = np.zeros((80, 320), np.uint8)
    for i, v in enumerate(values):
        lab[20:60, 40 + 80 * i:100 + 80 * i] = v
    img = rng.normal(size=(8, 80, 320)).astype(np.float32)
    return Patch(img, lab, (0, 0, 0), "identification")


def test_elastic_identity_at_zero_sigma(rng):
    p = _id_patch(rng)
    q = elastic_deform(p, 0.0, seed=3)
    assert np.array_equal(q.image, p.image) and np.array_equal(q.label, p.label)


def test_elastic_deterministic_and_nontrivial(rng):
    p = _id_patch(rng)
    a, b = elastic_deform(p, 0.7, seed=9), elastic_deform(p, 0.7, seed=9)
    assert a.image.tobytes() == b.image.tobytes() and a.label.tobytes() == b.label.tobytes()
    big = elastic_deform(p, 8.0, seed=9)
    assert not np.array_equal(big.label, p.label)


def test_elastic_same_warp_for_every_slice(rng):
    lab = np.zeros((80, 320), np.uint8)
    lab[30:50, 100:200] = 4
    img = np.repeat(lab[None].astype(np.float32), 8, axis=0)
    q = elastic_deform(Patch(img, lab, (0, 0, 0), "identification"), 5.0, seed=2)
    assert all(np.array_equal(q.image[0], q.image[i]) for i in range(8))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), sigma=st.floats(0, 20))
def test_elastic_never_invents_labels(seed, sigma):
    rng = np.random.default_rng(seed)
    values = tuple(rng.choice(np.arange(1, 27), size=3, replace=False))
    p = _id_patch(rng, values)
    q = elastic_deform(p, sigma, seed=seed)
    assert set(np.unique(q.label)) <= set(np.unique(p.label))


def test_patch_persistence_roundtrip(tmp_path, rng):
    ps = [_id_patch(rng), _id_patch(rng, (1, 2, 3))]
    import json
    records = save_patches(ps, tmp_path, "scan")
    (tmp_path / "manifest.json").write_text(json.dumps({"patches": records}))
    back = load_patches(tmp_path)
    assert all(np.array_equal(a.image, b.image) and np.array_equal(a.label, b.label) for a, b in zip(ps, back))
