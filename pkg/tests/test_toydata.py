import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drk import toydata as T
from drk.errors import FormatError, GenerationError, ValidationError


@pytest.fixture(scope="module")
def dataset():
    return T.generate(T.DatasetSpec(n_samples=200, seed=0))


def test_sample_layout(dataset):
    s = dataset[0]
    assert s.image.shape == (3, 64, 64) and s.image.dtype == np.float32
    assert s.attr.shape == (T.ATTR_DIM,) and s.attr.sum() == 4
    assert s.mask.dtype == np.uint8 and set(np.unique(s.mask)) <= {0, 1}
    assert s.sample_id == "s00000" and dataset[-1].sample_id == "s00199"


def test_deterministic():
    spec = T.DatasetSpec(n_samples=10, seed=4)
    a, b = T.generate(spec), T.generate(spec)
    assert all(x.same_data(y) for x, y in zip(a, b))
    c = T.generate(T.DatasetSpec(n_samples=10, seed=5))
    assert not all(x.same_data(y) for x, y in zip(a, c))


def test_foreground_fraction_bounds(dataset):
    fractions = [T.foreground_fraction(s) for s in dataset]
    assert min(fractions) >= 0.01 and max(fractions) <= 0.25


def test_referent_replay(dataset):
    for s in dataset:
        idx = T.resolve_referent(s.attr, s.scene)
        assert idx == s.referent
        assert np.array_equal(s.scene[idx].raster(64, 64).astype(np.uint8), s.mask)


def test_shapes_disjoint_and_in_quadrant(dataset):
    for s in dataset:
        assert 2 <= len(s.scene) <= 5
        rasters = [sh.raster(64, 64) for sh in s.scene]
        assert not np.any(np.sum(rasters, axis=0) > 1)
        for sh in s.scene:
            assert (sh.cy >= 32) == (sh.quadrant[0] == "B")
            assert (sh.cx >= 32) == (sh.quadrant[1] == "R")


def test_mask_pixels_carry_referent_colour(dataset):
    s = dataset[3]
    colour = np.array(T.COLORS[s.scene[s.referent].color], dtype=np.float32)
    assert np.allclose(s.image[:, s.mask.astype(bool)].T, colour)


@given(st.sampled_from(T.SHAPES), st.sampled_from(T.COLOR_NAMES), st.sampled_from(T.SIZES),
       st.sampled_from(T.QUADRANTS))
def test_attribute_codec(kind, color, size, quadrant):
    vec = T.encode_attributes(kind, color, size, quadrant)
    assert T.decode_attributes(vec) == (kind, color, size, quadrant)


def test_save_load_round_trip(tmp_path):
    samples = T.generate(T.DatasetSpec(n_samples=6, size=32, seed=2))
    T.save(samples, tmp_path)
    loaded = T.load(tmp_path)
    assert len(loaded) == 6 and all(a.same_data(b) for a, b in zip(samples, loaded))
    assert (tmp_path / "index.txt").read_text().split() == [s.sample_id for s in samples]


def test_truncated_mask_detected(tmp_path):
    samples = T.generate(T.DatasetSpec(n_samples=2, size=32, seed=2))
    T.save(samples, tmp_path)
    path = tmp_path / "s00001.mask.pgm"
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError, match="s00001.mask.pgm"):
        T.load(tmp_path)


def test_missing_file_detected(tmp_path):
    samples = T.generate(T.DatasetSpec(n_samples=2, size=32, seed=2))
    T.save(samples, tmp_path)
    (tmp_path / "s00000.attr.dten").unlink()
    with pytest.raises(FormatError, match="s00000.attr.dten"):
        T.load(tmp_path)
    with pytest.raises(FormatError, match="index.txt"):
        T.load(tmp_path / "nowhere")


@settings(max_examples=20)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31))
def test_pgm_round_trip(h, w, seed):
    mask = (np.random.default_rng(seed).random((h, w)) < 0.5).astype(np.uint8)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.pgm"
        T.write_pgm(path, mask)
        assert np.array_equal(T.read_pgm(path), mask)


@pytest.mark.parametrize("kwargs", [dict(n_samples=0), dict(size=8), dict(min_distractors=3, max_distractors=2),
                                    dict(fg_bounds=(0.3, 0.2))])
def test_spec_validation(kwargs):
    with pytest.raises(ValidationError):
        T.DatasetSpec(**kwargs).validate()


def test_impossible_scene_raises():
    spec = T.DatasetSpec(n_samples=1, size=16, min_distractors=40, max_distractors=40)
    with pytest.raises(GenerationError):
        T.generate(spec)
