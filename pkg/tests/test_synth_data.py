#!/usr/bin/env python3
"""
Tests for synthetic scene generation and the CRPND1 dataset file
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from box_geometry import iou_matrix
from errors import ConfigError, FormatError, GenerationError
from synth_data import MAGIC, ByteReader, DatasetSpec, flip_scene, generate, load, render_scene, save, split

SMALL = DatasetSpec(num_scenes=6, image_size=32, min_size=6, max_size=16, seed=3)


def assert_scenes_equal(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert x.scene_id == y.scene_id
        np.testing.assert_array_equal(x.gts, y.gts)
        np.testing.assert_array_equal(x.image, y.image)


def test_generation_is_deterministic_and_thread_independent():
    first = generate(SMALL)
    assert_scenes_equal(first, generate(SMALL))
    assert_scenes_equal(first, generate(SMALL, threads=3))
    other = generate(DatasetSpec(num_scenes=6, image_size=32, min_size=6, max_size=16, seed=4))
    assert any(not np.array_equal(a.image, b.image) for a, b in zip(first, other))


def test_scene_invariants():
    spec = DatasetSpec(num_scenes=25, image_size=48, min_size=8, max_size=24, seed=11)
    for scene in generate(spec):
        assert scene.image.shape == (3, 48, 48)
        assert scene.image.dtype == np.float32
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
        assert spec.min_objects <= len(scene.gts) <= spec.max_objects
        gts = scene.gts.astype(np.float64)
        assert np.all(gts[:, 2:] >= spec.min_size) and np.all(gts[:, 2:] <= spec.max_size)
        assert np.all(gts[:, 0] - gts[:, 2] / 2 >= 0) and np.all(gts[:, 0] + gts[:, 2] / 2 <= 48)
        assert np.all(gts[:, 1] - gts[:, 3] / 2 >= 0) and np.all(gts[:, 1] + gts[:, 3] / 2 <= 48)
        overlaps = iou_matrix(gts, gts)
        np.fill_diagonal(overlaps, 0.0)
        assert np.all(overlaps <= spec.max_overlap + 1e-9)


def test_objects_are_brighter_than_background():
    spec = DatasetSpec(num_scenes=1, image_size=32, min_objects=1, max_objects=1,
                       min_size=12, max_size=12, noise=0.0, texture_amplitude=0.1, seed=5)
    scene = render_scene(spec, 0)
    x, y = int(scene.gts[0, 0]), int(scene.gts[0, 1])
    assert scene.image[:, y, x].max() >= 0.5
    assert scene.image.min() <= 0.1


def test_render_scene_matches_generate():
    assert_scenes_equal([render_scene(SMALL, 4)], generate(SMALL)[4:5])


def test_impossible_placement_raises():
    spec = DatasetSpec(num_scenes=1, image_size=16, min_objects=2, max_objects=2, min_size=16, max_size=16)
    with pytest.raises(GenerationError):
        generate(spec)


def test_dataset_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(num_scenes=0)
    with pytest.raises(ConfigError):
        DatasetSpec(image_size=32, max_size=40)
    with pytest.raises(ConfigError):
        DatasetSpec(min_objects=3, max_objects=1)


def test_flip_mirrors_image_and_boxes():
    scene = generate(SMALL)[0]
    flipped = flip_scene(scene)
    np.testing.assert_array_equal(flipped.image[:, :, 0], scene.image[:, :, -1])
    np.testing.assert_allclose(flipped.gts[:, 0], 32 - scene.gts[:, 0])
    np.testing.assert_array_equal(flipped.gts[:, 1:], scene.gts[:, 1:])
    assert_scenes_equal([flip_scene(flipped)], [scene])


def test_split_takes_validation_from_the_end():
    scenes = generate(SMALL)
    train, val = split(scenes, 2)
    assert [s.scene_id for s in train] == [0, 1, 2, 3]
    assert [s.scene_id for s in val] == [4, 5]
    with pytest.raises(ConfigError):
        split(scenes, 6)


def test_save_load_preserves_scenes(tmp_path):
    scenes = generate(SMALL)
    path = tmp_path / "scenes.crpnd"
    save(scenes, path)
    assert path.read_bytes().startswith(MAGIC)
    assert_scenes_equal(load(path), scenes)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.crpnd"
    path.write_bytes(b"NOTDATA" + b"\x00" * 16)
    with pytest.raises(FormatError) as excinfo:
        load(path)
    assert excinfo.value.offset == 0


def test_load_reports_offset_of_truncation(tmp_path):
    path = tmp_path / "scenes.crpnd"
    save(generate(SMALL)[:1], path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(FormatError) as excinfo:
        load(path)
    header = len(MAGIC) + 8 + 4 * 4 * len(generate(SMALL)[0].gts) + 12
    assert excinfo.value.offset == header
    assert "truncated" in str(excinfo.value)


def test_byte_reader_cursor():
    reader = ByteReader(b"\x01\x00\x00\x00\x02\x00\x00\x00")
    assert reader.unpack("<I", "first") == (1,)
    assert reader.offset == 4
    assert reader.unpack("<I", "second") == (2,)
    assert reader.exhausted
    with pytest.raises(FormatError):
        reader.take(1, "nothing")
