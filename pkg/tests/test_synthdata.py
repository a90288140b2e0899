import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cidacap import synthdata as sd


@pytest.fixture(scope="module")
def manifest():
    spec = sd.SceneSpec(image_size=32, seed=3)
    return sd.build_splits(spec, counts={"train": 3, "val": 1, "test": 2, "target_pool": 4, "target_test": 2},
                           k_shot=2)


def test_generation_is_deterministic():
    spec = sd.SceneSpec(image_size=32, seed=5)
    a = sd.generate_scene(spec, 1, 2, 17)
    b = sd.generate_scene(spec, 1, 2, 17)
    assert np.array_equal(a.image, b.image)
    assert a.caption == b.caption
    c = sd.generate_scene(spec, 1, 2, 18)
    assert not np.array_equal(a.image, c.image)


def test_scene_shapes_and_caption_grammar():
    spec = sd.SceneSpec(image_size=48)
    s = sd.generate_scene(spec, 3, 4, 0, tissue_id=1)
    assert s.image.shape == (48, 48, 3) and s.image.dtype == np.uint8
    assert s.caption == ["needle_driver", "is", "cauterizing", "kidney"]
    assert sd.parse_caption(s.caption, spec) == (3, 4, 1)
    assert s.tip_mask.sum() > 0
    assert s.label == 3


def test_tip_pixels_carry_class_colour():
    spec = sd.SceneSpec(image_size=64)
    for cls in range(len(spec.instrument_classes)):
        s = sd.generate_scene(spec, cls, 0, cls)
        mean = s.image[s.tip_mask].mean(axis=0)
        want = np.asarray(spec.instrument_classes[cls].color)
        assert np.abs(mean - want).max() <= spec.instrument_classes[cls].color_tol + 1


def test_occlusion_hides_tip():
    spec = sd.SceneSpec(image_size=64, occlusion=1.0)
    s = sd.generate_scene(spec, 0, 0, 0)
    assert s.tip_mask.sum() == 0


def test_parse_caption_errors():
    spec = sd.SceneSpec()
    with pytest.raises(ValueError):
        sd.parse_caption(["grasper", "was", "cutting", "fat"], spec)
    with pytest.raises(ValueError):
        sd.parse_caption(["hammer", "is", "cutting", "fat"], spec)


def test_argument_errors():
    spec = sd.SceneSpec()
    with pytest.raises(ValueError):
        sd.generate_scene(spec, 99, 0)
    with pytest.raises(ValueError):
        sd.generate_scene(spec, 0, 99)
    with pytest.raises(ValueError):
        sd.DomainShift(hue_rotation=200)
    with pytest.raises(ValueError):
        sd.build_splits(spec, k_shot=0)
    with pytest.raises(ValueError):
        sd.build_splits(spec, counts={"target_pool": 3}, k_shot=5)
    with pytest.raises(ValueError):
        sd.SceneSample("x", np.zeros((2, 2, 3), np.uint8), [], (0,), domain=sd.SOURCE, split=sd.ONE_SHOT)


def test_split_inventory(manifest):
    spec = manifest.spec
    src = manifest.select(sd.SOURCE, sd.TRAIN)
    assert len(src) == 3 * len(spec.source_classes)
    assert {s.label for s in src} == set(spec.source_classes)
    assert len(manifest.select(sd.TARGET, sd.ONE_SHOT)) == len(spec.target_classes)
    assert len(manifest.select(sd.TARGET, sd.FEW_SHOT)) == 2 * len(spec.target_classes)
    assert {s.label for s in manifest.select(sd.TARGET)} == set(spec.target_classes)
    assert set(spec.novel_classes) <= set(spec.target_classes)
    ids = [s.id for s in manifest.samples]
    assert len(ids) == len(set(ids))


def test_shift_changes_colour_statistics(manifest):
    train = np.stack([s.image for s in manifest.select(sd.SOURCE, sd.TRAIN)])
    test = np.stack([s.image for s in manifest.select(sd.SOURCE, sd.TEST)])
    target = np.stack([s.image for s in manifest.select(sd.TARGET, sd.TEST)])
    assert sd.channel_histogram_distance(train, target) > 2 * sd.channel_histogram_distance(train, test)


def test_identity_shift_copies(manifest):
    s = manifest.samples[0]
    out = sd.apply_domain_shift(s, sd.DomainShift())
    assert np.array_equal(out.image, s.image) and out.image is not s.image


def test_shift_keeps_labels(manifest):
    s = manifest.samples[0]
    out = sd.apply_domain_shift(s, sd.DEFAULT_TARGET_SHIFT)
    assert out.caption == s.caption and out.object_classes == s.object_classes
    assert not np.array_equal(out.image, s.image)


def test_annotation_roundtrip(tmp_path, manifest):
    ann = sd.save_dataset(tmp_path, manifest.samples[:6])
    back = sd.load_dataset(ann)
    for a, b in zip(manifest.samples[:6], back):
        assert a.id == b.id and a.caption == b.caption and a.object_classes == b.object_classes
        assert a.domain == b.domain and a.split == b.split
        assert np.array_equal(a.image, b.image)


def test_annotation_errors(tmp_path):
    bad = tmp_path / "a.tsv"
    bad.write_text("img.png\tcap\t0\tSOURCE\n")
    with pytest.raises(sd.AnnotationError, match="line 1"):
        sd.read_annotations(bad)
    bad.write_text("img.png\tcap\tx\tSOURCE\tTRAIN\n")
    with pytest.raises(sd.AnnotationError, match="class_ids"):
        sd.read_annotations(bad)
    bad.write_text("img.png\tcap\t0\tMARS\tTRAIN\n")
    with pytest.raises(sd.AnnotationError, match="domain"):
        sd.read_annotations(bad)
    with pytest.raises(sd.AnnotationError):
        sd.write_annotations(bad, [sd.AnnotationRecord("a\tb", "c", (0,), sd.SOURCE, sd.TRAIN)])


@given(st.integers(0, 8), st.integers(0, 5), st.integers(0, 2))
def test_caption_roundtrip(c, i, t):
    spec = sd.SceneSpec()
    assert sd.parse_caption(sd.make_caption(spec, c, i, t), spec) == (c, i, t)


@given(st.integers(0, 2**31 - 1))
def test_rng_stream_reproducible(seed):
    assert sd.rng_stream(seed, 1).random() == sd.rng_stream(seed, 1).random()
