import json

import numpy as np
import pytest

from dgcwnet import data
from dgcwnet.data import AugmentSpec, Disc, Rect, SegBatch, Stripe, SynthSpec
from dgcwnet.exceptions import ConfigError, FormatError, ShapeError
from dgcwnet.util import keyed_rng

SPEC = SynthSpec(image_size=16, class_count=4, train_size=3, val_size=2, seed=9)


def test_generation_is_a_pure_function_of_the_key():
    a_img, a_lbl = data.gen_synthetic(SPEC, "train", 1)
    b_img, b_lbl = data.gen_synthetic(SPEC, "train", 1)
    assert a_img.tobytes() == b_img.tobytes()
    np.testing.assert_array_equal(a_lbl, b_lbl)
    c_img, _ = data.gen_synthetic(SPEC, "val", 1)
    assert a_img.tobytes() != c_img.tobytes()


def test_generated_ranges():
    image, labels = data.gen_synthetic(SPEC, "train", 0)
    assert image.shape == (3, 16, 16) and image.dtype == np.float32
    assert labels.shape == (16, 16)
    assert image.min() >= 0.0 and image.max() <= 1.0
    assert set(np.unique(labels)) <= set(range(4))


def test_unknown_split():
    with pytest.raises(ConfigError):
        data.gen_synthetic(SPEC, "test", 0)


def test_later_shapes_draw_on_top():
    spec = SynthSpec(image_size=8, class_count=4, noise=0.0)
    shapes = [Rect(1, 0, 0, 8, 8), Rect(3, 2, 2, 2, 2)]
    _, labels = data.render(spec, shapes)
    assert labels[0, 0] == 1
    assert labels[2, 2] == 3 and labels[3, 3] == 3 and labels[4, 4] == 1


def test_shape_masks():
    yy, xx = np.mgrid[0:8, 0:8]
    disc = Disc(1, 4.0, 4.0, 1.0).mask(yy, xx)
    assert disc.sum() == 4
    stripe = Stripe(1, offset=4.0, width=2.0, angle=0.0).mask(yy, xx)
    np.testing.assert_array_equal(stripe[0], [0, 0, 0, 1, 1, 0, 0, 0])


def test_render_checks_labels_and_noise_source():
    spec = SynthSpec(image_size=8, class_count=2)
    with pytest.raises(ConfigError):
        data.render(spec, [Rect(2, 0, 0, 1, 1)], keyed_rng(0, "t"))
    with pytest.raises(ConfigError):
        data.render(spec, [])


def test_orientation_is_the_only_cue_between_classes_one_and_two():
    np.testing.assert_array_equal(data.class_color(1), data.class_color(2))
    assert not np.allclose(data.class_texture(1, 16), data.class_texture(2, 16))


@pytest.mark.parametrize(
    "values",
    [
        {"image_size": 4},
        {"class_count": 1},
        {"shapes_min": 3, "shapes_max": 2},
        {"noise": -1.0},
        {"train_size": -1},
    ],
)
def test_synth_spec_validation(values):
    with pytest.raises(ConfigError):
        SynthSpec(**values)


def test_dataset_round_trip(tmp_path):
    manifest = data.write_dataset(SPEC, tmp_path)
    content = json.loads(manifest.read_text())
    assert content["counts"] == {"train": 3, "val": 2}
    assert len(list(tmp_path.glob("img_train_*.dgt"))) == 3

    val = data.load_split(tmp_path, "val")
    image, labels = data.gen_synthetic(SPEC, "val", 1)
    assert val.images[1].tobytes() == image.tobytes()
    np.testing.assert_array_equal(val.labels[1], labels)
    assert len(data.load_split(tmp_path, "trainval")) == 5


def test_empty_split(tmp_path):
    spec = SynthSpec(image_size=8, train_size=1, val_size=0)
    data.write_dataset(spec, tmp_path)
    val = data.load_split(tmp_path, "val")
    assert len(val) == 0
    assert val.images.shape == (0, 3, 8, 8)


def test_manifest_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        data.load_split(tmp_path, "train")
    (tmp_path / data.MANIFEST).write_text('{"format": "other"}')
    with pytest.raises(FormatError):
        data.load_split(tmp_path, "train")


def test_seg_batch():
    batch = SegBatch(np.zeros((2, 3, 4, 4)), np.full((2, 4, 4), 255))
    assert batch.ignore_mask.all()
    assert len(batch.take([1])) == 1
    with pytest.raises(ShapeError):
        SegBatch(np.zeros((2, 3, 4, 4)), np.zeros((2, 4, 5)))


class TestAugment:
    def setup_method(self):
        self.image, self.labels = data.gen_synthetic(SPEC, "train", 0)

    def test_crop_size_and_determinism(self):
        spec = AugmentSpec(crop=12)
        a = data.augment(self.image, self.labels, spec, keyed_rng(1, "augment", 4))
        b = data.augment(self.image, self.labels, spec, keyed_rng(1, "augment", 4))
        assert a[0].shape == (3, 12, 12) and a[1].shape == (12, 12)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_padding_is_ignored(self):
        spec = AugmentSpec(crop=40, scale_min=1.0, scale_max=1.0, flip_prob=0.0)
        image, labels = data.augment(self.image, self.labels, spec, keyed_rng(0, "a"))
        assert image.shape == (3, 40, 40)
        assert np.all(labels[16:, :] == 255)
        assert np.all(labels[:, 16:] == 255)
        np.testing.assert_array_equal(labels[:16, :16], self.labels)

    def test_certain_flip(self):
        spec = AugmentSpec(crop=16, scale_min=1.0, scale_max=1.0, flip_prob=1.0)
        _, labels = data.augment(self.image, self.labels, spec, keyed_rng(0, "a"))
        np.testing.assert_array_equal(labels, self.labels[:, ::-1])

    def test_batch_streams_follow_the_index(self):
        batch = SegBatch(
            np.stack([self.image, self.image]), np.stack([self.labels, self.labels])
        )
        spec = AugmentSpec(crop=8)
        whole = data.augment_batch(batch, spec, seed=2, first_index=10)
        single = data.augment_batch(batch.take([1]), spec, seed=2, first_index=11)
        np.testing.assert_array_equal(whole.images[1], single.images[0])

    def test_validation(self):
        with pytest.raises(ConfigError):
            AugmentSpec(crop=0)
        with pytest.raises(ConfigError):
            AugmentSpec(scale_min=2.0, scale_max=1.0)
        with pytest.raises(ConfigError):
            AugmentSpec(flip_prob=1.5)
