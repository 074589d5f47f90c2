from dataclasses import replace

import numpy as np
import pytest

from gbw.errors import InvalidInputError
from gbw.synth import (
    DenseSample,
    SceneSpec,
    dataset_class_statistics,
    dataset_from_bytes,
    dataset_to_bytes,
    generate,
    load_dataset,
    save_dataset,
)


def test_balanced_prevalence():
    spec = SceneSpec(proportions=(0.5, 0.5), seed=3)
    freq = dataset_class_statistics(generate(spec, 100)).pixel_freq
    np.testing.assert_allclose(freq, [0.5, 0.5], atol=0.02)


def test_default_prevalence_converges():
    spec = SceneSpec()
    freq = dataset_class_statistics(generate(spec, 100), spec.n_classes).pixel_freq
    np.testing.assert_allclose(freq, spec.proportions, atol=0.02)


def test_imbalanced_prevalence():
    spec = SceneSpec(proportions=(0.95, 0.05), seed=1)
    stats = dataset_class_statistics(generate(spec, 100))
    np.testing.assert_allclose(stats.pixel_freq, [0.95, 0.05], atol=0.02)


def test_determinism():
    spec = SceneSpec(seed=5)
    a = dataset_to_bytes(spec, generate(spec, 3, "target"), "target")
    b = dataset_to_bytes(spec, generate(spec, 3, "target"), "target")
    assert a == b


def test_images_differ_across_seeds_and_domains():
    a = generate(SceneSpec(seed=0), 1)[0]
    b = generate(SceneSpec(seed=1), 1)[0]
    c = generate(SceneSpec(seed=0), 1, "target")[0]
    assert not np.array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)


def test_no_shift_domains_match():
    spec = SceneSpec(shift_magnitude=0.0, proportions=(0.5, 0.5), seed=2)
    src = np.concatenate([s.features.reshape(-1, 8) for s in generate(spec, 20, "source")])
    tgt = np.concatenate([s.features.reshape(-1, 8) for s in generate(spec, 20, "target")])
    # Welch z-score per feature dimension
    se = np.sqrt(src.var(0) / len(src) + tgt.var(0) / len(tgt))
    z = (src.mean(0) - tgt.mean(0)) / se
    assert np.all(np.abs(z) < 4.0)


def test_shift_moves_target_means():
    spec = SceneSpec(shift_magnitude=2.0, seed=2)
    src = np.concatenate([s.features.reshape(-1, 8) for s in generate(spec, 10, "source")])
    tgt = np.concatenate([s.features.reshape(-1, 8) for s in generate(spec, 10, "target")])
    np.testing.assert_allclose(tgt.mean(0) - src.mean(0), spec.shift, atol=0.15)


def test_replace_rederives_geometry():
    base = SceneSpec()
    moved = replace(base, shift_magnitude=3.0)
    assert np.linalg.norm(moved.shift) == pytest.approx(3.0)
    np.testing.assert_allclose(moved.shift, 3.0 * base.shift, rtol=1e-14)
    np.testing.assert_array_equal(replace(base, seed=9).means, base.means)
    assert not np.array_equal(replace(base, geometry_seed=1).means, base.means)


def test_explicit_geometry_is_kept():
    spec = SceneSpec(proportions=(0.5, 0.5), n_features=2, class_means=((0, 1), (2, 3)),
                     target_mean_shift=(0.5, 0.0))
    np.testing.assert_array_equal(spec.means, [[0, 1], [2, 3]])
    np.testing.assert_array_equal(spec.shift, [0.5, 0.0])
    assert SceneSpec.from_dict(spec.to_dict()) == spec


def test_rare_classes_sit_in_rectangles():
    s = generate(SceneSpec(), 1)[0]
    for c in np.unique(s.labels):
        rows, cols = np.nonzero(s.labels == c)
        area = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
        assert area == rows.size


class TestValidation:
    def test_proportions_must_sum_to_one(self):
        with pytest.raises(InvalidInputError, match="proportions"):
            SceneSpec(proportions=(0.5, 0.6))

    def test_proportions_positive(self):
        with pytest.raises(InvalidInputError, match="proportions"):
            SceneSpec(proportions=(1.0, 0.0))

    def test_infeasible_for_grid(self):
        with pytest.raises(InvalidInputError, match="grid"):
            SceneSpec(proportions=(0.999, 0.001), height=8, width=8)

    def test_means_shape(self):
        with pytest.raises(InvalidInputError, match="class_means"):
            SceneSpec(proportions=(0.5, 0.5), n_features=2, class_means=((0, 0),))


class TestStatistics:
    def test_single_class_image(self):
        s = DenseSample(np.zeros((2, 2, 1)), np.zeros((2, 2), dtype=np.int64))
        st = dataset_class_statistics([s], 2)
        np.testing.assert_array_equal(st.pixel_freq, [1, 0])
        np.testing.assert_array_equal(st.image_freq, [1, 0])

    def test_two_images(self):
        a = DenseSample(np.zeros((2, 2, 1)), np.zeros((2, 2), dtype=np.int64))
        b = DenseSample(np.zeros((2, 2, 1)), np.ones((2, 2), dtype=np.int64))
        st = dataset_class_statistics([a, b], 2)
        np.testing.assert_array_equal(st.pixel_freq, [0.5, 0.5])
        np.testing.assert_array_equal(st.image_freq, [0.5, 0.5])

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            dataset_class_statistics([])


class TestContainer:
    def test_roundtrip(self, tmp_path):
        spec = SceneSpec(height=8, width=8, seed=4)
        samples = generate(spec, 3, "source")
        save_dataset(tmp_path / "src.gbwd", spec, samples, "source")
        back_spec, back, domain = load_dataset(tmp_path / "src.gbwd")
        assert back_spec == spec and domain == "source"
        for a, b in zip(samples, back):
            assert np.array_equal(a.features, b.features)
            assert np.array_equal(a.labels, b.labels)
        import json
        sidecar = json.loads((tmp_path / "src.json").read_text())
        assert sidecar["spec"] == spec.to_dict()

    def test_unlabelled(self):
        spec = SceneSpec(proportions=(0.5, 0.5), height=4, width=4)
        samples = [s.without_labels() for s in generate(spec, 2, "target")]
        _, back, _ = dataset_from_bytes(dataset_to_bytes(spec, samples, "target"))
        assert all(s.labels is None for s in back)

    def test_spec_dict_roundtrip(self):
        spec = replace(SceneSpec(), target_scale=1.3)
        assert SceneSpec.from_dict(spec.to_dict()) == spec
