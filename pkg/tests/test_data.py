import numpy as np
import pytest

from advsearch import resample
from advsearch.data import (
    CorruptionSpec,
    Dataset,
    ResamplePipeline,
    corrupt,
    corrupt_dataset,
    load_cifar10_binary,
    make_shapes_dataset,
    make_spirals_dataset,
    system_noise,
)
from advsearch.errors import ArgumentError, ConfigError, FormatError


class TestShapes:
    def test_same_seed_bit_identical(self):
        a = make_shapes_dataset(5, 10, 4, 0.05, seed=3)
        b = make_shapes_dataset(5, 10, 4, 0.05, seed=3)
        assert np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.labels, b.labels)

    def test_counts_and_labels(self):
        ds = make_shapes_dataset(10, 8, 3, 0.0, seed=0)
        assert len(ds) == 30
        assert set(ds.labels.tolist()) == {0, 1, 2}
        assert np.all((ds.inputs >= 0) & (ds.inputs <= 1))

    def test_every_class_present(self):
        ds = make_shapes_dataset(2, 12, 8, 0.1, seed=1)
        assert sorted(set(ds.labels.tolist())) == list(range(8))

    def test_bad_args(self):
        with pytest.raises(ArgumentError):
            make_shapes_dataset(5, 10, 2, 0.0, 0)
        with pytest.raises(ArgumentError):
            make_shapes_dataset(5, 10, 9, 0.0, 0)
        with pytest.raises(ArgumentError):
            make_shapes_dataset(5, 40, 4, 0.0, 0)
        with pytest.raises(ArgumentError):
            make_shapes_dataset(5, 10, 4, 0.5, 0)


class TestSpirals:
    def test_radius_equals_parameter(self):
        ds = make_spirals_dataset(40, turns=1.5, noise_std=0.0, seed=0)
        pts = ds.inputs[ds.labels == 0]
        t = np.linspace(0.05, 0.45, 20)
        radii = np.linalg.norm(pts - 0.5, axis=1)
        assert np.allclose(radii, t, atol=1e-12)

    def test_balanced_labels(self):
        ds = make_spirals_dataset(24, 1.0, 0.05, seed=2)
        assert (ds.labels == 0).sum() == (ds.labels == 1).sum() == 12

    def test_odd_n_rejected(self):
        with pytest.raises(ArgumentError):
            make_spirals_dataset(9, 1.0, 0.0, 0)

    def test_inputs_in_unit_square(self):
        ds = make_spirals_dataset(100, 2.0, 0.1, seed=5)
        assert np.all((ds.inputs >= 0) & (ds.inputs <= 1))


class TestCorruptions:
    def test_brightness_additive(self):
        x = np.zeros((1, 6, 6))
        out = corrupt(x, CorruptionSpec("brightness", 1))
        assert np.allclose(out, 0.1, atol=1e-12)

    def test_contrast_fixed_point(self):
        x = np.full((1, 6, 6), 0.5)
        out = corrupt(x, CorruptionSpec("contrast", 5))
        assert np.allclose(out, 0.5, atol=1e-12)

    def test_blur_preserves_constant(self):
        x = np.full((2, 8, 8), 0.3)
        out = corrupt(x, CorruptionSpec("gaussian_blur", 3))
        assert np.allclose(out, 0.3, atol=1e-12)

    def test_motion_blur_preserves_constant(self):
        x = np.full((1, 12, 12), 0.6)
        out = corrupt(x, CorruptionSpec("motion_blur", 4), seed=7)
        assert np.allclose(out, 0.6, atol=1e-12)

    def test_shape_and_range_preserved(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(size=(3, 10, 10))
        for kind in ("brightness", "contrast", "gaussian_blur", "motion_blur", "gaussian_noise"):
            for sev in (1, 3, 5):
                out = corrupt(x, CorruptionSpec(kind, sev), seed=1)
                assert out.shape == x.shape
                assert np.all((out >= 0) & (out <= 1))

    def test_determinism(self):
        x = np.random.default_rng(1).uniform(size=(1, 8, 8))
        a = corrupt(x, CorruptionSpec("gaussian_noise", 3), seed=9)
        b = corrupt(x, CorruptionSpec("gaussian_noise", 3), seed=9)
        assert np.array_equal(a, b)

    def test_severity_monotone_for_brightness_and_noise(self):
        rng = np.random.default_rng(2)
        for kind in ("brightness", "gaussian_noise"):
            dists = []
            for sev in range(1, 6):
                total = 0.0
                for i in range(100):
                    x = rng.uniform(0.2, 0.6, size=(1, 8, 8))
                    out = corrupt(x, CorruptionSpec(kind, sev), seed=i)
                    total += np.linalg.norm(out - x)
                dists.append(total / 100)
            assert all(dists[i] < dists[i + 1] for i in range(4)), (kind, dists)

    def test_bad_severity(self):
        with pytest.raises(ArgumentError):
            CorruptionSpec("brightness", 0)
        with pytest.raises(ArgumentError):
            CorruptionSpec("brightness", 6)
        with pytest.raises(ArgumentError):
            CorruptionSpec("fog", 1)


class TestSystemNoise:
    def test_same_size_nearest_is_identity(self):
        x = np.random.default_rng(3).uniform(size=(1, 8, 8))
        out = system_noise(x, ResamplePipeline("nearest", "nearest", 8))
        assert np.array_equal(out, x)

    def test_constant_preserved_by_all_pipelines(self):
        x = np.full((1, 8, 8), 0.4)
        for down in resample.RESAMPLERS:
            for up in resample.RESAMPLERS:
                out = system_noise(x, ResamplePipeline(down, up, 5))
                assert np.allclose(out, 0.4, atol=1e-12), (down, up)

    def test_pipeline_mismatch_witness_on_checkerboard(self):
        ii, jj = np.indices((8, 8))
        checker = ((ii + jj) % 2).astype(np.float64)[None]
        a = system_noise(checker, ResamplePipeline("nearest", "nearest", 4))
        b = system_noise(checker, ResamplePipeline("bilinear", "bilinear", 4))
        assert np.any(np.abs(a - b) > 1e-9)

    def test_invalid_resampler(self):
        with pytest.raises(ArgumentError):
            ResamplePipeline("lanczos", "nearest", 4)
        with pytest.raises(ConfigError):
            resample.resize(np.zeros((4, 4)), 2, "hamming")

    def test_output_in_unit_interval(self):
        x = np.random.default_rng(4).uniform(size=(3, 12, 12))
        out = system_noise(x, ResamplePipeline("bicubic", "bicubic", 5))
        assert np.all((out >= 0) & (out <= 1))

    def test_intermediate_larger_than_side_rejected(self):
        with pytest.raises(ArgumentError):
            system_noise(np.zeros((1, 8, 8)), ResamplePipeline("nearest", "nearest", 9))


class TestCifarLoader:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "batch.bin"
        p.write_bytes(b"")
        ds = load_cifar10_binary(p)
        assert len(ds) == 0

    def test_single_record_scaling(self, tmp_path):
        p = tmp_path / "batch.bin"
        p.write_bytes(bytes([3]) + bytes([255] * 3072))
        ds = load_cifar10_binary(p)
        assert ds.labels.tolist() == [3]
        assert ds.inputs.shape == (1, 3, 32, 32)
        assert np.all(ds.inputs == 1.0)

    def test_truncated_record(self, tmp_path):
        p = tmp_path / "batch.bin"
        p.write_bytes(bytes([1]) + bytes([0] * 3000))
        with pytest.raises(FormatError):
            load_cifar10_binary(p)

    def test_label_out_of_range(self, tmp_path):
        p = tmp_path / "batch.bin"
        p.write_bytes(bytes([12]) + bytes([0] * 3072))
        with pytest.raises(FormatError):
            load_cifar10_binary(p)


class TestDatasetUtils:
    def test_export_round_trip(self, tmp_path):
        from advsearch.tensor import load_tensor

        ds = make_shapes_dataset(2, 8, 3, 0.0, seed=0)
        ds.export(str(tmp_path / "ds"))
        back = load_tensor(tmp_path / "ds_inputs.bin")
        assert np.array_equal(back, ds.inputs)
        lines = (tmp_path / "ds_labels.csv").read_text().strip().splitlines()
        assert lines[0] == "index,label"
        assert len(lines) == len(ds) + 1

    def test_corrupt_dataset_deterministic(self):
        ds = make_shapes_dataset(2, 8, 3, 0.0, seed=0)
        a = corrupt_dataset(ds, CorruptionSpec("gaussian_noise", 2), seed=5)
        b = corrupt_dataset(ds, CorruptionSpec("gaussian_noise", 2), seed=5)
        assert np.array_equal(a.inputs, b.inputs)

    def test_fingerprint_changes_with_content(self):
        a = make_shapes_dataset(2, 8, 3, 0.0, seed=0)
        b = make_shapes_dataset(2, 8, 3, 0.0, seed=1)
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == Dataset("x", a.inputs, a.labels, 3).fingerprint()
