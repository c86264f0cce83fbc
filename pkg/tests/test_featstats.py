import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import cascade_guard.featstats as featstats
from cascade_guard.errors import ValidationError
from cascade_guard.featstats import (
    LayerStatVector,
    extremal_stats,
    feature_matrix,
    fit_pca_bank,
    layer_feature_vector,
    pca_statistic,
    percentile_stats,
    spectral_report,
    stat_matrix,
)
from cascade_guard.tensor import Tensor
from cascade_guard.victim import layer_outputs_batch


def sorted_percentile_oracle(values, p):
    """Independent sort-and-interpolate oracle: rank (p/100)*(n-1)."""
    s = sorted(float(v) for v in values)
    n = len(s)
    rank = (p / 100.0) * (n - 1)
    lo = math.floor(rank)
    frac = rank - lo
    if lo + 1 >= n:
        return s[lo]
    return s[lo] + (s[lo + 1] - s[lo]) * frac


class TestFitPcaBank:
    def test_training_projections_centered_and_unit_std(self):
        rng = np.random.default_rng(0)
        outputs = rng.normal(size=(6, 5, 5, 4))
        bank = fit_pca_bank(outputs, layer_index=1)
        samples = outputs.reshape(-1, 4)
        proj = (samples - bank.mean) @ bank.components / bank.stds
        assert np.abs(proj.mean(axis=0)).max() < 1e-10
        assert np.abs(proj.std(axis=0) - 1.0).max() < 1e-8

    def test_orthonormal_projection(self):
        rng = np.random.default_rng(1)
        bank = fit_pca_bank(rng.normal(size=(4, 6, 6, 5)), layer_index=1)
        gram = bank.components.T @ bank.components
        assert np.abs(gram - np.eye(5)).max() < 1e-8

    def test_line_samples_first_eigenvector_within_one_degree(self):
        # 2-D samples from y = 2x plus tiny noise; closed-form 2x2 covariance
        # eigendecomposition puts the top eigenvector along (1, 2)/sqrt(5)
        rng = np.random.default_rng(2)
        t = rng.normal(size=4000)
        pts = np.stack([t, 2 * t], axis=1) + rng.normal(0, 1e-3, (4000, 2))
        bank = fit_pca_bank(pts.reshape(1, 80, 50, 2), layer_index=1)
        v = bank.components[:, 0]
        want = np.array([1.0, 2.0]) / np.sqrt(5.0)
        angle = np.degrees(np.arccos(np.clip(abs(v @ want), -1, 1)))
        assert angle < 1.0

    def test_constant_channel_floored_no_nan(self):
        rng = np.random.default_rng(3)
        outputs = rng.normal(size=(3, 4, 4, 3))
        outputs[:, :, :, 1] = 2.5
        bank = fit_pca_bank(outputs, layer_index=1)
        assert (bank.stds >= bank.epsilon).all()
        assert np.isfinite(bank.components).all()
        stat = pca_statistic(outputs[0], bank)
        assert np.isfinite(stat).all()

    def test_fewer_samples_than_channels_rejected(self):
        with pytest.raises(ValidationError, match="samples"):
            fit_pca_bank(np.zeros((1, 1, 2, 4)), layer_index=1)


class TestPcaStatistic:
    def test_mean_valued_image_gives_zero_vector(self):
        rng = np.random.default_rng(4)
        outputs = rng.normal(size=(5, 3, 3, 4))
        bank = fit_pca_bank(outputs, layer_index=1)
        flat_mean = np.broadcast_to(bank.mean, (3, 3, 4)).copy()
        assert (pca_statistic(flat_mean, bank) == 0.0).all()

    def test_single_pixel_hand_projection_oracle(self):
        rng = np.random.default_rng(5)
        outputs = rng.normal(size=(8, 4, 4, 3))
        bank = fit_pca_bank(outputs, layer_index=1)
        pixel = rng.normal(size=3)
        got = pca_statistic(pixel.reshape(1, 1, 3), bank)
        want = np.abs((pixel - bank.mean) @ bank.components / bank.stds)
        assert np.allclose(got, want, rtol=0, atol=1e-14)

    def test_invariant_to_spatial_permutation(self):
        rng = np.random.default_rng(6)
        outputs = rng.normal(size=(5, 4, 4, 3))
        bank = fit_pca_bank(outputs, layer_index=1)
        img = rng.normal(size=(4, 4, 3))
        perm = rng.permutation(16)
        shuffled = img.reshape(16, 3)[perm].reshape(4, 4, 3)
        assert np.allclose(pca_statistic(img, bank), pca_statistic(shuffled, bank),
                           rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(7)
        bank = fit_pca_bank(rng.normal(size=(4, 3, 3, 2)), layer_index=1)
        with pytest.raises(ValidationError, match="channels"):
            pca_statistic(rng.normal(size=(3, 3, 5)), bank)


class TestExtremalAndPercentiles:
    def test_constant_channel_all_stats_equal(self):
        img = np.full((4, 5, 2), 0.75)
        ex = extremal_stats(img)
        pc = percentile_stats(img)
        assert (ex == 0.75).all()
        assert (pc == 0.75).all()

    def test_values_1_to_100_sort_interpolate_oracle(self):
        img = np.arange(1.0, 101.0).reshape(10, 10, 1)
        pc = percentile_stats(img)
        assert pc.tolist() == [25.75, 50.5, 75.25]

    def test_single_pixel_channel_all_stats_equal_pixel(self):
        img = np.array([[[3.5, -1.25]]])
        ex = extremal_stats(img)
        pc = percentile_stats(img)
        assert ex.tolist() == [3.5, -1.25, 3.5, -1.25]
        assert pc.tolist() == [3.5, -1.25, 3.5, -1.25, 3.5, -1.25]

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 40),
                  elements=st.floats(-100, 100, width=64)))
    def test_exact_equality_with_sorted_oracle(self, values):
        img = values.reshape(-1, 1, 1)
        pc = percentile_stats(img)
        for i, p in enumerate((25.0, 50.0, 75.0)):
            assert pc[i] == sorted_percentile_oracle(values, p)
        ex = extremal_stats(img)
        assert ex[0] == min(values) and ex[1] == max(values)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4, 2), elements=st.floats(-50, 50, width=64)))
    def test_per_channel_order_invariant(self, img):
        ex = extremal_stats(img)
        pc = percentile_stats(img)
        k = 2
        mins, maxs = ex[:k], ex[k:]
        p25, p50, p75 = pc[:k], pc[k : 2 * k], pc[2 * k :]
        assert (mins <= p25).all() and (p25 <= p50).all()
        assert (p50 <= p75).all() and (p75 <= maxs).all()


class TestLayerFeatureVector:
    def test_length_and_composition(self, victim_bundle, fitted_banks):
        img = victim_bundle.dataset.tensor(0)
        vec = layer_feature_vector(victim_bundle.network, img, 1, fitted_banks[0])
        assert vec.vector.shape == (6 * 8,)
        from cascade_guard.victim import layer_outputs

        out = layer_outputs(victim_bundle.network, img)[0]
        manual = np.concatenate([
            pca_statistic(out, fitted_banks[0]),
            extremal_stats(out),
            percentile_stats(out),
        ])
        # manual order is [pca | min | max | p25 | p50 | p75]
        manual = np.concatenate([manual[:8], manual[8:16], manual[16:24],
                                 manual[24:32], manual[32:40], manual[40:48]])
        assert np.array_equal(vec.vector, manual)

    def test_stat_matrix_matches_single_image_path(self, victim_bundle, fitted_banks):
        net = victim_bundle.network
        images = victim_bundle.dataset.images[:5]
        batch = layer_outputs_batch(net, images)[0]
        rows = stat_matrix(batch, fitted_banks[0])
        for i in range(5):
            vec = layer_feature_vector(net, Tensor(images[i]), 1, fitted_banks[0])
            assert np.allclose(rows[i], vec.vector, rtol=0, atol=1e-12)

    def test_ea_statistics_deviate_far_more_than_gradient_box(
            self, victim_bundle, corpus, ea_records, fitted_banks):
        net = victim_bundle.network
        normals = corpus.normal_bank[500:800]
        gbox = np.stack([r.image.array for r in corpus.successful[:150]])
        ea = np.stack([r.image.array for r in ea_records[:100]])
        bank = fitted_banks[0]
        mean_n = stat_matrix(layer_outputs_batch(net, normals)[0], bank)[:, :8].mean(0)
        mean_g = stat_matrix(layer_outputs_batch(net, gbox)[0], bank)[:, :8].mean(0)
        mean_e = stat_matrix(layer_outputs_batch(net, ea)[0], bank)[:, :8].mean(0)
        assert np.abs(mean_e - mean_n).mean() > 10 * np.abs(mean_g - mean_n).mean()


class TestSpectralReport:
    def test_normal_set_against_itself_std_exactly_one(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(50, 6))
        rep = spectral_report(x, x)
        assert (rep.normal_std == 1.0).all()
        assert np.array_equal(rep.adversarial_std, rep.normal_std)

    def test_scaled_set_doubles_std_ratio(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(60, 5))
        rep = spectral_report(x, 2.0 * x)
        assert np.allclose(rep.adversarial_std, 2.0, rtol=1e-9, atol=1e-9)

    def test_gradient_box_head_low_tail_high_on_penultimate_features(
            self, victim_bundle, corpus):
        from cascade_guard.cli import _flat_layer_features

        net = victim_bundle.network
        normals = corpus.normal_bank[800:1300]
        advs = np.stack([r.image.array for r in corpus.successful[:300]])
        xn = _flat_layer_features(net, normals, "penultimate")
        xa = _flat_layer_features(net, advs, "penultimate")
        rep = spectral_report(xn, xa)
        # restrict to directions with real variance on normal data; the
        # trailing numerically-degenerate dims carry no distribution shape
        alive = np.nonzero(rep.eigenvalues > 1e-10 * rep.eigenvalues.max())[0]
        head = rep.adversarial_std[alive[:10]].mean()
        tail = rep.adversarial_std[alive[-10:]].mean()
        assert head < 1.0
        assert tail > 1.0


class TestFeatureCsv:
    def test_header_and_roundtrip_values(self, tmp_path, victim_bundle, fitted_banks):
        from cascade_guard.featstats import feature_names, write_feature_csv

        net = victim_bundle.network
        matrix = feature_matrix(net, victim_bundle.dataset.images[:4], fitted_banks)
        path = tmp_path / "features.csv"
        write_feature_csv(path, matrix, fitted_banks)
        lines = path.read_text().splitlines()
        names = feature_names(fitted_banks)
        assert lines[0] == ",".join(["image"] + names)
        assert len(lines) == 5
        first = lines[1].split(",")
        assert first[0] == "0"
        assert float(first[1]) == matrix[0, 0]


class TestNoGradientPath:
    def test_module_has_no_backward_dependency(self):
        source = inspect.getsource(featstats)
        assert "autograd" not in source
        assert "backward" not in source
