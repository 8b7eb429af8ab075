import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnaloop import autodiff as ad
from rnaloop import presets, signals, taskgen
from rnaloop.errors import ConfigurationError, ContractError


class TestMaskedGt:
    def test_dense_limit(self):
        target = np.random.default_rng(0).random((1, 8, 8))
        sig = signals.masked_gt(target, 1.0, seed=0)
        assert np.array_equal(sig.mask, np.ones((8, 8)))
        assert np.array_equal(sig.values, target[0])

    def test_pixel_count_rounding(self):
        target = np.random.default_rng(1).random((1, 32, 32))
        sig = signals.masked_gt(target, 0.005, seed=0)
        assert sig.mask.sum() == 5

    def test_minimum_one_pixel(self):
        target = np.random.default_rng(2).random((1, 32, 32))
        sig = signals.masked_gt(target, 1e-6, seed=0)
        assert sig.mask.sum() == 1

    def test_self_consistency_zero_loss(self):
        target = np.random.default_rng(3).random((1, 16, 16))
        sig = signals.masked_gt(target, 0.1, seed=4)
        loss = ad.masked_l1(
            ad.as_tensor(target), ad.as_tensor(sig.values[None]), sig.mask
        )
        assert loss.item() == 0.0

    @given(frac=st.floats(0.001, 1.0), seed=st.integers(0, 2**30))
    @settings(max_examples=30, deadline=None)
    def test_density_contract(self, frac, seed):
        target = np.zeros((1, 16, 16))
        sig = signals.masked_gt(target, frac, seed)
        expect = max(1, round(frac * 256))
        assert abs(sig.mask.sum() - expect) <= 1

    def test_bad_fraction_rejected(self):
        with pytest.raises(ConfigurationError):
            signals.masked_gt(np.zeros((1, 8, 8)), 0.0, seed=0)


class TestNoisySparse:
    def test_degenerate_noise_equals_masked_gt(self):
        target = np.random.default_rng(5).random((1, 16, 16))
        a = signals.masked_gt(target, 0.1, seed=6)
        b = signals.noisy_sparse(target, 0.1, 0.0, 0.0, seed=6)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.mask, b.mask)

    def test_residual_moment(self):
        target = np.random.default_rng(7).random((1, 128, 128)) * 0.5 + 0.25
        sig = signals.noisy_sparse(target, 1.0, noise_sigma=0.05, outlier_rate=0.0, seed=8)
        residual = (sig.values - target[0])[sig.mask > 0]
        assert residual.size >= 10_000
        assert abs(residual.std() - 0.05) / 0.05 < 0.10

    def test_paper_default_fraction_two_pixels(self):
        target = np.zeros((1, 32, 32))
        sig = signals.noisy_sparse(target, 0.0016, 0.01, 0.0, seed=9)
        assert sig.mask.sum() == 2  # round(0.0016 * 1024)

    def test_outliers_replace_values(self):
        target = np.full((1, 64, 64), 0.5)
        sig = signals.noisy_sparse(target, 1.0, 0.0, 0.5, seed=10)
        moved = np.abs(sig.values - 0.5) > 1e-9
        frac = moved.mean()
        assert 0.35 < frac < 0.65


class TestClickAnnotations:
    def test_single_class_three_clicks(self):
        classes = np.zeros((16, 16), dtype=np.int64)
        sig = signals.click_annotations(classes, 3, seed=0)
        assert sig.mask.sum() == 3
        assert np.all(sig.values[sig.mask > 0] == 0)

    def test_saturation_marks_whole_class(self):
        classes = np.zeros((8, 8), dtype=np.int64)
        classes[:2, :2] = 3  # class 3 has 4 pixels
        sig = signals.click_annotations(classes, 25, seed=1)
        assert np.all(sig.mask[:2, :2] == 1.0)

    def test_per_class_counts(self):
        rng = np.random.default_rng(2)
        classes = rng.integers(0, 4, size=(32, 32))
        sig = signals.click_annotations(classes, 5, seed=3)
        for cls in range(4):
            on = (sig.mask > 0) & (classes == cls)
            assert on.sum() == 5

    def test_clicks_out_of_range_rejected(self):
        with pytest.raises(ConfigurationError):
            signals.click_annotations(np.zeros((4, 4), dtype=np.int64), 26, seed=0)


class TestCoarseGrouping:
    def test_contiguous_default_scale(self):
        g = signals.make_coarse_grouping(20, 5)
        arr = g.as_array()
        sizes = np.bincount(arr)
        assert np.all(sizes == 4)
        assert arr[7] == 1  # floor(7/4)

    def test_identity_grouping(self):
        g = signals.make_coarse_grouping(6, 6)
        assert g.as_array().tolist() == list(range(6))

    def test_uneven_split_sizes_differ_by_at_most_one(self):
        g = signals.make_coarse_grouping(10, 3)
        sizes = np.bincount(g.as_array())
        assert sizes.max() - sizes.min() <= 1

    def test_surjective_and_nonempty(self):
        g = signals.make_coarse_grouping(20, 7)
        assert set(g.as_array().tolist()) == set(range(7))

    def test_feature_cluster_mode(self):
        protos = taskgen.make_prototypes(20, proto_seed=0)
        g = signals.make_coarse_grouping(20, 5, proto_features=protos, mode="feature_cluster")
        assert set(g.as_array().tolist()) == set(range(5))
        g2 = signals.make_coarse_grouping(20, 5, proto_features=protos, mode="feature_cluster")
        assert g.as_array().tolist() == g2.as_array().tolist()


class TestCoarseLabel:
    def test_identity_grouping_equals_fine_one_hot(self):
        g = signals.make_coarse_grouping(5, 5)
        sig = signals.coarse_label(3, g)
        expect = np.zeros(5)
        expect[3] = 1.0
        assert np.array_equal(sig.values, expect)

    def test_contiguous_example(self):
        g = signals.make_coarse_grouping(20, 5)
        sig = signals.coarse_label(7, g)
        assert sig.values.argmax() == 1
        assert sig.values.sum() == 1.0

    def test_marginalization_two_ways(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=20)
        g = signals.make_coarse_grouping(20, 5)
        probs = ad.softmax(logits)
        for coarse in range(5):
            direct = probs[g.as_array() == coarse].sum()
            via_loss = np.exp(-ad.coarse_cross_entropy(
                ad.as_tensor(logits), coarse, g.as_array()
            ).item())
            assert abs(direct - via_loss) < 1e-12


class TestKnnCoarse:
    @pytest.fixture(scope="class")
    def setup(self):
        model = presets.cls_main(seed=0)
        ds = taskgen.gen_classification(presets.NUM_CLASSES, 500, proto_seed=0, seed=1)
        index = signals.build_embedding_index(model, ds)
        return model, ds, index

    def test_self_retrieval(self, setup):
        _, ds, index = setup
        sig = signals.knn_coarse(ds.inputs[17], index, k=1)
        assert sig.values.argmax() == ds.targets[17]
        assert sig.values.max() == 1.0

    def test_default_k_is_20(self, setup):
        assert signals.SignalConfig().knn_k == 20
        _, ds, index = setup
        sig = signals.knn_coarse(ds.inputs[3], index, k=20)
        assert abs(sig.values.sum() - 1.0) < 1e-12
        assert sig.meta["k"] == 20

    def test_matches_brute_force(self, setup):
        model, ds, index = setup
        img = ds.inputs[123]
        emb = signals.classifier_embedding(model, img)
        emb = emb / np.linalg.norm(emb)
        all_emb = []
        for i in range(500):
            e = signals.classifier_embedding(model, ds.inputs[i])
            all_emb.append(e / np.linalg.norm(e))
        sims = np.array([float(e @ emb) for e in all_emb])
        top = np.argsort(-sims, kind="stable")[:20]
        hist = np.bincount(ds.targets[top], minlength=presets.NUM_CLASSES) / 20
        sig = signals.knn_coarse(img, index, k=20)
        assert np.allclose(sig.values, hist, atol=1e-12)

    def test_with_grouping(self, setup):
        _, ds, index = setup
        g = signals.make_coarse_grouping(presets.NUM_CLASSES, 5)
        sig = signals.knn_coarse(ds.inputs[9], index, k=7, grouping=g)
        assert sig.values.shape == (5,)
        assert abs(sig.values.sum() - 1.0) < 1e-12

    def test_k_exceeding_index_rejected(self, setup):
        _, ds, index = setup
        with pytest.raises(ContractError):
            signals.knn_coarse(ds.inputs[0], index, k=501)

    def test_empty_index_rejected(self, setup):
        model, ds, _ = setup
        with pytest.raises(ContractError):
            signals.EmbeddingIndex(model, np.zeros((0, 4)), np.zeros(0, dtype=np.int64))


class TestEncodeFeedback:
    def test_dense_shape_contract(self):
        pred = np.random.default_rng(5).random((1, 32, 32))
        sig = signals.masked_gt(np.random.default_rng(6).random((1, 32, 32)), 0.01, 0)
        fb = signals.encode_feedback(pred, sig)
        assert fb.shape == (3, 32, 32)
        assert np.array_equal(fb[0], pred[0])

    def test_zero_mask_channels(self):
        pred = np.zeros((1, 8, 8))
        sig = signals.AdaptationSignal("masked_gt", np.zeros((8, 8)), np.zeros((8, 8)))
        fb = signals.encode_feedback(pred, sig)
        assert np.all(fb[1] == 0) and np.all(fb[2] == 0)

    def test_signal_injectivity(self):
        pred = np.random.default_rng(7).random((1, 16, 16))
        target = np.random.default_rng(8).random((1, 16, 16))
        a = signals.masked_gt(target, 0.05, seed=1)
        b = signals.masked_gt(target, 0.05, seed=2)
        fa = signals.encode_feedback(pred, a)
        fb = signals.encode_feedback(pred, b)
        assert not np.array_equal(fa, fb)

    def test_classification_encoding(self):
        logits = np.random.default_rng(9).normal(size=20)
        g = signals.make_coarse_grouping(20, 5)
        sig = signals.coarse_label(11, g)
        fb = signals.encode_feedback(logits, sig)
        assert fb.shape == (25,)
        assert abs(fb[:20].sum() - 1.0) < 1e-12

    def test_clicks_encoding(self):
        logits = np.random.default_rng(10).normal(size=(5, 16, 16))
        classes = np.random.default_rng(11).integers(0, 5, size=(16, 16))
        sig = signals.click_annotations(classes, 3, seed=0)
        fb = signals.encode_feedback(logits, sig)
        assert fb.shape == (11, 16, 16)
        ys, xs = np.nonzero(sig.mask)
        for y, x in zip(ys, xs):
            assert fb[5 + classes[y, x], y, x] == 1.0

    def test_batch_encoding(self):
        preds = np.random.default_rng(12).random((3, 1, 8, 8))
        target = np.random.default_rng(13).random((1, 8, 8))
        sigs = [signals.masked_gt(target, 0.1, seed=i) for i in range(3)]
        fb = signals.encode_feedback(preds, sigs)
        assert fb.shape == (3, 3, 8, 8)
        for i in range(3):
            assert np.array_equal(fb[i], signals.encode_feedback(preds[i], sigs[i]))
