import numpy as np
import pytest

from clearcbm.cbm import (
    CbmModel,
    HeadTrainConfig,
    evaluate,
    explain,
    load_model,
    model_fingerprint,
    predict,
    save_model,
    train_head,
)
from clearcbm.errors import EmptySplitError
from clearcbm.nn import make_rng

from test_bottleneck import separable_data


def unit_cols(arr):
    return arr / np.linalg.norm(arr, axis=0, keepdims=True)


def make_model(d=4, k=3, n_classes=2, seed=0):
    rng = make_rng(seed)
    s_prime = unit_cols(rng.standard_normal((d, k)))
    texts = [f"concept {i}" for i in range(k)]
    head_w = rng.standard_normal((k, n_classes))
    head_b = rng.standard_normal(n_classes)
    classes = [f"class {c}" for c in range(n_classes)]
    return CbmModel(s_prime, texts, head_w, head_b, classes)


class TestTrainHead:
    def _splits(self, n, frac=0.8):
        cut = int(frac * n)
        return np.arange(cut), np.arange(cut, n)

    def test_separable_concept_space_reaches_full_accuracy(self):
        x, y, means = separable_data(30, 12, 3, seed=1)
        # concepts aligned with the class means make activations separable
        s_prime = unit_cols(means.T.astype(np.float64))
        texts = [f"t{i}" for i in range(3)]
        train_idx, val_idx = self._splits(len(x))
        res = train_head(s_prime, texts, ["a", "b", "c"], x, y, train_idx, val_idx,
                         HeadTrainConfig(epochs=80, lr=0.05, batch_size=32, seed=2))
        assert res.best_val_accuracy == 1.0

    def test_zero_epochs_returns_random_head_with_recorded_accuracy(self):
        x, y, means = separable_data(10, 8, 2, seed=3)
        s_prime = unit_cols(means.T.astype(np.float64))
        train_idx, val_idx = self._splits(len(x))
        res = train_head(s_prime, ["t0", "t1"], ["a", "b"], x, y, train_idx, val_idx,
                         HeadTrainConfig(epochs=0, seed=4))
        assert res.val_curve == []
        assert 0.0 <= res.best_val_accuracy <= 1.0
        assert res.best_epoch == -1

    def test_frozen_concepts_bitwise(self):
        x, y, means = separable_data(10, 8, 2, seed=5)
        s_prime = unit_cols(means.T.astype(np.float64))
        before = s_prime.tobytes()
        train_idx, val_idx = self._splits(len(x))
        res = train_head(s_prime, ["t0", "t1"], ["a", "b"], x, y, train_idx, val_idx,
                         HeadTrainConfig(epochs=10, seed=6))
        assert s_prime.tobytes() == before
        assert res.model.s_prime.tobytes() == before

    def test_empty_split_rejected(self):
        x, y, means = separable_data(5, 4, 2, seed=7)
        s_prime = unit_cols(means.T.astype(np.float64))
        with pytest.raises(EmptySplitError):
            train_head(s_prime, ["t0", "t1"], ["a", "b"], x, y,
                       np.arange(0), np.arange(5), HeadTrainConfig(epochs=1))

    def test_deterministic(self):
        x, y, means = separable_data(10, 8, 2, seed=8)
        s_prime = unit_cols(means.T.astype(np.float64))
        train_idx, val_idx = self._splits(len(x))
        cfg = HeadTrainConfig(epochs=10, seed=9)
        a = train_head(s_prime, ["t0", "t1"], ["a", "b"], x, y, train_idx, val_idx, cfg)
        b = train_head(s_prime, ["t0", "t1"], ["a", "b"], x, y, train_idx, val_idx, cfg)
        assert model_fingerprint(a.model) == model_fingerprint(b.model)


class TestPredict:
    def test_zero_head_ties_to_class_zero(self):
        m = make_model()
        m.head_w[:] = 0.0
        m.head_b[:] = 0.0
        assert predict(m, np.ones(4)) == 0

    def test_factorizes_through_concept_scores(self):
        m = make_model(seed=10)
        x = make_rng(11).standard_normal(4)
        via_g = int(np.argmax(m.concept_scores(x) @ m.head_w + m.head_b))
        assert predict(m, x) == via_g

    def test_batch_matches_per_item(self):
        m = make_model(seed=12)
        xs = make_rng(13).standard_normal((9, 4))
        batched = predict(m, xs)
        assert [predict(m, x) for x in xs] == batched.tolist()


class TestExplain:
    def test_concept_embedding_input_scores_one(self):
        m = make_model(seed=14)
        x = m.s_prime[:, 1]
        exp = explain(m, x)
        assert exp.raw_scores[1] == pytest.approx(1.0, abs=1e-6)
        assert exp.top_concept[0] == m.texts[1]
        assert exp.top_concept[1] == 1.0

    def test_constant_scores_guard(self):
        m = make_model(seed=15)
        m.s_prime[:, :] = np.tile(m.s_prime[:, :1], (1, m.k))  # identical concepts
        exp = explain(m, make_rng(16).standard_normal(4))
        np.testing.assert_array_equal(exp.normalized_scores, np.full(m.k, 0.5))
        assert exp.top_concept[0] == m.texts[0]

    def test_normalized_scores_affine_invariant(self):
        # min-max output is unchanged by raw' = a * raw + b with a > 0;
        # equivalent here to checking endpoints and monotone ordering
        m = make_model(k=5, seed=17)
        x = make_rng(18).standard_normal(4)
        exp = explain(m, x)
        raw = exp.raw_scores
        a, b = 3.7, -1.2
        scaled = (a * raw + b - (a * raw + b).min()) / ((a * raw + b).max() - (a * raw + b).min())
        np.testing.assert_allclose(exp.normalized_scores, scaled, atol=1e-9)
        assert exp.normalized_scores.min() == 0.0
        assert exp.normalized_scores.max() == 1.0

    def test_json_report_shape(self):
        m = make_model(seed=19)
        exp = explain(m, make_rng(20).standard_normal(4))
        doc = exp.to_json(m, item_id="img7", true_label=1)
        assert doc["id"] == "img7"
        assert doc["true_class"] == "class 1"
        assert len(doc["concepts"]) == m.k
        assert set(doc["concepts"][0]) == {"text", "raw", "normalized"}


class TestEvaluate:
    def test_all_correct(self):
        x, y, means = separable_data(10, 8, 2, seed=21)
        s_prime = unit_cols(means.T.astype(np.float64))
        # head mapping each aligned concept to its class cleanly
        m = CbmModel(s_prime, ["t0", "t1"], np.eye(2) * 10.0, np.zeros(2), ["a", "b"])
        out = evaluate(m, x, y)
        assert out["accuracy"] == 1.0
        assert out["per_class"] == {"a": 1.0, "b": 1.0}

    def test_fixed_class_head_on_balanced_data(self):
        x, y, means = separable_data(10, 8, 4, seed=22)
        s_prime = unit_cols(means.T.astype(np.float64))
        head_w = np.zeros((4, 4))
        head_b = np.array([0.0, 5.0, 0.0, 0.0])  # always predicts class 1
        m = CbmModel(s_prime, ["t"] * 4, head_w, head_b, ["a", "b", "c", "d"])
        out = evaluate(m, x, y)
        assert out["accuracy"] == pytest.approx(1 / 4)

    def test_accuracy_is_recount(self):
        m = make_model(seed=23)
        x = make_rng(24).standard_normal((30, 4))
        y = make_rng(25).integers(0, 2, size=30)
        out = evaluate(m, x, y)
        recount = np.mean([predict(m, xi) == yi for xi, yi in zip(x, y)])
        assert out["accuracy"] == pytest.approx(float(recount))

    def test_empty_split(self):
        m = make_model(seed=26)
        with pytest.raises(EmptySplitError):
            evaluate(m, np.zeros((0, 4)), np.zeros(0, dtype=np.int64))


class TestModelIo:
    def test_round_trip(self, tmp_path):
        from clearcbm.cbm import HeadTrainResult

        m = make_model(seed=27)
        res = HeadTrainResult(m, 3, 0.9, [0.8, 0.9], [0.5, 0.3])
        path = tmp_path / "model.clcm"
        save_model(res, path, metadata={"note": "test"})
        back = load_model(path)
        assert back.texts == m.texts
        assert back.classes == m.classes
        # s_prime goes through f32; head stays f64
        np.testing.assert_allclose(back.s_prime, m.s_prime, atol=1e-6)
        assert back.head_w.tobytes() == m.head_w.tobytes()
        assert back.head_b.tobytes() == m.head_b.tobytes()

    def test_deterministic_bytes(self, tmp_path):
        from clearcbm.cbm import HeadTrainResult

        m = make_model(seed=28)
        res = HeadTrainResult(m, 0, 1.0, [1.0], [0.1])
        save_model(res, tmp_path / "a.clcm")
        save_model(res, tmp_path / "b.clcm")
        assert (tmp_path / "a.clcm").read_bytes() == (tmp_path / "b.clcm").read_bytes()
        assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
