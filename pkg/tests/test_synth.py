import numpy as np
import pytest

from sspq.errors import BadConfigError, LengthMismatchError
from sspq.evaluation import evaluate
from sspq.synth import (
    SPLITS,
    gen_mixture,
    make_oracle,
    oracle_encode,
)


class TestGenMixture:
    def test_counts(self):
        ds = gen_mixture(10, 20, 8, 0.1, seed=0, anchor_count=50, train_per_class=5)
        assert ds.inputs("query").shape == (10, 8)
        assert ds.inputs("gallery").shape == (190, 8)
        assert ds.inputs("query").shape[0] + ds.inputs("gallery").shape[0] == 200
        assert ds.inputs("train").shape == (50, 8)
        assert ds.inputs("anchor").shape == (50, 8)

    def test_zero_std_gives_perfect_symmetric_map(self):
        ds = gen_mixture(5, 4, 6, 0.0, seed=1, anchor_count=10)
        oracle = make_oracle(6, 8, seed=2)
        q = oracle_encode(oracle, ds.inputs("query"))
        g = oracle_encode(oracle, ds.inputs("gallery"))
        report = evaluate(q, g, ds.split_labels("query"), ds.split_labels("gallery"))
        assert report.map_score == pytest.approx(1.0)

    def test_deterministic(self):
        a = gen_mixture(4, 5, 7, 0.2, seed=3, anchor_count=16)
        b = gen_mixture(4, 5, 7, 0.2, seed=3, anchor_count=16)
        assert a.raw_inputs.tobytes() == b.raw_inputs.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()
        assert (a.splits == b.splits).all()

    def test_splits_disjoint_and_exhaustive(self):
        ds = gen_mixture(4, 6, 5, 0.1, seed=4, anchor_count=20, train_per_class=3)
        total = sum(ds.inputs(s).shape[0] for s in SPLITS)
        assert total == ds.raw_inputs.shape[0]
        counts = {s: np.count_nonzero(ds.splits == s) for s in SPLITS}
        assert counts["query"] == 4
        assert counts["gallery"] == 4 * 5
        assert counts["train"] == 12
        assert counts["anchor"] == 20

    def test_one_query_per_class(self):
        ds = gen_mixture(6, 4, 5, 0.1, seed=5, anchor_count=8)
        labels = ds.split_labels("query")
        assert sorted(labels.tolist()) == list(range(6))

    def test_bad_config(self):
        with pytest.raises(BadConfigError):
            gen_mixture(1, 10, 4, 0.1, seed=0)
        with pytest.raises(BadConfigError):
            gen_mixture(4, 1, 4, 0.1, seed=0)

    def test_class_means_on_unit_sphere(self):
        ds = gen_mixture(8, 4, 16, 0.0, seed=6, anchor_count=8)
        for c in range(8):
            member = ds.inputs("gallery")[ds.split_labels("gallery") == c][0]
            assert np.linalg.norm(member) == pytest.approx(1.0, abs=1e-9)


class TestGalleryOracle:
    def test_outputs_unit_norm(self, rng):
        oracle = make_oracle(6, 10, seed=7)
        emb = oracle_encode(oracle, rng.normal(size=(20, 6)))
        assert emb.normalized
        np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, atol=1e-9)

    def test_deterministic(self, rng):
        raw = rng.normal(size=(5, 6))
        a = oracle_encode(make_oracle(6, 10, seed=8), raw)
        b = oracle_encode(make_oracle(6, 10, seed=8), raw)
        assert a.data.tobytes() == b.data.tobytes()

    def test_checksum_stable_and_frozen(self):
        oracle = make_oracle(4, 6, seed=9)
        before = oracle.checksum()
        oracle_encode(oracle, np.random.default_rng(0).normal(size=(10, 4)))
        assert oracle.checksum() == before
        with pytest.raises(ValueError):
            oracle.encoder.weights[0][0, 0] = 1.0

    def test_same_class_more_similar_than_cross_class(self):
        ds = gen_mixture(12, 6, 16, 0.05, seed=10, anchor_count=8)
        oracle = make_oracle(16, 24, seed=11)
        emb = oracle_encode(oracle, ds.inputs("gallery")).data
        labels = ds.split_labels("gallery")
        rng = np.random.default_rng(12)
        wins = 0
        trials = 400
        for _ in range(trials):
            c, other = rng.choice(12, size=2, replace=False)
            same = rng.choice(np.flatnonzero(labels == c), size=2, replace=False)
            cross = rng.choice(np.flatnonzero(labels == other))
            same_sim = float(emb[same[0]] @ emb[same[1]])
            cross_sim = float(emb[same[0]] @ emb[cross])
            wins += same_sim > cross_sim
        assert wins / trials >= 0.95

    def test_input_dim_checked(self):
        oracle = make_oracle(6, 8, seed=13)
        with pytest.raises(LengthMismatchError):
            oracle_encode(oracle, np.zeros((3, 5)))
