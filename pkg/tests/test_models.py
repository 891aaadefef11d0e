"""Initialization, scoring functions, parameter counts, and artifact IO."""

import math

import numpy as np
import pytest

from photorank.corpus import (
    Interaction,
    PhotoFeatureTable,
    SplitAssignment,
    TRAIN,
    build_corpus,
)
from photorank.evaluation import TestCase, rank_candidates
from photorank.models import (
    FLOOR_SCORE,
    ModelConfig,
    ModelError,
    count_params,
    dropout_mask,
    init_params,
    load_params,
    make_scorer,
    project_photo,
    save_params,
    score_brie,
    score_cnt,
    score_elvis,
    score_mf_elvis,
    score_rnd,
    sigmoid,
)

from conftest import random_corpus


def _identity_proj_params(d=2, user_rows=None):
    """feature_dim == d, projection = identity, bias = 0."""
    config = ModelConfig(kind="brie", d=d, feature_dim=d, seed=0)
    params = init_params(config, n_users=len(user_rows) if user_rows is not None else 2)
    params.proj_weight = np.eye(d)
    params.proj_bias = np.zeros(d)
    if user_rows is not None:
        params.user_table = np.asarray(user_rows, dtype=np.float64)
    return params


class TestModelConfig:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ModelError):
            ModelConfig(kind="mystery")

    def test_rejects_bad_dropout(self):
        with pytest.raises(ModelError):
            ModelConfig(kind="brie", dropout_p=1.0)

    def test_rejects_dropout_without_a_dropout_path(self):
        with pytest.raises(ModelError, match="no dropout path"):
            ModelConfig(kind="mf_elvis", dropout_p=0.5)

    def test_elvis_hidden_defaults_to_half_pyramid(self):
        config = ModelConfig(kind="elvis", d=64, feature_dim=32)
        assert config.mlp_hidden == (64, 32)
        assert config.mlp_widths() == [128, 64, 32, 1]

    def test_hidden_rejected_outside_elvis(self):
        with pytest.raises(ModelError):
            ModelConfig(kind="brie", mlp_hidden=(4,))


class TestInitParams:
    def test_user_table_within_xavier_bound(self):
        config = ModelConfig(kind="brie", d=64, feature_dim=8, seed=1)
        params = init_params(config, n_users=100)
        bound = math.sqrt(6 / (100 + 64))
        assert np.abs(params.user_table).max() <= bound
        assert params.user_table.shape == (100, 64)
        assert np.all(params.proj_bias == 0)

    def test_same_seed_identical(self):
        config = ModelConfig(kind="elvis", d=8, feature_dim=6, seed=9)
        a = init_params(config, n_users=13)
        b = init_params(config, n_users=13)
        for (name_a, ta), (name_b, tb) in zip(a.tensors(), b.tensors()):
            assert name_a == name_b
            np.testing.assert_array_equal(ta, tb)

    def test_empirical_mean_matches_uniform_law(self):
        # 1e6 entries drawn from U(-a, a): mean must land within 3 sigma of 0,
        # with sigma = a / sqrt(3 N).
        config = ModelConfig(kind="brie", d=64, feature_dim=4, seed=3)
        params = init_params(config, n_users=15_625)
        entries = params.user_table.ravel()
        assert entries.size == 1_000_000
        a = math.sqrt(6 / (15_625 + 64))
        sigma_mean = a / math.sqrt(3 * entries.size)
        assert abs(entries.mean()) < 3 * sigma_mean

    def test_normal_variant_behind_flag(self):
        config = ModelConfig(kind="brie", d=32, feature_dim=4, seed=3, xavier_normal=True)
        params = init_params(config, n_users=1000)
        std = params.user_table.std()
        expected = math.sqrt(2 / (1000 + 32))
        assert abs(std - expected) / expected < 0.05

    def test_baselines_have_no_params(self):
        with pytest.raises(ModelError):
            init_params(ModelConfig(kind="cnt", feature_dim=4), n_users=3)


class TestProjectPhoto:
    def test_zero_weight_returns_bias(self):
        params = _identity_proj_params(d=3, user_rows=[[0, 0, 0]])
        params.proj_weight = np.zeros((3, 3))
        params.proj_bias = np.asarray([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(project_photo(params, [5.0, 5.0, 5.0]), [1.0, 2.0, 3.0])

    def test_identity_weight_passes_through(self):
        params = _identity_proj_params(d=3, user_rows=[[0, 0, 0]])
        x = np.asarray([0.5, -1.5, 2.0])
        np.testing.assert_array_equal(project_photo(params, x), x)

    def test_matches_brute_force_matrix_product(self):
        rng = np.random.default_rng(4)
        config = ModelConfig(kind="brie", d=3, feature_dim=5, seed=4)
        params = init_params(config, n_users=2)
        x = rng.normal(size=5)
        expected = np.zeros(3)
        for k in range(3):
            for j in range(5):
                expected[k] += x[j] * params.proj_weight[j, k]
            expected[k] += params.proj_bias[k]
        np.testing.assert_allclose(project_photo(params, x), expected, atol=1e-6)

    def test_dimension_mismatch_rejected(self):
        params = _identity_proj_params(d=2, user_rows=[[0, 0]])
        with pytest.raises(ModelError, match="feature length"):
            project_photo(params, [1.0, 2.0, 3.0])


class TestScoreBrie:
    def test_worked_example(self):
        params = _identity_proj_params(user_rows=[[1.0, 2.0]])
        assert score_brie(params, 0, [3.0, 4.0]) == 11.0

    def test_orthogonal_vectors_score_zero(self):
        params = _identity_proj_params(user_rows=[[1.0, 0.0]])
        assert score_brie(params, 0, [0.0, 5.0]) == 0.0

    def test_zero_dropout_train_equals_eval_exactly(self):
        params = _identity_proj_params(user_rows=[[0.3, -0.7]])
        rng = np.random.default_rng(0)
        train = score_brie(params, 0, [1.0, 2.0], mode="train", mask_rng=rng)
        assert train == score_brie(params, 0, [1.0, 2.0], mode="eval")

    def test_train_mode_without_rng_rejected(self):
        params = _identity_proj_params(user_rows=[[1.0, 1.0]])
        params.config.dropout_p = 0.5
        with pytest.raises(ModelError, match="mask RNG"):
            score_brie(params, 0, [1.0, 1.0], mode="train")

    def test_dropout_mask_scale(self):
        rng = np.random.default_rng(5)
        mask = dropout_mask(rng, 10_000, 0.75)
        values = set(np.unique(mask).tolist())
        assert values == {0.0, 4.0}
        assert abs((mask > 0).mean() - 0.25) < 0.02


class TestScoreMfElvis:
    def test_sigmoid_of_zero(self):
        params = _identity_proj_params(user_rows=[[0.0, 0.0]])
        assert score_mf_elvis(params, 0, [1.0, 1.0]) == 0.5

    def test_saturation(self):
        params = _identity_proj_params(user_rows=[[40.0, 0.0]])
        assert abs(score_mf_elvis(params, 0, [1.0, 0.0]) - 1.0) < 1e-15

    def test_matches_sigmoid_of_dot_oracle(self):
        rng = np.random.default_rng(6)
        config = ModelConfig(kind="mf_elvis", d=4, feature_dim=7, seed=6)
        params = init_params(config, n_users=5)
        x = rng.normal(size=7)
        v = x @ params.proj_weight + params.proj_bias
        dot = sum(params.user_table[2, k] * v[k] for k in range(4))
        expected = 1.0 / (1.0 + math.exp(-dot))
        assert abs(score_mf_elvis(params, 2, x) - expected) < 1e-9


class TestScoreElvis:
    def test_zero_weights_give_half(self):
        config = ModelConfig(kind="elvis", d=2, feature_dim=2, mlp_hidden=(3,), seed=0)
        params = init_params(config, n_users=2)
        for w, b in params.mlp:
            w[:] = 0
        assert score_elvis(params, 0, [1.0, -1.0]) == 0.5

    def test_hand_set_single_layer_reduces_to_dot(self):
        # One hidden unit copying u[0]+v[0] through ReLU, then identity out.
        config = ModelConfig(kind="elvis", d=1, feature_dim=1, mlp_hidden=(1,), seed=0)
        params = init_params(config, n_users=1)
        params.user_table = np.asarray([[2.0]])
        params.proj_weight = np.asarray([[1.0]])
        params.proj_bias = np.zeros(1)
        params.mlp[0] = (np.asarray([[1.0], [1.0]]), np.zeros(1))
        params.mlp[1] = (np.asarray([[1.0]]), np.zeros(1))
        # logit = relu(2 + 3) = 5
        expected = 1.0 / (1.0 + math.exp(-5.0))
        assert abs(score_elvis(params, 0, [3.0]) - expected) < 1e-12

    def test_matches_layer_by_layer_oracle(self):
        rng = np.random.default_rng(7)
        config = ModelConfig(kind="elvis", d=4, feature_dim=5, mlp_hidden=(4,), seed=7)
        params = init_params(config, n_users=3)
        x = rng.normal(size=5)
        h = np.concatenate([params.user_table[1], x @ params.proj_weight + params.proj_bias])
        w0, b0 = params.mlp[0]
        h = np.maximum(h @ w0 + b0, 0)
        w1, b1 = params.mlp[1]
        logit = float((h @ w1 + b1)[0])
        expected = 1.0 / (1.0 + math.exp(-logit))
        assert abs(score_elvis(params, 1, x) - expected) < 1e-6


class TestScoreCnt:
    def _corpus(self):
        interactions = [Interaction(0, 0, 0), Interaction(0, 0, 1), Interaction(0, 0, 2), Interaction(1, 0, 3)]
        rows = np.asarray([[0, 0], [2, 0], [1, 3], [5, 5]], dtype=np.float32)
        corpus = build_corpus(interactions, PhotoFeatureTable(rows))
        split = SplitAssignment(np.full(4, TRAIN, dtype=np.uint8))
        return corpus, split

    def test_photo_at_centroid_scores_zero(self):
        corpus, split = self._corpus()
        assert score_cnt(corpus, split, 0, [1.0, 1.0]) == 0.0

    def test_single_photo_user_scores_own_photo_zero(self):
        corpus, split = self._corpus()
        assert score_cnt(corpus, split, 1, [5.0, 5.0]) == 0.0

    def test_matches_brute_force_centroid_oracle(self):
        corpus, split = self._corpus()
        rng = np.random.default_rng(8)
        query = rng.normal(size=2)
        centroid = np.asarray([(0 + 2 + 1) / 3, (0 + 0 + 3) / 3])
        expected = -math.sqrt(((query - centroid) ** 2).sum())
        assert abs(score_cnt(corpus, split, 0, query) - expected) < 1e-6

    def test_user_without_train_photos_ranks_last(self):
        corpus, _ = self._corpus()
        labels = np.asarray([TRAIN, TRAIN, TRAIN, 2], dtype=np.uint8)
        split = SplitAssignment(labels)
        assert score_cnt(corpus, split, 1, [5.0, 5.0]) == FLOOR_SCORE
        assert np.isfinite(FLOOR_SCORE)


class TestScoreRnd:
    def test_reproducible_sequence(self):
        a = [score_rnd(np.random.default_rng(3)) for _ in range(1)]
        b = [score_rnd(np.random.default_rng(3)) for _ in range(1)]
        assert a == b

    def test_uniform_moments(self):
        rng = np.random.default_rng(12)
        draws = np.asarray([score_rnd(rng) for _ in range(100_000)])
        assert abs(draws.mean() - 0.5) < 0.005
        assert draws.min() >= 0.0 and draws.max() < 1.0

    def test_seeds_differ(self):
        assert score_rnd(np.random.default_rng(1)) != score_rnd(np.random.default_rng(2))


class TestCountParams:
    def test_brie_arithmetic(self):
        config = ModelConfig(kind="brie", d=4, feature_dim=8)
        assert count_params(config, n_users=100) == 436

    def test_compactness_ratio_tends_to_16(self):
        big = ModelConfig(kind="mf_elvis", d=1024, feature_dim=1536)
        small = ModelConfig(kind="brie", d=64, feature_dim=1536)
        ratio = count_params(big, 10**6) / count_params(small, 10**6)
        assert abs(ratio - 16.0) < 0.16

    def test_elvis_adds_mlp(self):
        base = ModelConfig(kind="mf_elvis", d=4, feature_dim=8)
        elvis = ModelConfig(kind="elvis", d=4, feature_dim=8, mlp_hidden=(4,))
        assert count_params(elvis, 50) == count_params(base, 50) + 41

    def test_baselines_count_zero(self):
        assert count_params(ModelConfig(kind="rnd", feature_dim=4), 10) == 0
        assert count_params(ModelConfig(kind="cnt", feature_dim=4), 10) == 0


class TestScorerInvariants:
    def test_eval_scores_are_pure(self):
        rng = np.random.default_rng(10)
        corpus = random_corpus(rng, n_users=5, n_items=2, n_photos=20)
        config = ModelConfig(kind="brie", d=3, feature_dim=6, seed=2)
        params = init_params(config, corpus.n_users)
        scorer = make_scorer("brie", params=params, corpus=corpus)
        photos = np.arange(10)
        np.testing.assert_array_equal(scorer(2, photos), scorer(2, photos))

    def test_brie_ranking_invariant_to_user_rescaling(self):
        rng = np.random.default_rng(11)
        corpus = random_corpus(rng, n_users=4, n_items=2, n_photos=30)
        config = ModelConfig(kind="brie", d=5, feature_dim=6, seed=3)
        params = init_params(config, corpus.n_users)
        scorer = make_scorer("brie", params=params, corpus=corpus)
        photos = np.arange(30)
        before = scorer(1, photos)
        params.user_table[1] *= 7.5
        after = scorer(1, photos)
        np.testing.assert_allclose(after, 7.5 * before, rtol=1e-12)
        assert np.argmax(after) == np.argmax(before)

    def test_mf_elvis_order_equals_raw_dot_order(self):
        rng = np.random.default_rng(12)
        corpus = random_corpus(rng, n_users=4, n_items=2, n_photos=25)
        config = ModelConfig(kind="mf_elvis", d=4, feature_dim=6, seed=5)
        params = init_params(config, corpus.n_users)
        raw = make_scorer("brie", params=params, corpus=corpus)
        squashed = make_scorer("mf_elvis", params=params, corpus=corpus)
        photos = np.arange(25)
        np.testing.assert_array_equal(np.argsort(raw(0, photos)), np.argsort(squashed(0, photos)))

    def test_argmax_equals_top_of_ranking(self):
        rng = np.random.default_rng(13)
        corpus = random_corpus(rng, n_users=4, n_items=2, n_photos=25)
        config = ModelConfig(kind="brie", d=4, feature_dim=6, seed=6)
        params = init_params(config, corpus.n_users)
        scorer = make_scorer("brie", params=params, corpus=corpus)
        candidates = np.arange(12)
        scores = scorer(3, candidates)
        top = int(candidates[np.argmax(scores)])
        case = TestCase(3, 0, top, candidates, author_train_count=0)
        ranked = rank_candidates(scorer, case)
        assert ranked.positive_rank == 1


class TestArtifactIO:
    @pytest.mark.parametrize(
        "kind,hidden,dropout",
        [("brie", None, 0.75), ("mf_elvis", None, 0.0), ("elvis", (6, 3), 0.75)],
    )
    def test_round_trip_bit_exact(self, tmp_path, kind, hidden, dropout):
        config = ModelConfig(
            kind=kind, d=6, feature_dim=9, dropout_p=dropout, mlp_hidden=hidden, seed=21
        )
        params = init_params(config, n_users=17)
        path = tmp_path / "model.bin"
        save_params(params, path)
        first = path.read_bytes()
        loaded = load_params(path)
        assert loaded.config == config
        assert loaded.n_users == 17
        save_params(loaded, path)
        assert path.read_bytes() == first

    def test_loaded_tensors_match_saved_precision(self, tmp_path):
        config = ModelConfig(kind="brie", d=4, feature_dim=5, seed=1)
        params = init_params(config, n_users=3)
        path = tmp_path / "model.bin"
        save_params(params, path)
        loaded = load_params(path)
        np.testing.assert_array_equal(
            loaded.user_table, params.user_table.astype(np.float32).astype(np.float64)
        )

    def test_truncated_artifact_rejected(self, tmp_path):
        config = ModelConfig(kind="brie", d=4, feature_dim=5, seed=1)
        params = init_params(config, n_users=3)
        path = tmp_path / "model.bin"
        save_params(params, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ModelError, match="truncated"):
            load_params(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.bin"
        path.write_bytes(b"NOTIT!" + bytes(64))
        with pytest.raises(ModelError, match="magic"):
            load_params(path)
