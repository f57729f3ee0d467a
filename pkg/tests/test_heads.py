from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sharedfusion import numcore as nc
from sharedfusion.errors import ConfigError, DataError, DimensionError
from sharedfusion.heads import (
    BranchOutputs,
    FusionWeightTriple,
    HeadConfig,
    Linear,
    build_heads,
    classify,
    count_head_params,
    late_fuse,
    mean_task_accuracy,
    search_fusion_weights,
    simplex_grid,
    softmax,
)
from sharedfusion.numcore import Tensor


def _logits_from_probs(*rows):
    return [np.log(np.array(rows, dtype=float))]


def _random_outputs(rng, n, tasks=(2, 3), scale=2.0):
    return BranchOutputs(*[[rng.normal(size=(n, k)) * scale for k in tasks] for _ in range(3)])


def rescan(outs, labels, n_steps=10):
    """Independent exhaustive scan in plain Python.

    Walks the grid in its own order, scores each triple by its exact mean
    per-task accuracy, and keeps the lexicographic best of
    (accuracy, w_F, w_D, w_C).
    """
    probs = {b: [[list(map(float, row)) for row in softmax(np.asarray(z))] for z in outs.branch(b)] for b in "CDF"}
    n_tasks, n = len(probs["C"]), len(probs["C"][0])
    best = None
    for f in range(n_steps, -1, -1):
        for d in range(n_steps - f, -1, -1):
            c = n_steps - f - d
            wc, wd, wf = c / n_steps, d / n_steps, f / n_steps
            correct = 0
            for t in range(n_tasks):
                for i in range(n):
                    row = [
                        wc * pc + wd * pd + wf * pf
                        for pc, pd, pf in zip(probs["C"][t][i], probs["D"][t][i], probs["F"][t][i])
                    ]
                    pred = max(range(len(row)), key=lambda k: (row[k], -k))
                    correct += pred == labels[i][t]
            key = (Fraction(correct, n * n_tasks), wf, wd, wc)
            if best is None or key > best:
                best = key
    return best[3], best[2], best[1]


class TestClassify:
    def test_zero_weights_give_uniform(self):
        lin = Linear(Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
        (z,) = classify(Tensor(np.ones(4)), [lin])
        assert z.data.tolist() == [0.0, 0.0, 0.0]
        np.testing.assert_allclose(softmax(z.data), [1 / 3] * 3)

    def test_hand_logits(self):
        lin = Linear(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor(np.zeros(2)))
        assert classify(Tensor([1.0, 0.0]), [lin])[0].data.tolist() == [1.0, 0.0]

    def test_shared_cd_ties_weights(self, rng):
        heads = build_heads(HeadConfig(tasks=(2, 3), classifier_sharing="shared_cd"), 5, seed=0)
        x = Tensor(rng.normal(size=(4, 5)))
        outs = heads(x, x)
        assert all(np.array_equal(c.data, d.data) for c, d in zip(outs.C, outs.D))

    def test_fusion_input_is_concatenation(self, rng):
        heads = build_heads(HeadConfig(tasks=(2,)), 3, seed=0)
        c, d = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        outs = heads(Tensor(c), Tensor(d))
        lin = heads.fusion[0]
        np.testing.assert_allclose(outs.F[0].data, np.hstack([c, d]) @ lin.weight.data + lin.bias.data)

    def test_dim_mismatch(self):
        lin = Linear(Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))
        with pytest.raises(DimensionError):
            lin(Tensor(np.zeros(3)))

    @pytest.mark.parametrize("sharing", ["individual", "shared_cd"])
    def test_param_count(self, sharing):
        cfg = HeadConfig(tasks=(2, 3), classifier_sharing=sharing)
        built = {id(t): t for t in build_heads(cfg, 64, seed=0).parameters().values()}
        assert sum(t.size for t in built.values()) == count_head_params(cfg, 64)

    def test_invalid_tasks(self):
        with pytest.raises(ConfigError):
            HeadConfig(tasks=(2, 1))


class TestLateFuse:
    def test_hand_example(self):
        outs = BranchOutputs(
            _logits_from_probs([0.8, 0.2]), _logits_from_probs([0.4, 0.6]), _logits_from_probs([0.6, 0.4])
        )
        (p,) = late_fuse(outs, FusionWeightTriple(0.2, 0.3, 0.5))
        np.testing.assert_allclose(p, [[0.58, 0.42]], rtol=1e-12)

    def test_unit_clinical_weight(self, rng):
        outs = _random_outputs(rng, 5)
        fused = late_fuse(outs, FusionWeightTriple(1.0, 0.0, 0.0))
        assert all(np.array_equal(f, c) for f, c in zip(fused, outs.probabilities("C")))

    def test_identical_branches(self, rng):
        z = rng.normal(size=(6, 3))
        outs = BranchOutputs([z], [z], [z])
        np.testing.assert_allclose(late_fuse(outs, FusionWeightTriple.equal())[0], softmax(z), rtol=1e-14)

    def test_fusion_only_follows_probabilities(self, rng):
        outs = _random_outputs(rng, 20)
        fused = late_fuse(outs, FusionWeightTriple(0.0, 0.0, 1.0))
        for f, pf in zip(fused, outs.probabilities("F")):
            assert np.array_equal(f.argmax(axis=1), pf.argmax(axis=1))

    @given(st.integers(0, 10), st.integers(0, 10), st.integers(0, 2**31))
    @settings(max_examples=50, deadline=None)
    def test_rows_are_distributions(self, i, j, seed):
        if i + j > 10:
            i, j = 10 - j, j
        w = FusionWeightTriple(i / 10, j / 10, (10 - i - j) / 10)
        for p in late_fuse(_random_outputs(np.random.default_rng(seed), 7, scale=20.0), w):
            assert np.all(p >= 0)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_triple_validation(self):
        with pytest.raises(ConfigError):
            FusionWeightTriple(0.5, 0.6, -0.1)
        with pytest.raises(ConfigError):
            FusionWeightTriple(0.3, 0.3, 0.3)


class TestGrid:
    def test_size_at_tenth(self):
        grid = simplex_grid(0.1)
        assert len(grid) == comb(12, 2) == 66
        assert len({(w.w_C, w.w_D, w.w_F) for w in grid}) == 66

    @pytest.mark.parametrize("step,n", [(0.5, 2), (0.25, 4), (0.2, 5), (0.05, 20)])
    def test_size_general(self, step, n):
        assert len(simplex_grid(step)) == comb(n + 2, 2)

    def test_exact_coordinates(self):
        assert all(w.w_C * 10 == round(w.w_C * 10) for w in simplex_grid(0.1))

    @pytest.mark.parametrize("step", [0.0, 0.6, -0.1])
    def test_invalid_step(self, step):
        with pytest.raises(ConfigError):
            simplex_grid(step)


class TestSearch:
    def test_dominant_branch(self):
        n = 8
        labels = np.array([[i % 2] for i in range(n)])
        wrong = np.array([[0.1, 0.9] if y == 0 else [0.9, 0.1] for (y,) in labels])
        right = np.array([[1 - 1e-9, 1e-9] if y == 0 else [1e-9, 1 - 1e-9] for (y,) in labels])
        outs = BranchOutputs([np.log(wrong)], [np.log(right)], [np.log(wrong)])
        w = search_fusion_weights(outs, labels)
        # every triple with w_D >= 0.5 is perfect; the tie rule then maximizes w_F
        assert (w.w_C, w.w_D, w.w_F) == (0.0, 0.5, 0.5)
        assert mean_task_accuracy(late_fuse(outs, FusionWeightTriple(0, 1, 0)), labels) == 1

    def test_all_tied_prefers_fusion(self):
        z = np.zeros((4, 2))
        outs = BranchOutputs([z], [z], [z])
        w = search_fusion_weights(outs, np.zeros((4, 1), dtype=int))
        assert (w.w_C, w.w_D, w.w_F) == (0.0, 0.0, 1.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_independent_rescan(self, seed):
        g = np.random.default_rng(seed)
        n = int(g.integers(5, 30))
        outs = _random_outputs(g, n)
        labels = np.column_stack([g.integers(0, 2, n), g.integers(0, 3, n)])
        w = search_fusion_weights(outs, labels)
        assert (w.w_C, w.w_D, w.w_F) == rescan(outs, labels)
        best = mean_task_accuracy(late_fuse(outs, w), labels)
        assert all(best >= mean_task_accuracy(late_fuse(outs, v), labels) for v in simplex_grid(0.1))

    def test_empty_validation(self):
        outs = BranchOutputs([np.zeros((0, 2))], [np.zeros((0, 2))], [np.zeros((0, 2))])
        with pytest.raises(DataError):
            search_fusion_weights(outs, np.zeros((0, 1), dtype=int))

    def test_label_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            search_fusion_weights(_random_outputs(rng, 4), np.zeros((5, 2), dtype=int))


class TestBranchOutputs:
    def test_inconsistent_batch(self):
        with pytest.raises(DimensionError):
            BranchOutputs([np.zeros((2, 2))], [np.zeros((3, 2))], [np.zeros((2, 2))])

    def test_concatenate(self, rng):
        a, b = _random_outputs(rng, 3), _random_outputs(rng, 2)
        joined = BranchOutputs.concatenate([a, b])
        assert joined.C[1].shape == (5, 3)
        np.testing.assert_array_equal(joined.F[0][3:], b.F[0])

    def test_arrays_strip_tensors(self, rng):
        outs = BranchOutputs(*[[nc.Tensor(rng.normal(size=(2, 2)))] for _ in range(3)]).arrays()
        assert isinstance(outs.D[0], np.ndarray)
