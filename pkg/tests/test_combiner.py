import math

import numpy as np
import pytest

from finepim import tensor as T
from finepim.combiner import (ConcatFeatures, GcnConfig, average_predict, block_loss, concat_predict,
                              cross_entropy, gcn_fuse, init_concat_head, init_gcn, total_loss)
from finepim.errors import ConfigError
from finepim.selector import PixelLogits
from finepim.tensor import Tensor

from conftest import check_grads


def softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def reference_gcn(x: np.ndarray, cfg: GcnConfig, params: dict, uniform_adjacency: bool = False) -> np.ndarray:
    """Straight numpy version of the graph head for one ``n x d`` node matrix."""
    n = x.shape[0]
    if uniform_adjacency:
        adj = np.full((n, n), 1.0 / n)
    else:
        adj = softmax(x @ x.T / cfg.adjacency_temperature, axis=1)
    for layer in range(cfg.gcn_layers):
        x = np.maximum(adj @ x @ params[f"combiner.gcn.{layer}.theta"].data, 0.0)
    s = softmax(x @ params["combiner.pool.phi"].data, axis=0)
    z = s.T @ x
    return z.mean(axis=0) @ params["combiner.classifier.weight"].data + params["combiner.classifier.bias"].data


class TestGcn:
    def test_matches_reference(self, rng):
        cfg = GcnConfig(num_supernodes=3, gcn_layers=2, hidden_dim=6)
        params = init_gcn(4, cfg, 0)
        params["combiner.classifier.bias"] = Tensor(rng.normal(size=4))
        x = rng.normal(size=(3, 7, 4))
        out = gcn_fuse(Tensor(x), cfg, params).data
        for i in range(3):
            np.testing.assert_allclose(out[i], reference_gcn(x[i], cfg, params), atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        cfg = GcnConfig(num_supernodes=2, gcn_layers=1)
        params = init_gcn(4, cfg, seed)
        x = rng.normal(size=(1, 5, 4))
        base = gcn_fuse(Tensor(x), cfg, params).data
        for _ in range(5):
            perm = rng.permutation(5)
            np.testing.assert_allclose(gcn_fuse(Tensor(x[:, perm]), cfg, params).data, base, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_infinite_temperature_is_node_mean(self, seed):
        """A huge temperature flattens the adjacency, so each node aggregates the plain node mean."""
        rng = np.random.default_rng(seed)
        cfg = GcnConfig(num_supernodes=2, adjacency_temperature=1e15)
        params = init_gcn(4, cfg, seed)
        x = rng.normal(size=(5, 4))
        got = gcn_fuse(Tensor(x[None]), cfg, params).data[0]
        np.testing.assert_allclose(got, reference_gcn(x, cfg, params, uniform_adjacency=True), atol=1e-9)

    def test_hidden_width(self):
        params = init_gcn(4, GcnConfig(hidden_dim=8, gcn_layers=2), 0)
        assert params["combiner.gcn.0.theta"].shape == (4, 8)
        assert params["combiner.gcn.1.theta"].shape == (8, 8)
        assert params["combiner.classifier.weight"].shape == (8, 4)

    def test_too_few_nodes(self, rng):
        cfg = GcnConfig(num_supernodes=4)
        with pytest.raises(ValueError):
            gcn_fuse(Tensor(rng.normal(size=(1, 3, 4))), cfg, init_gcn(4, cfg, 0))

    @pytest.mark.parametrize("kwargs", [{"num_supernodes": 0}, {"gcn_layers": 0},
                                        {"adjacency_temperature": 0.0}, {"hidden_dim": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            GcnConfig(**kwargs)

    def test_gradients(self, rng):
        cfg = GcnConfig(num_supernodes=2, gcn_layers=2, hidden_dim=3)
        params = init_gcn(3, cfg, 1)
        x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
        names = sorted(params)
        leaves = [x] + [params[n] for n in names]

        def build(x, *ps):
            scores = gcn_fuse(x, cfg, dict(zip(names, ps)))
            return T.sum(cross_entropy(scores, [0, 2]))

        assert check_grads(build, leaves) < 1e-4


class TestConcatHead:
    def test_matches_flattened_matmul(self, rng):
        params = init_concat_head(6, 3, 0)
        x = rng.normal(size=(2, 6, 3))
        out = concat_predict(ConcatFeatures(Tensor(x)), params["combiner.fc.weight"], params["combiner.fc.bias"])
        np.testing.assert_allclose(out.data, x.reshape(2, 18) @ params["combiner.fc.weight"].data, atol=1e-12)

    def test_node_count_mismatch(self, rng):
        params = init_concat_head(6, 3, 0)
        with pytest.raises(ValueError):
            concat_predict(Tensor(rng.normal(size=(1, 5, 3))), params["combiner.fc.weight"],
                           params["combiner.fc.bias"])


class TestLosses:
    def test_uniform_prediction(self):
        """Zero logits everywhere: ln 4 per head, 5 ln 4 in total."""
        labels = [0, 1, 2, 3]
        blocks = [PixelLogits(Tensor(np.zeros((4, 4, s, s)))) for s in (8, 4, 2, 1)]
        total, report = total_loss(blocks, Tensor(np.zeros((4, 4))), labels)
        for v in report.block_losses + [report.combiner_loss]:
            assert abs(v - math.log(4)) < 1e-9
        assert abs(total.item() - 5 * math.log(4)) < 1e-9

    def test_perfect_prediction(self):
        labels = np.array([2, 0])
        scores = np.full((2, 4), -50.0)
        scores[np.arange(2), labels] = 50.0
        maps = np.broadcast_to(scores[:, :, None, None], (2, 4, 3, 3)).copy()
        total, _ = total_loss([PixelLogits(Tensor(maps))] * 4, Tensor(scores), labels)
        assert total.item() < 1e-8

    def test_additivity(self, rng):
        labels = [1, 0, 2]
        blocks = [PixelLogits(Tensor(rng.normal(size=(3, 3, s, s)))) for s in (4, 2, 2, 1)]
        scores = Tensor(rng.normal(size=(3, 3)))
        w = [0.5, 1.0, 2.0, 0.25, 3.0]
        total, report = total_loss(blocks, scores, labels, w)
        parts = [block_loss(average_predict(b), labels).item() for b in blocks] + [block_loss(scores, labels).item()]
        assert report.block_losses + [report.combiner_loss] == parts
        expect = w[0] * parts[0]
        for wi, p in zip(w[1:], parts[1:]):
            expect += wi * p
        assert total.item() == expect

    def test_cross_entropy_matches_numpy(self, rng):
        s = rng.normal(size=(5, 3)) * 4
        lab = rng.integers(0, 3, 5)
        ref = -np.log(softmax(s, 1)[np.arange(5), lab])
        np.testing.assert_allclose(cross_entropy(Tensor(s), lab).data, ref, atol=1e-12)

    @pytest.mark.parametrize("labels", [[0, 4], [-1, 0], [0]])
    def test_bad_labels(self, labels):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 4))), labels)

    def test_wrong_weight_count(self):
        with pytest.raises(ValueError):
            total_loss([Tensor(np.zeros((1, 2, 1, 1)))], Tensor(np.zeros((1, 2))), [0], [1.0])

    def test_average_predict(self, rng):
        x = rng.normal(size=(2, 3, 4, 5))
        np.testing.assert_allclose(average_predict(Tensor(x)).data, x.mean(axis=(2, 3)), atol=1e-15)
