import numpy as np
import pytest

from sepal.core import DivergedLoss, EmptySplit, ValidationError
from sepal.nn import ModelSpec, Tensor, init_model_state
from sepal.train import (
    Adam,
    TrainConfig,
    linear_prediction,
    load_stage1_checkpoint,
    load_stage2_checkpoint,
    predict_expression,
    save_stage1_checkpoint,
    save_stage2_checkpoint,
    spatial_predict,
    stage1_train,
    stage2_train,
    Stage1Result,
    TrainedModel,
)


class ToyGraph:
    """Minimal structure with the fields GraphBatch consumes."""

    def __init__(self, features, edges=None):
        self.features = np.asarray(features, dtype=float)
        self.edges = (np.zeros((0, 2), dtype=np.int64) if edges is None
                      else np.asarray(edges, dtype=np.int64))


def star_graphs(rng, n, width, nodes_per=4):
    out = []
    for _ in range(n):
        feats = rng.normal(size=(nodes_per, width))
        edges = np.array([[0, i] for i in range(1, nodes_per)])
        out.append(ToyGraph(feats, edges))
    return out


class TestAdam:
    def test_single_step_closed_form(self):
        p = Tensor(np.zeros(3))
        opt = Adam([p], lr=0.1)
        p.grad = np.array([1.0, -2.0, 0.5])
        opt.step()
        g = np.array([1.0, -2.0, 0.5])
        want = -0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, want, rtol=1e-12)

    def test_zero_learning_rate_freezes_params(self):
        p = Tensor(np.array([1.0, 2.0]))
        opt = Adam([p], lr=0.0)
        for _ in range(5):
            p.grad = np.array([3.0, -1.0])
            opt.step()
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_missing_grad_treated_as_zero(self):
        p = Tensor(np.array([1.0]))
        opt = Adam([p], lr=0.5)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0])


def realizable_problem(seed, n=48, d=4, genes=2, noise=0.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    w_true = rng.normal(size=(genes, d))
    b_true = rng.normal(size=genes)
    y = x @ w_true.T + b_true + noise * rng.normal(size=(n, genes))
    return x, y


class TestStage1:
    def test_fits_a_linear_problem(self):
        x, y = realizable_problem(0)
        cfg = TrainConfig(learning_rate=0.05, batch_size=16, max_epochs=400,
                          patience=400, seed=1)
        res = stage1_train(x, y, x, y, cfg)
        assert res.best_val_mse < 1e-3
        assert res.history[-1].train_mse < 1e-3

    def test_deterministic_for_fixed_seed(self):
        x, y = realizable_problem(3, noise=0.1)
        cfg = TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=20,
                          patience=20, seed=5)
        a = stage1_train(x, y, None, None, cfg)
        b = stage1_train(x, y, None, None, cfg)
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)
        assert [r.train_mse for r in a.history] == \
            [r.train_mse for r in b.history]

    def test_zero_lr_early_stops_after_patience(self):
        x, y = realizable_problem(4)
        cfg = TrainConfig(learning_rate=0.0, batch_size=16, max_epochs=100,
                          patience=3, seed=0)
        res = stage1_train(x, y, x, y, cfg)
        # epoch 1 sets the best; 3 evaluations with no improvement follow
        assert len(res.history) == 4

    def test_returns_best_epoch_not_last(self):
        x, y = realizable_problem(5)
        # validation on different data: eventually stops improving
        x_val, y_val = realizable_problem(6)
        cfg = TrainConfig(learning_rate=0.05, batch_size=16, max_epochs=300,
                          patience=10, seed=0)
        res = stage1_train(x, y, x_val, y_val, cfg)
        got = float(np.mean(
            (linear_prediction(x_val, res.weight, res.bias) - y_val) ** 2))
        assert got == res.best_val_mse
        assert got <= min(r.val_mse for r in res.history)

    def test_empty_split(self):
        with pytest.raises(EmptySplit):
            stage1_train(np.zeros((0, 3)), np.zeros((0, 2)), None, None,
                         TrainConfig())

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_diverged_loss(self):
        x = np.full((4, 2), 1e160)
        y = np.zeros((4, 1))
        with pytest.raises(DivergedLoss):
            stage1_train(x, y, None, None,
                         TrainConfig(learning_rate=1.0, max_epochs=2))

    def test_max_steps_caps_updates(self):
        x, y = realizable_problem(7)
        cfg = TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=50,
                          patience=50, seed=0, max_steps=5)
        res = stage1_train(x, y, None, None, cfg)
        assert res.n_steps == 5

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            TrainConfig(learning_rate=-0.1)
        with pytest.raises(ValidationError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValidationError):
            TrainConfig(patience=0)


def correction_spec(width, genes, hidden=8):
    return ModelSpec(in_width=width, n_genes=genes, pre_widths=(),
                     operator="graphconv", gnn_widths=(hidden,),
                     pooling="global_mean", post_widths=(genes,))


class TestStage2:
    def _setup(self, seed=0, n_train=24, n_val=10, width=4, genes=2):
        rng = np.random.default_rng(seed)
        train_graphs = star_graphs(rng, n_train, width)
        val_graphs = star_graphs(rng, n_val, width)
        # target depends on the mean of the star's leaves: spatial signal
        def targets(graphs):
            t = np.stack([g.features[1:].mean(axis=0)[:genes]
                          for g in graphs])
            return t
        d_train = rng.normal(size=(n_train, genes)) * 0.1
        d_val = rng.normal(size=(n_val, genes)) * 0.1
        return (train_graphs, d_train, targets(train_graphs),
                val_graphs, d_val, targets(val_graphs))

    def test_initial_val_equals_frozen_head_val_exactly(self):
        x, y = realizable_problem(11, n=40, noise=0.5)
        x_val, y_val = x[30:], y[30:]
        x_tr, y_tr = x[:30], y[:30]
        cfg = TrainConfig(learning_rate=0.02, batch_size=8, max_epochs=30,
                          patience=30, seed=2)
        s1 = stage1_train(x_tr, y_tr, x_val, y_val, cfg)
        d_val = linear_prediction(x_val, s1.weight, s1.bias)
        d_tr = linear_prediction(x_tr, s1.weight, s1.bias)

        rng = np.random.default_rng(0)
        tg = star_graphs(rng, 30, 4)
        vg = star_graphs(rng, 10, 4)
        s2 = stage2_train(tg, d_tr, y_tr, vg, d_val, y_val,
                          correction_spec(4, 2),
                          TrainConfig(max_epochs=1, seed=3))
        assert s2.initial_val_mse == s1.best_val_mse

    def test_learns_neighborhood_signal(self):
        (tg, d_tr, y_tr, vg, d_val, y_val) = self._setup()
        cfg = TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=150,
                          patience=150, seed=1)
        res = stage2_train(tg, d_tr + y_tr * 0.0, y_tr, vg, d_val, y_val,
                           correction_spec(4, 2), cfg)
        assert res.best_val_mse < res.initial_val_mse * 0.5

    def test_best_never_worse_than_initial(self):
        (tg, d_tr, y_tr, vg, d_val, y_val) = self._setup(seed=9)
        # absurd learning rate so training only hurts
        cfg = TrainConfig(learning_rate=5.0, batch_size=8, max_epochs=5,
                          patience=5, seed=1)
        res = stage2_train(tg, d_tr, y_tr, vg, d_val, y_val,
                           correction_spec(4, 2), cfg)
        assert res.best_val_mse <= res.initial_val_mse
        # the returned parameters are the best ones, here the initial zeros
        s_hat = spatial_predict(res.state, vg)
        if res.best_val_mse == res.initial_val_mse:
            assert (s_hat == 0.0).all()

    def test_deterministic(self):
        (tg, d_tr, y_tr, vg, d_val, y_val) = self._setup(seed=2)
        cfg = TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=10,
                          patience=10, seed=4)
        a = stage2_train(tg, d_tr, y_tr, vg, d_val, y_val,
                         correction_spec(4, 2), cfg)
        b = stage2_train(tg, d_tr, y_tr, vg, d_val, y_val,
                         correction_spec(4, 2), cfg)
        assert [r.val_mse for r in a.history] == \
            [r.val_mse for r in b.history]
        for k in a.state.params:
            np.testing.assert_array_equal(a.state.params[k].data,
                                          b.state.params[k].data)

    def test_empty_train_split(self):
        with pytest.raises(EmptySplit):
            stage2_train([], np.zeros((0, 2)), np.zeros((0, 2)), None, None,
                         None, correction_spec(4, 2), TrainConfig())


class TestCheckpoints:
    def test_stage1_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        res = Stage1Result(weight=rng.normal(size=(3, 5)),
                           bias=rng.normal(size=3), history=[],
                           best_val_mse=0.5, n_steps=10)
        p = tmp_path / "stage1.ckpt"
        save_stage1_checkpoint(p, res, ("g1", "g2", "g3"), seed=7)
        w, b, genes = load_stage1_checkpoint(p)
        np.testing.assert_array_equal(w, res.weight)
        np.testing.assert_array_equal(b, res.bias)
        assert genes == ("g1", "g2", "g3")

    def test_stage2_round_trip_and_predict_equality(self, tmp_path):
        rng = np.random.default_rng(1)
        spec = ModelSpec(in_width=4, n_genes=2, pre_widths=(3,),
                         operator="gcn", gnn_widths=(4,),
                         pooling="sag_mean", sag_ratio=0.7,
                         post_widths=(2,))
        state = init_model_state(spec, 9)
        for t in state.params.values():
            t.data = rng.normal(size=t.data.shape)
        head_w = rng.normal(size=(2, 4))
        head_b = rng.normal(size=2)
        p = tmp_path / "stage2.ckpt"
        save_stage2_checkpoint(p, head_w, head_b, state, ("a", "b"),
                               hops=2, aggregation="concat")
        model = load_stage2_checkpoint(p)
        assert model.hops == 2
        assert model.aggregation == "concat"
        assert model.state.spec == spec
        graphs = star_graphs(np.random.default_rng(2), 5, 4)
        emb = np.random.default_rng(3).normal(size=(5, 4))
        mean = np.array([1.0, -1.0])
        want = predict_expression(
            TrainedModel(("a", "b"), head_w, head_b, state, 2, "concat"),
            emb, graphs, mean)
        got = predict_expression(model, emb, graphs, mean)
        np.testing.assert_array_equal(got, want)

    def test_wrong_stage_rejected(self, tmp_path):
        res = Stage1Result(weight=np.zeros((1, 1)), bias=np.zeros(1),
                           history=[], best_val_mse=None, n_steps=0)
        p = tmp_path / "stage1.ckpt"
        save_stage1_checkpoint(p, res, ("g",), seed=0)
        with pytest.raises(ValidationError):
            load_stage2_checkpoint(p)

    def test_comma_in_gene_id_rejected(self, tmp_path):
        res = Stage1Result(weight=np.zeros((1, 1)), bias=np.zeros(1),
                           history=[], best_val_mse=None, n_steps=0)
        with pytest.raises(ValidationError):
            save_stage1_checkpoint(tmp_path / "x.ckpt", res, ("a,b",), 0)


class TestPredict:
    def test_head_only_prediction(self):
        w = np.array([[1.0, 0.0], [0.0, 2.0]])
        b = np.array([0.5, -0.5])
        mean = np.array([10.0, 20.0])
        model = TrainedModel(("g1", "g2"), w, b, None, 1, "sum")
        emb = np.array([[1.0, 1.0]])
        got = predict_expression(model, emb, None, mean)
        np.testing.assert_array_equal(got, [[1.0 + 0.5 + 10.0,
                                             2.0 - 0.5 + 20.0]])

    def test_stage2_adds_correction(self):
        rng = np.random.default_rng(4)
        spec = correction_spec(4, 2)
        state = init_model_state(spec, 0)
        for t in state.params.values():
            t.data = rng.normal(size=t.data.shape) * 0.3
        graphs = star_graphs(rng, 3, 4)
        emb = rng.normal(size=(3, 4))
        mean = np.zeros(2)
        w = rng.normal(size=(2, 4))
        b = rng.normal(size=2)
        base = TrainedModel(("a", "b"), w, b, None, 1, "sum")
        full = TrainedModel(("a", "b"), w, b, state, 1, "sum")
        head = predict_expression(base, emb, None, mean)
        combined = predict_expression(full, emb, graphs, mean)
        s_hat = spatial_predict(state, graphs)
        np.testing.assert_allclose(combined, head + s_hat, atol=1e-12)
