"""Optimizer arithmetic, fitting behavior, grid selection."""

import numpy as np
import pytest

from crosstask import train as tn
from crosstask import variants as vr
from crosstask.autodiff import parameter
from crosstask.data import DatasetSplit
from crosstask.errors import ConfigError, NonFiniteError
from crosstask.evaluate import auroc
from crosstask.model import EpisodeBatch, ModelConfig
from crosstask.rng import RngStream


class TestAdam:
    def test_zero_gradient_leaves_parameters_and_moments(self):
        p = parameter(np.array([1.0, -2.0]))
        p.grad = np.zeros(2)
        state = tn.AdamState()
        tn.adam_step({"p": p}.items(), state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        np.testing.assert_array_equal(state.m["p"], 0.0)
        np.testing.assert_array_equal(state.v["p"], 0.0)

    def test_first_step_hand_computed(self):
        # g=1, lr=0.001: m_hat = v_hat = 1, step = -lr / (1 + 1e-8)
        p = parameter(np.array([0.0]))
        p.grad = np.ones(1)
        state = tn.AdamState()
        tn.adam_step({"p": p}.items(), state, lr=0.001)
        assert p.data[0] == pytest.approx(-0.000999999, abs=1e-9)

    def test_constant_gradient_step_size_approaches_lr(self):
        p = parameter(np.array([0.0]))
        state = tn.AdamState()
        last = 0.0
        for _ in range(5000):
            p.grad = np.full(1, 3.7)
            before = p.data[0]
            tn.adam_step({"p": p}.items(), state, lr=0.01)
            last = abs(p.data[0] - before)
        assert last == pytest.approx(0.01, rel=1e-3)

    def test_non_finite_gradient_aborts(self):
        p = parameter(np.array([0.0]))
        p.grad = np.array([np.nan])
        with pytest.raises(NonFiniteError):
            tn.adam_step({"p": p}.items(), tn.AdamState(), lr=0.1)


def _separable_split(n=240, d=1, seed=0):
    """One linearly separable task: label = (first feature > 0)."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1, 3))
    y = (x[:, 0, 0] > 0).astype(float)[:, None]
    labels = np.tile(y, (1, d))
    mask = np.ones((n, d), bool)
    counts = np.ones(n, int)
    cut1, cut2 = int(0.6 * n), int(0.8 * n)
    make = lambda s: EpisodeBatch(x[s], labels[s], mask[s], counts[s])
    return DatasetSplit(make(slice(0, cut1)), make(slice(cut1, cut2)),
                        make(slice(cut2, n)), (0.6, 0.2, 0.2), seed)


def _config(d=1, **over):
    base = dict(num_tasks=d, num_features=3, hidden_size=4, embed_layers=1,
                dropout_rate=0.0, mc_samples=2, uncertainty_mode="aleatoric")
    base.update(over)
    return ModelConfig(**base)


class TestFit:
    def test_zero_learning_rate_is_identity(self):
        split = _separable_split()
        model = vr.build(vr.VariantSpec("mtl"), _config(), seed=0)
        before = model.state_dict()
        cfg = tn.TrainConfig(learning_rate=0.0, batch_size=64, max_epochs=2,
                             l2_coefficient=0.0, patience=5)
        tn.fit(model, split, cfg, seed=0)
        after = model.state_dict()
        for name in before:
            np.testing.assert_array_equal(before[name], after[name])

    def test_separable_task_reaches_high_auroc(self):
        split = _separable_split()
        model = vr.build(vr.VariantSpec("mtl"), _config(hidden_size=8), seed=1)
        cfg = tn.TrainConfig(learning_rate=0.01, batch_size=32, max_epochs=40,
                             l2_coefficient=0.0, patience=40)
        tn.fit(model, split, cfg, seed=1)
        probs = model.predict_proba(split.train)
        score = auroc(probs[:, 0], split.train.labels[:, 0])
        assert score > 0.99

    def test_same_seed_identical_records(self):
        split = _separable_split()
        cfg = tn.TrainConfig(learning_rate=0.005, batch_size=32, max_epochs=4,
                             l2_coefficient=0.001, patience=10)
        records = []
        for _ in range(2):
            model = vr.build(vr.VariantSpec("tp_amtl"),
                             _config(uncertainty_mode="both",
                                     dropout_rate=0.2), seed=3)
            records.append(tn.fit(model, split, cfg, seed=3))
        a, b = records
        assert a.train_loss == b.train_loss
        assert a.val_auroc == b.val_auroc
        assert a.test_auroc == b.test_auroc

    def test_restores_best_validation_checkpoint(self):
        split = _separable_split()
        model = vr.build(vr.VariantSpec("mtl"), _config(), seed=4)
        cfg = tn.TrainConfig(learning_rate=0.02, batch_size=32, max_epochs=12,
                             l2_coefficient=0.0, patience=12)
        record = tn.fit(model, split, cfg, seed=4)
        probs = model.predict_proba(split.valid)
        restored = auroc(probs[:, 0], split.valid.labels[:, 0])
        assert restored == pytest.approx(record.best_val_auroc, abs=1e-12)
        assert record.best_val_auroc == pytest.approx(max(record.val_auroc))
        assert all(b > a for a, b in zip(record.epochs, record.epochs[1:]))

    def test_l2_strictly_increases_loss_value(self):
        split = _separable_split()
        model = vr.build(vr.VariantSpec("mtl"), _config(), seed=5)
        batch = split.train.select(np.arange(16))
        plain, _ = model.loss_on_batch(batch, RngStream(0), train=False,
                                       l2_coefficient=0.0)
        decayed, _ = model.loss_on_batch(batch, RngStream(0), train=False,
                                         l2_coefficient=0.01)
        assert float(decayed.data) > float(plain.data)

    @pytest.mark.parametrize("family,mode", [("stl", None),
                                             ("tp_amtl", "none")])
    def test_fully_masked_task_parameters_untouched(self, family, mode):
        rng = np.random.default_rng(6)
        n, d = 120, 2
        x = rng.normal(size=(n, 1, 3))
        labels = rng.integers(0, 2, size=(n, d)).astype(float)
        mask = np.ones((n, d), bool)
        mask[:, 1] = False  # task 1 never supervised
        counts = np.ones(n, int)
        make = lambda s: EpisodeBatch(x[s], labels[s], mask[s], counts[s])
        split = DatasetSplit(make(slice(0, 80)), make(slice(80, 100)),
                             make(slice(100, n)), (0.6, 0.2, 0.2), 0)
        spec = vr.VariantSpec(family, transfer_mode=mode)
        model = vr.build(spec, _config(d=2, uncertainty_mode="both",
                                       dropout_rate=0.1), seed=6)
        before = model.state_dict()
        cfg = tn.TrainConfig(learning_rate=0.01, batch_size=32, max_epochs=3,
                             l2_coefficient=0.0, patience=5)
        tn.fit(model, split, cfg, seed=6)
        after = model.state_dict()
        private_prefixes = ("task1.",)
        touched = [n2 for n2 in before
                   if n2.startswith(private_prefixes)
                   and not np.array_equal(before[n2], after[n2])]
        assert touched == []

    def test_non_finite_loss_aborts_with_retained_state(self):
        split = _separable_split()
        model = vr.build(vr.VariantSpec("mtl"), _config(), seed=7)
        # penalty overflows to inf on the first batch
        cfg = tn.TrainConfig(learning_rate=0.01, batch_size=32, max_epochs=6,
                             l2_coefficient=1e308, patience=6)
        record = tn.fit(model, split, cfg, seed=7)
        assert record.aborted
        for name, tensor in model.params.items():
            assert np.isfinite(tensor.data).all(), name


class TestGridSearch:
    def test_singleton_grid_returns_it(self):
        split = _separable_split(n=120)
        best, records = tn.grid_search(
            vr.VariantSpec("mtl"), {"hidden_size": [4]}, split, seeds=(0,),
            base_model_config=_config(),
            base_train_config=tn.TrainConfig(learning_rate=0.01, batch_size=32,
                                             max_epochs=2, patience=3))
        assert best["cell"] == {"hidden_size": 4}
        assert len(records) == 1

    def test_learning_cell_beats_frozen_cell(self):
        split = _separable_split(n=240)
        best, _ = tn.grid_search(
            vr.VariantSpec("mtl"), {"learning_rate": [0.0, 0.01]}, split,
            seeds=(0,), base_model_config=_config(hidden_size=8),
            base_train_config=tn.TrainConfig(batch_size=32, max_epochs=15,
                                             l2_coefficient=0.0, patience=15))
        assert best["cell"] == {"learning_rate": 0.01}

    def test_result_independent_of_enumeration_order(self):
        split = _separable_split(n=120)
        base_train = tn.TrainConfig(learning_rate=0.01, batch_size=32,
                                    max_epochs=2, patience=3)
        kwargs = dict(split=split, seeds=(0,), base_model_config=_config(),
                      base_train_config=base_train)
        a, _ = tn.grid_search(vr.VariantSpec("mtl"),
                              {"hidden_size": [4, 8],
                               "learning_rate": [0.01, 0.001]}, **kwargs)
        b, _ = tn.grid_search(vr.VariantSpec("mtl"),
                              {"learning_rate": [0.001, 0.01],
                               "hidden_size": [8, 4]}, **kwargs)
        assert a["cell"] == b["cell"]

    def test_empty_grid_rejected(self):
        with pytest.raises(ConfigError):
            tn.grid_search(vr.VariantSpec("mtl"), {}, None, (0,),
                           _config(), tn.TrainConfig())

    def test_unknown_grid_key_rejected(self):
        with pytest.raises(ConfigError):
            tn.TrainConfig(grid={"bogus": [1]})


class TestRunRecord:
    def test_round_trip(self):
        record = tn.RunRecord(variant_name="mtl", variant={"family": "mtl"},
                              model_config={}, train_config={}, seed=3,
                              epochs=[0, 1], train_loss=[1.0, 0.5],
                              val_auroc=[0.6, 0.7], test_auroc={0: 0.66})
        clone = tn.RunRecord.from_dict(
            __import__("json").loads(
                __import__("json").dumps(record.to_dict())))
        assert clone.test_auroc == {0: 0.66}
        assert clone.val_auroc == [0.6, 0.7]

    def test_epoch_monotonicity_enforced(self):
        with pytest.raises(ConfigError):
            tn.RunRecord(variant_name="m", variant={}, model_config={},
                         train_config={}, seed=0, epochs=[1, 1],
                         train_loss=[0, 0], val_auroc=[0, 0])
