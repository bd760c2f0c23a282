import math

import numpy as np
import pytest

import oracles
from helpers import leaf
from lightcrl.checkpoint import dumps, loads
from lightcrl.data import PairedEmbeddingSet, standard_synthetic
from lightcrl.errors import ContractError, NumericalError
from lightcrl.evaluate import train_linear_probe
from lightcrl.model import TAU_MAX, TAU_MIN, init_parameters
from lightcrl.objective import dfe_loss
from lightcrl.train import (
    ClassifierConfig,
    OptimizerState,
    TrainConfig,
    Trainer,
    adam_step,
    clip_grad_norm,
    finetune,
    fit,
    split_train_val,
    train_epoch,
    validation_loss,
)


@pytest.fixture(scope="module")
def standard():
    _, train, test = standard_synthetic()
    return train, test


def small(seed=0, fusion="add", dtype=np.float64, d_model=16):
    return init_parameters(32, 48, d_ctx=8, d_model=d_model, d_out=16, fusion=fusion, seed=seed, dtype=dtype)


# ---------------------------------------------------------------- Adam


def test_adam_first_step():
    t = leaf([0.0])
    t.grad[:] = 1.0
    adam_step({"t": t}, OptimizerState(), lr=1e-3)
    assert t.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-15)
    assert -1e-3 < t.data[0] < -0.000999


def test_adam_matches_scalar_oracle():
    grads = [0.3, -1.2, 0.05, 2.0, 0.0, -0.7, 1.1, 0.4, -0.2, 0.9]
    t = leaf([0.5])
    state = OptimizerState()
    got = []
    for g in grads:
        t.grad[:] = g
        adam_step({"t": t}, state, lr=1e-2)
        got.append(t.data[0])
    assert np.allclose(got, oracles.adam(0.5, grads, lr=1e-2), rtol=0, atol=1e-15)
    assert state.step == 10


def test_adam_zero_grad_is_a_no_op_and_missing_grad_raises():
    t = leaf([1.0, 2.0])
    adam_step({"t": t}, OptimizerState())
    assert np.array_equal(t.data, [1.0, 2.0])
    from lightcrl.autograd import Tensor

    with pytest.raises(ContractError):
        adam_step({"u": Tensor([1.0])}, OptimizerState())


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_log_tau_is_clamped(dtype):
    for g, bound in ((-1.0, TAU_MAX), (1.0, TAU_MIN)):
        lt = leaf(np.asarray(math.log(bound)), dtype)
        lt.grad[...] = g
        adam_step({"log_tau": lt}, OptimizerState(), lr=0.5)
        assert TAU_MIN <= math.exp(float(lt.data)) <= TAU_MAX
        assert float(np.exp(lt.data)) == pytest.approx(bound, rel=1e-6)
        assert TAU_MIN <= float(np.exp(lt.data)) <= TAU_MAX


def test_clip_grad_norm():
    a, b = leaf([3.0]), leaf([4.0])
    a.grad[:], b.grad[:] = 3.0, 4.0
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    assert np.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0)


def test_ten_steps_are_bit_identical(standard):
    train, _ = standard
    cfg = TrainConfig(batch_k=64, seed=3)
    out = []
    for _ in range(2):
        p = small(3, dtype=np.float32)
        train_epoch(p, train, cfg)
        out.append(p.state_dict())
    for k in out[0]:
        assert out[0][k].tobytes() == out[1][k].tobytes()


# ---------------------------------------------------------------- epochs and fitting


def test_train_epoch_zero_lr_and_one_step_per_epoch(standard):
    train, _ = standard
    sub = train.subset(np.arange(32))
    p = small()
    before = p.state_dict()
    state = OptimizerState.zeros_like(p.named_tensors())
    train_epoch(p, sub, TrainConfig(batch_k=32, lr=0.0), state)
    assert state.step == 1
    for k, v in p.state_dict().items():
        assert np.array_equal(v, before[k])


def test_first_epoch_beats_random_init(standard):
    train, _ = standard
    p = small(seed=2, dtype=np.float32, d_model=32)
    untouched = validation_loss(p, train, 64)
    train_epoch(p, train, TrainConfig(seed=2))
    assert validation_loss(p, train, 64) < untouched


def test_fit_stalls_immediately_with_zero_lr(standard):
    train, _ = standard
    res = fit(small(), train, TrainConfig(lr=0.0, patience=1, max_epochs=10))
    assert len(res.history) == 2 and res.stopped_early
    assert res.history[0]["val_loss"] == res.history[1]["val_loss"] == res.initial_val_loss


def test_fit_history_bound_and_best_snapshot(standard):
    train, _ = standard
    tr, va = split_train_val(train, 0.1, 0)
    cfg = TrainConfig(max_epochs=6, patience=3, seed=1, precision=64)
    res = Trainer(small(1), tr, va, cfg).fit()
    assert len(res.history) <= 6
    vals = [h["val_loss"] for h in res.history]
    assert res.best_val_loss == min(vals)
    assert validation_loss(res.params, va, 64) == res.best_val_loss
    assert res.best_val_loss <= res.initial_val_loss
    assert all(h["steps"] == 8 * h["epoch"] for h in res.history)


def test_fit_halves_validation_loss(standard):
    train, _ = standard
    res = fit(small(0, dtype=np.float32, d_model=32), train, TrainConfig(max_epochs=10))
    assert res.best_val_loss <= 0.5 * res.initial_val_loss


def test_fit_is_deterministic(standard):
    train, _ = standard
    runs = [fit(small(4, dtype=np.float32), train, TrainConfig(max_epochs=3, seed=4)).history for _ in range(2)]
    assert runs[0] == runs[1]


def test_resume_reproduces_uninterrupted_run_bit_exactly(standard):
    train, _ = standard
    tr, va = split_train_val(train, 0.1, 5)
    cfg = TrainConfig(max_epochs=6, patience=50, seed=5, precision=64)
    full = Trainer(small(5, "attention"), tr, va, cfg)
    full.fit()

    first = Trainer(small(5, "attention"), tr, va, TrainConfig(**{**cfg.to_dict(), "max_epochs": 3, "betas": cfg.betas}))
    first.fit()
    raw = dumps(first.checkpoint())
    resumed = Trainer.from_checkpoint(loads(raw), tr, va, cfg)
    assert resumed.epoch == 3
    resumed.fit()
    assert resumed.history == full.history
    for k, v in full.params.state_dict().items():
        assert v.tobytes() == resumed.params.state_dict()[k].tobytes()
    assert dumps(resumed.checkpoint()) == dumps(full.checkpoint())


def test_next_step_loss_matches_after_reload(standard):
    train, _ = standard
    tr, va = split_train_val(train, 0.1, 0)
    cfg = TrainConfig(max_epochs=1, seed=0, precision=64)
    a = Trainer(small(), tr, va, cfg)
    a.fit()
    b = Trainer.from_checkpoint(loads(dumps(a.checkpoint())), tr, va, cfg)
    idx = np.arange(64)
    assert a.step(idx) == b.step(idx)


def test_validation_errors(standard):
    train, _ = standard
    empty = PairedEmbeddingSet(np.zeros((0, 32)), np.zeros((0, 48)))
    with pytest.raises(ContractError):
        Trainer(small(), train, empty, TrainConfig())
    with pytest.raises(ContractError):
        Trainer(small(), train.subset(np.arange(10)), train, TrainConfig(batch_k=64))
    with pytest.raises(ContractError):
        TrainConfig(precision=16).validate()
    with pytest.raises(ContractError):
        split_train_val(train, 0.0, 0)


def test_non_finite_loss_raises(standard):
    train, _ = standard
    p = small()
    p.out_w.data[0, 0] = np.nan
    tr, va = split_train_val(train, 0.1, 0)
    with pytest.raises(NumericalError):
        Trainer(p, tr, va, TrainConfig(max_epochs=1)).run_epoch()


def test_config_round_trip():
    cfg = TrainConfig(batch_k=16, max_grad_norm=1.0)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- fine-tuning


def test_finetune_zero_epochs_leaves_everything_at_init(standard):
    train, _ = standard
    p = small()
    before = p.state_dict()
    res = finetune(p, train, 10, ClassifierConfig(epochs=0))
    assert np.all(res.head.w.data == 0) and np.all(res.head.b.data == 0)
    for k, v in res.params.state_dict().items():
        assert np.array_equal(v, before[k])
    assert res.curve == [(0, pytest.approx(0.1, abs=0.01))]


def test_frozen_finetune_equals_linear_probe(standard):
    train, test = standard
    p = small(dtype=np.float64)
    cfg = ClassifierConfig(epochs=10, eval_every=5)
    ft = finetune(p, train, 10, cfg, test=test, freeze_dfe=True)
    probe = train_linear_probe(p, train, test, epochs=10, eval_every=5)
    assert np.allclose(ft.head.w.data, probe.head.w.data, atol=1e-6)
    assert [a for _, a in ft.curve] == [a for _, a in probe.curve]


def test_finetune_does_not_mutate_input_and_fits_separable_data(standard):
    train, _ = standard
    p = small(dtype=np.float32, d_model=32)
    before = p.state_dict()
    res = finetune(p, train, 10, ClassifierConfig(epochs=40, eval_every=20))
    for k, v in p.state_dict().items():
        assert np.array_equal(v, before[k])
    assert res.final_accuracy >= 0.95
    with pytest.raises(ContractError):
        finetune(p, PairedEmbeddingSet(train.m1, train.m2), 10)


def test_loss_report_dtype_follows_params(standard):
    train, _ = standard
    rep = dfe_loss(small(dtype=np.float32), train.m1[:4], train.m2[:4])
    assert rep.total.dtype == np.float32
