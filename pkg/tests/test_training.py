import json

import numpy as np
import pytest

from dualkbqa.autodiff import Tape
from dualkbqa.autodiff import sum as ad_sum
from dualkbqa.data import Dataset, QAExample, SynthConfig, Vocab, generate, make_instances, tiny_dataset
from dualkbqa.model import forward, init_parameters
from dualkbqa.optim import ParameterStore
from dualkbqa.training import (
    TrainConfig,
    evaluate,
    example_loss,
    gradient_check,
    gradient_check_instance,
    instances_for,
    load_model,
    loss_and_grads,
    model_config_for,
    relative_error,
    train,
)

SMALL = dict(entities_per_question=10, entity_pool=50, num_relations=4, facts_per_question=16, train=24, dev=8, test=8)


@pytest.fixture(scope="module")
def small():
    ds = generate(SynthConfig(seed=7, **SMALL))
    cfg = model_config_for(ds, hidden=8, steps=2)
    return ds, cfg, instances_for(ds, "train", cfg), instances_for(ds, "dev", cfg)


def tiny(**kw):
    ds = tiny_dataset()
    cfg = model_config_for(ds, **{"hidden": 8, "steps": 2, **kw})
    return ds, cfg, instances_for(ds, "train", cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    assert (TrainConfig().batch_size, TrainConfig().lr) == (8, 7e-4)


def test_zero_lr_repeats_loss():
    _, cfg, inst = tiny()
    _, report = train(inst * 2, [], TrainConfig(lr=0.0, epochs=3, batch_size=1), cfg)
    assert report.losses[0] == report.losses[1] == report.losses[2]


def test_single_example_loss_decreases():
    _, cfg, inst = tiny()
    _, report = train(inst, [], TrainConfig(epochs=20), cfg)
    losses = report.losses
    violations = sum(b >= a for a, b in zip(losses, losses[1:]))
    assert violations <= 2
    assert losses[-1] < losses[0]


def test_empty_training_set():
    _, cfg, _ = tiny()
    with pytest.raises(ValueError):
        train([], [], TrainConfig(), cfg)


def test_training_reproducible_and_checkpoint_round_trip(small, tmp_path):
    ds, cfg, tr, dv = small
    reports = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        tcfg = TrainConfig(epochs=3, seed=2, checkpoint=str(out / "m.ckpt"), report=str(out / "r.jsonl"))
        params, report = train(tr, dv, tcfg, cfg)
        reports.append((out / "r.jsonl").read_text())
    assert reports[0] == reports[1]
    rows = [json.loads(line) for line in reports[0].splitlines()]
    assert [r["epoch"] for r in rows] == [1, 2, 3] and "dev_hits1" in rows[0]

    loaded, cfg2, meta = load_model(tmp_path / "a" / "m.ckpt")
    assert cfg2 == cfg and meta["epoch"] == report.best_epoch
    for name in params:
        assert np.array_equal(loaded[name].data, params[name].data)
    a = evaluate(dv, cfg, params)
    b = evaluate(dv, cfg2, loaded)
    assert a == b
    assert report.best_dev["hits1"] == pytest.approx(np.mean([r.hits for r in a]))


def test_early_stopping_and_best_restore(small):
    _, cfg, tr, dv = small
    seen = []
    params, report = train(tr, dv, TrainConfig(epochs=50, patience=2, lr=0.0), cfg, on_epoch=seen.append)
    assert len(report.epochs) == 3  # no improvement after epoch 1 with a frozen model
    assert report.best_epoch == 1 and len(seen) == 3


def test_batch_gradient_is_member_average():
    _, cfg, inst = tiny()
    params = init_parameters(cfg, seed=0)
    _, g = loss_and_grads(inst[0], cfg, params)
    store = ParameterStore()
    for k in params:
        store.add(k, params[k].data)
    # a batch holding the same example twice averages to the same gradient
    train(inst * 2, [], TrainConfig(epochs=1, batch_size=2, lr=0.1), cfg, params=store)
    moved = [k for k in params if not np.array_equal(store[k].data, params[k].data)]
    assert set(moved) == {k for k in g if np.any(g[k])}


def test_evaluate_counts_missing_answer_as_miss():
    ex = QAExample(["which", "r", "a"], [["a", "r", "b"]], ["a"], ["zz"], id="m")
    vocab = Vocab.build([ex])
    cfg = model_config_for(Dataset({"train": [ex]}, vocab), hidden=4, steps=1)
    inst = make_instances([ex], vocab)
    rec = evaluate(inst, cfg, init_parameters(cfg))[0]
    assert rec.hits == 0 and rec.f1 == 0.0
    assert rec.num_entities == 2 and rec.num_facts == 1


# ---------------------------------------------------------------- gradient check


def test_gradcheck_empty_store_passes():
    report = gradient_check(lambda: None, ParameterStore(), analytic={})
    assert report.errors == {} and report.passed


def test_gradcheck_flags_corrupted_gradient():
    store = ParameterStore()
    w = store.add("w", np.array([1.0, -2.0, 0.5]))

    def loss():
        return ad_sum(w * w)

    with Tape() as tape:
        out = loss()
    grads = tape.backward(out, store)
    assert gradient_check(loss, store, analytic=grads).passed
    bad = {"w": grads["w"] * np.array([1.0, 1.01, 1.0])}
    report = gradient_check(loss, store, analytic=bad)
    assert not report.passed and report.failures == ["w"]
    assert "FAIL" in report.lines()[0]


def test_relative_error_floor():
    assert relative_error(np.array([1e-10]), np.array([-1e-10])) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


@pytest.mark.parametrize(
    "variant",
    [{}, {"dual_mode": "cooc"}, {"entity_init": "lookup"}, {"disable_dual_propagation": True, "disable_interaction": True}],
)
def test_model_gradients_match_finite_differences(variant):
    _, cfg, inst = tiny(hidden=4, **variant)
    params = init_parameters(cfg, seed=1)
    report = gradient_check_instance(inst[0], cfg, params)
    assert report.passed, report.lines()
    assert set(report.errors) == set(params)


def test_loss_matches_state():
    _, cfg, inst = tiny()
    params = init_parameters(cfg)
    loss, state = example_loss(inst[0], cfg, params)
    p = forward(inst[0].graph, inst[0].token_ids, cfg, params).final.data
    pa = p[inst[0].answers[0]]
    assert loss.item() == pytest.approx(-((1 - pa) ** 2) * np.log(pa + 1e-12))
