"""Loss/optimizer math, freeze policies, loop determinism, scoring."""

import math

import numpy as np
import pytest

from vitpad import data, train, vit
from vitpad.errors import ArgumentError, ContractError, ProtocolError, TrainingDiverged, VitPadIOError
from vitpad.tensor import Tape, Tensor, backprop, sigmoid
from vitpad.train import AdamState, TrainConfig, adam_step, bce_loss, select_trainable
from vitpad.vit import TINY_CONFIG


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    manifest = data.synth_dataset(root, 6, 2, ["print", "replay", "mask"], seed=1)
    protocol = data.gen_grandtest(manifest, (0.5, 0.25, 0.25), seed=3)
    assert protocol.train and protocol.dev and protocol.eval
    return manifest, protocol


def fast_cfg(**kw):
    defaults = dict(learning_rate=0.05, weight_decay=1e-5, batch_size=8,
                    epochs=2, flip_prob=0.5, policy="FC", seed=11)
    defaults.update(kw)
    return TrainConfig(**defaults)


# -- bce_loss -------------------------------------------------------------------

def test_bce_at_zero_logit():
    assert abs(bce_loss(0.0, 0) - math.log(2.0)) < 1e-12
    assert abs(bce_loss(0.0, 1) - math.log(2.0)) < 1e-12
    assert abs(bce_loss(0.0, 1) - 0.693147) < 1e-6


def test_bce_saturation():
    assert bce_loss(50.0, 1) < 1e-20
    assert bce_loss(-50.0, 0) < 1e-20


def test_bce_stable_form_value():
    expected = math.log(1.0 + math.exp(2.0))
    assert abs(bce_loss(2.0, 0) - expected) < 1e-12
    assert abs(bce_loss(2.0, 0) - 2.126928) < 1e-6


def test_bce_never_overflows():
    for z in (1e4, -1e4, 700.0, -700.0):
        for y in (0, 1):
            assert math.isfinite(bce_loss(z, y))


# -- adam -----------------------------------------------------------------------

def adam_inputs(theta, grad):
    params = {"w": Tensor(np.array(theta, dtype=np.float32), name="w", trainable=True)}
    grads = {"w": Tensor(np.array(grad, dtype=np.float32), name="w")}
    state = AdamState(m={"w": np.zeros_like(params["w"].data)},
                      v={"w": np.zeros_like(params["w"].data)}, t=0)
    return params, grads, state


def test_adam_first_step_magnitude():
    # theta=0 so the decay term vanishes; first-step update is ~ lr * sign(g)
    params, grads, state = adam_inputs([0.0], [3.0])
    cfg = fast_cfg(learning_rate=1e-3)
    new_params, new_state = adam_step(params, grads, state, cfg)
    assert new_state.t == 1
    assert abs(new_params["w"].data[0] + 1e-3) < 1e-8


def test_adam_zero_gradient_zero_theta_no_change():
    params, grads, state = adam_inputs([0.0, 0.0], [0.0, 0.0])
    new_params, _ = adam_step(params, grads, state, fast_cfg())
    assert np.array_equal(new_params["w"].data, params["w"].data)


def test_adam_deterministic():
    cfg = fast_cfg(learning_rate=0.01)
    out1 = adam_step(*adam_inputs([0.5, -0.25], [0.1, 0.9]), cfg)
    out2 = adam_step(*adam_inputs([0.5, -0.25], [0.1, 0.9]), cfg)
    assert np.array_equal(out1[0]["w"].data, out2[0]["w"].data)
    assert np.array_equal(out1[1].v["w"], out2[1].v["w"])


def test_adam_weight_decay_couples_into_gradient():
    # g=0 but theta nonzero: coupled L2 still moves the weight toward zero
    params, grads, state = adam_inputs([1.0], [0.0])
    cfg = fast_cfg(learning_rate=1e-3, weight_decay=0.1)
    new_params, _ = adam_step(params, grads, state, cfg)
    assert new_params["w"].data[0] < 1.0


def test_adam_missing_gradient_named():
    params, grads, state = adam_inputs([0.0], [0.0])
    state.m["other"] = np.zeros(1, dtype=np.float32)
    state.v["other"] = np.zeros(1, dtype=np.float32)
    with pytest.raises(ContractError, match="other"):
        adam_step(params, grads, state, fast_cfg())


# -- select_trainable -------------------------------------------------------------

def test_select_trainable_fc():
    assert select_trainable("FC") == {"head.weight", "head.bias"}


def test_select_trainable_e_fc():
    e_fc = select_trainable("E_FC")
    assert select_trainable("FC") < e_fc
    assert len(e_fc) == 6
    assert {"patch_proj.weight", "patch_proj.bias", "cls_token", "pos_embed"} < e_fc


def test_select_trainable_all_matches_param_names():
    names = select_trainable("ALL", TINY_CONFIG)
    assert names == frozenset(vit.param_shapes(TINY_CONFIG))


def test_select_trainable_bad_policy():
    with pytest.raises(ArgumentError):
        select_trainable("HEAD")


# -- training loop -----------------------------------------------------------------

def test_fc_policy_freezes_everything_but_head(tiny_dataset):
    manifest, protocol = tiny_dataset
    init = vit.init_params(TINY_CONFIG, seed=2)
    best, history = train.train(manifest, protocol, init, TINY_CONFIG, fast_cfg())
    for name in init:
        if name in ("head.weight", "head.bias"):
            assert not np.array_equal(best[name].data, init[name].data)
        else:
            assert np.array_equal(best[name].data, init[name].data), name
    assert history.best_epoch == int(np.argmin(history.dev_loss))


def test_e_fc_policy_freeze_set(tiny_dataset):
    manifest, protocol = tiny_dataset
    init = vit.init_params(TINY_CONFIG, seed=2)
    best, _ = train.train(manifest, protocol, init, TINY_CONFIG,
                          fast_cfg(policy="E_FC", epochs=1))
    moved = {"head.weight", "head.bias", "patch_proj.weight", "patch_proj.bias",
             "cls_token", "pos_embed"}
    for name in init:
        same = np.array_equal(best[name].data, init[name].data)
        assert same != (name in moved), name


def test_fc_head_gradient_closed_form(tiny_dataset):
    # for the FC policy: dL/d(head.weight) = (p - y) * embedding, dL/d(head.bias) = p - y
    manifest, _ = tiny_dataset
    params = vit.clone_params(vit.init_params(TINY_CONFIG, seed=4), select_trainable("FC"))
    rng = np.random.default_rng(0)
    for label in (0, 1):
        image = Tensor(rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32))
        tape = Tape()
        trace = vit.forward(image, params, TINY_CONFIG, tape=tape)
        p = sigmoid(trace.logit)
        grads = backprop(tape, Tensor(np.full((1, 1), p - label, dtype=np.float32)))
        assert set(grads) == {"head.weight", "head.bias"}
        expected_w = (p - label) * trace.embedding
        assert np.abs(grads["head.weight"].data.reshape(-1) - expected_w).max() < 1e-6
        assert abs(grads["head.bias"].data[0] - (p - label)) < 1e-6


def test_training_deterministic(tiny_dataset):
    manifest, protocol = tiny_dataset
    init = vit.init_params(TINY_CONFIG, seed=5)
    cfg = fast_cfg(epochs=3)
    best1, hist1 = train.train(manifest, protocol, init, TINY_CONFIG, cfg)
    best2, hist2 = train.train(manifest, protocol, init, TINY_CONFIG, cfg)
    assert hist1.train_loss == hist2.train_loss
    assert hist1.dev_loss == hist2.dev_loss
    assert hist1.initial_dev_loss == hist2.initial_dev_loss
    for name in best1:
        assert np.array_equal(best1[name].data, best2[name].data)


def test_training_identical_across_worker_counts(tiny_dataset, monkeypatch):
    manifest, protocol = tiny_dataset
    init = vit.init_params(TINY_CONFIG, seed=5)
    cfg = fast_cfg(epochs=2)
    monkeypatch.setenv("VITPAD_THREADS", "1")
    best1, hist1 = train.train(manifest, protocol, init, TINY_CONFIG, cfg)
    monkeypatch.setenv("VITPAD_THREADS", "4")
    best4, hist4 = train.train(manifest, protocol, init, TINY_CONFIG, cfg)
    assert hist1.train_loss == hist4.train_loss
    assert hist1.dev_loss == hist4.dev_loss
    for name in best1:
        assert np.array_equal(best1[name].data, best4[name].data)


def test_dev_loss_free_of_augmentation(tiny_dataset):
    manifest, protocol = tiny_dataset
    params = vit.init_params(TINY_CONFIG, seed=6)
    scores1 = train.score_samples(params, TINY_CONFIG, manifest, protocol.dev)
    scores2 = train.score_samples(params, TINY_CONFIG, manifest, protocol.dev)
    assert [r.score for r in scores1] == [r.score for r in scores2]


def test_empty_train_fold_rejected(tiny_dataset):
    manifest, protocol = tiny_dataset
    empty = data.Protocol("empty", [], protocol.dev, protocol.eval)
    with pytest.raises(ProtocolError):
        train.train(manifest, empty, vit.init_params(TINY_CONFIG, seed=0),
                    TINY_CONFIG, fast_cfg())


def test_divergence_reports_epoch_and_batch(tiny_dataset, monkeypatch):
    manifest, protocol = tiny_dataset
    init = vit.init_params(TINY_CONFIG, seed=2)
    monkeypatch.setattr(train, "bce_loss", lambda z, y: float("nan"))
    with pytest.raises(TrainingDiverged, match="epoch 1"):
        train.train(manifest, protocol, init, TINY_CONFIG, fast_cfg(epochs=1))


# -- scoring ------------------------------------------------------------------------

def test_score_zero_weights_give_half(tiny_dataset):
    manifest, _ = tiny_dataset
    params = {name: Tensor(np.zeros(shape, dtype=np.float32), name=name)
              for name, shape in vit.param_shapes(TINY_CONFIG).items()}
    ids = manifest.ids()[:4]
    scores = train.score_samples(params, TINY_CONFIG, manifest, ids)
    assert all(r.score == 0.5 for r in scores)


def test_scores_in_unit_interval_and_ordered(tiny_dataset):
    manifest, _ = tiny_dataset
    params = vit.init_params(TINY_CONFIG, seed=9)
    ids = list(reversed(manifest.ids()[:6]))
    scores = train.score_samples(params, TINY_CONFIG, manifest, ids)
    assert [r.sample_id for r in scores] == ids
    assert all(0.0 < r.score < 1.0 for r in scores)


def test_score_unreadable_image_names_sample(tiny_dataset, tmp_path):
    manifest, _ = tiny_dataset
    sample = manifest.samples[0]
    broken = data.Manifest(manifest.samples, base_dir=tmp_path)  # wrong root
    params = vit.init_params(TINY_CONFIG, seed=0)
    with pytest.raises(VitPadIOError, match=sample.sample_id):
        train.score_samples(params, TINY_CONFIG, broken, [sample.sample_id])


def test_trained_model_separates_synthetic_classes(tiny_dataset):
    manifest, protocol = tiny_dataset
    init = vit.init_params(TINY_CONFIG, seed=1)
    best, history = train.train(manifest, protocol, init, TINY_CONFIG,
                                fast_cfg(epochs=8, seed=1))
    assert history.dev_loss[-1] < history.initial_dev_loss
    scores = train.score_samples(best, TINY_CONFIG, manifest, protocol.eval)
    bona = [r.score for r in scores if r.label == "bonafide"]
    attack = [r.score for r in scores if r.label == "attack"]
    assert sum(bona) / len(bona) > sum(attack) / len(attack)


def test_history_csv(tmp_path, tiny_dataset):
    manifest, protocol = tiny_dataset
    init = vit.init_params(TINY_CONFIG, seed=2)
    _, history = train.train(manifest, protocol, init, TINY_CONFIG, fast_cfg())
    path = tmp_path / "history.csv"
    train.write_history_csv(history, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,train_loss,dev_loss,best"
    assert len(lines) == 2 + len(history.train_loss)
