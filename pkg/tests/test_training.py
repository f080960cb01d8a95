import logging
import math

import numpy as np
import pytest

from trinity import checkpoint
from trinity import tensor as T
from trinity.assignment import Assignment, hungarian
from trinity.dataset_io import VOID, LabelMap
from trinity.errors import ConfigError, ContractError
from trinity.model import ModelOutput, TrinityNet
from trinity.tensor import IGNORE, Tensor
from trinity.training import (TrainConfig, aux_split_loss, binary_split_target, build_matched_target,
                              match_cost_matrix, matched_cross_entropy, soft_dice, total_loss, train)

from conftest import max_grad_error, tiny_config, tiny_sample


# -- split target / aux loss --------------------------------------------------------------
def test_split_target_uniform_images():
    k = 2
    assert not binary_split_target(LabelMap(np.full((16, 16), 3, np.uint16), k), 8).any()
    assert binary_split_target(LabelMap(np.zeros((16, 16), np.uint16), k), 8).all()


def test_split_target_majority_vote():
    codes = np.full((8, 16), 2, dtype=np.uint16)  # CA everywhere
    codes.reshape(-1)[:0] = 0
    left = codes[:, :8].reshape(-1)
    left[:33] = 1  # 33 of 64 pixels CS
    codes[:, :8] = left.reshape(8, 8)
    right = codes[:, 8:].reshape(-1)
    right[:32] = 0  # exact half
    codes[:, 8:] = right.reshape(8, 8)
    assert binary_split_target(LabelMap(codes, 2), 8).tolist() == [[1.0, 0.0]]


def test_split_target_void_counts_as_not_cs():
    codes = np.full((4, 4), VOID, dtype=np.uint16)
    codes[:2] = 0
    assert binary_split_target(LabelMap(codes, 1), 4).tolist() == [[0.0]]


def test_aux_loss_closed_forms():
    tgt = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert aux_split_loss(Tensor(np.zeros((4, 2, 2))), tgt, 2).item() == pytest.approx(math.log(2), rel=1e-15)
    logits = np.empty((4, 2, 2))
    logits[:2] = np.where(tgt > 0, 100.0, -100.0)
    logits[2:] = -logits[:2]
    assert aux_split_loss(Tensor(logits), tgt, 2).item() < 1e-40


def test_aux_loss_gradient(rng):
    x = Tensor(rng.normal(size=(5, 3, 3)), requires_grad=True)
    tgt = (rng.random((3, 3)) < 0.5).astype(float)
    T.backward(aux_split_loss(x, tgt, 2))
    err = max_grad_error(lambda: aux_split_loss(Tensor(x.data), tgt, 2).item(), [x.data], [x.grad], 20, rng)
    assert err < 1e-3


# -- matching cost ------------------------------------------------------------------------------
def test_dice_cost_identical_and_empty():
    g = np.array([[1, 0], [1, 1]], dtype=bool)
    probs = np.stack([g.astype(float), np.zeros((2, 2))])
    costs, kept = match_cost_matrix(probs, [g])
    assert kept == [0]
    assert costs[0, 0] == pytest.approx(0.0, abs=1e-7)
    assert costs[1, 0] == pytest.approx(1.0, abs=1e-12)


def test_dice_cost_hand_case():
    probs = np.array([[[0.5, 0.25], [0.0, 1.0]], [[0.1, 0.2], [0.3, 0.4]]])
    g = np.array([[True, True], [False, False]])
    costs, _ = match_cost_matrix(probs, [g])
    # slot 0: 2*0.75 / (1.75 + 2); slot 1: 2*0.3 / (1.0 + 2)
    np.testing.assert_allclose(costs[:, 0], [1 - 1.5 / (3.75 + 1e-7), 1 - 0.6 / (3.0 + 1e-7)], rtol=0, atol=1e-9)
    assert soft_dice(probs[0], g) == pytest.approx(1.5 / (3.75 + 1e-7), abs=1e-12)


def test_empty_region_is_skipped(caplog):
    g = np.zeros((2, 2), dtype=bool)
    h = np.ones((2, 2), dtype=bool)
    with caplog.at_level(logging.WARNING):
        costs, kept = match_cost_matrix(np.ones((3, 2, 2)) / 3, [g, h])
    assert kept == [1] and costs.shape == (3, 1)
    assert "empty" in caplog.text


def test_ce_cost_alternative():
    probs = np.array([[[0.5, 0.5]], [[1.0, 0.25]]])
    costs, _ = match_cost_matrix(probs, [np.array([[True, True]])], kind="ce")
    np.testing.assert_allclose(costs[:, 0], [math.log(2), math.log(4) / 2], rtol=1e-12)


# -- matched target ------------------------------------------------------------------------------
def test_target_without_regions():
    codes = np.array([[0, 1], [VOID, 1]], dtype=np.uint16)
    mt = build_matched_target(LabelMap(codes, 2), Assignment((), 0.0))
    assert mt.target.tolist() == [[0, 1], [IGNORE, 1]]


def test_target_slot_three_with_sixteen_classes():
    codes = np.array([[4, 16], [16, 16]], dtype=np.uint16)
    mt = build_matched_target(LabelMap(codes, 16), Assignment(((3, 0),), 0.0))
    assert mt.target.tolist() == [[4, 19], [19, 19]]


def test_target_permutation_only_moves_ca_channels():
    codes = np.array([[0, 2, 3], [VOID, 4, 1]], dtype=np.uint16)
    labels = LabelMap(codes, 2)
    a = build_matched_target(labels, Assignment(((0, 0), (1, 1), (2, 2)), 0.0)).target
    b = build_matched_target(labels, Assignment(((2, 0), (0, 1), (1, 2)), 0.0)).target
    cs_or_void = (codes < 2) | (codes == VOID)
    np.testing.assert_array_equal(a[cs_or_void], b[cs_or_void])
    remap = {2: 4, 3: 2, 4: 3}
    np.testing.assert_array_equal([remap[v] for v in a[~cs_or_void]], b[~cs_or_void])


def test_target_unassigned_region():
    codes = np.array([[2, 3]], dtype=np.uint16)
    with pytest.raises(ContractError):
        build_matched_target(LabelMap(codes, 2), Assignment(((0, 0),), 0.0))


# -- total loss --------------------------------------------------------------------------------
def perfect_output(labels, n_slots, n_split=(2, 2), scale=50.0):
    """Logits that put all mass on the identity-matched channel; aux logits zero."""
    k = labels.num_cs
    h, w = labels.codes.shape
    logits = np.zeros((k + n_slots, h, w))
    codes = labels.codes.astype(int)
    for c in range(k + labels.num_regions):
        logits[c][codes == c] = scale
    aux = np.zeros((sum(n_split), h // 4, w // 4))
    return ModelOutput(Tensor(logits), Tensor(aux), None, None, k)


def test_perfect_logits_leave_only_aux():
    _, labels = tiny_sample(1)
    out = perfect_output(labels, 3)
    loss, ce, aux, _ = total_loss(out, labels, 0.5, 4, 2)
    assert ce.item() < 1e-20
    assert loss.item() == pytest.approx(0.5 * math.log(2), rel=1e-12)


def test_zero_lambda_is_matched_ce(rng):
    m = TrinityNet(tiny_config())
    image, labels = tiny_sample(2)
    out = m.forward(image)
    loss, ce, _, match = total_loss(out, labels, 0.0, 4, 2)
    assert loss.item() == ce.item()
    assert ce.item() == matched_cross_entropy(Tensor(out.logits.data), match.target).item()
    assert loss.item() >= 0


def test_void_pixels_do_not_matter(rng):
    m = TrinityNet(tiny_config())
    image, labels = tiny_sample(3)
    out = m.forward(image)
    _, ce, _, match = total_loss(out, labels, 0.5, 4, 2)
    logits = out.logits.data.copy()
    void = labels.codes == VOID
    assert void.any()
    logits[:, void] += rng.normal(size=(logits.shape[0], int(void.sum()))) * 10
    assert matched_cross_entropy(Tensor(logits), match.target).item() == ce.item()


def test_loss_invariant_to_slot_permutation():
    m = TrinityNet(tiny_config(num_slots=4))
    image, labels = tiny_sample(4, num_regions=3)
    before = total_loss(m.forward(image), labels, 0.5, 4, 2)[0].item()
    m.permute_slots([3, 1, 0, 2])
    after = total_loss(m.forward(image), labels, 0.5, 4, 2)[0].item()
    assert abs(after - before) < 1e-9


# -- training loop ---------------------------------------------------------------------------------
def tiny_dataset(m, n=6):
    out = []
    for s in range(n):
        image, labels = tiny_sample(100 + s)
        out.append((m.encode(image), labels))
    return out


def test_zero_lr_keeps_parameters():
    m = TrinityNet(tiny_config())
    before = m.state_dict()
    train(m, tiny_dataset(m, 2), TrainConfig(lr=0.0, steps=1, batch_size=2))
    after = m.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_is_reproducible():
    traces, states = [], []
    for _ in range(2):
        m = TrinityNet(tiny_config())
        res = train(m, tiny_dataset(m), TrainConfig(lr=1e-2, steps=4, batch_size=3, seed=9))
        traces.append(res.csv())
        states.append(checkpoint.dumps(m.state_dict()))
    assert traces[0] == traces[1] and states[0] == states[1]


def test_loss_goes_down_on_a_fixed_batch():
    m = TrinityNet(tiny_config())
    data = tiny_dataset(m, 2)
    res = train(m, data, TrainConfig(lr=1e-2, steps=40, batch_size=2))
    assert res.trace[-1][1] < res.trace[0][1]


def test_csv_and_checkpoints(tmp_path):
    m = TrinityNet(tiny_config())
    res = train(m, tiny_dataset(m, 2), TrainConfig(lr=1e-3, steps=4, batch_size=1, checkpoint_every=2),
                checkpoint_dir=tmp_path)
    lines = res.csv().splitlines()
    assert lines[0] == "step,total,ce,aux" and len(lines) == 5
    step, total, ce, aux = lines[1].split(",")
    assert step == "0" and float(total) == pytest.approx(float(ce) + 0.5 * float(aux), rel=1e-8)
    assert [p.name for p in res.checkpoints] == ["step000002.trin", "step000004.trin"]
    assert checkpoint.load(res.checkpoints[-1]).keys() == m.state_dict().keys()


def test_train_config_errors():
    m = TrinityNet(tiny_config())
    with pytest.raises(ConfigError):
        train(m, [], TrainConfig())
    for bad in (dict(lr=-1.0), dict(steps=0), dict(batch_size=0), dict(match_cost="l2")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_hungarian_used_in_matching_is_optimal():
    # the matcher inside total_loss must pick the Dice-optimal slots
    m = TrinityNet(tiny_config(num_slots=4))
    image, labels = tiny_sample(5, num_regions=3)
    out = m.forward(image)
    _, _, _, match = total_loss(out, labels, 0.5, 4, 2)
    z = out.logits.data - out.logits.data.max(axis=0)
    probs = np.exp(z) / np.exp(z).sum(axis=0)
    costs, _ = match_cost_matrix(probs[2:], labels.region_masks())
    assert match.assignment.total_cost == pytest.approx(hungarian(costs).total_cost, abs=1e-12)
