import math

import numpy as np
import pytest

from prunedistill import autodiff as ad
from prunedistill.autodiff import ContractError, Tensor
from prunedistill.distill import (
    DistillConfig, SparsityViolation, TrainHistory, distill_loss, evaluate, train,
)
from prunedistill.docgen import GenConfig, gen_split
from prunedistill.model import Model, ModelConfig
from prunedistill.prune import apply_masks, magnitude_mask
from prunedistill.tokenizer import Tokenizer

TOK = Tokenizer()
CFG = ModelConfig(image_h=16, image_w=32, patch=8, d_enc=8, d_dec=8, n_enc_layers=1,
                  n_dec_layers=1, n_heads=2, d_ff=16, vocab_size=TOK.vocab_size, max_len=12)
GEN = GenConfig(image_h=16, image_w=32, lines=(1, 1), chars_per_line=(2, 3),
                splits={"train": 12, "val": 4}, noise=0.0)


@pytest.fixture(scope="module")
def data():
    return gen_split(GEN)


# ---------------------------------------------------------------- loss

def test_alpha_one_is_cross_entropy():
    rng = np.random.default_rng(0)
    s, t = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    targets = [1, 4, 0]
    got = distill_loss(Tensor(s), t, targets, 1.0, 2.0).item()
    assert got == ad.cross_entropy(Tensor(s), targets, ignore_id=0).item()


def test_identical_logits_alpha_zero():
    x = np.random.default_rng(1).normal(size=(4, 6))
    assert distill_loss(Tensor(x), x, [1, 2, 3, 4], 0.0, 3.0).item() == pytest.approx(0.0, abs=1e-15)


def reference_loss(s, t, targets, alpha, temp, ignore=0):
    """Per-position loops with math.exp/log only."""
    ce, kl, n = 0.0, 0.0, 0
    for row_s, row_t, y in zip(s, t, targets):
        if y == ignore:
            continue
        n += 1
        zs = math.log(sum(math.exp(v) for v in row_s))
        ce += zs - row_s[y]
        ps = [math.exp(v / temp) for v in row_t]
        qs = [math.exp(v / temp) for v in row_s]
        p = [v / sum(ps) for v in ps]
        q = [v / sum(qs) for v in qs]
        kl += sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q))
    return alpha * ce / n + (1 - alpha) * temp**2 * kl / n


def test_matches_reference_arithmetic():
    rng = np.random.default_rng(2)
    s, t = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    got = distill_loss(Tensor(s), t, [3, 1], 0.5, 2.0).item()
    assert abs(got - reference_loss(s, t, [3, 1], 0.5, 2.0)) < 1e-12


def test_pad_positions_ignored():
    rng = np.random.default_rng(3)
    s, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    full = distill_loss(Tensor(s), t, [2, 3, 0], 0.3, 1.5).item()
    assert abs(full - reference_loss(s[:2], t[:2], [2, 3], 0.3, 1.5)) < 1e-12


def test_continuous_in_alpha():
    rng = np.random.default_rng(4)
    s, t = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    vals = [distill_loss(Tensor(s), t, [1, 2, 3], a, 2.0).item() for a in (0.0, 1e-9, 1 - 1e-9, 1.0)]
    assert abs(vals[0] - vals[1]) < 1e-7 and abs(vals[2] - vals[3]) < 1e-7


def test_loss_gradient():
    rng = np.random.default_rng(5)
    s = ad.parameter(rng.normal(size=(2, 3, 5)))
    t = rng.normal(size=(2, 3, 5))
    targets = np.array([[1, 2, 0], [3, 0, 0]])
    assert ad.grad_check(lambda: distill_loss(s, t, targets, 0.4, 2.0), [s], n_coords=None) <= 1e-7


def test_loss_contract_errors():
    with pytest.raises(ContractError):
        distill_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 3)), [1, 1], 0.5, 0.0)
    with pytest.raises(ContractError):
        distill_loss(Tensor(np.zeros((2, 3))), np.zeros((2, 4)), [1, 1], 0.5, 1.0)
    with pytest.raises(ContractError):
        DistillConfig(alpha=1.5)
    with pytest.raises(ContractError):
        DistillConfig(temperature=-1.0)


# ---------------------------------------------------------------- training

def test_zero_steps_is_a_no_op(data):
    m = Model(CFG, seed=0)
    before = m.state_dict()
    out, hist = train(m, data["train"], DistillConfig(steps=0), val_samples=data["val"])
    assert hist.rows == [] and all(np.array_equal(before[k], v.data) for k, v in out.params.items())


def test_sparsity_constant_and_teacher_untouched(data):
    teacher = Model(CFG, seed=1)
    frozen = teacher.state_dict()
    student = teacher.copy("pruned")
    masks = magnitude_mask(student, 0.5)
    apply_masks(student, masks)
    cfg = DistillConfig(steps=12, check_every=5, eval_every=0, masks=masks, batch_size=4)
    out, hist = train(student, data["train"], cfg, teacher=teacher)
    assert [s for s, _ in hist.sparsity_checks] == [0, 5, 10, 12]
    assert len({n for _, n in hist.sparsity_checks}) == 1
    for name, m in masks.masks.items():
        pruned = out.params[name].data[~m]
        assert np.all(pruned == 0.0) and not np.signbit(pruned).any()
    assert all(np.array_equal(frozen[k], v.data) for k, v in teacher.params.items())


def test_violation_is_detected(data):
    student = Model(CFG, seed=2, variant="pruned")
    masks = magnitude_mask(student, 0.5)
    cfg = DistillConfig(steps=1, eval_every=0, masks=masks)
    with pytest.raises(SparsityViolation):
        train(student, data["train"], cfg)


def test_mismatches_fail_before_training(data):
    student = Model(CFG, seed=3)
    other = Model(ModelConfig(**{**CFG.to_dict(), "vocab_size": CFG.vocab_size + 1}))
    with pytest.raises(ContractError):
        train(student, data["train"], DistillConfig(steps=1), teacher=other)
    bad = magnitude_mask(Model(ModelConfig(**{**CFG.to_dict(), "d_ff": 8})), 0.5)
    with pytest.raises(ContractError):
        train(student, data["train"], DistillConfig(steps=1, masks=bad))


def test_runs_are_bit_reproducible(data):
    teacher = Model(CFG, seed=4)
    cfg = DistillConfig(steps=6, eval_every=3, batch_size=4, seed=11)
    a, ha = train(Model(CFG, seed=5), data["train"], cfg, teacher=teacher, val_samples=data["val"])
    b, hb = train(Model(CFG, seed=5), data["train"], cfg, teacher=teacher, val_samples=data["val"])
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert ha.losses == hb.losses
    assert [r["step"] for r in ha.rows] == [0, 3, 6]


def test_history_csv_round_trip():
    hist = TrainHistory(rows=[{"step": 0, "train_loss": float("nan"), "val_nted": 0.1, "wall_time_s": 0.0},
                              {"step": 5, "train_loss": 1.25, "val_nted": 0.3333333333333333,
                               "wall_time_s": 2.5}])
    text = hist.to_csv()
    assert text.splitlines()[0] == "step,train_loss,val_nted,wall_time_s"
    back = TrainHistory.from_csv(text)
    assert [r["step"] for r in back.rows] == [0, 5]
    assert back.rows[1]["val_nted"] == 0.3333333333333333
    assert math.isnan(back.rows[0]["train_loss"])


# ---------------------------------------------------------------- evaluation

def test_memorized_singleton_scores_one():
    gen = GenConfig(image_h=16, image_w=64, fields=(1, 1), value_len=(1, 1), splits={"train": 1})
    sample = gen_split(gen, "kie")["train"]
    m = Model(ModelConfig(**{**CFG.to_dict(), "image_w": 64, "d_enc": 16, "d_dec": 16}), seed=6)
    train(m, sample, DistillConfig(steps=200, lr=1e-2, warmup=10, eval_every=0))
    r = evaluate(m, sample, "kie")
    assert r["nted"] == 1.0 and r["f1"] == 1.0 and len(r["rows"]) == 1


def test_random_model_scores_low():
    test = gen_split(GenConfig(splits={"test": 50}))["test"]
    m = Model(ModelConfig(vocab_size=TOK.vocab_size), seed=7)
    r = evaluate(m, test)
    assert r["nted"] <= 0.2 and r["f1"] is None
    assert len(r["rows"]) == 50 and [row["sample_id"] for row in r["rows"]] == list(range(50))
