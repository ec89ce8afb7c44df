import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fetalseg import tensor as T
from fetalseg.data import CLASS_NAMES, PLANE_CLASSES, phantom_generate
from fetalseg.model import ModelConfig, build_model
from fetalseg.train import (
    DiceReport,
    TrainConfig,
    ablate_fractions,
    cross_validate,
    dice_coefficient,
    dice_loss,
    evaluate,
    kfold_subjects,
    run_arm,
    subsample_subjects,
    table1,
    train,
)

TINY = ModelConfig(scale=1 / 16)


@pytest.fixture(scope="module")
def phantoms():
    tr = phantom_generate(3, "TV", "voluson_e8", 0) + phantom_generate(3, "TC", "voluson_e8", 0)
    va = phantom_generate(1, "TV", "voluson_e8", 50) + phantom_generate(1, "TC", "voluson_e8", 50)
    te = phantom_generate(2, "TC", "voluson_p8", 99, split="test1")
    return tr, va, te


def copy_truth(samples):
    return np.stack([s.mask for s in samples])


# -- dice loss

def test_dice_loss_perfect_prediction():
    y = torch.randint(0, 11, (2, 6, 7), generator=torch.Generator().manual_seed(0))
    p = torch.nn.functional.one_hot(y, 11).permute(0, 3, 1, 2).double()
    assert dice_loss(p, y).item() < 1e-5


def test_dice_loss_uniform_2x2_closed_form():
    y = torch.tensor([[[0, 0], [1, 2]]])
    p = torch.full((1, 11, 2, 2), 1 / 11, dtype=torch.float64)
    eps = 1e-6
    # class c with n target pixels: intersection n/11, prediction mass 4/11
    terms = []
    for n in [2, 1, 1] + [0] * 8:
        terms.append((2 * n / 11 + eps) / (4 / 11 + n + eps))
    expected = 1 - sum(terms) / 11
    assert math.isclose(dice_loss(p, y).item(), expected, rel_tol=1e-12)


def test_dice_loss_gradient():
    y = torch.randint(0, 11, (2, 3, 4), generator=torch.Generator().manual_seed(1))
    z = torch.randn(2, 11, 3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    rep = T.grad_check(lambda a: dice_loss(T.softmax_channels(a), y), [z])
    assert rep.max_rel_error < 1e-4, rep


def test_dice_loss_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(1, 11, 4, 4), torch.zeros(1, 4, 5, dtype=torch.long))


# -- dice coefficient

def test_dice_coefficient_examples():
    m = np.zeros((20, 20), int)
    m[:5, :5] = 3
    assert dice_coefficient(m, m, 3) == 1.0
    a, b = np.zeros((20, 20), int), np.zeros((20, 20), int)
    a[:5, :5] = 3
    b[10:15, 10:15] = 3
    assert dice_coefficient(a, b, 3) == 0.0
    p, t = np.zeros((20, 20), int), np.zeros((20, 20), int)
    p[0:10, 0:10] = 1  # 100 px
    t[5:15, 0:10] = 1  # 100 px, 50 shared
    assert dice_coefficient(p, t, 1) == 0.5
    assert dice_coefficient(p, t, 4) is None
    with pytest.raises(ValueError):
        dice_coefficient(p, t[:5], 1)


def _count_oracle(p, t, c):
    inter = sp = st_ = 0
    for a, b in zip(p.ravel().tolist(), t.ravel().tolist()):
        sp += a == c
        st_ += b == c
        inter += a == c and b == c
    return None if sp + st_ == 0 else 2 * inter / (sp + st_)


def test_dice_matches_counting_oracle_1000_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 12, size=2))
        k = int(rng.integers(1, 11))
        p = rng.integers(0, k + 1, shape)
        t = rng.integers(0, k + 1, shape)
        c = int(rng.integers(0, k + 1))
        assert dice_coefficient(p, t, c) == _count_oracle(p, t, c)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 10))
def test_dice_symmetric(seed, c):
    rng = np.random.default_rng(seed)
    p, t = rng.integers(0, 11, (2, 9, 9))
    assert dice_coefficient(p, t, c) == dice_coefficient(t, p, c)


# -- evaluate

def test_evaluate_identity_and_background(phantoms):
    tr, _, _ = phantoms
    rep = evaluate(copy_truth, tr)
    assert all(v == 1.0 for v in rep.per_class().values())
    assert len(rep.per_class()) == 10 and rep.mean() == 1.0
    zero = evaluate(lambda s: np.zeros((len(s), 160, 288), np.uint8), tr)
    assert all(v == 0.0 for v in zero.per_class().values()) and zero.mean() == 0.0


def test_evaluate_only_scores_plane_classes(phantoms):
    tr, _, _ = phantoms
    tv = [s for s in tr if s.plane == "TV"]
    rep = evaluate(copy_truth, tv)
    assert set(rep.per_class()) == {CLASS_NAMES[c] for c in PLANE_CLASSES["TV"]}


def test_evaluate_order_invariant(phantoms):
    tr, _, _ = phantoms
    model = build_model(TINY, 0)
    a = evaluate(model, tr)
    b = evaluate(model, tr[::-1])
    assert a.per_class() == pytest.approx(b.per_class(), abs=1e-12)


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(copy_truth, [])


def test_report_csv_roundtrip(tmp_path, phantoms):
    tr, _, _ = phantoms
    rep = evaluate(copy_truth, tr, "test2", "noda", 0.4, 3)
    rep.write_csv(tmp_path / "r.csv")
    back = DiceReport.read_csv(tmp_path / "r.csv")
    assert [r["dice"] for r in back.rows] == [r["dice"] for r in rep.rows]
    assert back.rows[0]["test_set"] == "test2" and back.rows[0]["arm"] == "noda"


def test_table1_layout():
    rep = DiceReport()
    for t in ("test1", "test2", "test3", "test4"):
        for arm in ("da", "noda"):
            rep.add(t, arm, 1.0, "", "mean", 0.5)
    cells = table1(rep)["ours"]
    assert list(cells) == [(t, a) for t in ("test1", "test2", "test3", "test4") for a in ("da", "noda")]


# -- training

def test_training_is_deterministic(phantoms):
    tr, va, _ = phantoms
    cfg = TrainConfig(max_epochs=2, seed=4)
    a = run_arm(tr, va, TINY, cfg)
    b = run_arm(tr, va, TINY, cfg)
    assert a.log == b.log
    assert a.audit == b.audit
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_no_da_draws_nothing(phantoms):
    tr, va, _ = phantoms
    res = run_arm(tr, va, TINY, TrainConfig(max_epochs=1, augmentation=False))
    assert res.augmentation_draws == 0 and res.audit == []
    da = run_arm(tr, va, TINY, TrainConfig(max_epochs=1, augmentation=True))
    assert len(da.audit) == len(tr)


def test_best_validation_checkpoint_is_returned(phantoms):
    tr, va, _ = phantoms
    res = run_arm(tr, va, TINY, TrainConfig(max_epochs=3, augmentation=False))
    assert res.best_val_loss == min(r["val_loss"] for r in res.log)
    assert res.log[res.best_epoch]["val_loss"] == res.best_val_loss


def test_train_log_csv(tmp_path, phantoms):
    tr, va, _ = phantoms
    res = run_arm(tr, va, TINY, TrainConfig(max_epochs=2, augmentation=False))
    res.write_log(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 3


def test_train_needs_both_splits(phantoms):
    tr, _, _ = phantoms
    with pytest.raises(ValueError):
        train(build_model(TINY, 0), tr, TrainConfig(max_epochs=1))


def test_non_finite_loss_names_batch(phantoms):
    tr, va, _ = phantoms
    model = build_model(TINY, 0)
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(T.NumericError, match="epoch 0, batch 0"):
        train(model, tr, TrainConfig(max_epochs=1, augmentation=False), val_samples=va)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


@pytest.mark.slow
def test_loss_decreases_over_first_50_steps():
    from fetalseg.experiments import probe_loss_trace

    monotone = 0
    for seed in range(5):
        trace = probe_loss_trace(seed, steps=50)
        assert len(trace) == 51
        monotone += bool(np.all(np.diff(trace) < 0))
    assert monotone >= 4


# -- ablation and cross-validation

def _subjects(n):
    out = []
    for i in range(n):
        s = phantom_generate(1, "TV", "voluson_e8", i)[0]
        out.append(s)
    return out


def test_subsample_fraction_counts():
    samples = _subjects(20)
    for frac in (0.2, 0.4, 0.6, 0.8):
        got = {s.subject_id for s in subsample_subjects(samples, frac, 0)}
        assert abs(len(got) - frac * 20) <= 1
    assert subsample_subjects(samples, 1.0, 0) == samples
    with pytest.raises(ValueError):
        subsample_subjects(samples[:2], 0.2, 0)
    with pytest.raises(ValueError):
        subsample_subjects(samples, 0.0, 0)


def test_ablation_rows_and_full_fraction_identity(phantoms):
    tr, va, te = phantoms
    cfg = TrainConfig(max_epochs=1, seed=2)
    tests = {"test1": te, "test2": te[:1]}
    models = {}
    rep = ablate_fractions(tr, va, tests, TINY, cfg, fractions=(0.5, 1.0),
                           on_result=lambda f, a, r: models.setdefault((f, a), r))
    means = [r for r in rep.rows if r["class_name"] == "mean"]
    assert len(means) == 2 * 2 * 2
    standalone = run_arm(tr, va, TINY, TrainConfig(max_epochs=1, seed=2, augmentation=True))
    ablated = models[(1.0, "da")]
    assert ablated.log == standalone.log
    a, b = ablated.model.state_dict(), standalone.model.state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert (evaluate(standalone.model, te, "test1", "da", 1.0).rows
            == rep.filter(fraction=1.0, arm="da", test_set="test1").rows)


def test_kfold_partition():
    samples = _subjects(50)
    folds = kfold_subjects(samples, 5, 0)
    assert [len(f) for f in folds] == [10] * 5
    allsubj = [x for f in folds for x in f]
    assert sorted(allsubj) == sorted({s.subject_id for s in samples})
    with pytest.raises(ValueError):
        kfold_subjects(samples, 1, 0)
    with pytest.raises(ValueError):
        kfold_subjects(samples[:3], 5, 0)


def test_cross_validation_aggregate(phantoms):
    tr, _, _ = phantoms
    res = cross_validate(tr, TINY, TrainConfig(max_epochs=1, augmentation=False), k=3)
    per_fold = [r["dice"] for r in res.report.rows if r["class_name"] == "mean" and r["fold"] in (0, 1, 2)]
    assert len(per_fold) == 3
    agg = res.report.filter(fold="mean").mean()
    assert abs(agg - sum(per_fold) / 3) < 1e-9
    assert abs(res.report.filter(fold="std").mean() - np.std(per_fold)) < 1e-9
