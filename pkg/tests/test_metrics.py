import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpformer.errors import InputError
from cpformer.metrics import MetricsReport, auc_mann_whitney, compute_metrics, macro_f1

from oracles import compare_report, naive_metrics, random_instance


def test_hand_example():
    probs = np.array([[0.9, 0.2], [0.6, 0.7], [0.3, 0.4], [0.1, 0.8]])
    y = np.array([[1, 0], [0, 1], [1, 0], [0, 1]])
    rep = compute_metrics(probs, y)
    # class 0: tp=1 fp=1 fn=1; class 1: tp=2 fp=0 fn=0
    assert rep.precision == [0.5, 1.0] and rep.recall == [0.5, 1.0]
    assert rep.f1 == [0.5, 1.0] and rep.macro_f1 == 0.75
    assert rep.hamming_accuracy == 0.75
    assert rep.auc == [0.75, 1.0]
    assert rep.prediction_rate_matrix == [[0.5, 0.0], [0.5, 1.0]]


def test_zero_division_and_undefined_auc():
    probs = np.array([[0.1, 0.9], [0.2, 0.8]])
    y = np.array([[0, 1], [0, 1]])
    rep = compute_metrics(probs, y)
    assert rep.f1[0] == 0.0 and rep.precision[0] == 0.0 and rep.recall[0] == 0.0
    assert rep.auc == [None, None] and rep.macro_auc is None
    assert rep.prediction_rate_matrix[0] == [0.0, 0.0]


def test_threshold_boundary_is_inclusive():
    rep = compute_metrics(np.array([[0.5], [0.49999]]), np.array([[1], [0]]), np.array([0.5]))
    assert rep.f1 == [1.0]


def test_perfect_and_complement():
    y = (np.random.default_rng(0).uniform(size=(30, 6)) < 0.5).astype(float)
    y[0], y[1] = 1, 0
    rep = compute_metrics(y, y)
    assert rep.hamming_accuracy == 1.0 and rep.macro_f1 == 1.0 and rep.macro_auc == 1.0
    comp = compute_metrics(1 - y, y)
    assert comp.hamming_accuracy == 0.0 and comp.macro_f1 == 0.0 and comp.macro_auc == 0.0


def test_contracts():
    with pytest.raises(InputError):
        compute_metrics(np.zeros((3, 6)), np.zeros((3, 5)))
    with pytest.raises(InputError):
        compute_metrics(np.zeros((0, 6)), np.zeros((0, 6)))
    with pytest.raises(InputError):
        compute_metrics(np.zeros((3, 6)), np.zeros((3, 6)), np.full(5, 0.5))


def test_report_serialization(tmp_path):
    rep = compute_metrics(np.random.default_rng(1).uniform(size=(10, 6)),
                          (np.random.default_rng(2).uniform(size=(10, 6)) < 0.5).astype(int))
    text = rep.to_json(tmp_path / "m.json")
    back = MetricsReport.from_dict(__import__("json").loads((tmp_path / "m.json").read_text()))
    assert back == rep and '"classes"' in text


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_matches_naive_oracle(seed):
    probs, targets, th = random_instance(np.random.default_rng(seed), n_max=60)
    assert compare_report(compute_metrics(probs, targets, th), naive_metrics(probs, targets, th)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["cube", "logit", "exp", "affine"]))
def test_auc_invariant_under_monotone_transform(seed, kind):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.01, 0.99, size=40)
    y = rng.uniform(size=40) < 0.4
    y[:2] = [True, False]
    f = {"cube": lambda v: v ** 3, "logit": lambda v: np.log(v / (1 - v)),
         "exp": np.exp, "affine": lambda v: 3 * v - 7}[kind]
    assert auc_mann_whitney(f(s), y) == pytest.approx(auc_mann_whitney(s, y), abs=1e-15)


def test_auc_ties_count_half():
    assert auc_mann_whitney(np.array([0.5, 0.5]), np.array([True, False])) == 0.5
    assert auc_mann_whitney(np.array([0.4, 0.5, 0.5]), np.array([True, True, False])) == 0.25


def test_macro_f1_shortcut():
    p = np.random.default_rng(3).uniform(size=(20, 6))
    y = (p > 0.4).astype(int)
    assert macro_f1(p, y) == compute_metrics(p, y).macro_f1
