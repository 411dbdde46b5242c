
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cect.config import DEFAULT_GROUPS, THIRD, load_config
from cect.data import ImageSet, SplitSpec, split, synth_generate
from cect.errors import ContractError, ValidationError
from cect.evaluation import ConfusionMatrix, confusion, evaluate, metrics, predict_labels
from cect.experiments import (
    SWEEP_COLUMNS,
    ABLATION_ROWS,
    AblationRow,
    Splits,
    ablate,
    ablation_model,
    derive_groups,
    sweep,
    train_and_test,
)
from cect.model import CECT, EncoderClassifier, TransformerOnly

# counts and reported percentages from the radiography CECT row
RADIOGRAPHY = ConfusionMatrix(tp=348, fp=12, fn=14, tn=1007)
REPORTED = {"acc": 98.1, "npv": 98.6, "ppv": 96.7, "sen": 96.1, "spe": 98.8, "fos": 96.4}


def test_radiography_metrics_reproduce_reported_row():
    m = metrics(RADIOGRAPHY)
    for key, pct in REPORTED.items():
        assert abs(100 * getattr(m, key) - pct) <= 0.05, key


def test_radiography_counts_from_predictions():
    labels = np.r_[np.ones(362, int), np.zeros(1019, int)]
    pred = labels.copy()
    pred[:14] = 0  # missed positives
    pred[362 : 362 + 12] = 1  # false alarms
    assert confusion(pred, labels) == RADIOGRAPHY
    assert RADIOGRAPHY.total == 362 + 1019 and RADIOGRAPHY.fp + RADIOGRAPHY.fn == 26


def test_all_correct_positives():
    assert confusion(np.ones(5, int), np.ones(5, int)) == ConfusionMatrix(5, 0, 0, 0)


def test_random_case_matches_brute_force(rng):
    pred, lab = rng.integers(0, 2, 20), rng.integers(0, 2, 20)
    counts = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for p, t in zip(pred, lab):
        counts[("t" if p == t else "f") + ("p" if p == 1 else "n")] += 1
    assert confusion(pred, lab) == ConfusionMatrix(**counts)


def test_all_correct_metrics_are_one():
    m = metrics(ConfusionMatrix(4, 0, 0, 6))
    assert all(getattr(m, k) == 1.0 for k in REPORTED)


def test_symmetric_case():
    m = metrics(ConfusionMatrix(25, 25, 25, 25))
    assert all(getattr(m, k) == 0.5 for k in REPORTED)


def test_undefined_metrics_are_none_not_zero():
    m = metrics(ConfusionMatrix(0, 0, 0, 10))
    assert m.ppv is None and m.sen is None and m.fos is None
    assert m.acc == 1.0 and m.spe == 1.0 and m.npv == 1.0


def test_empty_matrix_rejected():
    with pytest.raises(ContractError):
        metrics(ConfusionMatrix(0, 0, 0, 0))


def test_length_mismatch_rejected():
    with pytest.raises(ContractError):
        confusion(np.zeros(3, int), np.zeros(4, int))


def test_argmax_tie_goes_negative():
    logits = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1e-9], [2.0, 1.0]])
    np.testing.assert_array_equal(predict_labels(logits), [0, 0, 1, 0])


counts = st.integers(0, 10_000)


@settings(max_examples=300)
@given(tp=counts, fp=counts, fn=counts, tn=counts)
def test_metric_identities(tp, fp, fn, tn):
    cm = ConfusionMatrix(tp, fp, fn, tn)
    if cm.total == 0:
        return
    m = metrics(cm)
    p, n = cm.positives, cm.negatives
    sen = m.sen or 0.0
    spe = m.spe or 0.0
    assert abs(m.acc - (sen * p + spe * n) / (p + n)) < 1e-12
    if m.ppv is not None and m.sen is not None and m.ppv + m.sen > 0:
        assert abs(m.fos - 2 * m.ppv * m.sen / (m.ppv + m.sen)) < 1e-12
    for k in REPORTED:
        v = getattr(m, k)
        assert v is None or 0.0 <= v <= 1.0


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_metrics_self_consistent_with_raw_predictions(pairs):
    pred, lab = map(np.array, zip(*pairs))
    cm = confusion(pred, lab)
    m = metrics(cm)
    assert cm.total == len(pairs)
    assert m.acc == (pred == lab).mean()


# coefficient groups ---------------------------------------------------------------------

def test_default_groups_are_the_seven_in_order():
    assert [g.as_tuple() for g in DEFAULT_GROUPS] == [
        (0.8, 0.1, 0.1), (0.6, 0.2, 0.2), (0.1, 0.8, 0.1), (0.2, 0.6, 0.2),
        (0.1, 0.1, 0.8), (0.2, 0.2, 0.6), (THIRD, THIRD, THIRD),
    ]


def test_groups_follow_from_the_selection_rule():
    assert set(derive_groups()) == {g.as_tuple() for g in DEFAULT_GROUPS}


# harness ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def micro(tmp_path_factory):
    cfg = load_config(preset="micro", overrides={"train.epochs": 1})
    m = synth_generate(5, 32, 0, tmp_path_factory.mktemp("d"))
    parts = split(m, SplitSpec((0.6, 0.2, 0.2), 0))
    return cfg, Splits(*(ImageSet(p, 32) for p in parts))


def test_single_group_sweep_equals_one_fit(micro):
    cfg, splits = micro
    (row,) = sweep(cfg, splits, groups=[cfg.model.coefficients])
    direct = train_and_test(CECT(cfg.model, cfg.seed), splits, cfg)
    assert row.outcome.run.step_losses == direct.run.step_losses
    assert row.outcome.metrics == direct.metrics


def test_default_sweep_has_seven_rows_and_table_columns(micro):
    cfg, splits = micro
    rows = sweep(cfg, splits)
    assert len(rows) == 7
    assert [tuple(r.to_dict()) for r in rows] == [SWEEP_COLUMNS] * 7
    assert [r.coefficients for r in rows] == list(DEFAULT_GROUPS)
    again = sweep(cfg, splits, groups=[DEFAULT_GROUPS[3]])
    assert again[0].to_dict() == rows[3].to_dict()


def test_sweep_keeps_partial_results(micro, monkeypatch):
    cfg, splits = micro
    import cect.experiments as ex

    real = ex.train_and_test
    calls = []

    def flaky(model, *a, **k):
        calls.append(1)
        if len(calls) == 2:
            raise ex.ValidationError("boom")
        return real(model, *a, **k)

    monkeypatch.setattr(ex, "train_and_test", flaky)
    rows = sweep(cfg, splits, groups=DEFAULT_GROUPS[:3])
    assert [r.outcome.error is None for r in rows] == [True, False, True]
    assert rows[1].to_dict()["acc"] is None


def test_ablation_rows_build_expected_models(micro):
    cfg, _ = micro
    kinds = [type(ablation_model(r, cfg)[0]) for r in ABLATION_ROWS]
    assert kinds == [EncoderClassifier] * 3 + [TransformerOnly] + [CECT] * 3
    assert [ablation_model(r, cfg)[0].branch for r in ABLATION_ROWS[:3]] == ["SD1", "SD2", "SD3"]
    sd3_only, cfg3 = ablation_model(ABLATION_ROWS[4], cfg)
    assert set(sd3_only.encoders) == {"SD3"} and cfg3.enabled_branches == ("SD3",)
    assert ABLATION_ROWS[4].to_dict()["s112"] and ABLATION_ROWS[4].to_dict()["s224"] and not ABLATION_ROWS[4].to_dict()["s56"]


@pytest.mark.parametrize("row", [
    AblationRow(False, True, True, frozenset({224}), (0, 0, 1)),  # TDB without CEB
    AblationRow(True, False, True, frozenset({112, 224}), (0, 0, 1)),
    AblationRow(True, False, False, frozenset({28, 56})),
    AblationRow(True, True, True, frozenset({56, 224}), (0, 0, 1)),
])
def test_inconsistent_rows_rejected(row):
    with pytest.raises(ValidationError):
        row.validate()


def test_ablation_full_row_replays_main_run(micro):
    cfg, splits = micro
    results = ablate(cfg, splits)
    assert len(results) == 7 and all(r.outcome.error is None for r in results)
    main = train_and_test(CECT(cfg.model, cfg.seed), splits, cfg)
    full = results[-1].outcome
    assert full.run.step_losses == main.run.step_losses
    assert full.metrics.acc == main.metrics.acc


def test_evaluate_reports_loss_and_counts(micro):
    cfg, splits = micro
    x, y = splits.test.batch(range(len(splits.test)))
    ev = evaluate(CECT(cfg.model), x, y)
    assert ev.report.cm.total == len(y) and ev.loss > 0
    assert ev.logits.shape == (len(y), 2)
