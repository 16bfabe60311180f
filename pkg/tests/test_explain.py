import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from chargepredict.data import NUM_FLAT_FEATURES, Dataset, flat_feature_names
from chargepredict.explain import (ExplainError, ImportanceReport, TransitionTable, attention_importance,
                                   causality_table, correlation_table, default_level_feature_map, emit_report,
                                   level_shares, qicvn_importance)
from chargepredict.models import Checkpoint, Scaler
from chargepredict.nn import LSTMClassifier
from chargepredict.qicvn import QICVNClassifier, WindowSpec
from chargepredict.train import TrainConfig, train


def with_history(sample, levels, final_level, task="any"):
    return type(sample)(**{**sample.__dict__, "history_levels": tuple(levels), "final_level": final_level,
                           "task": task, "label": int(final_level > 0)})


@pytest.fixture(scope="module")
def test_set(small_any):
    return small_any[1].subset(range(60))


def flat_attention_ckpt(seed=0, task="any"):
    model = LSTMClassifier(1, kind="bilstm_attn", hidden=3, layers=1, attn_dim=3, layout="flat", seed=seed)
    return Checkpoint(model, task, Scaler.identity(1))


def test_attention_importance_rows_are_distributions(test_set):
    rep = attention_importance(flat_attention_ckpt(), test_set)
    assert rep.rows.shape == (len(test_set), NUM_FLAT_FEATURES)
    np.testing.assert_allclose(rep.rows.sum(axis=1), 1.0, atol=1e-9)
    assert abs(rep.mean.sum() - 1.0) <= 1e-9
    assert rep.feature_names == flat_feature_names()


def test_equal_attention_scores_give_uniform_importance(test_set):
    ck = flat_attention_ckpt()
    ck.model.attn.v_a.data[...] = 0.0
    rep = attention_importance(ck, test_set)
    np.testing.assert_allclose(rep.rows, 1.0 / NUM_FLAT_FEATURES, atol=1e-15)


def test_attention_importance_requires_attention_and_flat_layout(test_set):
    no_attn = Checkpoint(LSTMClassifier(1, kind="bilstm", layout="flat"), "any", Scaler.identity(1))
    with pytest.raises(ExplainError, match="attention"):
        attention_importance(no_attn, test_set)
    seq = Checkpoint(LSTMClassifier(29, kind="bilstm_attn"), "any", Scaler.identity(29))
    with pytest.raises(ExplainError, match="flat"):
        attention_importance(seq, test_set)


def qicvn_ckpt(window=None):
    model = QICVNClassifier(NUM_FLAT_FEATURES, dim=3, measurements=2, window=window, seed=0)
    return Checkpoint(model, "any", Scaler.identity(NUM_FLAT_FEATURES))


def test_qicvn_importance_uniform_and_zeroed_feature(test_set):
    ck = qicvn_ckpt()
    E = ck.model.embedding
    E.amp_W.data[...] = 0.0
    E.amp_b.data[...] = 1.0  # identical norms for every feature
    rep = qicvn_importance(ck, test_set)
    np.testing.assert_allclose(rep.rows, 1.0 / NUM_FLAT_FEATURES, atol=1e-15)
    E.amp_b.data[5] = 0.0  # feature 5 now has zero amplitude
    rep = qicvn_importance(ck, test_set)
    others = np.delete(rep.rows, 5, axis=1)
    np.testing.assert_allclose(rep.rows[:, 5], 1.0 / (1.0 + (NUM_FLAT_FEATURES - 1) * np.exp(np.sqrt(3.0))),
                               rtol=1e-12)
    assert np.all(rep.rows[:, 5] < others.min(axis=1))
    np.testing.assert_allclose(rep.rows.sum(axis=1), 1.0, atol=1e-9)


def test_qicvn_importance_rejects_multiple_windows(test_set):
    with pytest.raises(ExplainError, match="all-features window"):
        qicvn_importance(qicvn_ckpt(WindowSpec("sliding", 3)), test_set)


def test_correlation_table_hand_counts(test_set):
    base = test_set.samples[0]
    samples = [with_history(base, (3, 2), 1), with_history(base, (1, 3), 1), with_history(base, (2,), 1),
               with_history(base, (3, 3), 2), with_history(base, (3,), 0)]
    t = correlation_table(Dataset(samples, "test", "any"))
    assert t.column(1) == [1 / 3, 2 / 3, 0.0]  # lowest history levels 2, 1, 2
    assert t.column(2) == [0.0, 0.0, 1.0]
    assert t.column(3) == [None, None, None]
    assert t.counts == [3, 1, 0]


def test_correlation_all_level_one_histories(test_set):
    base = test_set.samples[0]
    samples = [with_history(base, (1, 3), L) for L in (1, 2, 3, 2)]
    t = correlation_table(Dataset(samples, "test", "any"))
    for L in (1, 2, 3):
        assert t.column(L) == [1.0, 0.0, 0.0]


def test_correlation_is_order_invariant(small_any):
    _, te = small_any
    a = correlation_table(te)
    b = correlation_table(Dataset(te.samples[::-1], "test", "any"))
    np.testing.assert_allclose(np.array(a.entries, dtype=float), np.array(b.entries, dtype=float), atol=1e-15)


def importance_report(rows, names):
    return ImportanceReport(names, np.asarray(rows, dtype=float), "bilstm_attn", "level1")


def test_level_shares_examples():
    names = ["a", "l1", "l2", "l3"]
    fmap = {"l1": 1, "l2": 2, "l3": 3}
    np.testing.assert_allclose(level_shares(importance_report([[0.4, 0.2, 0.2, 0.2]], names), fmap), [1 / 3] * 3)
    np.testing.assert_allclose(level_shares(importance_report([[0.5, 0.0, 0.0, 0.5]], names), fmap), [0, 0, 1])
    with pytest.raises(ExplainError):
        level_shares(importance_report([[1, 0, 0, 0]], names), {})


def test_causality_table_columns(test_set):
    models = {L: flat_attention_ckpt(seed=L, task=f"level{L}") for L in (1, 3)}
    test = Dataset([with_history(s, s.history_levels, s.final_level, "level1") for s in test_set.samples],
                   "test", "level1")
    t = causality_table(models, test)
    assert t.kind == "causality"
    for L in (1, 3):
        col = t.column(L)
        assert abs(sum(col) - 1.0) <= 1e-6 and min(col) >= 0
    assert t.column(2) == [None, None, None]
    # sample order does not matter
    rev = Dataset(test.samples[::-1], "test", "level1")
    np.testing.assert_allclose(causality_table(models, rev).column(1), t.column(1), atol=1e-12)


def test_causality_rejects_bad_inputs(test_set):
    with pytest.raises(ExplainError, match="empty"):
        causality_table({1: flat_attention_ckpt(task="level1")}, test_set, level_feature_map={})
    with pytest.raises(ExplainError, match="trained for"):
        causality_table({2: flat_attention_ckpt(task="level1")}, test_set)


def test_default_level_map_covers_cumulative_and_count_features():
    fmap = default_level_feature_map()
    assert set(fmap.values()) == {1, 2, 3}
    assert fmap["count_level2"] == 2 and fmap["step12.cum_level3"] == 3
    assert set(fmap) <= set(flat_feature_names())


def test_transition_table_rejects_non_distributions():
    with pytest.raises(ExplainError):
        TransitionTable([[0.5, None, None], [0.2, None, None], [0.2, None, None]], "correlation")


def test_emit_importance_json_csv_svg(tmp_path, test_set):
    rep = attention_importance(flat_attention_ckpt(), test_set)
    emit_report(rep, "json", tmp_path / "r.json")
    back = ImportanceReport.from_json(json.loads((tmp_path / "r.json").read_text()))
    np.testing.assert_allclose(back.rows, rep.rows, atol=1e-12, rtol=0)
    emit_report(rep, "csv", tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert len(lines) == NUM_FLAT_FEATURES + 1
    emit_report(rep, "svg", tmp_path / "r.svg")
    root = ET.parse(tmp_path / "r.svg").getroot()
    bars = [e for e in root.iter("{http://www.w3.org/2000/svg}rect") if e.get("class") == "bar"]
    assert len(bars) == NUM_FLAT_FEATURES


def test_emit_transition_table(tmp_path, small_any):
    t = correlation_table(small_any[1])
    emit_report(t, "json", tmp_path / "t.json")
    assert TransitionTable.from_json(json.loads((tmp_path / "t.json").read_text())) == t
    emit_report(t, "csv", tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0] == "history_level,L1,L2,L3" and rows[1].startswith("P(level 1|L)")
    emit_report(t, "svg", tmp_path / "t.svg")
    cells = [e for e in ET.parse(tmp_path / "t.svg").getroot().iter("{http://www.w3.org/2000/svg}rect")]
    assert len(cells) == 9


def test_emit_report_errors(tmp_path, small_any):
    t = correlation_table(small_any[1])
    with pytest.raises(ExplainError):
        emit_report(t, "pdf", tmp_path / "x")
    with pytest.raises(OSError, match="cannot write report"):
        emit_report(t, "json", tmp_path / "missing" / "x.json")


def test_trained_model_importance_is_normalized(small_any):
    tr, te = small_any
    ckpt, _ = train(TrainConfig(model="qicvn", epochs=1, batch_size=64, model_options={"dim": 3}), tr.subset(range(64)))
    rep = qicvn_importance(ckpt, te.subset(range(20)))
    np.testing.assert_allclose(rep.rows.sum(axis=1), 1.0, atol=1e-9)
