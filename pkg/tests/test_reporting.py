import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from cect.config import TsneConfig
from cect.errors import ContractError, ParameterError, ValidationError
from cect.evaluation import ConfusionMatrix
from cect.experiments import SWEEP_COLUMNS
from cect.reporting import (
    emit_csv,
    emit_embeddings,
    emit_json,
    read_csv,
    render_confusion,
    to_json,
)
from cect.tsne import (
    EmbeddingSet,
    conditional_affinities,
    effective_perplexity,
    joint_affinities,
    kl_divergence,
    tsne,
)

SVG = "{http://www.w3.org/2000/svg}"


# t-SNE --------------------------------------------------------------------------

def _row_perplexity_oracle(x, i, p_row):
    """Perplexity of row i computed directly from its conditional distribution."""
    q = np.delete(p_row, i)
    return math.exp(-(q[q > 0] * np.log(q[q > 0])).sum())


def test_conditional_rows_hit_target_perplexity(rng):
    x = rng.normal(size=(60, 8))
    p, achieved = conditional_affinities(x, 15.0)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)
    assert np.all(np.diag(p) == 0)
    for i in range(60):
        assert abs(_row_perplexity_oracle(x, i, p[i]) - 15.0) < 1e-4
    assert np.abs(achieved - 15.0).max() < 1e-4


def test_joint_affinities_symmetric_and_normalized(rng):
    p = joint_affinities(rng.normal(size=(40, 5)), 10.0)
    assert np.abs(p - p.T).max() < 1e-15
    assert abs(p.sum() - 1) < 1e-9


def test_duplicate_points_handled(rng):
    x = np.repeat(rng.normal(size=(10, 3)), 3, axis=0)
    res = tsne(x, TsneConfig(perplexity=5, iterations=50), seed=0)
    assert np.isfinite(res.points).all()


def test_perplexity_clamped_below_n_over_3():
    assert effective_perplexity(30, 100) == 30
    assert effective_perplexity(30, 31) == 10
    assert effective_perplexity(30, 31) < 31 / 3
    with pytest.raises(ParameterError):
        effective_perplexity(30, 3)


def test_kl_monotone_over_final_iterations(rng):
    x = rng.normal(size=(100, 10))
    res = tsne(x, TsneConfig(), seed=1)
    assert len(res.kl_trace) >= TsneConfig().exaggeration_iters + 100
    tail = np.array(res.kl_trace[-100:])
    assert np.all(np.diff(tail) < 0)
    assert res.kl_trace[-1] == pytest.approx(kl_divergence(res.p, res.points))


def test_separated_clusters_recovered(rng):
    a = rng.normal(size=(50, 64))
    b = rng.normal(size=(50, 64))
    b[:, 0] += 10.0
    labels = np.r_[np.zeros(50), np.ones(50)]
    y = tsne(np.vstack([a, b]), TsneConfig(), seed=0).points
    centroids = np.stack([y[labels == k].mean(0) for k in (0, 1)])
    nearest = np.argmin(((y[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (nearest == labels).mean() == 1.0


def test_tsne_deterministic(rng):
    x = rng.normal(size=(30, 4))
    cfg = TsneConfig(perplexity=5, iterations=100)
    assert tsne(x, cfg, 3).points.tobytes() == tsne(x, cfg, 3).points.tobytes()


def test_embedding_set_invariants():
    with pytest.raises(ValidationError):
        EmbeddingSet(np.zeros((1, 4)), np.zeros(1))
    with pytest.raises(ValidationError):
        EmbeddingSet(np.zeros((3, 4)), np.zeros(2))


# confusion SVG ----------------------------------------------------------------------

def _texts(svg):
    return [t.text for t in ET.fromstring(svg.encode()).iter(f"{SVG}text")]


def test_confusion_svg_cells_and_orientation():
    svg = render_confusion(ConfusionMatrix(348, 12, 14, 1007))
    root = ET.fromstring(svg.encode())
    assert root.tag == f"{SVG}svg" and root.get("version") == "1.1"
    texts = _texts(svg)
    assert texts[:4] == ["348", "12", "14", "1007"]
    assert "true" in texts and "predicted" in texts
    # TP left of FP on the top row, FN under TP
    rects = [(float(r.get("x")), float(r.get("y"))) for r in root.iter(f"{SVG}rect")]
    tp, fp, fn, tn = rects
    assert tp[1] == fp[1] and tp[0] < fp[0] and fn[0] == tp[0] and fn[1] > tp[1] and tn == (fp[0], fn[1])


def test_confusion_svg_rejects_empty():
    with pytest.raises(ContractError):
        render_confusion(ConfusionMatrix(0, 0, 0, 0))


def test_title_is_escaped():
    svg = render_confusion(ConfusionMatrix(1, 0, 0, 1), title="a<b & c")
    assert "a<b & c" in _texts(svg)


# JSON / CSV --------------------------------------------------------------------------------

def test_json_round_trip_is_byte_identical(tmp_path):
    report = {"seed": 3, "history": [{"acc": 0.5, "ppv": None, "lr": 0.003}], "losses": np.float32(0.25)}
    path = emit_json(report, tmp_path / "r.json")
    text = path.read_text()
    assert to_json(json.loads(text)) == text


def test_json_rejects_nan():
    with pytest.raises(ContractError):
        to_json({"x": float("nan")})


def test_csv_undefined_and_round_trip(tmp_path):
    rows = [{"alpha": 1 / 3, "beta": 0.1, "gamma": 0.9, "acc": 0.75, "npv": None, "ppv": 0.5,
             "sen": 1.0, "spe": 0.0, "fos": None} for _ in range(7)]
    path = emit_csv(rows, SWEEP_COLUMNS, tmp_path / "sweep.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS) and len(lines) == 8
    assert "undefined" in lines[1]
    header, back = read_csv(path)
    assert tuple(header) == SWEEP_COLUMNS and back == rows
    assert emit_csv(back, SWEEP_COLUMNS, tmp_path / "again.csv").read_bytes() == path.read_bytes()


def test_embeddings_csv_shape(tmp_path, rng):
    feats = rng.normal(size=(9, 5))
    labels = rng.integers(0, 2, 9)
    header, rows = read_csv(emit_embeddings(feats, labels, tmp_path / "e.csv"))
    assert len(rows) == 9 and len(header) == 6 and header[-1] == "label"
    np.testing.assert_array_equal([r["label"] for r in rows], labels)
    np.testing.assert_array_equal([[r[h] for h in header[:-1]] for r in rows], feats)


def test_unwritable_path_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_json({}, blocker / "sub" / "r.json")
