import csv
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxcue.analysis import (collect_rhos, consistency_score, depth_sweep, export_embeddings, export_routing,
                             routing_matrix)
from ctxcue.config import ModelConfig, TrainConfig
from ctxcue.data import collate
from ctxcue.errors import PreconditionError
from ctxcue.training import evaluate, train


def tiny_config(**kw):
    model = ModelConfig(d_t=6, d_a=5, d_v=4, d_model=8, num_heads=2, n_text_layers=1, n_visual_layers=2, depth=1)
    return dataclasses.replace(TrainConfig(model=model, max_epochs=1, batch_size=8), **kw)


def test_routing_matrix_examples():
    assert routing_matrix([0.5] * 4, [1, 0, 1, 0]).tolist() == [[0.5, 0.5], [0.5, 0.5]]
    m = routing_matrix([0.9, 0.9, 0.1, 0.1], [1, 1, 0, 0])
    np.testing.assert_allclose(m, [[0.9, 0.1], [0.1, 0.9]], atol=1e-15)
    assert np.isnan(routing_matrix([0.3], [0])[0]).all()
    with pytest.raises(PreconditionError):
        routing_matrix([0.3, 0.2], [1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.001, 0.999), st.integers(0, 1)), min_size=2, max_size=40)
       .filter(lambda xs: len({f for _, f in xs}) == 2))
def test_routing_matrix_loop_accumulator(stream):
    sums, counts = {0: 0.0, 1: 0.0}, {0: 0, 1: 0}
    for rho, flag in stream:
        sums[flag] += rho
        counts[flag] += 1
    mat = routing_matrix([r for r, _ in stream], [f for _, f in stream])
    for row, flag in ((0, 1), (1, 0)):
        mean = sums[flag] / counts[flag]
        assert abs(mat[row, 0] - mean) <= 1e-9 and abs(mat[row, 1] - (1 - mean)) <= 1e-9
    assert np.allclose(mat.sum(1), 1, atol=1e-6)
    score = consistency_score(mat)
    assert 0 <= score <= 1 and score == (mat[0, 0] + mat[1, 1]) / 2


def test_consistency_examples():
    assert consistency_score(np.full((2, 2), 0.5)) == 0.5
    assert abs(consistency_score(np.array([[0.9, 0.1], [0.1, 0.9]])) - 0.9) <= 1e-15
    assert consistency_score(np.eye(2)) == 1.0


def test_export_routing_and_embeddings(small_bundle, tmp_path):
    run = train(small_bundle, tiny_config(), tmp_path / "run")
    ckpt = tmp_path / "run" / "checkpoint.bin"
    mat = export_routing(ckpt, small_bundle, "v", 1, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("# ") and "binary label" not in lines[0]
    assert lines[1] == "subset,Con,Dis"
    np.testing.assert_allclose(mat.sum(1), 1, atol=1e-6)
    rhos = collect_rhos(run.model, small_bundle, "v")
    assert rhos.shape == (len(small_bundle), 2)
    with pytest.raises(PreconditionError):
        export_routing(ckpt, small_bundle, "a", 1)

    ids, labels, z = export_embeddings(ckpt, small_bundle, tmp_path / "z1.csv")
    export_embeddings(ckpt, small_bundle, tmp_path / "z2.csv")
    assert (tmp_path / "z1.csv").read_bytes() == (tmp_path / "z2.csv").read_bytes()
    with (tmp_path / "z1.csv").open() as fh:
        assert len(list(csv.reader(fh))) == len(small_bundle) + 1
    # z for one sample equals a single-sample forward through the aggregator
    one = small_bundle.samples[5]
    single = run.model(collate([one])).aggregation.z.detach().numpy()[0]
    assert np.abs(z[ids.index(one.sample_id)] - single).max() <= 1e-6


def test_routing_label_proxy_noted(small_bundle, tmp_path):
    run = train(small_bundle, tiny_config())
    no_flags = small_bundle.map(lambda s: dataclasses.replace(s, sarcasm=None))
    export_routing(run.model, no_flags, "a", 0, tmp_path / "r.csv")
    assert "binary label" in (tmp_path / "r.csv").read_text().splitlines()[0]


def test_depth_sweep_rows(small_bundle, tmp_path):
    cfg = tiny_config()
    rows = depth_sweep(small_bundle, cfg, [2], tmp_path)
    assert len(rows) == 3 and {r["scope"] for r in rows} == {"entire", "subset1", "subset2"}
    run = train(small_bundle, dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, depth=2)))
    rep = evaluate(run.model, small_bundle, "all")
    for r in rows:
        assert abs(r["f1"] - rep[r["scope"]].f1) <= 1e-6
    text = (tmp_path / "depth_sweep.csv").read_text().splitlines()
    assert text[0] == "depth,scope,f1" and len(text) == 4
    with pytest.raises(PreconditionError):
        depth_sweep(small_bundle, cfg, [])
    with pytest.raises(PreconditionError):
        depth_sweep(small_bundle, cfg, [-1])


def test_depth_sweep_row_count(small_bundle):
    assert len(depth_sweep(small_bundle, tiny_config(), [0, 1])) == 6
