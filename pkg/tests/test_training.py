import csv
import dataclasses
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ctxcue.config import ModelConfig, TrainConfig, VARIANTS
from ctxcue.data import collate
from ctxcue.errors import ConfigError, PreconditionError, SchemaError
from ctxcue.metrics import classification_metrics
from ctxcue.model import build_model
from ctxcue.structure import BiasSchedule, gate_loss
from ctxcue.training import (CosineSchedule, config_echo, evaluate, make_optimizer_schedule, parameter_groups,
                             run_ablation, stopping_epoch, total_loss, train)


def tiny_config(**kw) -> TrainConfig:
    model = ModelConfig(d_t=6, d_a=5, d_v=4, d_model=8, num_heads=2, n_text_layers=1, n_visual_layers=1, depth=1)
    return dataclasses.replace(TrainConfig(model=model, max_epochs=2, batch_size=8, patience=2), **kw)


# ---------------------------------------------------------------------------
# loss


def test_uniform_logits_cross_entropy():
    cfg = tiny_config(lambda_gate=0.0)
    loss = total_loss(torch.zeros(4, 2, dtype=torch.float64), torch.tensor([0, 1, 1, 0]), [], torch.rand(4), 0, cfg)
    assert abs(loss.item() - math.log(2)) <= 1e-12
    assert abs(loss.item() - 0.693147) <= 1e-6


def test_loss_affine_in_lambda_gate(small_bundle):
    cfg = tiny_config()
    model = build_model(cfg.model, seed=0).double().eval()
    batch = collate(small_bundle.samples[:6]).to(torch.float64)
    out = model(batch)
    rhos, s = out.gate_rhos(), out.relation.s
    ce = torch.nn.functional.cross_entropy(out.logits, batch.labels)
    lg = gate_loss(rhos, s, 1, BiasSchedule(cfg.lambda_bias0, cfg.bias_horizon))
    assert torch.equal(total_loss(out.logits, batch.labels, rhos, s, 1, dataclasses.replace(cfg, lambda_gate=0.0)), ce)
    for lam in (0.0, 0.05, 0.1):
        val = total_loss(out.logits, batch.labels, rhos, s, 1, dataclasses.replace(cfg, lambda_gate=lam))
        assert abs(val.item() - (ce.item() + lam * lg.item())) <= 1e-12


def test_loss_label_range():
    with pytest.raises(PreconditionError):
        total_loss(torch.zeros(2, 2), torch.tensor([0, 2]), [], torch.rand(2), 0, tiny_config())


# ---------------------------------------------------------------------------
# optimiser and schedule


def test_cosine_endpoints_and_midpoint():
    p = torch.nn.Parameter(torch.zeros(1))
    opt = torch.optim.Adam([{"params": [p], "lr": 3e-3}])
    sched = CosineSchedule(opt, 100)
    assert sched.lr_at(0) == [3e-3]
    assert sched.lr_at(100) == [0.0]
    assert abs(sched.lr_at(50)[0] - 1.5e-3) <= 1e-12
    for _ in range(50):
        sched.step()
    assert abs(sched.current[0] - 1.5e-3) <= 1e-12


def test_two_rate_groups_partition():
    cfg = tiny_config()
    model = build_model(cfg.model, seed=0)
    nonverbal, rest = parameter_groups(model)
    ids_nv, ids_rest = {id(p) for p in nonverbal}, {id(p) for p in rest}
    assert ids_nv.isdisjoint(ids_rest)
    assert ids_nv | ids_rest == {id(p) for p in model.parameters()}
    named = {id(p): n for n, p in model.named_parameters()}
    assert all(named[i].startswith(("stage1.primary.", "stage1.structure.")) for i in ids_nv)
    opt, sched = make_optimizer_schedule(model, cfg, steps_per_epoch=10)
    assert [g["lr"] for g in opt.param_groups] == [cfg.lr_nonverbal, cfg.lr_rest]
    assert opt.defaults["betas"] == (0.9, 0.999) and opt.defaults["eps"] == 1e-8
    assert sched.total_steps == cfg.max_epochs * 10


def test_foreign_parameter_rejected():
    model = build_model(tiny_config().model, seed=0)
    stray = torch.nn.Parameter(torch.zeros(2))
    original = model.nonverbal_parameters
    model.nonverbal_parameters = lambda: original() + [stray]
    with pytest.raises(PreconditionError, match="not registered"):
        parameter_groups(model)


# ---------------------------------------------------------------------------
# early stopping


def loop_oracle_stop(scores, patience, max_epochs):
    best, bad = None, 0
    for i in range(max_epochs):
        if i >= len(scores):
            return len(scores)
        if best is None or scores[i] > best:
            best, bad = scores[i], 0
        else:
            bad += 1
        if bad == patience:
            return i + 1
    return max_epochs


def test_stopping_examples():
    assert stopping_epoch(list(range(100)), 10, 100) == 100
    assert stopping_epoch([5, 4, 4, 4], 3, 100) == 4
    assert stopping_epoch([1, 2, 2, 3, 3, 3], 2, 100) == 6


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0.0, 50.0, 60.0, 70.0, 80.0]), min_size=1, max_size=30),
       st.integers(1, 6), st.integers(1, 30))
def test_stopping_matches_loop_oracle(scores, patience, max_epochs):
    assert stopping_epoch(scores, patience, max_epochs) == loop_oracle_stop(scores, patience, max_epochs)


def test_train_early_stop_matches_rule(small_bundle, tmp_path):
    cfg = tiny_config(max_epochs=6, patience=1)
    run = train(small_bundle, cfg, tmp_path)
    scores = [h["val_f1"] for h in run.history]
    assert len(run.history) == stopping_epoch(scores, 1, 6)
    assert run.best_epoch == int(np.argmax(scores))
    with (tmp_path / "history.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["epoch", "train_loss", "val_f1", "lr_nonverbal", "lr_rest", "lambda_bias"]
    assert float(rows[0]["lr_nonverbal"]) == cfg.lr_nonverbal and float(rows[0]["lambda_bias"]) == 1.0
    assert json.loads((tmp_path / "config.json").read_text()) == cfg.to_dict()
    assert (tmp_path / "checkpoint.bin").exists() and (tmp_path / "routing.csv").exists()


def test_train_rejects_dim_mismatch(small_bundle):
    cfg = tiny_config()
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, d_a=7))
    with pytest.raises(SchemaError):
        train(small_bundle, cfg)


def test_training_determinism(small_bundle):
    a = train(small_bundle, tiny_config(max_epochs=1))
    b = train(small_bundle, tiny_config(max_epochs=1))
    assert abs(a.history[0]["train_loss"] - b.history[0]["train_loss"]) <= 1e-6
    for (k, va), vb in zip(a.model.state_dict().items(), b.model.state_dict().values()):
        assert torch.equal(va, vb), k


# ---------------------------------------------------------------------------
# metrics


def test_perfect_predictions():
    m = classification_metrics([0, 1, 1, 0], [0, 1, 1, 0], 2)
    assert m.precision == m.recall == m.f1 == m.accuracy == 100.0


def test_positive_f1_six_samples():
    # TP=2, FP=1, FN=2 -> P = 2/3, R = 1/2
    m = classification_metrics([1, 1, 1, 1, 0, 0], [1, 1, 0, 0, 1, 0], 2)
    assert abs(m.positive_f1 / 100 - 4 / 7) <= 1e-12
    assert abs(m.positive_f1 / 100 - 0.5714) <= 1e-4


def brute_force_macro(y, p, k):
    f1s, ps, rs = [], [], []
    for c in range(k):
        tp = sum(1 for a, b in zip(y, p) if a == c and b == c)
        fp = sum(1 for a, b in zip(y, p) if a != c and b == c)
        fn = sum(1 for a, b in zip(y, p) if a == c and b != c)
        if tp + fp + fn == 0:
            continue
        pr = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        ps.append(pr)
        rs.append(rc)
        f1s.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
    return [100 * sum(v) / len(v) for v in (ps, rs, f1s)]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 4).flatmap(lambda k: st.tuples(
    st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=40))))
def test_metrics_match_brute_force(case):
    k, pairs = case
    y, p = [a for a, _ in pairs], [b for _, b in pairs]
    m = classification_metrics(y, p, k)
    ref = brute_force_macro(y, p, k)
    assert [m.precision, m.recall, m.f1] == pytest.approx(ref, abs=1e-9)


# ---------------------------------------------------------------------------
# evaluation and ablation


def test_evaluate_scopes(small_bundle, tmp_path):
    run = train(small_bundle, tiny_config(max_epochs=1), tmp_path)
    rep = evaluate(tmp_path / "checkpoint.bin", small_bundle, "all", epoch=run.best_epoch)
    assert set(rep.scopes) == {"entire", "subset1", "subset2"}
    lines = rep.to_csv().splitlines()
    assert lines[0] == "scope,precision,recall,f1,epoch"
    assert all(len(l.split(",")[1].split(".")[1]) == 2 for l in lines[1:])
    direct = evaluate(run.model, small_bundle, "entire")
    assert direct["entire"] == rep["entire"]


def test_evaluate_empty_subset_absent(small_bundle):
    run = train(small_bundle, tiny_config(max_epochs=1))
    no_sarcasm = small_bundle.map(lambda s: dataclasses.replace(s, sarcasm=0))
    rep = evaluate(run.model, no_sarcasm, "all")
    assert rep["subset1"] is None and rep["subset2"] is not None
    assert "subset1" not in rep.to_csv()
    with pytest.raises(PreconditionError):
        evaluate(run.model, small_bundle, "bogus")


def test_ablation_unknown_variant(small_bundle):
    with pytest.raises(ConfigError, match="no-guidance"):
        run_ablation(small_bundle, tiny_config(), "no-such-thing")


def test_ablation_variant_echo():
    base = tiny_config()
    echo = json.loads(config_echo(base.with_variant("no-guidance")))
    assert echo["model"]["guidance"] is False
    echo = json.loads(config_echo(base.with_variant("pair-tv-av")))
    assert sorted(echo["model"]["pairs"]) == ["av", "tv"]
    assert base.with_variant("pseudo-context").pseudo_context is True
    assert set(VARIANTS) >= {"full", "no-role-emb", "no-dual-expert", "shared-branches", "no-local-cue",
                             "no-global-cue", "pair-ta-tv", "pair-ta-av", "pair-tv-av", "no-guidance",
                             "uniform-aggregation"}


def test_ablation_full_row_equals_plain_run(small_bundle, tmp_path):
    cfg = tiny_config(max_epochs=1)
    reports = run_ablation(small_bundle, cfg, "no-guidance", tmp_path)
    plain = train(small_bundle, cfg)
    rep = evaluate(plain.model, small_bundle, "all")
    for s in ("entire", "subset1", "subset2"):
        assert reports["full"][s].f1 == pytest.approx(rep[s].f1, abs=1e-6)
    header = (tmp_path / "ablation.csv").read_text().splitlines()[0]
    assert header == "variant,scope,precision,recall,f1,epoch"
    assert json.loads((tmp_path / "variant_config.json").read_text())["model"]["guidance"] is False
