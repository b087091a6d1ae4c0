import math

import numpy as np
import pytest

from pfedlora.backbone import Backbone, InjectionSite, forward, make_batch
from pfedlora.exceptions import ConfigError
from pfedlora.federation import RunConfig, run_federated
from pfedlora.metrics import (FINAL_HEADER, LOSS_CURVE_HEADER, ROUNDS_HEADER, emit, perplexity,
                              read_loss_curve, similarity_matrix)

SITE = InjectionSite(0, "query")


def _with(backbone, **override):
    params = dict(backbone.params)
    params.update(override)
    return Backbone(backbone.config, params)


def test_uniform_logits_give_vocab_perplexity(small_backbone, random_tokens):
    flat = _with(small_backbone, w_out=np.zeros_like(small_backbone.params["w_out"]))
    rep = perplexity(random_tokens, flat, {})
    assert rep.perplexity == pytest.approx(small_backbone.config.vocab_size, rel=1e-12)
    assert rep.total_tokens == sum(len(t) - 1 for t in random_tokens)


def test_confident_correct_model_gives_unit_perplexity(small_backbone):
    d = small_backbone.config.d_model
    bias = np.zeros(d)
    bias[0] = 1.0
    w_out = np.zeros_like(small_backbone.params["w_out"])
    w_out[0, 5] = 60.0
    sharp = _with(small_backbone, lnf_g=np.zeros(d), lnf_b=bias, w_out=w_out)
    rep = perplexity([np.full(10, 5), np.full(7, 5)], sharp, {})
    assert rep.perplexity == pytest.approx(1.0, abs=1e-20)


def test_matches_direct_nll(small_backbone, symmetric_adapters, sequences):
    rep = perplexity(sequences, small_backbone, symmetric_adapters, chunk=3)
    total, count = 0.0, 0
    for seq in sequences:
        loss, _ = forward(small_backbone, symmetric_adapters, make_batch([seq]))
        total += loss * (len(seq) - 1)
        count += len(seq) - 1
    assert abs(rep.perplexity - math.exp(total / count)) < 1e-9 * rep.perplexity


def test_empty_eval_is_skipped(small_backbone):
    rep = perplexity([], small_backbone, {})
    assert rep.skipped and math.isnan(rep.perplexity)


def _masks(a, b):
    return {SITE: (np.asarray(a, bool), np.asarray(b, bool))}


def test_similarity_identical_and_complementary():
    m = np.array([[1, 0, 1], [0, 1, 1]], bool)
    sim = similarity_matrix({0: _masks(m, m.T), 1: _masks(m, m.T), 2: _masks(~m, ~m.T)}, SITE)
    np.testing.assert_array_equal(sim.values, [[1, 1, 0], [1, 1, 0], [0, 0, 1]])
    ones = np.ones((2, 3), bool)
    half = similarity_matrix({0: _masks(ones, ones.T), 1: _masks(m, ones.T)}, SITE)
    assert half.values[0, 1] == pytest.approx((4 / 6 + 1) / 2)


def test_similarity_needs_two_clients():
    with pytest.raises(ConfigError):
        similarity_matrix({0: _masks(np.ones((1, 1)), np.ones((1, 1)))})


def _tiny(**kw):
    return RunConfig(clients=4, per_category=4, d_model=16, n_layers=1, n_heads=2, d_ff=32,
                     max_seq=64, rounds=3, participation=0.5, rank=2, prune_epochs=2, **kw)


def test_emit_writes_stable_csvs(tmp_path):
    names = ("loss_curve.csv", "rounds.csv", "final_eval.csv", "similarity.csv")
    outputs = []
    for run in range(2):
        emit(run_federated(_tiny()), tmp_path / str(run))
        outputs.append([(tmp_path / str(run) / n).read_bytes() for n in names])
    assert outputs[0] == outputs[1]
    lines = outputs[0][0].decode().splitlines()
    assert lines[0] == ",".join(LOSS_CURVE_HEADER) and len(lines) == 4
    assert outputs[0][1].decode().splitlines()[0] == ",".join(ROUNDS_HEADER)
    assert len(outputs[0][1].decode().splitlines()) == 1 + 3 * 2
    assert outputs[0][2].decode().splitlines()[0] == ",".join(FINAL_HEADER)
    curve = read_loss_curve(tmp_path / "0" / "loss_curve.csv")
    assert [r["round"] for r in curve] == [1.0, 2.0, 3.0]
    assert (tmp_path / "0" / "timings.txt").exists()
