import math

import numpy as np
import pytest

from pfedlora.adapters import LoraPair, masked_sgd_step
from pfedlora.backbone import (Backbone, BackboneConfig, InjectionSite, all_sites, backward_adapters,
                               forward, loss_and_grads, make_batch)
from pfedlora.exceptions import ConfigError, DataError, TapeReuseError


def oracle_loss(bb, adapters, seq):
    """Position-by-position re-implementation, one sequence, explicit loops."""
    cfg, P = bb.config, bb.params
    d, H = cfg.d_model, cfg.n_heads
    dh = d // H

    def ln(x, g, b):
        mu = sum(x) / len(x)
        var = sum((v - mu) ** 2 for v in x) / len(x)
        return np.array([(v - mu) / math.sqrt(var + 1e-5) for v in x]) * g + b

    def gelu(u):
        return 0.5 * u * (1 + np.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u ** 3)))

    T = len(seq)
    hs = [P["tok_emb"][seq[t]] + P["pos_emb"][t] for t in range(T)]
    for l in range(cfg.n_layers):
        L = lambda n: P[f"layers.{l}.{n}"]
        W = {}
        for proj, key in (("query", "wq"), ("key", "wk"), ("value", "wv")):
            W[proj] = L(key).copy()
            pair = adapters.get(InjectionSite(l, proj))
            if pair is not None:
                A, B = pair.masked_factors()
                W[proj] = W[proj] + A @ B
        a = [ln(h, L("ln1_g"), L("ln1_b")) for h in hs]
        q = [x @ W["query"] for x in a]
        k = [x @ W["key"] for x in a]
        v = [x @ W["value"] for x in a]
        new = []
        for t in range(T):
            out = np.zeros(d)
            for h in range(H):
                sl = slice(h * dh, (h + 1) * dh)
                s = [q[t][sl] @ k[j][sl] / math.sqrt(dh) for j in range(t + 1)]
                mx = max(s)
                w = [math.exp(x - mx) for x in s]
                z = sum(w)
                out[sl] = sum(w[j] / z * v[j][sl] for j in range(t + 1))
            new.append(hs[t] + out @ L("wo"))
        hs = new
        hs = [h + gelu(ln(h, L("ln2_g"), L("ln2_b")) @ L("w1") + L("c1")) @ L("w2") + L("c2") for h in hs]
    total = 0.0
    for t in range(T - 1):
        logits = ln(hs[t], P["lnf_g"], P["lnf_b"]) @ P["w_out"]
        mx = logits.max()
        total += -(logits[seq[t + 1]] - mx - math.log(np.exp(logits - mx).sum()))
    return total / (T - 1)


def test_forward_matches_oracle(small_backbone, symmetric_adapters, random_tokens):
    seq = random_tokens[0]
    loss, _ = forward(small_backbone, symmetric_adapters, seq)
    assert loss == pytest.approx(oracle_loss(small_backbone, symmetric_adapters, seq), abs=1e-10)


def test_batched_loss_is_token_weighted_mean(small_backbone, symmetric_adapters, random_tokens):
    loss, _ = forward(small_backbone, symmetric_adapters, random_tokens)
    parts = [(forward(small_backbone, symmetric_adapters, s)[0], len(s) - 1) for s in random_tokens]
    expected = sum(l * n for l, n in parts) / sum(n for _, n in parts)
    assert loss == pytest.approx(expected, abs=1e-12)


def test_zero_b_is_invisible(small_backbone, small_config, random_tokens):
    rng = np.random.default_rng(0)
    adapters = {}
    for s in all_sites(small_config.n_layers):
        p = LoraPair.create(s, small_config.d_model, 4)
        p.A[:] = rng.normal(size=p.A.shape)
        adapters[s] = p
    with_adapters, _ = forward(small_backbone, adapters, random_tokens)
    plain, _ = forward(small_backbone, {}, random_tokens)
    assert with_adapters == plain


def test_zero_b_gives_zero_grad_a(small_backbone, small_config, random_tokens):
    rng = np.random.default_rng(1)
    adapters = {}
    for s in all_sites(small_config.n_layers):
        p = LoraPair.create(s, small_config.d_model, 4)
        p.A[:] = rng.normal(size=p.A.shape)
        adapters[s] = p
    _, grads = loss_and_grads(small_backbone, adapters, random_tokens)
    for ga, gb in grads.values():
        assert not ga.any()
        assert np.abs(gb).max() > 0


def test_fully_masked_site_has_no_adapter_effect(small_backbone, symmetric_adapters, random_tokens):
    site = InjectionSite(1, "value")
    pair = symmetric_adapters[site]
    pair.mask_a[:] = False
    pair.mask_b[:] = False
    _, grads = loss_and_grads(small_backbone, symmetric_adapters, random_tokens)
    ga, gb = grads[site]
    # both masked factors are zero, so each factor's gradient is zero
    assert not ga.any() and not gb.any()


def test_finite_difference_spot_check(small_backbone, symmetric_adapters, random_tokens):
    _, grads = loss_and_grads(small_backbone, symmetric_adapters, random_tokens)
    rng = np.random.default_rng(5)
    sites = list(symmetric_adapters)
    for _ in range(15):
        site = sites[rng.integers(len(sites))]
        which = int(rng.integers(2))
        M = (symmetric_adapters[site].A, symmetric_adapters[site].B)[which]
        i, j = rng.integers(M.shape[0]), rng.integers(M.shape[1])
        old, h = M[i, j], 1e-5
        M[i, j] = old + h
        lp, _ = forward(small_backbone, symmetric_adapters, random_tokens)
        M[i, j] = old - h
        lm, _ = forward(small_backbone, symmetric_adapters, random_tokens)
        M[i, j] = old
        fd = (lp - lm) / (2 * h)
        assert abs(grads[site][which][i, j] - fd) / max(1e-12, abs(fd)) < 1e-5


def test_single_token_sequence_is_an_error(small_backbone):
    with pytest.raises(DataError):
        forward(small_backbone, {}, [5])


def test_out_of_vocab_token(small_backbone):
    with pytest.raises(DataError):
        forward(small_backbone, {}, [1, 2, 259])


def test_too_long(small_backbone, small_config):
    with pytest.raises(DataError):
        forward(small_backbone, {}, list(range(small_config.max_seq + 1)))


def test_tape_is_single_use(small_backbone, symmetric_adapters, random_tokens):
    _, tape = forward(small_backbone, symmetric_adapters, random_tokens)
    backward_adapters(small_backbone, tape)
    with pytest.raises(TapeReuseError):
        backward_adapters(small_backbone, tape)


def test_backbone_frozen_through_training(small_backbone, symmetric_adapters, random_tokens):
    before = small_backbone.digest()
    adapters = dict(symmetric_adapters)
    for _ in range(3):
        _, grads = loss_and_grads(small_backbone, adapters, random_tokens)
        adapters = {s: masked_sgd_step(p, *grads[s], lr=0.5) for s, p in adapters.items()}
    assert small_backbone.digest() == before
    with pytest.raises(ValueError):
        small_backbone.params["layers.0.wq"][0, 0] = 1.0


def test_checkpoint_round_trip(tmp_path, small_backbone):
    path = tmp_path / "bb.txt"
    small_backbone.save(path)
    loaded = Backbone.load(path)
    assert loaded.config == small_backbone.config
    assert loaded.digest() == small_backbone.digest()


def test_default_shape_and_config_validation():
    cfg = BackboneConfig()
    assert (cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_seq) == (259, 64, 2, 4, 128, 128)
    with pytest.raises(ConfigError):
        BackboneConfig(d_model=30, n_heads=4)


def test_padding_does_not_leak(small_backbone, symmetric_adapters):
    short = [3, 4, 5, 6]
    batch = make_batch([short, list(range(10, 30))])
    _, tape = forward(small_backbone, symmetric_adapters, batch)
    alone, _ = forward(small_backbone, symmetric_adapters, short)
    assert tape.per_token_loss[0].sum() / 3 == pytest.approx(alone, abs=1e-12)
