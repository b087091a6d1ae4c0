import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pfedlora.adapters import (LoraPair, apply_masks, dense_rank, init_finetune, init_symmetric,
                               load_checkpoint, masked_sgd_step, save_checkpoint)
from pfedlora.backbone import InjectionSite, forward
from pfedlora.exceptions import ConfigError, DataError
from pfedlora.numerics import RngStream

SITE = InjectionSite(0, "query")


@pytest.mark.parametrize("rank, sparsity, expected", [
    (8, 0.5, 16), (8, 0.0, 8), (8, 0.66, 24), (8, 0.33, 12), (1, 0.9, 10),
])
def test_dense_rank(rank, sparsity, expected):
    assert dense_rank(rank, sparsity) == expected


def test_dense_rank_rejects_full_sparsity():
    with pytest.raises(ConfigError):
        dense_rank(8, 1.0)


@given(st.integers(1, 64), st.floats(0, 0.95), st.floats(0, 0.95))
def test_dense_rank_monotone(rank, s1, s2):
    lo, hi = sorted((s1, s2))
    assert dense_rank(rank, lo) <= dense_rank(rank, hi)


def test_symmetric_init_variance():
    pair = LoraPair.create(SITE, 64, 8, 0.0)
    # 10^5 entries: stack several draws of a 64 x 8 factor
    draws = np.concatenate([init_symmetric(pair, RngStream(1, i)).A.ravel() for i in range(196)])
    assert draws.size >= 100_000
    assert abs(draws.var() - 1 / 64) / (1 / 64) < 0.05


def test_symmetric_init_streams_differ():
    pair = LoraPair.create(SITE, 32, 4, 0.5)
    a = init_symmetric(pair, RngStream(1, 0))
    b = init_symmetric(pair, RngStream(1, 1))
    assert not np.array_equal(a.A, b.A) and not np.array_equal(a.B, b.B)


def _random_masked_pair(seed=0):
    rng = np.random.default_rng(seed)
    pair = LoraPair.create(SITE, 32, 4, 0.5)
    pair.mask_a[:] = rng.random(pair.mask_a.shape) < 0.5
    pair.mask_b[:] = rng.random(pair.mask_b.shape) < 0.5
    return init_symmetric(pair, RngStream(seed))


def test_finetune_init_is_zero_update(small_backbone, random_tokens):
    adapters = {}
    for l in range(2):
        for proj in ("query", "key", "value"):
            site = InjectionSite(l, proj)
            p = LoraPair.create(site, 32, 4, 0.5)
            adapters[site] = init_finetune(p, RngStream(9, l))
    assert forward(small_backbone, adapters, random_tokens)[0] == forward(small_backbone, {}, random_tokens)[0]


def test_finetune_init_respects_masks_and_is_repeatable():
    pair = _random_masked_pair()
    a = init_finetune(pair, RngStream(4))
    assert not a.B.any()
    assert np.array_equal(a.A != 0, pair.mask_a)
    assert a.n_retained == pair.n_retained
    np.testing.assert_array_equal(a.A, init_finetune(pair, RngStream(4)).A)
    kept = init_finetune(pair, RngStream(4), keep_weights=True)
    np.testing.assert_array_equal(kept.A, np.where(pair.mask_a, pair.A, 0.0))


def test_apply_masks():
    pair = _random_masked_pair()
    ones = replace_masks(pair, True)
    np.testing.assert_array_equal(apply_masks(ones).A, pair.A)
    zeros = apply_masks(replace_masks(pair, False))
    assert not zeros.A.any() and not zeros.B.any()
    masked = apply_masks(pair)
    np.testing.assert_array_equal(masked.A != 0, pair.mask_a)
    np.testing.assert_array_equal(masked.B != 0, pair.mask_b)


def replace_masks(pair, value):
    p = pair.copy()
    p.mask_a[:] = value
    p.mask_b[:] = value
    return p


def test_masked_coordinates_stay_zero_under_sgd():
    pair = apply_masks(_random_masked_pair(3))
    rng = np.random.default_rng(0)
    for _ in range(25):
        pair = masked_sgd_step(pair, rng.normal(size=pair.A.shape), rng.normal(size=pair.B.shape), 0.3)
    assert not pair.A[~pair.mask_a].any()
    assert not pair.B[~pair.mask_b].any()


def test_checkpoint_round_trip(tmp_path):
    pair = apply_masks(_random_masked_pair(5))
    pair.A[pair.mask_a] *= 1e-300  # exercise extreme exponents
    path = tmp_path / "a.txt"
    save_checkpoint(pair, path, client_id=7)
    loaded, cid = load_checkpoint(path)
    assert cid == 7
    assert loaded == pair
    assert loaded.A.tobytes() == pair.A.tobytes()


def test_checkpoint_bad_header(tmp_path):
    path = tmp_path / "x.txt"
    path.write_text("nope\n")
    with pytest.raises(DataError):
        load_checkpoint(path)
