import numpy as np
import pytest
from sklearn.base import clone

from pfedlora.backbone import BackboneConfig
from pfedlora.estimators import FederatedLoraTuner, SaliencyMaskSearch
from pfedlora.exceptions import DataError, NotFittedError

TINY = dict(clients=4, per_category=4, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq=64,
            rounds=2, participation=0.5, rank=2, prune_epochs=2, lr=1.0)


def test_params_round_trip_through_clone():
    est = FederatedLoraTuner(**{k: v for k, v in TINY.items() if k != "per_category"}, sparsity=0.25)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.to_config().sparsity == 0.25
    search = SaliencyMaskSearch(rank=3, metric="mixed")
    assert clone(search).get_params()["metric"] == "mixed"


def test_mask_search_fit(sequences, small_config):
    est = SaliencyMaskSearch(rank=2, sparsity=0.5, prune_epochs=3, backbone=small_config)
    with pytest.raises(NotFittedError):
        est.kept_fraction()
    est.fit(sequences)
    assert est.dense_rank_ == 4 and len(est.history_) == 3
    for a, b in est.kept_fraction().values():
        assert a == pytest.approx(0.5, abs=0.02) and b == pytest.approx(0.5, abs=0.02)
    with pytest.raises(DataError):
        est.fit([])


def test_tuner_fit_and_score(corpus):
    params = {k: v for k, v in TINY.items() if k != "per_category"}
    est = FederatedLoraTuner(**params).fit(corpus)
    assert np.isfinite(est.score()) and est.score() < 0
    assert len(est.history_) == 2
    sim = est.similarity()
    assert sim.values.shape == (4, 4)
    client = est.result_.clients[0]
    assert est.perplexity(client.eval or client.train, 0) > 1
    with pytest.raises(DataError):
        FederatedLoraTuner(**params).fit([object()])
