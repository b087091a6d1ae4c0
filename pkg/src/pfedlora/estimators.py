"""scikit-learn style wrappers around the mask search and the federated run.

Both classes follow the estimator conventions (constructor only stores
hyper-parameters, ``fit`` returns ``self``, fitted state ends in ``_``), so
``get_params``/``set_params``/``clone`` work and they drop into grid searches.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator

from .adapters import LoraPair, dense_rank, init_symmetric
from .backbone import Backbone, BackboneConfig, InjectionSite, all_sites
from .data import VOCAB_SIZE, Example, tokenize
from .exceptions import DataError
from .federation import RunConfig, run_federated
from .metrics import perplexity, similarity_matrix
from .numerics import RngStream
from .saliency import PruneSchedule, iter_search
from .validation import check_is_fitted, check_tokens


def _check_sequences(X, max_seq: int) -> list[np.ndarray]:
    """Accept token sequences or :class:`Example` objects."""
    if X is None or len(X) == 0:
        raise DataError("expected a non-empty collection of sequences")
    out = []
    for item in X:
        if isinstance(item, Example):
            out.append(tokenize(item, max_seq))
        else:
            out.append(check_tokens(item, VOCAB_SIZE))
    return out


def _check_corpus(X) -> list[Example]:
    if X is None or len(X) == 0:
        raise DataError("expected a non-empty corpus")
    corpus = []
    for item in X:
        if isinstance(item, Example):
            corpus.append(item)
        elif isinstance(item, dict):
            corpus.append(Example(item.get("instruction", ""), item.get("context", "") or "",
                                  item["response"], item["category"]))
        else:
            raise DataError(f"cannot interpret {type(item).__name__} as an Example")
    return corpus


class SaliencyMaskSearch(BaseEstimator):
    """Search element-wise masks for adapters at every Q/K/V site.

    ``fit`` expands each adapter to ``dense_rank(rank, sparsity)``, draws a
    symmetric init and prunes iteratively on ``X``. Fitted attributes:
    ``masks_`` (site -> ``(mask_a, mask_b)``), ``history_`` (per-epoch kept
    counts per site) and ``adapters_`` (the search-time factors).
    """

    def __init__(self, rank=8, sparsity=0.5, prune_epochs=5, metric="first",
                 score_batch=64, micro_batch=8, backbone=None, init_seed=0, seed=0):
        self.rank = rank
        self.sparsity = sparsity
        self.prune_epochs = prune_epochs
        self.metric = metric
        self.score_batch = score_batch
        self.micro_batch = micro_batch
        self.backbone = backbone
        self.init_seed = init_seed
        self.seed = seed

    def _backbone(self) -> Backbone:
        if isinstance(self.backbone, Backbone):
            return self.backbone
        return Backbone.from_config(self.backbone or BackboneConfig())

    def fit(self, X, y=None):
        backbone = self._backbone()
        cfg = backbone.config
        seqs = _check_sequences(X, cfg.max_seq)
        schedule = PruneSchedule(self.prune_epochs, self.sparsity)
        init = RngStream(self.init_seed, 3)
        self.adapters_ = {
            s: init_symmetric(LoraPair.create(s, cfg.d_model, self.rank, self.sparsity), init.child(i))
            for i, s in enumerate(all_sites(cfg.n_layers))
        }
        self.history_ = []
        masks = {s: (p.mask_a, p.mask_b) for s, p in self.adapters_.items()}
        for t, masks in iter_search(seqs, backbone, self.adapters_, schedule, self.metric,
                                    RngStream(self.seed, 1), self.score_batch, self.micro_batch):
            self.history_.append({s: (int(a.sum()), int(b.sum())) for s, (a, b) in masks.items()})
        self.masks_ = masks
        self.dense_rank_ = dense_rank(self.rank, self.sparsity)
        return self

    def kept_fraction(self) -> dict:
        check_is_fitted(self, "masks_")
        return {s: (a.mean(), b.mean()) for s, (a, b) in self.masks_.items()}


class FederatedLoraTuner(BaseEstimator):
    """Mask search followed by personalized federated fine-tuning.

    ``fit(X)`` takes the whole corpus (``Example`` objects or dicts with the
    JSONL fields) and partitions it across ``clients``. ``score`` returns the
    negated mean final evaluation perplexity, so larger is better.
    """

    def __init__(self, method="personalized", clients=16, participation=0.1, rounds=30,
                 local_epochs=1, prune_epochs=0, rank=8, sparsity=0.5, level_ranks=(),
                 metric="first", aggregation="literal", finetune_init="restart",
                 partition="pathological", classes_per_client=2, beta=0.5,
                 train_fraction=0.8, response_only=False, batch_size=64, micro_batch=8,
                 score_batch=64, lr=10.0, momentum=0.0, d_model=64, n_layers=2, n_heads=4,
                 d_ff=128, max_seq=128, backbone_seed=0, data_seed=0, seed=0, workers=1):
        self.method = method
        self.clients = clients
        self.participation = participation
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.prune_epochs = prune_epochs
        self.rank = rank
        self.sparsity = sparsity
        self.level_ranks = level_ranks
        self.metric = metric
        self.aggregation = aggregation
        self.finetune_init = finetune_init
        self.partition = partition
        self.classes_per_client = classes_per_client
        self.beta = beta
        self.train_fraction = train_fraction
        self.response_only = response_only
        self.batch_size = batch_size
        self.micro_batch = micro_batch
        self.score_batch = score_batch
        self.lr = lr
        self.momentum = momentum
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.max_seq = max_seq
        self.backbone_seed = backbone_seed
        self.data_seed = data_seed
        self.seed = seed
        self.workers = workers

    def to_config(self) -> RunConfig:
        names = {f.name for f in fields(RunConfig)}
        params = {k: v for k, v in self.get_params().items() if k in names}
        return RunConfig(**params)

    def fit(self, X, y=None):
        corpus = _check_corpus(X)
        self.result_ = run_federated(self.to_config(), self.workers, corpus=corpus)
        self.history_ = [(r.round, r.mean_train_loss, r.mean_eval_ppl) for r in self.result_.reports]
        self.masks_ = self.result_.server.registry
        return self

    def score(self, X=None, y=None) -> float:
        check_is_fitted(self, "result_")
        return -self.result_.final_mean_ppl

    def perplexity(self, X, client_id: int) -> float:
        """Perplexity of ``X`` under one client's personalized adapters."""
        check_is_fitted(self, "result_")
        seqs = _check_sequences(X, self.max_seq)
        client = self.result_.clients[client_id]
        return perplexity(seqs, self.result_.backbone, client.adapters).perplexity

    def similarity(self, site: InjectionSite | None = InjectionSite(0, "query")):
        check_is_fitted(self, "masks_")
        return similarity_matrix(self.masks_, site)
