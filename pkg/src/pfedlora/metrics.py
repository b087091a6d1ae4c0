"""Perplexity, mask similarity and the CSV files a run leaves behind."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backbone import Backbone, InjectionSite, forward, make_batch
from .exceptions import ConfigError, StorageError
from .numerics import hamming_similarity

LOSS_CURVE_HEADER = ("round", "mean_train_loss", "mean_eval_ppl")
ROUNDS_HEADER = ("round", "client_id", "mean_train_loss", "eval_ppl")
FINAL_HEADER = ("client_id", "n_eval", "eval_tokens", "eval_ppl")


@dataclass
class EvalReport:
    client_id: int | None
    round: int | None
    nll_sums: np.ndarray = field(default_factory=lambda: np.zeros(0))
    token_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    skipped: bool = False

    @property
    def total_tokens(self) -> int:
        return int(self.token_counts.sum())

    @property
    def perplexity(self) -> float:
        if self.skipped:
            return math.nan
        return math.exp(float(self.nll_sums.sum()) / self.total_tokens)


def perplexity(sequences: Sequence, backbone: Backbone, adapters: Mapping,
               target_masks: Sequence | None = None, client_id: int | None = None,
               round: int | None = None, chunk: int = 16) -> EvalReport:
    """``exp(total NLL / total predicted tokens)`` over ``sequences``.

    An empty evaluation set yields a report with ``skipped=True``.
    """
    if len(sequences) == 0:
        return EvalReport(client_id, round, skipped=True)
    sums, counts = [], []
    for start in range(0, len(sequences), chunk):
        part = sequences[start:start + chunk]
        tm = None if target_masks is None else target_masks[start:start + chunk]
        batch = make_batch(part, tm)
        _, tape = forward(backbone, adapters, batch)
        sums.append(tape.per_token_loss.sum(axis=1))
        counts.append(batch.target_mask.sum(axis=1))
    return EvalReport(client_id, round, np.concatenate(sums), np.concatenate(counts))


@dataclass
class SimilarityMatrix:
    client_ids: list
    values: np.ndarray

    def off_diagonal(self) -> np.ndarray:
        return self.values[~np.eye(len(self.client_ids), dtype=bool)]

    def to_csv(self, path) -> None:
        rows = [["client_id", *self.client_ids]]
        rows += [[cid, *(repr(float(v)) for v in row)]
                 for cid, row in zip(self.client_ids, self.values)]
        _write_rows(path, rows)


def similarity_matrix(registry: Mapping[int, Mapping], site: InjectionSite | None = None,
                      client_ids: Sequence[int] | None = None) -> SimilarityMatrix:
    """Pairwise hamming similarity of registered masks.

    For one site the entry is the mean of the A-mask and B-mask
    similarities; with ``site=None`` it is further averaged over all sites.
    """
    ids = sorted(registry) if client_ids is None else list(client_ids)
    if len(ids) < 2:
        raise ConfigError("similarity needs at least two registered clients")
    for cid in ids:
        if cid not in registry:
            raise ConfigError(f"client {cid} has no registered masks")
    sites = sorted(registry[ids[0]]) if site is None else [site]
    n = len(ids)
    values = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sims = []
            for s in sites:
                (ai, bi), (aj, bj) = registry[ids[i]][s], registry[ids[j]][s]
                sims.append((hamming_similarity(ai, aj) + hamming_similarity(bi, bj)) / 2)
            values[i, j] = values[j, i] = float(np.mean(sims))
    return SimilarityMatrix(ids, values)


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _write_rows(path, rows) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def write_loss_curve(reports, path) -> None:
    rows = [LOSS_CURVE_HEADER]
    rows += [(r.round, _fmt(r.mean_train_loss), _fmt(r.mean_eval_ppl)) for r in reports]
    _write_rows(path, rows)


def write_round_rows(reports, path) -> None:
    rows = [ROUNDS_HEADER]
    for r in reports:
        rows += [(r.round, row.client_id, _fmt(row.mean_train_loss), _fmt(row.eval_ppl))
                 for row in r.rows]
    _write_rows(path, rows)


def write_final_eval(final: Mapping[int, EvalReport], path) -> None:
    rows = [FINAL_HEADER]
    rows += [(cid, len(rep.token_counts), rep.total_tokens, _fmt(rep.perplexity))
             for cid, rep in sorted(final.items())]
    _write_rows(path, rows)


def read_loss_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) if v else math.nan for k, v in row.items()}
                for row in csv.DictReader(fh)]


def emit(result, out_dir, similarity_site: InjectionSite | None = InjectionSite(0, "query")) -> dict:
    """Write the run's CSVs into ``out_dir`` and return their paths.

    Wall-clock timings go to ``timings.txt`` so the CSVs stay byte-stable.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StorageError(f"cannot create {out}: {exc}") from exc
    paths = {
        "loss_curve": out / "loss_curve.csv",
        "rounds": out / "rounds.csv",
        "final_eval": out / "final_eval.csv",
    }
    write_loss_curve(result.reports, paths["loss_curve"])
    write_round_rows(result.reports, paths["rounds"])
    write_final_eval(result.final_eval, paths["final_eval"])
    if len(result.server.registry) >= 2:
        paths["similarity"] = out / "similarity.csv"
        similarity_matrix(result.server.registry, similarity_site).to_csv(paths["similarity"])
    timings = "\n".join(f"round {r.round} wall_time_s {r.wall_time:.3f}" for r in result.reports)
    (out / "timings.txt").write_text(timings + "\n")
    return paths
