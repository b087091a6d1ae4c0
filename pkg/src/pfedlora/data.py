"""Instruction examples, byte-level tokenization and non-IID partitioning."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, DataError, StorageError
from .numerics import RngStream
from .validation import check_fraction, check_positive_int

log = logging.getLogger(__name__)

CATEGORIES = (
    "creative_writing",
    "brainstorming",
    "classification",
    "closed_qa",
    "generation",
    "information_extraction",
    "open_qa",
    "summarization",
)
# databricks-dolly-15k names the generation class "general_qa"
CATEGORY_ALIASES = {"general_qa": "generation"}

BOS, SEP, EOS = 256, 257, 258
VOCAB_SIZE = 259


@dataclass(frozen=True)
class Example:
    instruction: str
    context: str
    response: str
    category: str

    def __post_init__(self):
        if not self.response:
            raise DataError("response must be non-empty")
        if self.category not in CATEGORIES:
            raise DataError(f"unknown category {self.category!r}")

    @property
    def label(self) -> int:
        return CATEGORIES.index(self.category)


def load_jsonl(path) -> list[Example]:
    """Read ``instruction/context/response/category`` records, one per line."""
    out = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise DataError(f"{path}:{lineno}: expected a JSON object")
        for key in ("instruction", "response", "category"):
            if key not in rec:
                raise DataError(f"{path}:{lineno}: missing field {key!r}")
        category = CATEGORY_ALIASES.get(rec["category"], rec["category"])
        if category not in CATEGORIES:
            raise DataError(f"{path}:{lineno}: unknown category {rec['category']!r}")
        if not rec["response"]:
            raise DataError(f"{path}:{lineno}: empty response")
        out.append(Example(str(rec["instruction"]), str(rec.get("context") or ""),
                           str(rec["response"]), category))
    return out


_ALPHABET = "abcdefghijklmnopqrstuvwxyz ,."


def synth_corpus(per_category: int, seed: int, n_categories: int = len(CATEGORIES)) -> list[Example]:
    """Desk-scale stand-in for an instruction corpus.

    Every category owns a character-level Markov chain over a 29-symbol
    alphabet. Its transition rows mix a Dirichlet(0.3) draw with a bias
    toward five category-specific symbols, so both the unigram and bigram
    statistics differ between categories. Examples come out category-major.
    """
    per_category = check_positive_int(per_category, "per_category")
    if not 1 <= n_categories <= len(CATEGORIES):
        raise ConfigError(f"n_categories must be in [1, {len(CATEGORIES)}]")
    k = len(_ALPHABET)
    corpus = []
    for c in range(n_categories):
        rng = RngStream(seed, 100, c)
        favored = np.zeros(k)
        favored[rng.child(0).choice(k, 5)] = 1.0 / 5
        trans = np.stack([0.5 * rng.child(1, i).dirichlet(np.full(k, 0.3)) + 0.5 * favored
                          for i in range(k)])
        cum = np.cumsum(trans, axis=1)
        draws = rng.child(2)
        for j in range(per_category):
            u = draws.child(j).uniform(200)
            pos = iter(u)

            def chain(length):
                state = min(int(next(pos) * k), k - 1)
                chars = [_ALPHABET[state]]
                for _ in range(length - 1):
                    state = min(int(np.searchsorted(cum[state], next(pos) * cum[state, -1])), k - 1)
                    chars.append(_ALPHABET[state])
                return "".join(chars)

            lengths = (u[-1], u[-2], u[-3], u[-4])
            instruction = chain(16 + int(lengths[0] * 17))
            context = chain(16 + int(lengths[1] * 17)) if lengths[2] < 0.5 else ""
            response = chain(24 + int(lengths[3] * 25))
            corpus.append(Example(instruction, context, response, CATEGORIES[c]))
    return corpus


def tokenize(example: Example, max_seq: int = 128) -> np.ndarray:
    """``BOS instr SEP context SEP response EOS`` as UTF-8 bytes, truncated."""
    ids = [BOS, *example.instruction.encode(), SEP, *example.context.encode(), SEP,
           *example.response.encode(), EOS]
    return np.array(ids[:max_seq], dtype=np.int64)


def detokenize(ids) -> tuple[str, str, str]:
    """Recover ``(instruction, context, response)`` text from token ids."""
    parts: list[list[int]] = [[]]
    for t in np.asarray(ids).tolist():
        if t == BOS:
            continue
        if t == EOS:
            break
        if t == SEP:
            parts.append([])
        else:
            parts[-1].append(t)
    parts += [[]] * (3 - len(parts))
    return tuple(bytes(p).decode("utf-8", errors="replace") for p in parts[:3])


def response_target_mask(ids) -> np.ndarray:
    """Targets that fall inside the response (after the second SEP)."""
    ids = np.asarray(ids)
    seps = np.flatnonzero(ids == SEP)
    mask = np.zeros(max(len(ids) - 1, 0), dtype=bool)
    if len(seps) >= 2:
        mask[seps[1]:] = True
    return mask


@dataclass(frozen=True)
class PartitionSpec:
    kind: str
    n_clients: int
    seed: int = 0
    classes_per_client: int = 2
    beta: float = 0.5

    def __post_init__(self):
        if self.kind not in ("pathological", "dirichlet"):
            raise ConfigError(f"unknown partition kind {self.kind!r}")
        check_positive_int(self.n_clients, "n_clients")
        check_positive_int(self.classes_per_client, "classes_per_client")
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")


def _class_members(corpus: Sequence[Example]) -> dict[int, np.ndarray]:
    labels = np.array([ex.label for ex in corpus], dtype=np.int64)
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def partition(corpus: Sequence[Example], spec: PartitionSpec) -> dict[int, np.ndarray]:
    if spec.kind == "pathological":
        return partition_pathological(corpus, spec)
    return partition_dirichlet(corpus, spec)


def partition_pathological(corpus: Sequence[Example], spec: PartitionSpec,
                           max_attempts: int = 100) -> dict[int, np.ndarray]:
    """Each client holds ``classes_per_client`` classes; classes split evenly.

    Class draws are repeated (at most ``max_attempts`` times) until every
    class present in the corpus has at least one holder.
    """
    members = _class_members(corpus)
    classes = sorted(members)
    if spec.classes_per_client > len(classes):
        raise ConfigError(f"classes_per_client={spec.classes_per_client} exceeds "
                          f"{len(classes)} available classes")
    for attempt in range(max_attempts):
        rng = RngStream(spec.seed, 1, attempt)
        held = [sorted(classes[i] for i in rng.child(c).choice(len(classes), spec.classes_per_client))
                for c in range(spec.n_clients)]
        holders = {cls: [c for c in range(spec.n_clients) if cls in held[c]] for cls in classes}
        if all(holders.values()):
            break
    else:
        raise ConfigError(f"no class assignment covering all classes after {max_attempts} draws")
    shards: dict[int, list] = {c: [] for c in range(spec.n_clients)}
    for cls in classes:
        ids = members[cls][RngStream(spec.seed, 2, cls).permutation(len(members[cls]))]
        for client, part in zip(holders[cls], np.array_split(ids, len(holders[cls]))):
            shards[client].extend(part.tolist())
    return {c: np.array(sorted(v), dtype=np.int64) for c, v in shards.items()}


def largest_remainder(proportions, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; leftovers go to the largest remainders."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = p / p.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    order = np.lexsort((np.arange(p.size), -(raw - counts)))
    counts[order[:short]] += 1
    return counts


def dirichlet_proportions(spec: PartitionSpec, cls: int) -> np.ndarray:
    return RngStream(spec.seed, 3, cls).dirichlet(np.full(spec.n_clients, spec.beta))


def partition_dirichlet(corpus: Sequence[Example], spec: PartitionSpec) -> dict[int, np.ndarray]:
    """Per class, split examples over clients with ``Dir(beta)`` proportions."""
    shards: dict[int, list] = {c: [] for c in range(spec.n_clients)}
    for cls, ids in _class_members(corpus).items():
        counts = largest_remainder(dirichlet_proportions(spec, cls), len(ids))
        ids = ids[RngStream(spec.seed, 4, cls).permutation(len(ids))]
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for client in range(spec.n_clients):
            shards[client].extend(ids[bounds[client]:bounds[client + 1]].tolist())
    return {c: np.array(sorted(v), dtype=np.int64) for c, v in shards.items()}


def split_train_eval(shard, fraction: float = 0.8, rng: RngStream | None = None,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled split; ``round(fraction * n)`` train, at least one eval if n >= 2."""
    fraction = check_fraction(fraction, "fraction")
    shard = np.asarray(shard, dtype=np.int64)
    n = shard.size
    if n == 0:
        raise DataError("cannot split an empty shard")
    rng = rng or RngStream(seed, 5)
    perm = shard[rng.permutation(n)]
    n_train = int(math.floor(fraction * n + 0.5))
    if n == 1:
        log.warning("shard of size 1: no evaluation example")
        n_train = 1
    else:
        n_train = min(max(n_train, 1), n - 1)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def write_partition_csv(assignment: dict[int, np.ndarray], path) -> None:
    rows = sorted((int(e), int(c)) for c, ids in assignment.items() for e in ids)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["example_id", "client_id"])
            w.writerows(rows)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
