"""LoRA pairs with element-wise masks: construction, init, masking, storage."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .backbone import InjectionSite
from .exceptions import ConfigError, DataError, StorageError
from .numerics import RngStream, sample_gaussian
from .validation import check_fraction, check_positive_int

CHECKPOINT_VERSION = 1


def dense_rank(rank: int, sparsity: float) -> int:
    """Expanded rank ``round(rank / (1 - sparsity))`` (half-up, minimum 1)."""
    rank = check_positive_int(rank, "rank")
    sparsity = check_fraction(sparsity, "sparsity", closed_upper=False)
    return max(1, int(math.floor(rank / (1.0 - sparsity) + 0.5)))


@dataclass
class LoraPair:
    """Adapter factors ``A (d x R)``, ``B (R x d)`` and their binary masks."""

    site: InjectionSite
    A: np.ndarray
    B: np.ndarray
    mask_a: np.ndarray
    mask_b: np.ndarray
    rank: int
    sparsity: float

    @classmethod
    def create(cls, site: InjectionSite, d_model: int, rank: int, sparsity: float = 0.0) -> "LoraPair":
        """Zero factors at the expanded rank, all-ones masks."""
        R = dense_rank(rank, sparsity)
        return cls(site, np.zeros((d_model, R)), np.zeros((R, d_model)),
                   np.ones((d_model, R), bool), np.ones((R, d_model), bool),
                   rank, float(sparsity))

    @property
    def d_model(self) -> int:
        return self.A.shape[0]

    @property
    def dense_rank(self) -> int:
        return self.A.shape[1]

    @property
    def n_retained(self) -> int:
        return int(self.mask_a.sum() + self.mask_b.sum())

    def masked_factors(self) -> tuple[np.ndarray, np.ndarray]:
        return np.where(self.mask_a, self.A, 0.0), np.where(self.mask_b, self.B, 0.0)

    def delta(self) -> np.ndarray:
        """Effective weight update ``(A * m_a) @ (B * m_b)``."""
        A, B = self.masked_factors()
        return A @ B

    def copy(self) -> "LoraPair":
        return replace(self, A=self.A.copy(), B=self.B.copy(),
                       mask_a=self.mask_a.copy(), mask_b=self.mask_b.copy())

    def __eq__(self, other):
        if not isinstance(other, LoraPair):
            return NotImplemented
        return (self.site == other.site and self.rank == other.rank
                and self.sparsity == other.sparsity
                and all(np.array_equal(x, y) for x, y in (
                    (self.A, other.A), (self.B, other.B),
                    (self.mask_a, other.mask_a), (self.mask_b, other.mask_b))))


def init_symmetric(pair: LoraPair, rng: RngStream) -> LoraPair:
    """Search-time init: both factors ``N(0, 1/d)`` so saliency is informative."""
    var = 1.0 / pair.d_model
    A = sample_gaussian(rng.child(0), *pair.A.shape, var)
    B = sample_gaussian(rng.child(1), *pair.B.shape, var)
    return replace(pair, A=A, B=B)


def init_finetune(pair: LoraPair, rng: RngStream, keep_weights: bool = False) -> LoraPair:
    """Post-search init: ``A ~ N(0, 1/d)`` on the mask support, ``B = 0``.

    With ``keep_weights`` the search-time values are kept and only masked.
    """
    if keep_weights:
        return apply_masks(pair)
    A = sample_gaussian(rng.child(0), *pair.A.shape, 1.0 / pair.d_model)
    return replace(pair, A=np.where(pair.mask_a, A, 0.0), B=np.zeros_like(pair.B))


def apply_masks(pair: LoraPair) -> LoraPair:
    A, B = pair.masked_factors()
    return replace(pair, A=A, B=B)


def masked_sgd_step(pair: LoraPair, grad_a: np.ndarray, grad_b: np.ndarray, lr: float) -> LoraPair:
    """One SGD step with gradients gated by the masks; pruned entries stay 0."""
    A = np.where(pair.mask_a, pair.A - lr * grad_a, 0.0)
    B = np.where(pair.mask_b, pair.B - lr * grad_b, 0.0)
    return replace(pair, A=A, B=B)


def save_checkpoint(pair: LoraPair, path, client_id: int | None = None) -> None:
    """Write one adapter as versioned structured text.

    Field order: header, site, client, rank, sparsity, shape_a, shape_b,
    mask_a rows (0/1 strings), mask_b rows, then the retained values of A
    and B in row-major order as ``repr`` decimals. Pruned entries are not
    stored and read back as 0.
    """
    A, B = pair.masked_factors()
    lines = [
        f"# pfedlora adapter v{CHECKPOINT_VERSION}",
        f"site {pair.site}",
        f"client {'-' if client_id is None else client_id}",
        f"rank {pair.rank}",
        f"sparsity {pair.sparsity!r}",
        f"shape_a {A.shape[0]} {A.shape[1]}",
        f"shape_b {B.shape[0]} {B.shape[1]}",
        "mask_a",
        *_mask_rows(pair.mask_a),
        "mask_b",
        *_mask_rows(pair.mask_b),
        f"values_a {int(pair.mask_a.sum())}",
        " ".join(repr(float(v)) for v in A[pair.mask_a]),
        f"values_b {int(pair.mask_b.sum())}",
        " ".join(repr(float(v)) for v in B[pair.mask_b]),
    ]
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise StorageError(f"cannot write adapter checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[LoraPair, int | None]:
    """Inverse of :func:`save_checkpoint`; returns ``(pair, client_id)``."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read adapter checkpoint {path}: {exc}") from exc
    if not lines or lines[0] != f"# pfedlora adapter v{CHECKPOINT_VERSION}":
        raise DataError(f"{path}: unsupported adapter checkpoint header")
    try:
        site = InjectionSite.parse(lines[1].split()[1])
        client = lines[2].split()[1]
        rank = int(lines[3].split()[1])
        sparsity = float(lines[4].split()[1])
        da, ra = (int(x) for x in lines[5].split()[1:])
        rb, db = (int(x) for x in lines[6].split()[1:])
        i = 8
        mask_a = _parse_mask(lines[i:i + da])
        i += da + 1
        mask_b = _parse_mask(lines[i:i + rb])
        i += rb
        A, B = np.zeros((da, ra)), np.zeros((rb, db))
        A[mask_a] = _parse_values(lines[i + 1], int(lines[i].split()[1]))
        B[mask_b] = _parse_values(lines[i + 3], int(lines[i + 2].split()[1]))
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed adapter checkpoint ({exc})") from exc
    pair = LoraPair(site, A, B, mask_a, mask_b, rank, sparsity)
    return pair, None if client == "-" else int(client)


def _mask_rows(mask: np.ndarray) -> list[str]:
    return ["".join("1" if b else "0" for b in row) for row in mask]


def _parse_mask(rows: list[str]) -> np.ndarray:
    return np.array([[c == "1" for c in row] for row in rows], dtype=bool)


def _parse_values(line: str, count: int) -> np.ndarray:
    vals = np.array([float(v) for v in line.split()])
    if vals.size != count:
        raise ValueError(f"expected {count} values, found {vals.size}")
    return vals


def check_pair_shapes(pair: LoraPair) -> None:
    if pair.A.shape != pair.mask_a.shape or pair.B.shape != pair.mask_b.shape:
        raise ConfigError(f"{pair.site}: masks do not match factor shapes")
    if pair.A.shape[1] != pair.B.shape[0]:
        raise ConfigError(f"{pair.site}: inner dimensions of A and B differ")
