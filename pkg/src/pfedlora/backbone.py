"""Frozen tiny decoder-only transformer with LoRA injection on Q/K/V.

Activations are row vectors, so a projection is ``y = x @ W`` with ``W`` of
shape ``(d_model, d_model)``. An adapter at a site adds ``x @ A @ B`` with
``A`` of shape ``(d_model, R)`` and ``B`` of shape ``(R, d_model)``; the
gradient of ``A`` is therefore ``x^T g B^T`` and vanishes when ``B = 0``.

Only adapter gradients are produced by :func:`backward_adapters`; the
gradient signal is carried back through the residual stream but no backbone
weight gradient is ever formed.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .exceptions import ConfigError, DataError, StorageError, TapeReuseError
from .numerics import RngStream, sample_gaussian
from .validation import check_positive_int, check_tokens

PROJECTIONS = ("query", "key", "value")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_CHECKPOINT_HEADER = "# pfedlora backbone v1"


class InjectionSite(NamedTuple):
    layer: int
    projection: str

    def __str__(self):
        return f"L{self.layer}.{self.projection}"

    @classmethod
    def parse(cls, text: str) -> "InjectionSite":
        layer, _, proj = text.partition(".")
        if not layer.startswith("L") or proj not in PROJECTIONS:
            raise ConfigError(f"bad injection site {text!r}")
        return cls(int(layer[1:]), proj)


def all_sites(n_layers: int) -> list[InjectionSite]:
    return [InjectionSite(l, p) for l in range(n_layers) for p in PROJECTIONS]


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 259
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq: int = 128
    init_seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "init_seed":
                check_positive_int(getattr(self, f.name), f.name)
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class Backbone:
    """Container of frozen parameters. Arrays are marked read-only."""

    def __init__(self, config: BackboneConfig, params: Mapping[str, np.ndarray]):
        self.config = config
        self.params = {}
        for name, value in params.items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            self.params[name] = arr
        expected = _param_shapes(config)
        if set(expected) != set(self.params):
            raise ConfigError("backbone parameters do not match the config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: expected {shape}, got {self.params[name].shape}")

    @classmethod
    def from_config(cls, config: BackboneConfig) -> "Backbone":
        """Seeded random init: Gaussian weights with std ``1/sqrt(fan_in)``.

        Embeddings, attention and output weights have fan-in ``d_model``; the
        second MLP matrix has fan-in ``d_ff``. Layer-norm gains start at 1 and
        all biases at 0.
        """
        rng = RngStream(config.init_seed, 0)
        params = {}
        for idx, (name, shape) in enumerate(_param_shapes(config).items()):
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                params[name] = np.ones(shape)
            elif leaf.endswith("_b") or leaf in ("c1", "c2"):
                params[name] = np.zeros(shape)
            else:
                fan_in = config.d_ff if leaf == "w2" else config.d_model
                params[name] = sample_gaussian(rng.child(idx), *shape, 1.0 / fan_in)
        return cls(config, params)

    def layer(self, l: int, name: str) -> np.ndarray:
        return self.params[f"layers.{l}.{name}"]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        """Write the structured-text checkpoint.

        Layout: header line, one ``config key=value ...`` line, then for each
        parameter a ``param <name> <dim>...`` line followed by one line per
        row of space-separated ``repr`` floats (1-D arrays use a single line).
        """
        lines = [_CHECKPOINT_HEADER]
        lines.append("config " + " ".join(
            f"{f.name}={getattr(self.config, f.name)}" for f in fields(self.config)))
        for name, arr in self.params.items():
            lines.append(f"param {name} " + " ".join(str(s) for s in arr.shape))
            rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
            lines.extend(" ".join(repr(float(v)) for v in row) for row in rows)
        try:
            Path(path).write_text("\n".join(lines) + "\n")
        except OSError as exc:
            raise StorageError(f"cannot write backbone checkpoint {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "Backbone":
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise StorageError(f"cannot read backbone checkpoint {path}: {exc}") from exc
        if not lines or lines[0] != _CHECKPOINT_HEADER:
            raise DataError(f"{path}: not a backbone checkpoint")
        kv = dict(item.split("=", 1) for item in lines[1].split()[1:])
        config = BackboneConfig(**{k: int(v) for k, v in kv.items()})
        params, i = {}, 2
        while i < len(lines):
            head = lines[i].split()
            if head[0] != "param":
                raise DataError(f"{path}:{i + 1}: expected a param line")
            name, shape = head[1], tuple(int(s) for s in head[2:])
            n_rows = 1 if len(shape) == 1 else shape[0]
            rows = [[float(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + n_rows]]
            params[name] = np.array(rows).reshape(shape)
            i += 1 + n_rows
        return cls(config, params)


def _param_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
        "pos_emb": (cfg.max_seq, d),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "wk": (d, d), p + "wv": (d, d), p + "wo": (d, d),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w1": (d, f), p + "c1": (f,), p + "w2": (f, d), p + "c2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "w_out": (d, cfg.vocab_size)})
    return shapes


@dataclass
class TokenBatch:
    """Right-padded token ids plus the mask of scored next-token targets.

    ``target_mask[n, p]`` says whether predicting ``ids[n, p + 1]`` from
    position ``p`` counts toward the loss.
    """

    ids: np.ndarray
    target_mask: np.ndarray

    @property
    def n_targets(self) -> int:
        return int(self.target_mask.sum())

    def __len__(self):
        return self.ids.shape[0]


def make_batch(sequences: Sequence, target_masks: Sequence | None = None, pad_id: int = 0) -> TokenBatch:
    """Pad variable-length sequences into a :class:`TokenBatch`.

    ``target_masks[i]`` (optional) has length ``len(sequences[i]) - 1``.
    """
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    if not seqs:
        raise DataError("empty batch")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    tmask = np.zeros((len(seqs), max(width - 1, 0)), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        if len(s) > 1:
            tmask[i, :len(s) - 1] = True if target_masks is None else np.asarray(target_masks[i], bool)
    return TokenBatch(ids, tmask)


@dataclass
class ForwardTape:
    batch: TokenBatch
    factors: dict
    layers: list
    final: tuple
    probs: np.ndarray
    per_token_loss: np.ndarray
    loss: float
    consumed: bool = field(default=False)


def _factors(adapter) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(adapter, tuple):
        return adapter
    return adapter.masked_factors()


def _layernorm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _layernorm_back(dy, cache):
    xhat, rstd, g = cache
    dxhat = dy * g
    return rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                   - xhat * (dxhat * xhat).mean(-1, keepdims=True))


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def forward(backbone: Backbone, adapters: Mapping, tokens) -> tuple[float, ForwardTape]:
    """Mean next-token cross-entropy and the tape for :func:`backward_adapters`.

    ``tokens`` is a :class:`TokenBatch`, a single 1-D sequence, or a list of
    sequences. ``adapters`` maps :class:`InjectionSite` to a ``LoraPair`` (its
    masked factors are used) or to an explicit ``(A, B)`` tuple.
    """
    cfg = backbone.config
    batch = _as_batch(tokens, cfg)
    if batch.n_targets == 0:
        raise DataError("no predicted positions: every sequence needs at least 2 tokens")
    ids = batch.ids
    n, T = ids.shape
    H, dh = cfg.n_heads, cfg.head_dim
    factors = {site: _factors(a) for site, a in adapters.items()}

    h = backbone.params["tok_emb"][ids] + backbone.params["pos_emb"][:T]
    causal = np.triu(np.full((T, T), -np.inf), k=1)
    layers = []
    for l in range(cfg.n_layers):
        a, ln1 = _layernorm(h, backbone.layer(l, "ln1_g"), backbone.layer(l, "ln1_b"))
        proj, weights = {}, {}
        for name, wkey in zip(PROJECTIONS, ("wq", "wk", "wv")):
            w = backbone.layer(l, wkey)
            site = InjectionSite(l, name)
            if site in factors:
                A, B = factors[site]
                w = w + A @ B
            weights[name] = w
            proj[name] = (a @ w).reshape(n, T, H, dh).transpose(0, 2, 1, 3)
        q, k, v = proj["query"], proj["key"], proj["value"]
        scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + causal
        scores -= scores.max(-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(-1, keepdims=True)
        o = (p @ v).transpose(0, 2, 1, 3).reshape(n, T, cfg.d_model)
        h = h + o @ backbone.layer(l, "wo")
        m, ln2 = _layernorm(h, backbone.layer(l, "ln2_g"), backbone.layer(l, "ln2_b"))
        u = m @ backbone.layer(l, "w1") + backbone.layer(l, "c1")
        gu, t = _gelu(u)
        h = h + gu @ backbone.layer(l, "w2") + backbone.layer(l, "c2")
        layers.append(dict(a=a, ln1=ln1, weights=weights, q=q, k=k, v=v, p=p, o=o,
                           ln2=ln2, m=m, u=u, t=t))

    z, lnf = _layernorm(h, backbone.params["lnf_g"], backbone.params["lnf_b"])
    logits = z[:, :-1] @ backbone.params["w_out"]
    logits -= logits.max(-1, keepdims=True)
    logsum = np.log(np.exp(logits).sum(-1, keepdims=True))
    logp = logits - logsum
    targets = ids[:, 1:]
    nll = -np.take_along_axis(logp, targets[..., None], -1)[..., 0]
    per_token = np.where(batch.target_mask, nll, 0.0)
    loss = float(per_token.sum() / batch.n_targets)
    tape = ForwardTape(batch=batch, factors=factors, layers=layers, final=(z, lnf),
                       probs=np.exp(logp), per_token_loss=per_token, loss=loss)
    return loss, tape


def backward_adapters(backbone: Backbone, tape: ForwardTape) -> dict:
    """Exact gradients of the tape's loss w.r.t. every adapter's ``(A, B)``.

    Gradients are taken w.r.t. the masked factors actually used in the
    forward pass; coordinates a mask prunes still report a value and the
    caller is expected to zero them before updating.
    """
    if tape.consumed:
        raise TapeReuseError("forward tape already consumed by a backward pass")
    tape.consumed = True
    cfg = backbone.config
    batch = tape.batch
    n, T = batch.ids.shape
    H, dh = cfg.n_heads, cfg.head_dim

    dlogits = tape.probs.copy()
    targets = batch.ids[:, 1:]
    rows, cols = np.indices(targets.shape)
    dlogits[rows, cols, targets] -= 1.0
    dlogits *= batch.target_mask[..., None] / batch.n_targets
    dz = np.zeros((n, T, cfg.d_model))
    dz[:, :-1] = dlogits @ backbone.params["w_out"].T
    z, lnf = tape.final
    dh_ = _layernorm_back(dz, lnf)

    grads = {}
    for l in reversed(range(cfg.n_layers)):
        c = tape.layers[l]
        # MLP branch
        dgu = dh_ @ backbone.layer(l, "w2").T
        du = _gelu_back(dgu, c["u"], c["t"])
        dh_ = dh_ + _layernorm_back(du @ backbone.layer(l, "w1").T, c["ln2"])
        # attention branch
        do = (dh_ @ backbone.layer(l, "wo").T).reshape(n, T, H, dh).transpose(0, 2, 1, 3)
        p, q, k, v = c["p"], c["q"], c["k"], c["v"]
        dp = do @ v.transpose(0, 1, 3, 2)
        dv = p.transpose(0, 1, 3, 2) @ do
        ds = p * (dp - (dp * p).sum(-1, keepdims=True)) / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        a2 = c["a"].reshape(n * T, cfg.d_model)
        da = np.zeros((n, T, cfg.d_model))
        for name, g in zip(PROJECTIONS, (dq, dk, dv)):
            g = g.transpose(0, 2, 1, 3).reshape(n, T, cfg.d_model)
            da += g @ c["weights"][name].T
            site = InjectionSite(l, name)
            if site in tape.factors:
                A, B = tape.factors[site]
                dw = a2.T @ g.reshape(n * T, cfg.d_model)
                grads[site] = (dw @ B.T, A.T @ dw)
        dh_ = dh_ + _layernorm_back(da, c["ln1"])
    return grads


def loss_and_grads(backbone: Backbone, adapters: Mapping, tokens) -> tuple[float, dict]:
    loss, tape = forward(backbone, adapters, tokens)
    return loss, backward_adapters(backbone, tape)


def _as_batch(tokens, cfg: BackboneConfig) -> TokenBatch:
    if isinstance(tokens, TokenBatch):
        batch = tokens
    else:
        if len(tokens) == 0:
            raise DataError("empty token input")
        batch = make_batch([tokens] if np.ndim(tokens[0]) == 0 else tokens)
    check_tokens(batch.ids, cfg.vocab_size)
    if batch.ids.shape[1] > cfg.max_seq:
        raise DataError(f"sequence length {batch.ids.shape[1]} exceeds max_seq={cfg.max_seq}")
    return batch
