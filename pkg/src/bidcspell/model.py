"""
Bi-directional detector-corrector network.

Token + position embeddings feed a detection encoder and a correction
encoder. A stack of interaction layers then lets each stream cross-attend to
the other, mixes the attended update into the stream through a sigmoid gate,
and merges both streams through a shared feed-forward block. Two classifiers
read the final streams.

Modes:
    bidc      full model, learned gates on both sides
    d2c       detection gate fixed at 0 (correction still reads detection)
    c-only    correction encoder and correction head only
    two-head  correction encoder with both heads, no detection encoder and
              no interaction (a multi-task baseline without interaction)
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import numeric as nx
from .errors import ConfigError, DimensionError, EmptyLossError

MODES = ("bidc", "d2c", "c-only", "two-head")


@dataclass
class ModelConfig:
    vocab_size: int = 202
    d_h: int = 64
    d_ff: int = 128
    n_heads: int = 1
    det_depth: int = 2
    cor_depth: int = 4
    layers: int = 2
    max_len: int = 32
    lam: float = 0.8
    mode: str = "bidc"
    gate_override_alpha: Optional[float] = None
    gate_override_beta: Optional[float] = None
    ln_eps: float = 1e-5
    dropout: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "d2c":
            if self.gate_override_alpha is None:
                self.gate_override_alpha = 0.0
            if self.gate_override_alpha != 0.0 or self.gate_override_beta is not None:
                raise ConfigError("d2c fixes alpha=0.0 and leaves beta learned")
        for name in ("vocab_size", "d_h", "d_ff", "n_heads", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_h % self.n_heads:
            raise ConfigError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.cor_depth < 1:
            raise ConfigError("correction encoder depth must be >= 1")
        if self.has_interaction:
            if self.layers < 1:
                raise ConfigError("interaction modes need at least one interaction layer")
            if self.det_depth < 1:
                raise ConfigError("detection encoder depth must be >= 1")
        for name in ("gate_override_alpha", "gate_override_beta"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")

    @property
    def has_interaction(self):
        return self.mode in ("bidc", "d2c")

    @property
    def has_det_head(self):
        return self.mode != "c-only"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_count(cfg):
    """Closed-form number of trainable scalars for ``cfg``."""
    d, f, v = cfg.d_h, cfg.d_ff, cfg.vocab_size
    enc_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * 2 * d
    inter_layer = 6 * d * d + 2 * (2 * d * d + d) + (2 * d * f + f) + (f * d + d) + 3 * 2 * d
    total = v * d + cfg.max_len * d + cfg.cor_depth * enc_layer + (d * v + v)
    if cfg.has_det_head:
        total += d * 2 + 2
    if cfg.has_interaction:
        total += cfg.det_depth * enc_layer + cfg.layers * inter_layer
    return total


@dataclass
class ForwardTrace:
    """Outputs of one forward pass over a padded batch.

    Logit tensors are ``[B, n, C]``; gate lists hold one ``[B, n, d_h]`` array
    per interaction layer (empty outside bidc/d2c).
    """

    det_logits: Optional[nx.Tensor]
    cor_logits: nx.Tensor
    alphas: list
    betas: list
    h_det: Optional[nx.Tensor]
    h_cor: nx.Tensor


def _xavier(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class BiDCSpell:
    def __init__(self, cfg, seed=0, params=None):
        self.cfg = cfg
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    # -- parameters ---------------------------------------------------------

    def _param_specs(self):
        cfg = self.cfg
        d, f, v = cfg.d_h, cfg.d_ff, cfg.vocab_size
        shapes = []

        def linear(prefix, fan_in, fan_out, bias=True):
            shapes.append((f"{prefix}.w", "xavier", (fan_in, fan_out)))
            if bias:
                shapes.append((f"{prefix}.b", "zeros", (fan_out,)))

        def norm(prefix):
            shapes.append((f"{prefix}.g", "ones", (d,)))
            shapes.append((f"{prefix}.b", "zeros", (d,)))

        shapes.append(("embed.tok", "normal", (v, d)))
        shapes.append(("embed.pos", "normal", (cfg.max_len, d)))
        branches = [("cor", cfg.cor_depth)]
        if cfg.has_interaction:
            branches.insert(0, ("det", cfg.det_depth))
        for branch, depth in branches:
            for k in range(depth):
                p = f"enc_{branch}.{k}"
                for proj in ("q", "k", "v", "o"):
                    linear(f"{p}.attn.{proj}", d, d)
                norm(f"{p}.ln1")
                linear(f"{p}.ff1", d, f)
                linear(f"{p}.ff2", f, d)
                norm(f"{p}.ln2")
        if cfg.has_interaction:
            for i in range(cfg.layers):
                p = f"inter.{i}"
                for side in ("det", "cor"):
                    for proj in ("q", "k", "v"):
                        linear(f"{p}.{side}.{proj}", d, d, bias=False)
                for side in ("det", "cor"):
                    linear(f"{p}.gate_{side}", 2 * d, d)
                linear(f"{p}.ff1", 2 * d, f)
                linear(f"{p}.ff2", f, d)
                norm(f"{p}.ln_det")
                norm(f"{p}.ln_cor")
                norm(f"{p}.ln_out")
        if cfg.has_det_head:
            linear("head_det", d, 2)
        linear("head_cor", d, v)
        return shapes

    def _expected_shapes(self):
        return {name: shape for name, _, shape in self._param_specs()}

    def _init_params(self, rng):
        params = {}
        for name, kind, shape in self._param_specs():
            if kind == "xavier":
                value = _xavier(rng, *shape)
            elif kind == "normal":
                value = rng.normal(0.0, 0.02, size=shape)
            elif kind == "ones":
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            params[name] = nx.Tensor(value, requires_grad=True, name=name)
        return params

    def n_params(self):
        return sum(p.value.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _linear(self, x, prefix):
        y = nx.matmul(x, self.params[prefix + ".w"])
        b = self.params.get(prefix + ".b")
        return y if b is None else nx.add(y, b)

    def _drop(self, x):
        return nx.dropout(x, self.cfg.dropout, getattr(self, "_rng", None))

    def _norm(self, x, prefix):
        return nx.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"], self.cfg.ln_eps)

    # -- building blocks ----------------------------------------------------

    def embed(self, ids):
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        n = ids.shape[1]
        if n > self.cfg.max_len:
            raise DimensionError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        tok = nx.embedding_lookup(self.params["embed.tok"], ids)
        pos = nx.embedding_lookup(self.params["embed.pos"], np.arange(n))
        return nx.add(tok, pos)

    def _attention(self, q, k, v, key_mask):
        """Scaled dot-product attention over ``[B, n, d]`` inputs, heads split from d."""
        b, n, d = q.shape
        h = self.cfg.n_heads
        dk = d // h
        if h > 1:
            q, k, v = (nx.transpose(nx.reshape(t, (b, n, h, dk)), (0, 2, 1, 3)) for t in (q, k, v))
        scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dk))
        mask = None
        if key_mask is not None:
            mask = key_mask[:, None, None, :] if h > 1 else key_mask[:, None, :]
        out = nx.matmul(nx.softmax_rows(scores, mask), v)
        if h > 1:
            out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (b, n, d))
        return out

    def _encoder_layer(self, x, prefix, key_mask):
        a = self._attention(
            self._linear(x, prefix + ".attn.q"),
            self._linear(x, prefix + ".attn.k"),
            self._linear(x, prefix + ".attn.v"),
            key_mask,
        )
        x = self._norm(nx.add(x, self._drop(self._linear(a, prefix + ".attn.o"))), prefix + ".ln1")
        ff = self._linear(nx.relu(self._linear(x, prefix + ".ff1")), prefix + ".ff2")
        return self._norm(nx.add(x, self._drop(ff)), prefix + ".ln2")

    def encode(self, x, which, key_mask=None):
        """Run the detection ("D") or correction ("C") encoder stack."""
        which = which.upper()
        if which == "D":
            if not self.cfg.has_interaction:
                raise ConfigError(f"mode {self.cfg.mode} has no detection encoder")
            branch, depth = "det", self.cfg.det_depth
        elif which == "C":
            branch, depth = "cor", self.cfg.cor_depth
        else:
            raise ValueError(f"encoder must be 'D' or 'C', got {which!r}")
        if depth < 1:
            raise ConfigError(f"{branch} encoder depth must be >= 1")
        for k in range(depth):
            x = self._encoder_layer(x, f"enc_{branch}.{k}", key_mask)
        return x

    def cross_attend(self, query_state, kv_state, side, layer, key_mask=None):
        """Queries from this side's state, keys/values from the other side's."""
        p = f"inter.{layer}.{'det' if side.upper() == 'D' else 'cor'}"
        return self._drop(self._attention(
            self._linear(query_state, p + ".q"),
            self._linear(kv_state, p + ".k"),
            self._linear(kv_state, p + ".v"),
            key_mask,
        ))

    def gated_merge(self, attended, prev, side, layer, override=None):
        """Returns ``(LN(g*attended + (1-g)*prev), g)``."""
        name = "det" if side.upper() == "D" else "cor"
        p = f"inter.{layer}"
        if override is not None:
            if not 0.0 <= override <= 1.0:
                raise ConfigError(f"gate override must lie in [0, 1], got {override}")
            gate = nx.Tensor(np.full(prev.shape, float(override)))
            if override == 0.0:
                mixed = prev
            elif override == 1.0:
                mixed = attended
            else:
                mixed = nx.add(nx.scale(attended, override), nx.scale(prev, 1.0 - override))
        else:
            gate = nx.sigmoid(self._linear(nx.concat_features(attended, prev), f"{p}.gate_{name}"))
            mixed = nx.add(prev, nx.mul(gate, nx.sub(attended, prev)))
        return self._norm(mixed, f"{p}.ln_{name}"), gate

    def fuse_ffn(self, h_det, h_cor, layer):
        p = f"inter.{layer}"
        merged = nx.concat_features(h_det, h_cor)
        ff = self._drop(self._linear(nx.relu(self._linear(merged, p + ".ff1")), p + ".ff2"))
        return (
            self._norm(nx.add(h_det, ff), p + ".ln_out"),
            self._norm(nx.add(h_cor, ff), p + ".ln_out"),
        )

    # -- full passes --------------------------------------------------------

    def forward(self, ids, mask=None, rng=None):
        """``ids`` is ``[B, n]`` (or ``[n]``); ``mask`` marks real tokens.
        Passing ``rng`` switches dropout on (training); without it the pass is deterministic."""
        cfg = self.cfg
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        key_mask = None if mask is None else np.atleast_2d(np.asarray(mask, dtype=bool))
        self._rng = rng
        x = self._drop(self.embed(ids))
        alphas, betas = [], []
        h_cor = self.encode(x, "C", key_mask)
        h_det = None
        if cfg.has_interaction:
            h_det = self.encode(x, "D", key_mask)
            for i in range(cfg.layers):
                att_det = self.cross_attend(h_det, h_cor, "D", i, key_mask)
                att_cor = self.cross_attend(h_cor, h_det, "C", i, key_mask)
                hd, a = self.gated_merge(att_det, h_det, "D", i, cfg.gate_override_alpha)
                hc, b = self.gated_merge(att_cor, h_cor, "C", i, cfg.gate_override_beta)
                h_det, h_cor = self.fuse_ffn(hd, hc, i)
                alphas.append(a.value)
                betas.append(b.value)
        elif cfg.has_det_head:
            h_det = h_cor
        det_logits = self._linear(h_det, "head_det") if cfg.has_det_head else None
        cor_logits = self._linear(h_cor, "head_cor")
        return ForwardTrace(det_logits, cor_logits, alphas, betas, h_det, h_cor)

    def losses(self, trace, y_det, y_cor, mask=None, lam=None):
        """Returns ``(total, det_loss, cor_loss)``; det_loss is None for c-only."""
        lam = self.cfg.lam if lam is None else lam
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
        y_cor = np.atleast_2d(y_cor)
        if mask is None:
            mask = np.ones(y_cor.shape, dtype=bool)
        mask = np.atleast_2d(np.asarray(mask, dtype=bool))
        if not mask.any():
            raise EmptyLossError("no unmasked positions in batch")
        l_cor = nx.cross_entropy(trace.cor_logits, y_cor, mask)
        if trace.det_logits is None:
            return l_cor, None, l_cor
        l_det = nx.cross_entropy(trace.det_logits, np.atleast_2d(y_det), mask)
        total = nx.add(nx.scale(l_cor, lam), nx.scale(l_det, 1.0 - lam))
        return total, l_det, l_cor

    def loss(self, trace, y_det, y_cor, mask=None, lam=None):
        return self.losses(trace, y_det, y_cor, mask, lam)[0]

    def predict(self, ids, mask=None):
        """Argmax decoding. Ties go to the input token (correction) and to 0 (detection)."""
        ids2 = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        with nx.no_grad():
            trace = self.forward(ids2, mask)
        det, cor = decode(trace, ids2)
        if np.asarray(ids).ndim == 1:
            return det[0], cor[0]
        return det, cor


def decode(trace, ids):
    cor_logits = trace.cor_logits.value
    best = cor_logits.max(axis=-1)
    corrected = cor_logits.argmax(axis=-1)
    keep_input = np.take_along_axis(cor_logits, ids[..., None], axis=-1)[..., 0] == best
    corrected = np.where(keep_input, ids, corrected)
    if trace.det_logits is None:
        det = (corrected != ids).astype(np.int64)
    else:
        dl = trace.det_logits.value
        det = (dl[..., 1] > dl[..., 0]).astype(np.int64)
    return det, corrected
