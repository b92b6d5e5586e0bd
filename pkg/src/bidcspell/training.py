"""
Mini-batch training with AdamW, global-norm clipping and best-dev retention,
plus the binary checkpoint format.

Checkpoint layout: the magic line ``BIDC1\\n``, one line of JSON header
(model config, vocabulary, parameter names and shapes, optional optimizer and
training state), then every array as raw little-endian float64 in header
order: parameters, then AdamW first moments, then second moments.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import numeric as nx
from .corpus import PAD
from .errors import ConfigError, CorruptionError, FormatError, NumericError
from .evaluation import evaluate
from .model import BiDCSpell, ModelConfig, decode

log = logging.getLogger(__name__)

MAGIC = b"BIDC1\n"
EVAL_BATCH = 64


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    eval_every: int = 1
    log_path: Optional[str] = None

    # fine-tuning rate for a pretrained 12-layer backbone
    FINETUNE_LR = 5e-5

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for name in ("batch_size", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("learning_rate", "eps", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(d["betas"])
        return d


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(
            {k: np.zeros_like(p) for k, p in params.items()},
            {k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(params, grads, state, cfg, t):
    """One AdamW update in place; ``params``/``grads`` map names to arrays."""
    if t < 1:
        raise ValueError("AdamW step counter starts at 1")
    b1, b2 = cfg.betas
    lr, wd, eps = cfg.learning_rate, cfg.weight_decay, cfg.eps
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if wd:
            update += wd * p
        p -= lr * update
    state.t = t


def clip_grads(grads, max_norm):
    """Scale ``grads`` in place so the global norm is at most ``max_norm``. Returns the pre-clip norm."""
    norm = nx.global_norm(grads.values())
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# ---------------------------------------------------------------------------
# batching and inference


def make_batch(samples):
    """Pad to the longest sample. Returns ids, mask, detection and correction targets."""
    n = max(len(s) for s in samples)
    b = len(samples)
    ids = np.full((b, n), PAD, dtype=np.int64)
    y_cor = np.full((b, n), PAD, dtype=np.int64)
    y_det = np.zeros((b, n), dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    for i, s in enumerate(samples):
        k = len(s)
        ids[i, :k] = s.source
        y_cor[i, :k] = s.target
        y_det[i, :k] = s.det
        mask[i, :k] = True
    return ids, mask, y_det, y_cor


@dataclass
class Predictions:
    items: list
    gate_means: dict = field(default_factory=dict)


def predict_samples(model, samples, batch_size=EVAL_BATCH):
    """Decode every sample; also average gate values per interaction layer over real tokens."""
    items = []
    sums = {}
    count = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        ids, mask, _, _ = make_batch(chunk)
        with nx.no_grad():
            trace = model.forward(ids, mask)
        det, cor = decode(trace, ids)
        for i, s in enumerate(chunk):
            k = len(s)
            items.append((det[i, :k].tolist(), cor[i, :k].tolist()))
        count += int(mask.sum())
        for i, (a, b) in enumerate(zip(trace.alphas, trace.betas)):
            sa, sb = sums.get(i, (0.0, 0.0))
            sums[i] = (sa + float(a.mean(axis=-1)[mask].sum()), sb + float(b.mean(axis=-1)[mask].sum()))
    means = {i: {"alpha": sa / count, "beta": sb / count} for i, (sa, sb) in sums.items()} if count else {}
    return Predictions(items, means)


def evaluate_model(model, samples, batch_size=EVAL_BATCH):
    preds = predict_samples(model, samples, batch_size)
    return evaluate(preds.items, samples), preds


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    vocab: Optional[list] = None
    optimizer: Optional[AdamState] = None
    train_state: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model, vocab=None, optimizer=None, train_state=None):
        params = {k: p.value.copy() for k, p in model.params.items()}
        opt = None
        if optimizer is not None:
            opt = AdamState(
                {k: a.copy() for k, a in optimizer.m.items()},
                {k: a.copy() for k, a in optimizer.v.items()},
                optimizer.t,
            )
        return cls(model.cfg, params, vocab, opt, dict(train_state or {}))

    def to_model(self):
        params = {k: nx.Tensor(v.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return BiDCSpell(self.config, params=params)

    @property
    def vocab_hash(self):
        if self.vocab is None:
            return None
        from .corpus import Vocab

        return Vocab(self.vocab).hash()

    def to_bytes(self):
        names = list(self.params)
        header = {
            "config": self.config.to_dict(),
            "vocab": self.vocab,
            "vocab_hash": self.vocab_hash,
            "params": [[k, list(self.params[k].shape)] for k in names],
            "optimizer": None if self.optimizer is None else {"t": self.optimizer.t},
            "train_state": self.train_state,
        }
        chunks = [MAGIC, json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"), b"\n"]
        arrays = [self.params[k] for k in names]
        if self.optimizer is not None:
            arrays += [self.optimizer.m[k] for k in names] + [self.optimizer.v[k] for k in names]
        for a in arrays:
            chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob):
        if not blob.startswith(MAGIC):
            raise FormatError("not a BIDC1 checkpoint (bad magic)")
        end = blob.find(b"\n", len(MAGIC))
        if end < 0:
            raise CorruptionError("checkpoint header is truncated")
        try:
            header = json.loads(blob[len(MAGIC):end].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CorruptionError(f"unreadable checkpoint header: {e}") from None
        specs = [(k, tuple(shape)) for k, shape in header["params"]]
        sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in specs]
        n_groups = 1 if header["optimizer"] is None else 3
        expected = 8 * sum(sizes) * n_groups
        payload = memoryview(blob)[end + 1:]
        if len(payload) != expected:
            raise CorruptionError(f"checkpoint payload is {len(payload)} bytes, header implies {expected}")
        cfg = ModelConfig.from_dict(header["config"])
        reference = BiDCSpell(cfg, params={})._expected_shapes()
        if reference != dict(specs):
            raise CorruptionError("parameter shapes in header disagree with the model config")
        groups, offset = [], 0
        for _ in range(n_groups):
            g = {}
            for (k, shape), size in zip(specs, sizes):
                g[k] = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).astype(np.float64).reshape(shape)
                offset += 8 * size
            groups.append(g)
        opt = None
        if n_groups == 3:
            opt = AdamState(groups[1], groups[2], int(header["optimizer"]["t"]))
        return cls(cfg, groups[0], header["vocab"], opt, header.get("train_state") or {})


def save_checkpoint(path, ckpt):
    blob = ckpt.to_bytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    steps: list = field(default_factory=list)


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: TrainLog


def _batch_loss(model, batch, rng=None):
    ids, mask, y_det, y_cor = batch
    trace = model.forward(ids, mask, rng=rng)
    return model.losses(trace, y_det, y_cor, mask)


def train(model_cfg, train_set, dev_set, cfg, vocab=None, resume=None, resume_best=None, on_epoch=None):
    """Train from scratch (seeded by ``cfg.seed``) or continue from ``resume``.

    Returns the best-dev-correction-F1 checkpoint, the final checkpoint and the log.
    ``on_epoch(epoch, result_so_far)`` is called after every epoch.
    """
    if not train_set:
        raise ConfigError("training set is empty")
    if cfg.epochs and not dev_set:
        raise ConfigError("dev set is empty")
    vocab_tokens = None if vocab is None else list(vocab.symbols)

    if resume is not None:
        model = resume.to_model()
        opt = resume.optimizer or AdamState.zeros({k: p.value for k, p in model.params.items()})
        state = dict(resume.train_state)
        vocab_tokens = vocab_tokens or resume.vocab
    else:
        model = BiDCSpell(model_cfg, seed=cfg.seed)
        opt = AdamState.zeros({k: p.value for k, p in model.params.items()})
        state = {"epoch": 0, "best_f1": -1.0, "best_epoch": 0}
    values = {k: p.value for k, p in model.params.items()}

    best = resume_best
    if best is None and resume is None:
        best = Checkpoint.from_model(model, vocab_tokens, train_state=dict(state))
    tlog = TrainLog()
    log_fh = open(cfg.log_path, "a", encoding="utf-8") if cfg.log_path else None
    try:
        for epoch in range(state["epoch"] + 1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
            sums = np.zeros(3)
            n_batches = 0
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = make_batch([train_set[i] for i in order[start:start + cfg.batch_size]])
                model.zero_grad()
                # dropout stream keyed by (seed, epoch, step) so a resumed run draws the same masks
                total, l_det, l_cor = _batch_loss(model, batch, np.random.default_rng([cfg.seed, epoch, step, 1]))
                lv = total.item()
                if not math.isfinite(lv):
                    raise NumericError(f"loss diverged (value {lv}) at epoch {epoch}, step {step}")
                nx.backward(total)
                grads = {k: p.grad for k, p in model.params.items()}
                pre = clip_grads(grads, cfg.clip_norm)
                adamw_step(values, grads, opt, cfg, opt.t + 1)
                ld = l_det.item() if l_det is not None else None
                lc = l_cor.item()
                tlog.steps.append(
                    {"loss": lv, "loss_det": ld, "loss_cor": lc, "grad_norm": pre,
                     "clipped_norm": min(pre, cfg.clip_norm)}
                )
                sums += (lv, 0.0 if l_det is None else ld, lc)
                n_batches += 1
            means = sums / n_batches
            record = {
                "epoch": epoch,
                "loss": float(means[0]),
                "loss_det": float(means[1]) if model.cfg.has_det_head else None,
                "loss_cor": float(means[2]),
            }
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                report, _ = evaluate_model(model, dev_set)
                record.update(
                    dev_det_f1=report.sentence_detection.f1,
                    dev_cor_f1=report.sentence_correction.f1,
                    dev_hard_det_f1=report.hard_detection.f1,
                )
                if report.sentence_correction.f1 > state["best_f1"]:
                    state["best_f1"] = report.sentence_correction.f1
                    state["best_epoch"] = epoch
                    best = Checkpoint.from_model(model, vocab_tokens, train_state=dict(state, epoch=epoch))
            state["epoch"] = epoch
            record["wall_time"] = time.perf_counter() - t0
            tlog.epochs.append(record)
            log.info("epoch %d %s", epoch, {k: v for k, v in record.items() if k != "epoch"})
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                last = Checkpoint.from_model(model, vocab_tokens, opt, state)
                on_epoch(epoch, TrainResult(best or last, last, tlog))
    finally:
        if log_fh:
            log_fh.close()
    last = Checkpoint.from_model(model, vocab_tokens, opt, state)
    return TrainResult(best or last, last, tlog)
