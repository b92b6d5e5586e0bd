"""
Synthetic spelling-check data and parallel TSV ingestion.

A "grammar seed" fixes the symbol inventory, a sparse first-order Markov
chain over the symbols and a confusion table (2-5 plausible wrong substitutes
per symbol). Clean sentences are walks of the chain; corrupted sources swap
positions for confusables. Every sentence has its own RNG stream derived from
(seed, split, index), so output does not depend on generation order.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ConfigError, ParseError

log = logging.getLogger(__name__)

PAD, UNK = 0, 1
RESERVED = ("<pad>", "<unk>")
# CJK unified ideographs: atomic single-character symbols
_SYMBOL_BASE = 0x4E00
_SYMBOL_RANGE = 20902

SPLITS = {"train": 0, "dev": 1, "test": 2}
_STREAM_CLEAN, _STREAM_CORRUPT = 0, 1


class Vocab:
    def __init__(self, symbols):
        tokens = list(RESERVED) + list(symbols)
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary symbols must be unique and not reserved")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def symbols(self):
        return self.tokens[len(RESERVED):]

    def encode(self, text, unknown=None):
        """Map characters to ids; unknown ones become UNK and are counted in ``unknown``."""
        ids = []
        for ch in text:
            i = self.index.get(ch)
            if i is None or i < len(RESERVED):
                i = UNK
                if unknown is not None:
                    unknown[ch] = unknown.get(ch, 0) + 1
            ids.append(i)
        return ids

    def decode(self, ids):
        return "".join(self.tokens[i] for i in ids)

    def hash(self):
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_texts(cls, texts):
        seen = sorted({ch for t in texts for ch in t})
        return cls(seen)


@dataclass
class ConfusionTable:
    """token id -> (confusable ids, weights); never maps a token to itself."""

    entries: dict

    def candidates(self, token):
        return self.entries.get(token)

    def validate(self, vocab_size):
        for tok, (subs, weights) in self.entries.items():
            if tok < len(RESERVED) or tok >= vocab_size:
                raise ConfigError(f"confusion entry for invalid id {tok}")
            if len(subs) == 0 or tok in subs:
                raise ConfigError(f"bad confusion set for id {tok}")
            if min(subs) < len(RESERVED) or max(subs) >= vocab_size:
                raise ConfigError(f"confusion set of {tok} references an invalid id")
            if not np.all(np.isfinite(weights)) or np.any(np.asarray(weights) <= 0):
                raise ConfigError(f"confusion weights of {tok} must be positive and finite")


@dataclass
class Sample:
    source: list
    target: list
    det: list = None

    def __post_init__(self):
        labels = derive_labels(self.source, self.target)
        if self.det is not None and list(self.det) != labels:
            raise AlignmentError("stored detection labels disagree with source/target")
        self.det = labels

    def __len__(self):
        return len(self.source)


def derive_labels(source, target):
    if len(source) != len(target):
        raise AlignmentError(f"source length {len(source)} != target length {len(target)}")
    return [int(s != t) for s, t in zip(source, target)]


@dataclass
class CorpusConfig:
    n_symbols: int = 200
    grammar_seed: int = 0
    seed: int = 0
    successors: tuple = (2, 4)
    confusables: tuple = (2, 5)
    length: tuple = (8, 20)
    error_rate: float = 0.15
    sizes: dict = field(default_factory=lambda: {"train": 10000, "dev": 1000, "test": 1000})

    def __post_init__(self):
        self.successors = tuple(self.successors)
        self.confusables = tuple(self.confusables)
        self.length = tuple(self.length)
        self.sizes = dict(self.sizes)
        if self.n_symbols < 1:
            raise ConfigError("empty vocabulary: n_symbols must be >= 1")
        if not 0.0 <= self.error_rate <= 1.0:
            raise ConfigError(f"error_rate must lie in [0, 1], got {self.error_rate}")
        lo, hi = self.length
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad length range {self.length}")
        if set(self.sizes) - set(SPLITS):
            raise ConfigError(f"unknown splits {sorted(set(self.sizes) - set(SPLITS))}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        for k in ("successors", "confusables", "length"):
            d[k] = list(d[k])
        return d


def _rank_weights(k):
    w = 1.0 / np.arange(1, k + 1)
    return w / w.sum()


@dataclass
class Grammar:
    """Symbol inventory, transition matrix over vocabulary ids, confusion table."""

    vocab: Vocab
    transitions: np.ndarray
    confusion: ConfusionTable
    start: np.ndarray = None

    def __post_init__(self):
        if self.start is None:
            self.start = stationary_distribution(self.transitions)


def stationary_distribution(transitions):
    """Left eigenvector of the transition matrix for eigenvalue 1 (reserved ids get 0)."""
    n = transitions.shape[0]
    live = transitions.sum(axis=1) > 0
    pi = np.zeros(n)
    idx = np.flatnonzero(live)
    sub = transitions[np.ix_(idx, idx)].T - np.eye(len(idx))
    sub[-1] = 1.0
    rhs = np.zeros(len(idx))
    rhs[-1] = 1.0
    pi[idx] = np.linalg.solve(sub, rhs)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def build_grammar(cfg):
    if cfg.n_symbols < 1:
        raise ConfigError("empty vocabulary")
    rng = np.random.default_rng([cfg.grammar_seed, 7919])
    codes = np.sort(rng.choice(_SYMBOL_RANGE, size=cfg.n_symbols, replace=False))
    vocab = Vocab([chr(_SYMBOL_BASE + int(c)) for c in codes])
    v = len(vocab)
    ids = np.arange(len(RESERVED), v)

    trans = np.zeros((v, v))
    lo, hi = cfg.successors
    for tok in ids:
        k = int(rng.integers(lo, hi + 1))
        k = min(k, len(ids))
        succ = rng.choice(ids, size=k, replace=False)
        trans[tok, succ] = _rank_weights(k)

    entries = {}
    lo, hi = cfg.confusables
    for tok in ids:
        others = ids[ids != tok]
        k = min(int(rng.integers(lo, hi + 1)), len(others))
        if k == 0:
            continue
        subs = rng.choice(others, size=k, replace=False)
        entries[int(tok)] = (subs.astype(np.int64), _rank_weights(k))
    confusion = ConfusionTable(entries)
    confusion.validate(v)
    return Grammar(vocab, trans, confusion)


def _sentence_rng(seed, split, index, stream):
    return np.random.default_rng([seed, split, index, stream])


def generate_clean(grammar, count, length, seed, split=0):
    """``count`` chain walks with lengths uniform in ``length`` (inclusive)."""
    if len(grammar.vocab) <= len(RESERVED):
        raise ConfigError("empty vocabulary")
    cum = np.cumsum(grammar.transitions, axis=1)
    start_cum = np.cumsum(grammar.start)
    lo, hi = length
    out = []
    for i in range(count):
        rng = _sentence_rng(seed, split, i, _STREAM_CLEAN)
        n = int(rng.integers(lo, hi + 1))
        u = rng.random(n)
        tok = min(int(np.searchsorted(start_cum, u[0] * start_cum[-1], side="right")), len(start_cum) - 1)
        sent = [tok]
        for j in range(1, n):
            row = cum[tok]
            tok = min(int(np.searchsorted(row, u[j] * row[-1], side="right")), len(row) - 1)
            sent.append(tok)
        out.append(sent)
    return out


def corrupt(sentence, error_rate, table, rng):
    """Replace each position with probability ``error_rate`` by a weighted confusable.

    ``rng`` is a numpy Generator or an int/sequence seed.
    """
    if not 0.0 <= error_rate <= 1.0:
        raise ConfigError(f"error_rate must lie in [0, 1], got {error_rate}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = len(sentence)
    hit = rng.random(n) < error_rate
    pick = rng.random(n)
    source = list(sentence)
    for i, tok in enumerate(sentence):
        if not hit[i] or tok < len(RESERVED):
            continue
        cand = table.candidates(tok)
        if cand is None:
            continue
        subs, weights = cand
        j = min(int(np.searchsorted(np.cumsum(weights), pick[i] * weights.sum(), side="right")), len(subs) - 1)
        source[i] = int(subs[j])
    return Sample(source, list(sentence))


def generate_split(grammar, cfg, split):
    sid = SPLITS[split]
    clean = generate_clean(grammar, cfg.sizes.get(split, 0), cfg.length, cfg.seed, sid)
    return [
        corrupt(s, cfg.error_rate, grammar.confusion, _sentence_rng(cfg.seed, sid, i, _STREAM_CORRUPT))
        for i, s in enumerate(clean)
    ]


def generate_corpus(cfg):
    """Returns ``(vocab, {split: [Sample]}, grammar)``."""
    grammar = build_grammar(cfg)
    data = {split: generate_split(grammar, cfg, split) for split in SPLITS}
    return grammar.vocab, data, grammar


# ---------------------------------------------------------------------------
# TSV and manifest


def save_tsv(path, samples, vocab):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(f"{vocab.decode(s.source)}\t{vocab.decode(s.target)}\n")


def load_tsv(path, vocab):
    """One ``source<TAB>target`` pair per line; characters are tokens."""
    samples, unknown = [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected source<TAB>target, found {len(parts) - 1} tabs", lineno)
            src, tgt = parts
            if len(src) != len(tgt):
                raise AlignmentError(f"line {lineno}: source length {len(src)} != target length {len(tgt)}")
            samples.append(Sample(vocab.encode(src, unknown), vocab.encode(tgt, unknown)))
    if unknown:
        log.warning("%s: %d unknown character occurrences mapped to UNK", path, sum(unknown.values()))
    return samples


def write_dataset(out_dir, cfg):
    """Generate all splits and write ``{split}.tsv`` plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab, data, _ = generate_corpus(cfg)
    for split, samples in data.items():
        save_tsv(out_dir / f"{split}.tsv", samples, vocab)
    manifest = {
        "format": "bidc-corpus-1",
        "config": cfg.to_dict(),
        "vocab_hash": vocab.hash(),
        "vocab": vocab.symbols,
        "counts": {split: len(samples) for split, samples in data.items()},
        "errors": {split: sum(sum(s.det) for s in samples) for split, samples in data.items()},
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, ensure_ascii=False, indent=1, sort_keys=True)
        fh.write("\n")
    return vocab, data


def load_dataset(data_dir, splits=("train", "dev", "test")):
    """Read a directory written by ``write_dataset`` (or any dir of TSVs plus manifest)."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        vocab = Vocab(manifest["vocab"])
    else:
        texts = []
        for split in splits:
            p = data_dir / f"{split}.tsv"
            if p.exists():
                for line in p.read_text(encoding="utf-8").splitlines():
                    texts.extend(line.split("\t"))
        vocab = Vocab.from_texts(texts)
        manifest = {"vocab_hash": vocab.hash(), "vocab": vocab.symbols}
    data = {}
    for split in splits:
        p = data_dir / f"{split}.tsv"
        if p.exists():
            data[split] = load_tsv(p, vocab)
    return vocab, data, manifest
