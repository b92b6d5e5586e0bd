"""
Spelling-check metrics: sentence and character level detection/correction
P/R/F1, hard detection (read from the detection classifier rather than from
the corrector's edits) and detector/corrector consistency.

Sentence-level convention: a sentence is flagged when the prediction marks at
least one position. It is a true positive only when the gold sentence has
errors and the flagged position set equals the gold error set (correction
also needs every output token to equal the target). A flagged sentence that
is not a true positive is a false positive; an erroneous gold sentence that
is not a true positive is a false negative, so a partially right sentence
counts as both.
"""

import json
from dataclasses import asdict, dataclass, field

from .errors import AlignmentError

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "definitions": {
        "prf": {
            "type": "object",
            "properties": {
                "precision": {"type": "number", "minimum": 0, "maximum": 1},
                "recall": {"type": "number", "minimum": 0, "maximum": 1},
                "f1": {"type": "number", "minimum": 0, "maximum": 1},
                "tp": {"type": "integer", "minimum": 0},
                "fp": {"type": "integer", "minimum": 0},
                "fn": {"type": "integer", "minimum": 0},
                "zero_denominator": {"type": "boolean"},
            },
            "required": ["precision", "recall", "f1", "tp", "fp", "fn", "zero_denominator"],
            "additionalProperties": False,
        },
        "pair": {
            "type": "object",
            "properties": {
                "detection": {"$ref": "#/definitions/prf"},
                "correction": {"$ref": "#/definitions/prf"},
            },
            "required": ["detection", "correction"],
            "additionalProperties": False,
        },
    },
    "properties": {
        "sentence": {"$ref": "#/definitions/pair"},
        "character": {"$ref": "#/definitions/pair"},
        "hard_detection": {"$ref": "#/definitions/prf"},
        "consistency": {
            "type": "object",
            "properties": {
                "character_level": {"type": "number", "minimum": 0, "maximum": 1},
                "sentence_level": {"type": "number", "minimum": 0, "maximum": 1},
            },
            "required": ["character_level", "sentence_level"],
            "additionalProperties": False,
        },
        "n_sentences": {"type": "integer", "minimum": 0},
        "n_positions": {"type": "integer", "minimum": 0},
    },
    "required": ["sentence", "character", "hard_detection", "consistency", "n_sentences", "n_positions"],
    "additionalProperties": False,
}


@dataclass
class PRF:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self):
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self):
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def zero_denominator(self):
        return self.tp + self.fp == 0 or self.tp + self.fn == 0

    def to_dict(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "zero_denominator": self.zero_denominator,
        }


@dataclass
class Consistency:
    character_level: float = 0.0
    sentence_level: float = 0.0


@dataclass
class EvalReport:
    sentence_detection: PRF = field(default_factory=PRF)
    sentence_correction: PRF = field(default_factory=PRF)
    char_detection: PRF = field(default_factory=PRF)
    char_correction: PRF = field(default_factory=PRF)
    hard_detection: PRF = field(default_factory=PRF)
    consistency: Consistency = field(default_factory=Consistency)
    n_sentences: int = 0
    n_positions: int = 0

    def to_dict(self):
        return {
            "sentence": {
                "detection": self.sentence_detection.to_dict(),
                "correction": self.sentence_correction.to_dict(),
            },
            "character": {
                "detection": self.char_detection.to_dict(),
                "correction": self.char_correction.to_dict(),
            },
            "hard_detection": self.hard_detection.to_dict(),
            "consistency": asdict(self.consistency),
            "n_sentences": self.n_sentences,
            "n_positions": self.n_positions,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        def prf(x):
            return PRF(x["tp"], x["fp"], x["fn"])

        return cls(
            prf(d["sentence"]["detection"]),
            prf(d["sentence"]["correction"]),
            prf(d["character"]["detection"]),
            prf(d["character"]["correction"]),
            prf(d["hard_detection"]),
            Consistency(**d["consistency"]),
            d["n_sentences"],
            d["n_positions"],
        )

    def render(self):
        rows = [
            ("sentence detection", self.sentence_detection),
            ("sentence correction", self.sentence_correction),
            ("char detection", self.char_detection),
            ("char correction", self.char_correction),
            ("hard detection", self.hard_detection),
        ]
        lines = [f"{'metric':<22}{'P':>8}{'R':>8}{'F1':>8}{'TP':>7}{'FP':>7}{'FN':>7}"]
        for name, m in rows:
            flag = " *" if m.zero_denominator else ""
            lines.append(
                f"{name:<22}{100 * m.precision:8.2f}{100 * m.recall:8.2f}{100 * m.f1:8.2f}"
                f"{m.tp:7d}{m.fp:7d}{m.fn:7d}{flag}"
            )
        c = self.consistency
        lines.append(f"consistency  char {100 * c.character_level:.2f}  sentence {100 * c.sentence_level:.2f}")
        lines.append(f"{self.n_sentences} sentences, {self.n_positions} positions (* zero denominator)")
        return "\n".join(lines)


def validate_report(d):
    import jsonschema

    jsonschema.validate(d, REPORT_SCHEMA)


def _check(*seqs):
    n = len(seqs[0])
    for s in seqs[1:]:
        if len(s) != n:
            raise AlignmentError(f"sequence lengths differ: {n} vs {len(s)}")


def _sentence_counts(flagged_sets, gold, exact_tokens=None):
    m = PRF()
    for i, (flagged, sample) in enumerate(zip(flagged_sets, gold)):
        gold_set = {j for j, y in enumerate(sample.det) if y}
        tp = bool(gold_set) and flagged == gold_set
        if exact_tokens is not None:
            tp = tp and exact_tokens[i]
        if tp:
            m.tp += 1
        else:
            if flagged:
                m.fp += 1
            if gold_set:
                m.fn += 1
    return m


def sentence_metrics(predictions, gold):
    """``predictions``: (det labels, corrected ids) per sentence. Detection is
    read from the corrector's edits (positions where corrected != source)."""
    _check(predictions, gold)
    flagged, exact = [], []
    for (_, corrected), sample in zip(predictions, gold):
        _check(corrected, sample.source)
        flagged.append({j for j, (c, s) in enumerate(zip(corrected, sample.source)) if c != s})
        exact.append(list(corrected) == list(sample.target))
    return _sentence_counts(flagged, gold), _sentence_counts(flagged, gold, exact)


def hard_detection_metrics(det_labels, gold):
    _check(det_labels, gold)
    flagged = []
    for labels, sample in zip(det_labels, gold):
        _check(labels, sample.source)
        flagged.append({j for j, y in enumerate(labels) if y})
    return _sentence_counts(flagged, gold)


def character_metrics(predictions, gold):
    _check(predictions, gold)
    det, cor = PRF(), PRF()
    for (_, corrected), sample in zip(predictions, gold):
        _check(corrected, sample.source)
        for c, s, t in zip(corrected, sample.source, sample.target):
            pred_err, gold_err = c != s, s != t
            if pred_err and gold_err:
                det.tp += 1
            elif pred_err:
                det.fp += 1
            elif gold_err:
                det.fn += 1
            if pred_err and gold_err and c == t:
                cor.tp += 1
            else:
                cor.fp += pred_err
                cor.fn += gold_err
    return det, cor


def consistency_metrics(det_labels, sources, corrected):
    """Share of positions (and of whole sentences) where the detector's flag
    agrees with whether the corrector changed the token."""
    _check(det_labels, sources, corrected)
    n_pos = n_ok = n_sent_ok = 0
    for labels, src, cor in zip(det_labels, sources, corrected):
        _check(labels, src, cor)
        ok = [(y == 1) == (c != s) for y, s, c in zip(labels, src, cor)]
        n_pos += len(ok)
        n_ok += sum(ok)
        n_sent_ok += all(ok)
    n_sent = len(sources)
    return Consistency(n_ok / n_pos if n_pos else 0.0, n_sent_ok / n_sent if n_sent else 0.0)


def evaluate(predictions, gold):
    sd, sc = sentence_metrics(predictions, gold)
    cd, cc = character_metrics(predictions, gold)
    hard = hard_detection_metrics([p[0] for p in predictions], gold)
    cons = consistency_metrics(
        [p[0] for p in predictions], [s.source for s in gold], [p[1] for p in predictions]
    )
    return EvalReport(sd, sc, cd, cc, hard, cons, len(gold), sum(len(s) for s in gold))
