"""
Ablation and sweep runners. Every cell trains its own model from the same
seed on the same corpus, so results depend only on the config and seed; the
output order is grid order whatever the thread count.
"""

import ast
import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import check_grid
from .corpus import generate_corpus
from .model import BiDCSpell
from .training import evaluate_model, train

log = logging.getLogger(__name__)

ABLATION_MODES = ("bidc", "d2c", "c-only")
METRICS = ("det_f1", "cor_f1", "hard_det_f1", "char_det_f1", "char_cor_f1", "consistency_char", "consistency_sent")


def report_metrics(report):
    return {
        "det_f1": report.sentence_detection.f1,
        "cor_f1": report.sentence_correction.f1,
        "hard_det_f1": report.hard_detection.f1,
        "char_det_f1": report.char_detection.f1,
        "char_cor_f1": report.char_correction.f1,
        "consistency_char": report.consistency.character_level,
        "consistency_sent": report.consistency.sentence_level,
    }


def load_corpus(exp):
    vocab, data, _ = generate_corpus(exp.corpus)
    return vocab, data


def model_config(exp, vocab, **overrides):
    return replace(exp.model, vocab_size=len(vocab), **overrides)


def run_cell(exp, vocab, data, seed, split="test", **overrides):
    """Train one model and evaluate its best-dev checkpoint on ``split``."""
    cfg = model_config(exp, vocab, **overrides)
    tcfg = replace(exp.train, seed=seed, log_path=None)
    result = train(cfg, data["train"], data["dev"], tcfg, vocab=vocab)
    model = result.best.to_model()
    report, preds = evaluate_model(model, data[split])
    row = report_metrics(report)
    row["best_epoch"] = result.best.train_state.get("epoch", 0)
    row["gate_means"] = preds.gate_means
    row["epoch_loss"] = [r["loss"] for r in result.log.epochs]
    row["dev_cor_f1"] = [r.get("dev_cor_f1") for r in result.log.epochs]
    return row, result


def _map(fn, jobs, threads):
    if threads <= 1:
        return [fn(*j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda j: fn(*j), jobs))


def _cell(exp, vocab, data, seed, split, cache_dir, **overrides):
    if cache_dir is not None:
        return cached_cell(exp, vocab, data, seed, cache_dir, split, **overrides)
    return run_cell(exp, vocab, data, seed, split, **overrides)[0]


def ablate(exp, seeds, threads=1, modes=ABLATION_MODES, cache_dir=None):
    """Train every mode for every seed. Returns per-run rows, per-mode means
    and the mean deltas against the c-only baseline."""
    if not seeds:
        raise ValueError("ablation needs at least one seed")
    vocab, data = load_corpus(exp)
    jobs = [(seed, mode) for seed in seeds for mode in modes]

    def one(seed, mode):
        extra = {"gate_override_alpha": None, "gate_override_beta": None} if mode != "d2c" else {}
        row = _cell(exp, vocab, data, seed, exp.eval.split, cache_dir, mode=mode, **extra)
        log.info("ablate seed=%d mode=%s cor_f1=%.4f", seed, mode, row["cor_f1"])
        return {"seed": seed, "mode": mode, **row}

    rows = _map(one, jobs, threads)
    means = {m: {k: float(np.mean([r[k] for r in rows if r["mode"] == m])) for k in METRICS} for m in modes}
    deltas = {}
    if "c-only" in means:
        base = means["c-only"]
        deltas = {m: {k: means[m][k] - base[k] for k in ("det_f1", "cor_f1")} for m in modes if m != "c-only"}
    return {"rows": rows, "means": means, "deltas": deltas}


def sweep(exp, kind, grid=None, seeds=(0,), threads=1, inference_only=False, cache_dir=None):
    """Grid experiment. ``gates`` runs the full alpha x beta product of ``grid``."""
    from .config import DEFAULT_GRIDS

    grid = list(grid) if grid is not None else list(DEFAULT_GRIDS[kind])
    check_grid(kind, grid)
    vocab, data = load_corpus(exp)
    split = exp.eval.split
    if kind == "gates":
        cells = [{"alpha": a, "beta": b} for a in grid for b in grid]
    elif kind == "lambda":
        cells = [{"lambda": g} for g in grid]
    elif kind == "layers":
        cells = [{"layers": int(g)} for g in grid]
    else:
        raise ValueError(f"unknown sweep kind {kind!r}")

    def overrides(cell):
        if "alpha" in cell:
            return {"mode": "bidc", "gate_override_alpha": cell["alpha"], "gate_override_beta": cell["beta"]}
        if "lambda" in cell:
            return {"lam": cell["lambda"]}
        return {"layers": cell["layers"]}

    if inference_only:
        if kind != "gates":
            raise ValueError("--inference-only applies to the gates sweep")
        base = {}
        for seed in seeds:
            _, res = run_cell(exp, vocab, data, seed, split, mode="bidc",
                              gate_override_alpha=None, gate_override_beta=None)
            base[seed] = res.best

        def one(seed, cell):
            ck = base[seed]
            cfg = replace(ck.config, **overrides(cell))
            model = BiDCSpell(cfg, params={k: p for k, p in ck.to_model().params.items()})
            report, preds = evaluate_model(model, data[split])
            return {"seed": seed, **cell, **report_metrics(report), "gate_means": preds.gate_means}
    else:
        def one(seed, cell):
            row = _cell(exp, vocab, data, seed, split, cache_dir, **overrides(cell))
            log.info("sweep %s seed=%d cor_f1=%.4f", cell, seed, row["cor_f1"])
            return {"seed": seed, **cell, **row}

    jobs = [(seed, cell) for cell in cells for seed in seeds]
    return {"kind": kind, "grid": grid, "rows": _map(one, jobs, threads)}


def write_results(result, out_dir, stem):
    """Write ``<stem>.json`` (everything) and ``<stem>.csv`` (scalar columns, one row per run)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}.json", "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    rows = result["rows"]
    cols = [k for k in rows[0] if not isinstance(rows[0][k], (dict, list))] if rows else []
    with open(out_dir / f"{stem}.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])


# ---------------------------------------------------------------------------
# result cache for long experiments

_FINGERPRINT_MODULES = ("numeric", "model", "corpus", "training", "evaluation", "experiments")


def _strip_docstrings(tree):
    for node in ast.walk(tree):
        if isinstance(node, (ast.Module, ast.FunctionDef, ast.ClassDef, ast.AsyncFunctionDef)):
            body = node.body
            if body and isinstance(body[0], ast.Expr) and isinstance(getattr(body[0], "value", None), ast.Constant) \
                    and isinstance(body[0].value.value, str):
                node.body = body[1:] or [ast.Pass()]
    return tree


def source_fingerprint():
    """Hash of the code that determines numerical results, ignoring comments and docstrings."""
    h = hashlib.sha256()
    here = Path(__file__).resolve().parent
    for name in _FINGERPRINT_MODULES:
        tree = _strip_docstrings(ast.parse((here / f"{name}.py").read_text(encoding="utf-8")))
        h.update(ast.unparse(tree).encode("utf-8"))
    return h.hexdigest()[:16]


def cached_cell(exp, vocab, data, seed, cache_dir, split="test", **overrides):
    """``run_cell`` with its row stored under ``cache_dir``, keyed by the full
    run configuration and the source fingerprint."""
    cfg = model_config(exp, vocab, **overrides)
    run = {
        "corpus": exp.corpus.to_dict(),
        "model": cfg.to_dict(),
        "train": replace(exp.train, seed=seed, log_path=None).to_dict(),
        "split": split,
        "source": source_fingerprint(),
    }
    key = hashlib.sha256(json.dumps(run, sort_keys=True).encode("utf-8")).hexdigest()[:20]
    cache_dir = Path(cache_dir)
    path = cache_dir / f"{key}.json"
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)["row"]
    t0 = time.perf_counter()
    row, _ = run_cell(exp, vocab, data, seed, split, **overrides)
    row["wall_time"] = time.perf_counter() - t0
    row = json.loads(json.dumps(row))
    cache_dir.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump({"run": run, "row": row}, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)
    return row
