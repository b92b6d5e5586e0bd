"""bidc: command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import numeric as nx
from .config import SWEEP_KINDS, ExperimentConfig, check_grid
from .corpus import UNK, generate_corpus, load_dataset, write_dataset
from .errors import BidcError, CompatibilityError, ConfigError, DataError
from .experiments import ABLATION_MODES, ablate, sweep, write_results
from .model import MODES, BiDCSpell, ModelConfig
from .training import Checkpoint, evaluate_model, load_checkpoint, save_checkpoint, train

log = logging.getLogger("bidcspell")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _setup_logging():
    level = os.environ.get("BIDC_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"BIDC_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
                        force=True)


def _experiment(args):
    exp = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        exp.train = replace(exp.train, seed=args.seed)
    return exp


def _load_data(args, exp):
    """Dataset from ``--data`` when given, else generated in memory from the corpus config."""
    if getattr(args, "data", None):
        vocab, data, _ = load_dataset(args.data)
    else:
        vocab, data, _ = generate_corpus(exp.corpus)
    return vocab, data


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, exp):
    cfg = exp.corpus if args.seed is None else replace(exp.corpus, seed=args.seed)
    vocab, data = write_dataset(Path(args.out), cfg)
    counts = {k: len(v) for k, v in data.items()}
    print(f"wrote {counts} to {args.out} (vocab hash {vocab.hash()})")


def cmd_train(args, exp):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
        if args.mode != "d2c":
            overrides.update(gate_override_alpha=None, gate_override_beta=None)
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.layers is not None:
        overrides["layers"] = args.layers
    vocab, data = _load_data(args, exp)
    tcfg = replace(exp.train, log_path=str(out / "train_log.jsonl"))
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    resume = resume_best = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        _check_vocab(resume, vocab)
        best_path = Path(args.resume).with_name("best.ckpt")
        if best_path.exists():
            resume_best = load_checkpoint(best_path)
        mcfg = resume.config
    else:
        mcfg = replace(exp.model, vocab_size=len(vocab), **overrides)
        if tcfg.log_path and os.path.exists(tcfg.log_path):
            os.remove(tcfg.log_path)
    result = train(mcfg, data["train"], data["dev"], tcfg, vocab=vocab, resume=resume, resume_best=resume_best)
    save_checkpoint(out / "best.ckpt", result.best)
    save_checkpoint(out / "last.ckpt", result.last)
    state = result.best.train_state
    print(f"best dev correction F1 {state.get('best_f1', 0.0):.4f} at epoch {state.get('best_epoch', 0)}; "
          f"checkpoints in {out}")


def _check_vocab(ckpt, vocab):
    if ckpt.vocab is not None and ckpt.vocab_hash != vocab.hash():
        raise CompatibilityError(
            f"checkpoint vocabulary {ckpt.vocab_hash} does not match dataset vocabulary {vocab.hash()}"
        )


def cmd_eval(args, exp):
    ckpt = load_checkpoint(args.checkpoint)
    vocab, data = _load_data(args, exp)
    _check_vocab(ckpt, vocab)
    split = args.split or exp.eval.split
    if split not in data:
        raise DataError(f"dataset has no {split} split")
    report, preds = evaluate_model(ckpt.to_model(), data[split], exp.eval.batch_size)
    print(report.render())
    for layer, g in sorted(preds.gate_means.items()):
        print(f"layer {layer + 1} mean gates: alpha {g['alpha']:.4f} beta {g['beta']:.4f}")
    payload = report.to_dict()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    if args.json:
        print(json.dumps(payload, sort_keys=True))


def cmd_ablate(args, exp):
    seeds = args.seeds if args.seeds else exp.sweep.seeds
    result = ablate(exp, seeds, threads=args.threads)
    write_results(result, Path(args.out), "ablation")
    print(f"{'seed':>6} {'mode':<8} {'det F1':>8} {'cor F1':>8}")
    for r in result["rows"]:
        print(f"{r['seed']:>6} {r['mode']:<8} {100 * r['det_f1']:8.2f} {100 * r['cor_f1']:8.2f}")
    for mode, m in result["means"].items():
        d = result["deltas"].get(mode)
        delta = f"  ({100 * d['det_f1']:+.2f} / {100 * d['cor_f1']:+.2f} vs c-only)" if d else ""
        print(f"{'mean':>6} {mode:<8} {100 * m['det_f1']:8.2f} {100 * m['cor_f1']:8.2f}{delta}")


def cmd_sweep(args, exp):
    grid = args.grid if args.grid else exp.sweep.grid
    if grid is not None:
        check_grid(args.kind, grid)
    seeds = args.seeds if args.seeds else exp.sweep.seeds
    result = sweep(exp, args.kind, grid, seeds, threads=args.threads,
                   inference_only=args.inference_only or exp.sweep.inference_only)
    write_results(result, Path(args.out), f"sweep_{args.kind}")
    keys = {"gates": ("alpha", "beta"), "lambda": ("lambda",), "layers": ("layers",)}[args.kind]
    for r in result["rows"]:
        cell = " ".join(f"{k}={r[k]}" for k in keys)
        print(f"{cell:<22} seed={r['seed']} det {100 * r['det_f1']:6.2f} cor {100 * r['cor_f1']:6.2f} "
              f"hard {100 * r['hard_det_f1']:6.2f}")


GRADCHECK_MODES = ("bidc", "d2c", "c-only")


def gradcheck_model_config(mode):
    return ModelConfig(vocab_size=20, d_h=8, d_ff=16, n_heads=1, det_depth=1, cor_depth=1, layers=1,
                       max_len=5, mode=mode)


def gradcheck_batch(seed):
    rng = np.random.default_rng([seed, 99])
    ids = rng.integers(2, 20, size=(2, 5))
    tgt = np.where(rng.random((2, 5)) < 0.3, rng.integers(2, 20, size=(2, 5)), ids)
    mask = np.ones((2, 5), dtype=bool)
    mask[1, 4] = False
    return ids, mask, (ids != tgt).astype(np.int64), tgt


def move_to_generic_point(model, seed):
    """Replace the initial embeddings (std 0.02) and unit LN parameters with
    O(1) random values. At the raw initialisation attention scores are nearly
    constant, so query/key gradients sit at the finite-difference noise floor
    and the check would say little about them."""
    rng = np.random.default_rng([seed, 7])
    for name, p in model.params.items():
        if name.startswith("embed."):
            p.value[:] = rng.normal(size=p.value.shape)
        elif name.endswith(".g"):
            p.value[:] = 1.0 + 0.2 * rng.normal(size=p.value.shape)
        elif name.endswith(".b") and (".ln" in name or "ln_" in name):
            p.value[:] = 0.2 * rng.normal(size=p.value.shape)
    return model


def run_gradcheck(modes=GRADCHECK_MODES, seeds=range(5)):
    """Finite-difference check of the full mixed loss on a tiny model. Yields (mode, seed, report)."""
    for mode in modes:
        for seed in seeds:
            model = move_to_generic_point(BiDCSpell(gradcheck_model_config(mode), seed=seed), seed)
            ids, mask, det, tgt = gradcheck_batch(seed)
            report = nx.grad_check(lambda: model.loss(model.forward(ids, mask), det, tgt, mask), model.params)
            yield mode, seed, report


def cmd_gradcheck(args, exp):
    seeds = args.seeds if args.seeds else list(range(5))
    failed = False
    t0 = time.perf_counter()
    for mode, seed, report in run_gradcheck(args.modes or GRADCHECK_MODES, seeds):
        status = "PASS" if report.passed else "FAIL"
        print(f"{status} mode={mode} seed={seed} max_rel_err={report.max_rel_err:.2e} "
              f"kinks_skipped={report.kink_skipped}")
        if not report.passed:
            failed = True
            for p in sorted(report.failures(), key=lambda p: -p.max_rel_err)[:5]:
                print(f"    {p.name}: rel err {p.max_rel_err:.2e}")
    print(f"gradcheck finished in {time.perf_counter() - t0:.1f}s")
    return 3 if failed else 0


def cmd_correct(args, exp):
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.vocab is None:
        raise DataError("checkpoint carries no vocabulary; cannot map text to ids")
    from .corpus import Vocab

    vocab = Vocab(ckpt.vocab)
    model = ckpt.to_model()
    lines = [args.text] if args.text is not None else sys.stdin.read().splitlines()
    for line in lines:
        if not line:
            print("")
            continue
        unknown = {}
        ids = vocab.encode(line, unknown)
        if unknown:
            print(f"warning: {sum(unknown.values())} unknown character(s) mapped to <unk>: "
                  f"{''.join(sorted(unknown))}", file=sys.stderr)
        if len(ids) > model.cfg.max_len:
            raise DataError(f"line has {len(ids)} characters, model supports at most {model.cfg.max_len}")
        det, cor = model.predict(ids)
        out, marks = [], []
        for ch, i, d, c in zip(line, ids, det, cor):
            keep = i == UNK or c < 2
            out.append(ch if keep else vocab.tokens[c])
            marks.append("^" if d == 1 and i != UNK else " ")
        print("".join(out))
        print("".join(marks).rstrip())


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="bidc", description="Bi-directional detector-corrector spelling check experiments.")
    p.add_argument("--config", help="experiment config JSON (sections corpus, model, train, eval, sweep)")
    p.add_argument("--seed", type=int, help="training seed (gen-data: corpus seed)")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads for ablation/sweep cells")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", help="write train/dev/test TSVs and a manifest")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", help="dataset directory (default: generate from config)")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--lambda", dest="lam", type=float, help="loss mix weight (default 0.8)")
    t.add_argument("--layers", type=int, help="interaction layers (default 2)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="continue from this checkpoint (usually last.ckpt)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="dataset directory (default: generate from config)")
    e.add_argument("--split", choices=("train", "dev", "test"))
    e.add_argument("--json", action="store_true", help="also print the report as JSON")

    a = sub.add_parser("ablate", help="train bidc, d2c and c-only for each seed")
    a.add_argument("--seeds", type=int, nargs="+")

    s = sub.add_parser("sweep", help="grid experiment over gates, lambda or layer count")
    s.add_argument("kind", choices=SWEEP_KINDS)
    s.add_argument("--grid", type=float, nargs="+")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--inference-only", action="store_true",
                   help="gates: train once and override gates at inference instead of retraining per cell")

    g = sub.add_parser("gradcheck", help="finite-difference gradient check on a tiny model")
    g.add_argument("--seeds", type=int, nargs="+")
    g.add_argument("--modes", nargs="+", choices=MODES)

    c = sub.add_parser("correct", help="correct one line (or stdin lines)")
    c.add_argument("checkpoint")
    c.add_argument("text", nargs="?")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "correct": cmd_correct,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "sweep" and args.kind == "layers" and args.grid:
            args.grid = [int(g) if float(g).is_integer() else g for g in args.grid]
        exp = _experiment(args)
        if args.command == "eval" and "--out" not in (argv if argv is not None else sys.argv[1:]):
            args.out = None
        return COMMANDS[args.command](args, exp) or 0
    except BidcError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
