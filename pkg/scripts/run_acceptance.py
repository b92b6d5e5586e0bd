"""Train every model the acceptance suite needs and store the results in results/cache.

    python scripts/run_acceptance.py            # all runs (about 1.5 h on one core)
    python scripts/run_acceptance.py --only ablation

The acceptance tests read the same cache, so running this first keeps
``pytest`` itself short. Entries are keyed by config and source fingerprint.
"""

import argparse
import logging
import time
from pathlib import Path

from bidcspell.config import ExperimentConfig
from bidcspell.corpus import generate_corpus
from bidcspell.experiments import cached_cell

CACHE = Path(__file__).resolve().parents[1] / "results" / "cache"

GROUPS = {
    "ablation": [(seed, {"mode": m}) for seed in (0, 1, 2) for m in ("bidc", "d2c", "c-only")],
    "consistency": [(seed, {"mode": "two-head"}) for seed in (0, 1, 2)],
    "lambda": [(0, {"lam": lam}) for lam in (0.0, 0.2, 0.4, 0.6, 1.0)],
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--only", choices=sorted(GROUPS), nargs="+")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    exp = ExperimentConfig()
    vocab, data, _ = generate_corpus(exp.corpus)
    for group in args.only or GROUPS:
        for seed, overrides in GROUPS[group]:
            if overrides.get("mode", "bidc") != "d2c":
                overrides = {"gate_override_alpha": None, "gate_override_beta": None, **overrides}
            t0 = time.perf_counter()
            row = cached_cell(exp, vocab, data, seed, CACHE, "test", **overrides)
            print(f"{group:<12} seed={seed} {overrides} cor_f1={row['cor_f1']:.4f} "
                  f"hard={row['hard_det_f1']:.4f} cons={row['consistency_char']:.4f} "
                  f"({time.perf_counter() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
