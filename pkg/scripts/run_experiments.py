"""Run the experiment reports against a trained zoo and write them to a results directory.

    python scripts/run_experiments.py --zoo artifacts/zoo --out results --images 200

Each selected experiment writes ``<name>.json`` plus one CSV per table. Full-size runs
(500 images, every method as surrogate) take a while on one core; ``--images`` and
``--only`` keep things short.
"""

import argparse
import logging
import time
from pathlib import Path

from sialab import experiments as ex
from sialab.attacks import METHODS, AttackConfig
from sialab.data import evaluation_subset
from sialab.numerics import SeededRng
from sialab.zoo import load_zoo

EXPERIMENTS = ("transfer", "loo", "pairs", "sweep-n", "sweep-s", "diversity")
log = logging.getLogger("run_experiments")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--zoo", default="artifacts/zoo")
    p.add_argument("--out", default="results")
    p.add_argument("--images", type=int, default=500)
    p.add_argument("--surrogate", default="cnn-a")
    p.add_argument("--extractor", default="cnn-b")
    p.add_argument("--methods", nargs="+", default=list(METHODS), choices=METHODS)
    p.add_argument("--only", nargs="+", default=list(EXPERIMENTS), choices=EXPERIMENTS)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    zoo = load_zoo(args.zoo)
    models = list(zoo.models.values())
    subset = evaluation_subset(zoo.test, models, args.images, SeededRng(args.seed).substream(999))
    pool = (subset.images, subset.labels)
    surrogate = zoo.models[args.surrogate]
    victims = [m for m in models if m is not surrogate]
    base = AttackConfig(epsilon=16 / 255, steps=10, decay=1.0, blocks=3, copies=20, master_seed=args.seed)
    out = Path(args.out)
    cache = {}
    log.info("%d images, surrogate %s, victims %s", len(subset), surrogate.name, [v.name for v in victims])

    jobs = {
        "transfer": lambda: ex.transfer_matrix(models, subset, [base.replace(method=m) for m in args.methods],
                                               args.workers, admix_pool=pool),
        "loo": lambda: ex.ablation_leave_one_out(subset, surrogate, victims, base, args.workers, cache=cache),
        "pairs": lambda: ex.ablation_pairs(subset, surrogate, victims, base, args.workers, cache=cache),
        "sweep-n": lambda: ex.sweep("n", ex.SWEEP_DEFAULTS["n"], subset, surrogate, victims, base, args.workers,
                                    cache=cache),
        "sweep-s": lambda: ex.sweep("s", ex.SWEEP_DEFAULTS["s"], subset, surrogate, victims, base, args.workers,
                                    cache=cache),
        "diversity": lambda: ex.diversity_table(ex.DIVERSITY_METHODS, subset, zoo.models[args.extractor], base,
                                                admix_pool=pool),
    }
    for name in args.only:
        t = time.perf_counter()
        report = jobs[name]()
        written = report.write(out / f"{name}.json")
        log.info("%s done in %.0fs -> %s", name, time.perf_counter() - t, ", ".join(str(w) for w in written))


if __name__ == "__main__":
    main()
