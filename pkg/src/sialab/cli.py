"""Command line entry point: ``sialab <command> [options]``.

Every command also reads ``--config FILE``, a plain ``key = value`` file whose
keys are the long option names (``eps``, ``steps``, ``blocks`` ...). Options
given on the command line override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .attacks import METHODS, AttackConfig, parse_method
from .data import evaluation_subset, load_dataset_dir, make_glyphs, save_dataset_dir
from .metrics import attack_success_rate
from .model import ARCHITECTURES, build_arch, load_model, save_model, train
from .numerics import SeededRng
from .transforms import TransformKind

log = logging.getLogger("sialab")


def eps_from_scale(eps: float, scale: float) -> float:
    """Convert a budget given on a ``0..scale`` pixel scale to ``[0, 1]`` units."""
    if scale <= 0:
        raise ValueError("eps-scale must be positive")
    return eps / scale


def read_config_file(path) -> dict:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _csv_list(s):
    return [v.strip() for v in str(s).split(",") if v.strip()]


def _attack_options(p, method=True):
    if method:
        p.add_argument("--method", default="sia", type=str.lower,
                       choices=[m.lower().replace("_", "-") for m in METHODS])
    p.add_argument("--eps", type=float, default=16.0)
    p.add_argument("--eps-scale", type=float, default=255.0)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--copies", type=int, default=20)
    p.add_argument("--noise-amplitude", type=float, default=1.0)
    p.add_argument("--kinds", default=None, help="comma list restricting the SIT transform kinds")
    p.add_argument("--gradient-mode", default="pullback", choices=["pullback", "direct"])
    p.add_argument("--seed", type=int, default=0)


def _experiment_options(p, surrogate=True):
    p.add_argument("--data", required=True, help="directory with IDX train/test files")
    if surrogate:
        p.add_argument("--surrogate", required=True)
    p.add_argument("--victims", default="", help="comma list of .siam files")
    p.add_argument("--images", type=int, default=500, help="evaluation images (jointly correct)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="sialab", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key = value defaults file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write a synthetic IDX dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--source", default="patches", choices=["patches", "glyphs"])
    p.add_argument("--train", type=int, default=10000)
    p.add_argument("--test", type=int, default=3000)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a toy classifier")
    p.add_argument("--arch", required=True, choices=ARCHITECTURES)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("attack", help="craft adversarial examples on a surrogate")
    _attack_options(p)
    _experiment_options(p)

    p = sub.add_parser("eval", help="score the adversarials of an attack report on victims")
    p.add_argument("--report", required=True)
    p.add_argument("--victims", required=True)
    p.add_argument("--out", default=None, help="defaults to overwriting --report")

    p = sub.add_parser("ablate", help="leave-one-out or pairwise transform ablation")
    p.add_argument("--mode", required=True, choices=["loo", "pairs"])
    _attack_options(p, method=False)
    _experiment_options(p)

    p = sub.add_parser("sweep", help="SIA transferability over s or N")
    p.add_argument("--param", required=True, type=str.lower, choices=["s", "n"])
    p.add_argument("--values", default=None)
    _attack_options(p, method=False)
    _experiment_options(p)

    p = sub.add_parser("diversity", help="mean feature distance between images and transformed copies")
    p.add_argument("--methods", default=",".join(ex.DIVERSITY_METHODS))
    p.add_argument("--extractor", required=True, help=".siam model used as feature extractor")
    _attack_options(p, method=False)
    _experiment_options(p, surrogate=False)
    return parser


def parse_args(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    early, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if a in COMMANDS), None)
    if early.config and command:
        values = read_config_file(early.config)
        sub = parser._subparsers._group_actions[0].choices[command]
        unknown = set(values) - {a.dest for a in sub._actions}
        if unknown:
            parser.error(f"unknown key(s) in {early.config}: {', '.join(sorted(unknown))}")
        # file values become defaults, so flags on the command line still win
        typed = {}
        for a in sub._actions:
            if a.dest in values:
                typed[a.dest] = a.type(values[a.dest]) if a.type else values[a.dest]
                a.required = False
        sub.set_defaults(**typed)
    return parser.parse_args(argv)


def config_from_args(args, method=None) -> AttackConfig:
    kinds = tuple(TransformKind.parse(k) for k in _csv_list(args.kinds)) if args.kinds else None
    extra = {"kinds": kinds} if kinds else {}
    return AttackConfig(method=parse_method(method or args.method),
                        epsilon=eps_from_scale(args.eps, args.eps_scale), steps=args.steps,
                        decay=args.mu, blocks=args.blocks, copies=args.copies,
                        noise_amplitude=args.noise_amplitude, gradient_mode=args.gradient_mode,
                        master_seed=args.seed, **extra)


def _load_models(paths):
    return [load_model(p) for p in _csv_list(paths)]


def _eval_subset(args, models):
    _, test_ds = load_dataset_dir(args.data)
    subset = evaluation_subset(test_ds, models, args.images, SeededRng(args.seed).substream(999))
    if len(subset) < args.images:
        log.warning("only %d jointly-correct test images available (asked for %d)", len(subset), args.images)
    return subset


def cmd_make_data(args):
    if args.source == "patches":
        from .data import make_patches
        train_ds, test_ds = make_patches(args.train, args.test, SeededRng(args.seed), size=args.size)
    else:
        root = SeededRng(args.seed)
        train_ds = make_glyphs(args.train, root.substream(1), args.size, split="train")
        test_ds = make_glyphs(args.test, root.substream(2), args.size, split="test")
    save_dataset_dir(args.out, train_ds, test_ds)
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test images to {args.out}")


def cmd_train(args):
    train_ds, test_ds = load_dataset_dir(args.data)
    model = build_arch(args.arch, train_ds.image_shape, train_ds.class_count)
    train(model, train_ds.images, train_ds.labels, args.epochs, args.lr, SeededRng(args.seed),
          batch_size=args.batch_size, test=(test_ds.images, test_ds.labels), log=log.info)
    save_model(model, args.out)
    tl = model.train_log
    print(json.dumps({"arch": args.arch, "out": args.out, "train_accuracy": tl.train_accuracy,
                      "test_accuracy": tl.test_accuracy, "epoch_losses": tl.epoch_losses}))


def cmd_attack(args):
    surrogate = load_model(args.surrogate)
    victims = _load_models(args.victims)
    cfg = config_from_args(args)
    subset = _eval_subset(args, [surrogate, *victims])
    # Admix add-ins come from the evaluation images themselves (other classes only)
    pool = (subset.images, subset.labels)
    rows, adv, secs = ex.transfer_rows(surrogate, [surrogate, *victims], subset, cfg, args.workers, pool)
    out = Path(args.out)
    adv_path = out.with_suffix(".adv.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(adv_path, adversarials=adv, benign=subset.images, labels=subset.labels)
    report = ex.ExperimentReport("attack", {"attack": cfg.to_dict(), "surrogate": args.surrogate,
                                            "data": args.data, "adversarials": adv_path.name},
                                 meta=ex.run_meta(images=len(subset), workers=args.workers, seconds=secs))
    for r in rows:
        report.add_row("transfer", r)
    report.write(out)
    _print_rows(rows)


def cmd_eval(args):
    report = ex.ExperimentReport.read(args.report)
    adv_file = Path(args.report).with_name(report.config["adversarials"])
    stored = np.load(adv_file)
    adv, labels = stored["adversarials"], stored["labels"]
    rows = report.tables.setdefault("eval", [])
    for victim in _load_models(args.victims):
        rows.append({"victim": victim.name, "method": report.config["attack"]["method"],
                     "asr": attack_success_rate(victim, adv, labels), "images": len(labels)})
    report.write(args.out or args.report)
    _print_rows(rows)


def _victims_and_cfg(args, method="SIA"):
    surrogate = load_model(args.surrogate)
    victims = _load_models(args.victims)
    if not victims:
        raise SystemExit("--victims is required for transfer experiments")
    return surrogate, victims, config_from_args(args, method)


def cmd_ablate(args):
    surrogate, victims, cfg = _victims_and_cfg(args)
    subset = _eval_subset(args, [surrogate, *victims])
    fn = ex.ablation_leave_one_out if args.mode == "loo" else ex.ablation_pairs
    report = fn(subset, surrogate, victims, cfg, args.workers)
    report.write(args.out)
    _print_rows(next(iter(report.tables.values())))


def cmd_sweep(args):
    surrogate, victims, cfg = _victims_and_cfg(args)
    values = [int(v) for v in _csv_list(args.values)] if args.values else ex.SWEEP_DEFAULTS[args.param]
    subset = _eval_subset(args, [surrogate, *victims])
    report = ex.sweep(args.param, values, subset, surrogate, victims, cfg, args.workers)
    report.write(args.out)
    _print_rows(report.tables["baseline"] + report.tables["sweep"])


def cmd_diversity(args):
    extractor = load_model(args.extractor)
    cfg = config_from_args(args, "SIA")
    subset = _eval_subset(args, [extractor, *_load_models(args.victims)])
    report = ex.diversity_table(_csv_list(args.methods), subset, extractor, cfg,
                                admix_pool=(subset.images, subset.labels))
    report.write(args.out)
    _print_rows(report.tables["diversity"])


def _print_rows(rows):
    for r in rows:
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


COMMANDS = {"make-data": cmd_make_data, "train": cmd_train, "attack": cmd_attack, "eval": cmd_eval,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "diversity": cmd_diversity}


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    COMMANDS[args.command](args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
