"""The desk-scale setup: one patch dataset plus the three toy classifiers trained on it.

``build_zoo`` writes everything to a directory (IDX files, ``<arch>.siam``, and a
``zoo.json`` recording the config and training accuracies). ``load_zoo`` reads it back.
Both the experiment scripts and the acceptance tests go through here.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import load_dataset_dir, make_patches, save_dataset_dir
from .model import ARCHITECTURES, build_arch, load_model, save_model, train
from .numerics import SeededRng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ZooConfig:
    n_train: int = 10_000
    n_test: int = 3_000
    size: int = 16
    data_seed: int = 0
    archs: tuple[str, ...] = ARCHITECTURES
    epochs: int = 40
    lr: float = 0.02
    batch_size: int = 64
    train_seed: int = 1


@dataclass
class Zoo:
    train: object
    test: object
    models: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)


def build_zoo(directory, cfg: ZooConfig = ZooConfig()) -> Zoo:
    directory = Path(directory)
    train_ds, test_ds = make_patches(cfg.n_train, cfg.n_test, SeededRng(cfg.data_seed), size=cfg.size)
    save_dataset_dir(directory, train_ds, test_ds)
    # reload so training sees exactly the bytes on disk
    train_ds, test_ds = load_dataset_dir(directory, train_ds.class_count)
    info = {"config": asdict(cfg), "models": {}}
    models = {}
    for k, arch in enumerate(cfg.archs):
        m = build_arch(arch, train_ds.image_shape, train_ds.class_count)
        train(m, train_ds.images, train_ds.labels, cfg.epochs, cfg.lr, SeededRng(cfg.train_seed).substream(k),
              batch_size=cfg.batch_size, test=(test_ds.images, test_ds.labels), log=log.info)
        save_model(m, directory / f"{arch}.siam")
        info["models"][arch] = {"train_accuracy": m.train_log.train_accuracy,
                                "test_accuracy": m.train_log.test_accuracy}
        log.info("%s: train %.3f test %.3f", arch, m.train_log.train_accuracy, m.train_log.test_accuracy)
        models[arch] = m
    (directory / "zoo.json").write_text(json.dumps(info, indent=2))
    return Zoo(train_ds, test_ds, models, info)


def load_zoo(directory) -> Zoo:
    directory = Path(directory)
    info = json.loads((directory / "zoo.json").read_text())
    archs = list(info["models"])
    train_ds, test_ds = load_dataset_dir(directory, 10)
    models = {a: load_model(directory / f"{a}.siam", name=a) for a in archs}
    return Zoo(train_ds, test_ds, models, info)


def zoo_exists(directory) -> bool:
    directory = Path(directory)
    return (directory / "zoo.json").exists()
