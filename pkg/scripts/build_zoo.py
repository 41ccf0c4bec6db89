"""Generate the patch dataset and train cnn-a, cnn-b and mlp on it.

    python scripts/build_zoo.py --out artifacts/zoo
"""

import argparse
import json
import logging

from sialab.zoo import ZooConfig, build_zoo


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="artifacts/zoo")
    p.add_argument("--train", type=int, default=ZooConfig.n_train)
    p.add_argument("--test", type=int, default=ZooConfig.n_test)
    p.add_argument("--epochs", type=int, default=ZooConfig.epochs)
    p.add_argument("--data-seed", type=int, default=ZooConfig.data_seed)
    p.add_argument("--train-seed", type=int, default=ZooConfig.train_seed)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ZooConfig(n_train=args.train, n_test=args.test, epochs=args.epochs,
                    data_seed=args.data_seed, train_seed=args.train_seed)
    zoo = build_zoo(args.out, cfg)
    print(json.dumps(zoo.info["models"], indent=2))


if __name__ == "__main__":
    main()
