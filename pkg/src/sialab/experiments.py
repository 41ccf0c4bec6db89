"""Experiment drivers and the report they emit.

A report is one JSON document (see ``SCHEMA``) plus one CSV file per table.
Each attack run records its full config and master seed, which is enough to
replay every cell exactly.
"""

from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, attack_many, build_copies
from .data import LabeledDataset
from .metrics import attack_success_rate, diversity_score
from .numerics import FLOAT, SeededRng
from .sit import sit_global_sample, sit_sample
from .transforms import ALL_KINDS, TransformKind

SCHEMA = "sialab.report/1"


@dataclass
class ExperimentReport:
    kind: str
    config: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add_row(self, table: str, row: dict):
        self.tables.setdefault(table, []).append(row)

    def to_dict(self):
        return {"schema": SCHEMA, "kind": self.kind, "config": self.config,
                "tables": self.tables, "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(d["kind"], d.get("config", {}), d.get("tables", {}), d.get("meta", {}))

    def write(self, path) -> list[Path]:
        """Write the JSON report and ``<stem>.<table>.csv`` next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable))
        written = [path]
        for name, rows in self.tables.items():
            if not rows:
                continue
            out = path.with_name(f"{path.stem}.{name}.csv")
            cols = list(dict.fromkeys(k for r in rows for k in r))
            with out.open("w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                for r in rows:
                    w.writerow({k: _csv_cell(r.get(k)) for k in cols})
            written.append(out)
        return written

    @classmethod
    def read(cls, path) -> "ExperimentReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, TransformKind):
        return v.value
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _csv_cell(v):
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return v


def run_meta(**extra) -> dict:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"), **extra}


def _name(model, fallback):
    return getattr(model, "name", None) or fallback


def craft(surrogate, subset: LabeledDataset, cfg: AttackConfig, workers=1, admix_pool=None, indices=None,
          cache: dict | None = None):
    """Attack every image of ``subset``; returns ``(adversarials, traces, seconds)``.

    With a ``cache`` dict, a repeated (surrogate, subset, config, indices) run is
    served from it. Worker count is not part of the key since it cannot change results.
    """
    key = (id(surrogate), id(subset), cfg, None if indices is None else tuple(indices))
    if cache is not None and key in cache:
        return cache[key]
    t0 = time.perf_counter()
    adv, traces = attack_many(surrogate, subset.images, subset.labels, cfg, workers=workers,
                              admix_pool=admix_pool, indices=indices)
    out = adv, traces, time.perf_counter() - t0
    if cache is not None:
        cache[key] = out
    return out


def score_victims(victims, adv, labels) -> dict:
    return {_name(v, f"victim{i}"): attack_success_rate(v, adv, labels) for i, v in enumerate(victims)}


def transfer_rows(surrogate, victims, subset, cfg, workers=1, admix_pool=None, indices=None, cache=None, **tags):
    """Attack ``subset`` on ``surrogate`` and score every victim; one row per victim."""
    adv, _, secs = craft(surrogate, subset, cfg, workers, admix_pool, indices, cache)
    rates = score_victims(victims, adv, subset.labels)
    sname = _name(surrogate, "surrogate")
    rows = [{"surrogate": sname, "victim": v, "method": cfg.method, "asr": r,
             "white_box": v == sname, "images": len(subset), "seed": cfg.master_seed, **tags}
            for v, r in rates.items()]
    return rows, adv, secs


def mean_transfer(rows) -> float:
    black = [r["asr"] for r in rows if not r["white_box"]]
    return float(np.mean(black)) if black else float("nan")


def transfer_matrix(models, dataset: LabeledDataset, cfgs, workers=1, admix_pool=None) -> ExperimentReport:
    """Every model serves as surrogate once; every model is scored as a victim."""
    if len(models) < 2:
        raise ValueError("a transfer matrix needs at least two models")
    cfgs = [cfgs] if isinstance(cfgs, AttackConfig) else list(cfgs)
    report = ExperimentReport("transfer", {"configs": [c.to_dict() for c in cfgs]},
                              meta=run_meta(images=len(dataset), workers=workers))
    for cfg in cfgs:
        for sur in models:
            rows, _, secs = transfer_rows(sur, models, dataset, cfg, workers, admix_pool)
            for r in rows:
                report.add_row("transfer", {**r, "seconds": round(secs, 3)})
    return report


# -- diversity ---------------------------------------------------------------

DIVERSITY_METHODS = ("identity", "scale", "sit", "sit-global", "dim", "sim", "admix", "ssa")


def transformed_copy(method: str, x, y, rng: SeededRng, cfg: AttackConfig, admix_pool=None):
    """One random draw of ``method``'s input transformation applied to ``x``."""
    x = np.asarray(x, dtype=FLOAT)
    if method == "identity":
        return x.copy()
    if method == "scale":
        return (x * FLOAT(rng.uniform(1e-3, 1 - 1e-3))).astype(FLOAT)
    if method == "sit":
        return sit_sample(x.shape, cfg.blocks, rng, cfg.kinds, cfg.transform_settings, cfg.partition_mode).apply(x)
    if method == "sit-global":
        return sit_global_sample(x.shape, cfg.blocks, rng, cfg.kinds, cfg.transform_settings).apply(x)
    method_tag = {"dim": "DIM", "sim": "SIM", "admix": "ADMIX", "ssa": "SSA", "dem": "DEM"}.get(method)
    if method_tag is None:
        raise ValueError(f"unknown diversity method {method!r}")
    cs = build_copies(method_tag, x, y, cfg.replace(method=method_tag, dim_prob=1.0), rng, admix_pool)
    return cs.inputs[rng.integers(0, len(cs.inputs))]


def diversity_table(methods, dataset: LabeledDataset, extractor, cfg: AttackConfig | None = None,
                    admix_pool=None) -> ExperimentReport:
    if len(dataset) == 0:
        raise ValueError("diversity needs a non-empty dataset")
    cfg = cfg or AttackConfig()
    report = ExperimentReport("diversity", {"methods": list(methods), "attack": cfg.to_dict(),
                                            "extractor": _name(extractor, "extractor"),
                                            "metric": "layerwise feature distance (toy extractor, not LPIPS)"},
                              meta=run_meta(images=len(dataset)))
    root = SeededRng(cfg.master_seed)
    for m_i, method in enumerate(methods):
        stream = root.substream(m_i)
        scores = [diversity_score(extractor, x, transformed_copy(method, x, int(y), stream.substream(i), cfg, admix_pool))
                  for i, (x, y) in enumerate(zip(dataset.images, dataset.labels))]
        report.add_row("diversity", {"method": method, "mean_score": float(np.mean(scores)),
                                     "std": float(np.std(scores)), "images": len(scores)})
    return report


# -- ablations and sweeps ----------------------------------------------------

def _sia_rows(report, table, surrogate, victims, subset, cfg, workers, cache=None, **tags):
    participants = [surrogate, *victims]
    rows, _, secs = transfer_rows(surrogate, participants, subset, cfg, workers, cache=cache, **tags)
    report.add_row(table, {**tags, "mean_transfer_asr": mean_transfer(rows),
                           "white_box_asr": next(r["asr"] for r in rows if r["white_box"]),
                           **{f"asr[{r['victim']}]": r["asr"] for r in rows if not r["white_box"]},
                           "seconds": round(secs, 3)})


def ablation_leave_one_out(dataset, surrogate, victims, cfg: AttackConfig, workers=1, cache=None) -> ExperimentReport:
    cfg = cfg.replace(method="SIA")
    report = ExperimentReport("ablation-loo", {"attack": cfg.to_dict()}, meta=run_meta(images=len(dataset)))
    _sia_rows(report, "loo", surrogate, victims, dataset, cfg, workers, cache, removed="none")
    for kind in ALL_KINDS:
        kinds = tuple(k for k in ALL_KINDS if k is not kind)
        _sia_rows(report, "loo", surrogate, victims, dataset, cfg.replace(kinds=kinds), workers, cache,
                  removed=kind.value)
    return report


def ablation_pairs(dataset, surrogate, victims, cfg: AttackConfig, workers=1, kinds=ALL_KINDS,
                   cache=None) -> ExperimentReport:
    """SIA restricted to one kind (diagonal) or two kinds; cell (a, b) and (b, a) share one run."""
    cfg = cfg.replace(method="SIA")
    report = ExperimentReport("ablation-pairs", {"attack": cfg.to_dict()}, meta=run_meta(images=len(dataset)))
    for a, b in combinations_with_replacement(kinds, 2):
        pair = (a,) if a is b else (a, b)
        _sia_rows(report, "pairs", surrogate, victims, dataset, cfg.replace(kinds=pair), workers, cache,
                  kind_a=a.value, kind_b=b.value)
    return report


def pair_matrix(report: ExperimentReport, kinds=ALL_KINDS) -> np.ndarray:
    """Symmetric kinds x kinds matrix of mean transfer ASR from a pairs report."""
    index = {k.value: i for i, k in enumerate(kinds)}
    m = np.full((len(kinds), len(kinds)), np.nan)
    for r in report.tables["pairs"]:
        i, j = index[r["kind_a"]], index[r["kind_b"]]
        m[i, j] = m[j, i] = r["mean_transfer_asr"]
    return m


SWEEP_DEFAULTS = {"s": (1, 2, 3, 4, 5), "n": (1, 5, 10, 20, 30)}


def sweep(param: str, values, dataset, surrogate, victims, cfg: AttackConfig, workers=1,
          baseline: bool = True, cache=None) -> ExperimentReport:
    param = param.lower()
    if param not in SWEEP_DEFAULTS:
        raise ValueError(f"can only sweep s or n, not {param!r}")
    cfg = cfg.replace(method="SIA")
    report = ExperimentReport(f"sweep-{param}", {"attack": cfg.to_dict(), "values": list(values)},
                              meta=run_meta(images=len(dataset)))
    if baseline:
        _sia_rows(report, "baseline", surrogate, victims, dataset, cfg.replace(method="MIFGSM"), workers,
                  cache, method="MIFGSM")
    for v in values:
        changed = cfg.replace(blocks=int(v)) if param == "s" else cfg.replace(copies=int(v))
        _sia_rows(report, "sweep", surrogate, victims, dataset, changed, workers, cache, param=param, value=int(v))
    return report
