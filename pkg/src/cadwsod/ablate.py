"""Paired ablation grids: train and evaluate every cell of a config product.

A grid file uses the config syntax, but each value may list alternatives.
``|`` always separates alternatives; for fields that are not tuples a comma
does too::

    cadm = false, true
    gcm = false, true
    lambda2 = 0.9, 0.6, 0.8          # run in ascending order
    stage_channels = 8,16,32 | 16,32,64

Cells are the cartesian product in file order. Numeric alternatives are
sorted ascending; others keep their listed order. Every cell shares the
base config's seed and data unless the grid varies them.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from .config import (ConfigError, TrainConfig, format_value, is_tuple_key, parse_pairs,
                     parse_value)
from .train import evaluate, make_dataset, train

log = logging.getLogger(__name__)

TABLE_METRICS = ("mAP", "CorLoc", "final_loss")


@dataclass
class Axis:
    key: str
    values: list


@dataclass
class CellResult:
    overrides: dict
    mAP: float
    corloc: float
    final_loss: float
    records: list = field(default_factory=list, repr=False)


def parse_grid(text: str) -> list[Axis]:
    axes = []
    for key, raw in parse_pairs(text).items():
        parts = raw.split("|")
        if not is_tuple_key(key):
            parts = [p for chunk in parts for p in chunk.split(",")]
        parts = [p.strip() for p in parts if p.strip()]
        if not parts:
            raise ConfigError(f"grid key {key!r} lists no values")
        values = [parse_value(key, p) for p in parts]
        if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
            values = sorted(values)
        axes.append(Axis(key, values))
    return axes


def expand(axes: Sequence[Axis]) -> list[dict]:
    keys = [a.key for a in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(a.values for a in axes))]


def _data_key(cfg: TrainConfig) -> tuple:
    return (cfg.data, cfg.n_scenes, cfg.scene_seed, cfg.classes, cfg.height, cfg.width)


def run_grid(base: TrainConfig, axes: Sequence[Axis],
             progress: Optional[Callable[[int, int, CellResult], None]] = None) -> list[CellResult]:
    """Train and evaluate every cell; scenes are shared between cells with equal data keys."""
    cells = expand(axes)
    data_cache: dict = {}
    results = []
    for i, overrides in enumerate(cells):
        try:
            cfg = base.replace(**overrides)
        except ValueError as exc:
            raise ConfigError(f"grid cell {overrides}: {exc}") from None
        key = _data_key(cfg)
        if key not in data_cache:
            data_cache[key] = make_dataset(cfg)
        scenes = data_cache[key]
        res = train(cfg, scenes)
        ev = evaluate(res.model, scenes)
        final = res.records[-1]["total"] if res.records else math.nan
        cell = CellResult(overrides, ev.mAP, ev.corloc, final, res.records)
        results.append(cell)
        log.info("cell %d/%d %s mAP %.4f CorLoc %.4f", i + 1, len(cells), overrides,
                 cell.mAP, cell.corloc)
        if progress is not None:
            progress(i, len(cells), cell)
    return results


def format_table(results: Sequence[CellResult], keys: Sequence[str]) -> str:
    """Tab-separated table: one column per grid key, then the metrics."""
    lines = ["\t".join(list(keys) + list(TABLE_METRICS))]
    for r in results:
        row = [format_value(r.overrides[k]) for k in keys]
        row += [f"{r.mAP:.6f}", f"{r.corloc:.6f}", f"{r.final_loss:.6f}"]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def format_plot_data(results: Sequence[CellResult], axes: Sequence[Axis]) -> str:
    """Long-form sweep data: one row per (numeric grid key, cell)."""
    numeric = [a.key for a in axes
               if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in a.values)]
    lines = ["parameter\tvalue\tmAP\tCorLoc\tfinal_loss\tcell"]
    for i, r in enumerate(results):
        for k in numeric:
            lines.append(f"{k}\t{format_value(r.overrides[k])}\t{r.mAP:.6f}\t{r.corloc:.6f}"
                         f"\t{r.final_loss:.6f}\t{i}")
    return "\n".join(lines) + "\n"
