"""Binary-accuracy evaluation, crossed-scenario grids and attention heatmaps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .checkpoint import Checkpoint, PreprocessStats
from .composition import Scenario, percent, parse_fraction
from .model import ViTaParams, forward
from .training import dataset_predict, preprocess, resize


class UnsupportedVariant(ValueError):
    pass


@dataclass
class EvalResult:
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    train_scenario: Scenario | None = None
    test_scenario: Scenario | None = None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(probs, labels) -> EvalResult:
    """Score ``prob > 0.5 -> meme`` against labels (1 = meme)."""
    pred = np.asarray(probs) > 0.5
    truth = np.asarray(labels) > 0.5
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return from_counts(tp, fp, tn, fn)


def from_counts(tp: int, fp: int, tn: int, fn: int) -> EvalResult:
    total = tp + fp + tn + fn
    return EvalResult((tp + tn) / total if total else 0.0, tp, fp, tn, fn)


def evaluate(checkpoint: Checkpoint, dataset, batch_size: int = 64) -> EvalResult:
    return confusion(dataset_predict(checkpoint.params, dataset, batch_size), dataset.labels)


# -- crossed grids -------------------------------------------------------------
@dataclass
class AccuracyGrid:
    rows: list[Scenario]
    cols: list[Scenario]
    values: np.ndarray  # accuracy in [0, 1]; NaN marks an absent cell
    results: dict[tuple[int, int], EvalResult] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def complete(self) -> bool:
        return not np.isnan(self.values).any()

    def column_best(self) -> np.ndarray:
        """Boolean mask of every argmax (ties included) per column."""
        mask = np.zeros(self.values.shape, dtype=bool)
        for j in range(self.values.shape[1]):
            col = self.values[:, j]
            if np.all(np.isnan(col)):
                continue
            mask[:, j] = col == np.nanmax(col)
        return mask


def crossed_grid(checkpoints: Mapping[Scenario, Checkpoint], test_sets: Mapping[Scenario, object],
                 rows: Sequence[Scenario] | None = None, cols: Sequence[Scenario] | None = None,
                 dataset_factory=None) -> AccuracyGrid:
    """Evaluate every (train scenario, test scenario) pair.

    ``test_sets`` maps a scenario to a dataset, or to anything
    ``dataset_factory(checkpoint, item)`` turns into one (for example a
    manifest that must be preprocessed with each checkpoint's statistics).
    Missing inputs leave the cell absent.
    """
    rows = list(rows if rows is not None else checkpoints)
    cols = list(cols if cols is not None else test_sets)
    values = np.full((len(rows), len(cols)), np.nan)
    results = {}
    for i, train_s in enumerate(rows):
        ckpt = checkpoints.get(train_s)
        if ckpt is None:
            continue
        for j, test_s in enumerate(cols):
            item = test_sets.get(test_s)
            if item is None:
                continue
            dataset = dataset_factory(ckpt, item) if dataset_factory else item
            res = evaluate(ckpt, dataset)
            res.train_scenario, res.test_scenario = train_s, test_s
            values[i, j] = res.accuracy
            results[(i, j)] = res
    return AccuracyGrid(rows, cols, values, results)


def grid_rows(grid: AccuracyGrid) -> list[list[str]]:
    """Table layout: two header rows (test P_W, test P_T), then one row per training scenario."""
    best = grid.column_best()
    out = [
        ["test P_W", ""] + [percent(s.pw) for s in grid.cols],
        ["train P_W", "train P_T"] + [percent(s.pt) for s in grid.cols],
    ]
    for i, s in enumerate(grid.rows):
        cells = []
        for j in range(len(grid.cols)):
            v = grid.values[i, j]
            if np.isnan(v):
                cells.append("")
            else:
                cells.append(f"{100 * v:.2f}" + ("*" if best[i, j] else ""))
        out.append([percent(s.pw), percent(s.pt)] + cells)
    return out


def write_grid_csv(grid: AccuracyGrid, path) -> None:
    with Path(path).open("w", newline="") as fh:
        csv.writer(fh).writerows(grid_rows(grid))


def read_grid_csv(path) -> AccuracyGrid:
    with Path(path).open(newline="") as fh:
        table = list(csv.reader(fh))
    if len(table) < 2 or table[0][0] != "test P_W" or table[1][:2] != ["train P_W", "train P_T"]:
        raise ValueError(f"{path}: not an accuracy grid")
    cols = [Scenario(parse_fraction(pw), parse_fraction(pt)) for pw, pt in zip(table[0][2:], table[1][2:])]
    rows, values = [], []
    for line in table[2:]:
        rows.append(Scenario(parse_fraction(line[0]), parse_fraction(line[1])))
        values.append([float(c.rstrip("*")) / 100 if c else np.nan for c in line[2:]])
    return AccuracyGrid(rows, cols, np.array(values, dtype=float).reshape(len(rows), len(cols)))


@dataclass(frozen=True)
class SurpassFraction:
    wins: int
    total: int

    @property
    def value(self) -> float:
        return self.wins / self.total if self.total else 0.0

    def __str__(self) -> str:
        return f"{self.wins}/{self.total}={100 * self.value:.2f}%"


@dataclass
class GridSummary:
    mean_accuracy: float
    surpass: SurpassFraction | None = None


def aggregate(grid: AccuracyGrid, other: AccuracyGrid | None = None) -> GridSummary:
    """Mean accuracy over all cells, and the share of cells where ``grid`` beats ``other``."""
    if not grid.complete():
        raise ValueError("grid has absent cells")
    values = grid.values
    if values.size:
        # offset by the first cell so a grid of identical cells returns that value exactly
        base = float(values.flat[0])
        mean = base + math.fsum((values - base).ravel()) / values.size
    else:
        mean = float("nan")
    summary = GridSummary(mean)
    if other is not None:
        if other.shape != grid.shape:
            raise ValueError(f"grid shapes differ: {grid.shape} vs {other.shape}")
        if not other.complete():
            raise ValueError("comparison grid has absent cells")
        summary.surpass = SurpassFraction(int(np.sum(values > other.values)), values.size)
    return summary


# -- attention maps -------------------------------------------------------------
@dataclass
class AttentionMap:
    layers: dict[int, np.ndarray]
    average: np.ndarray

    def to_json(self) -> dict:
        return {
            "layers": {str(l): g.tolist() for l, g in self.layers.items()},
            "average": self.average.tolist(),
        }


def _model_input(checkpoint: Checkpoint, image: np.ndarray) -> np.ndarray:
    config = checkpoint.config
    if image.dtype == np.uint8:
        stats = checkpoint.stats or PreprocessStats(np.zeros(config.channels), np.ones(config.channels))
        return preprocess(image, stats, config.height, config.width)
    return np.asarray(image, dtype=np.float32)


def attention_map(checkpoint: Checkpoint | ViTaParams, image: np.ndarray) -> AttentionMap:
    """Per-layer attention grids (patch layout) and their elementwise mean.

    ``image`` is raw 8-bit RGB (preprocessed with the checkpoint's statistics)
    or an already-preprocessed float array.
    """
    if isinstance(checkpoint, ViTaParams):
        checkpoint = Checkpoint(checkpoint)
    config = checkpoint.config
    if config.variant != "vita":
        raise UnsupportedVariant("attention maps need the ViTa variant")
    out = forward(checkpoint.params, _model_input(checkpoint, image))
    rows, cols = config.grid
    layers = {l: a[0].astype(np.float64).reshape(rows, cols) for l, a in out.attention.items()}
    average = np.mean(np.stack(list(layers.values())), axis=0)
    return AttentionMap(layers, average)


def color_ramp(values: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow -> white; monotone in every channel."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    rgb = np.clip(3.0 * v - np.array([0.0, 1.0, 2.0]), 0.0, 1.0)
    return (rgb * 255).astype(np.uint8)


def upsample_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    rows, cols = grid.shape
    ri = np.arange(height) * rows // height
    ci = np.arange(width) * cols // width
    return grid[ri][:, ci]


def overlay(amap: AttentionMap, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    grid = amap.average
    lo, hi = grid.min(), grid.max()
    norm = np.full_like(grid, 0.5) if hi - lo <= 1e-12 else (grid - lo) / (hi - lo)
    heat = color_ramp(upsample_nearest(norm, image.shape[0], image.shape[1])).astype(np.float64)
    blended = (1.0 - alpha) * image.astype(np.float64) + alpha * heat
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def render_heatmap(amap: AttentionMap, image: np.ndarray, out_path, alpha: float = 0.5) -> Path:
    """Write the blended PNG and a ``.json`` sidecar with the raw grids."""
    out_path = Path(out_path)
    Image.fromarray(overlay(amap, image, alpha)).save(out_path, format="PNG")
    out_path.with_suffix(".json").write_text(json.dumps(amap.to_json()), encoding="utf-8")
    return out_path


def heatmap_base(checkpoint: Checkpoint, image: np.ndarray) -> np.ndarray:
    """The RGB image resized to the model input, used as the overlay background."""
    return resize(image, checkpoint.config.height, checkpoint.config.width)
