"""Diagnostics: linear CKA between domains, token-text similarity curves, run comparison."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .adaptation import Adapted, embed
from .alignment import similarity_values
from .backbone import ClipModel
from .data import Dataset
from .errors import DegenerateInputError, ShapeError


def cka(x, y) -> float:
    """Linear CKA from double-centred Gram matrices.

    ``x`` is (n, d) and ``y`` is (n, d'); rows are paired samples.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeError(f"cka needs (n, d) inputs with equal n, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 2:
        raise ShapeError("cka needs at least two samples")
    h = np.eye(n) - np.full((n, n), 1.0 / n)
    k, l = x @ x.T, y @ y.T
    kc, lc = h @ k @ h, h @ l @ h
    kk, ll = np.sum(kc * kc), np.sum(lc * lc)
    if kk <= 1e-24 * max(np.sum(k * k), 1e-300) or ll <= 1e-24 * max(np.sum(l * l), 1e-300):
        raise DegenerateInputError("centred Gram matrix vanishes (constant features)")
    return float(np.sum(kc * lc) / math.sqrt(kk * ll))


@dataclass
class CkaReport:
    value: float
    n_samples: int
    feature_dim: int
    model_tag: str
    domain_pair: tuple


def paired_indices(n_total: int, n_samples: int, seed: int, pool=None) -> np.ndarray:
    pool = np.arange(n_total) if pool is None else np.asarray(pool)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=min(n_samples, len(pool)), replace=False))


def domain_cka(model: ClipModel, source: Dataset, target: Dataset, n_samples: int, seed: int,
               class_ids=None, adapted: Adapted | None = None, model_tag: str = "model") -> CkaReport:
    """CKA between final [CLS] features of paired source/target images.

    ``class_ids`` restricts the draw to those classes and supplies the
    texts an adapted model's hook needs; default is every class.
    """
    if len(source) != len(target) or not np.array_equal(source.labels, target.labels):
        raise ShapeError("source and target datasets must be paired image-for-image")
    if class_ids is None:
        class_ids = sorted(int(c) for c in np.unique(source.labels))
    pool = np.flatnonzero(np.isin(source.labels, class_ids))
    idx = paired_indices(len(source), n_samples, seed, pool)
    fx = embed(model, source.images[idx], class_ids, adapted)
    fy = embed(model, target.images[idx], class_ids, adapted)
    return CkaReport(cka(fx, fy), len(idx), fx.shape[1], model_tag,
                     (source.domain_tag, target.domain_tag))


@dataclass
class SimilarityCurve:
    values: np.ndarray  # ascending
    model_tag: str
    dataset_tag: str
    layer: int

    def decile_means(self) -> tuple[float, float]:
        """Mean of the lowest and of the highest 10% of values."""
        n = len(self.values)
        k = max(1, n // 10)
        return float(self.values[:k].mean()), float(self.values[-k:].mean())

    def to_json(self) -> dict:
        lo, hi = self.decile_means()
        return {"model_tag": self.model_tag, "dataset_tag": self.dataset_tag, "layer": self.layer,
                "bottom_decile_mean": lo, "top_decile_mean": hi, "values": self.values.tolist()}


def token_max_similarity(tokens: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Per patch token, the cosine to its most similar class text: (B, L+1, D) -> (B, L)."""
    return similarity_values(tokens[:, 1:, :], text, "cosine").max(axis=-1)


def similarity_curve(model: ClipModel, ds: Dataset, n_images: int, layer: int, class_ids,
                     adapted: Adapted | None = None, seed: int = 0, model_tag: str = "model",
                     images: np.ndarray | None = None) -> SimilarityCurve:
    """Sorted per-token max similarity at ``layer`` pooled over ``n_images`` images.

    ``layer < depth`` reads the (modulated) input of that block; ``layer ==
    depth`` reads the last block's output.
    """
    if not 0 <= layer <= model.cfg.depth:
        raise ShapeError(f"layer {layer} outside [0, {model.cfg.depth}]")
    if images is None:
        pool = np.flatnonzero(np.isin(ds.labels, class_ids))
        images = ds.images[paired_indices(len(ds), n_images, seed, pool)]
    _, tokens = embed(model, images, class_ids, adapted, capture_layer=layer)
    s = token_max_similarity(tokens, model.text(class_ids).data)
    values = np.clip(np.sort(s.reshape(-1)), -1.0, 1.0)
    return SimilarityCurve(values, model_tag, ds.domain_tag, layer)


# --------------------------------------------------------------------------
# run comparison


def mean_ci(values) -> tuple[float, float]:
    """Mean and 95% half-width (1.96 standard errors); zero width below two samples."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), 0.0
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


def read_episodes(run_dir) -> list[dict]:
    path = Path(run_dir) / "episodes.jsonl"
    if not path.exists():
        raise LookupError(f"no run at {run_dir} (missing episodes.jsonl)")
    with path.open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def compare_report(runs_root, run_tags, out_dir=None, report_tag: str = "report") -> list[dict]:
    """One row per run: accuracy mean +- CI, optional CKA/curve summaries.

    Runs after the first also get the paired per-episode accuracy
    difference against the first run.
    """
    runs_root = Path(runs_root)
    rows, first = [], None
    for tag in run_tags:
        records = read_episodes(runs_root / tag)
        acc = [r["accuracy"] for r in records]
        mean, ci = mean_ci(acc)
        row = {"run_tag": tag, "variant": records[0].get("variant", "") if records else "",
               "episodes": len(records), "accuracy_mean": mean, "accuracy_ci95": ci}
        for key in ("cka", "curve_bottom_decile", "curve_top_decile"):
            vals = [r[key] for r in records if r.get(key) is not None]
            if vals:
                row[f"{key}_mean"] = float(np.mean(vals))
        if first is None:
            first = acc
        else:
            n = min(len(first), len(acc))
            d_mean, d_ci = mean_ci(np.asarray(acc[:n]) - np.asarray(first[:n]))
            row["delta_vs_first_mean"] = d_mean
            row["delta_vs_first_ci95"] = d_ci
        rows.append(row)
    if out_dir is not None:
        write_table(rows, Path(out_dir), report_tag, "compare")
    return rows


def write_table(rows: list[dict], out_dir: Path, run_tag: str, analysis: str) -> tuple[Path, Path]:
    """``{run_tag}__{analysis}.csv`` and ``.json`` in ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for row in rows:
        columns += [k for k in row if k not in columns]
    csv_path = out_dir / f"{run_tag}__{analysis}.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in columns})
    json_path = out_dir / f"{run_tag}__{analysis}.json"
    json_path.write_text(json.dumps(rows, indent=1, default=_jsonable), encoding="utf-8")
    return csv_path, json_path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if hasattr(v, "__dataclass_fields__"):
        return asdict(v)
    raise TypeError(f"not JSON serialisable: {type(v)}")
