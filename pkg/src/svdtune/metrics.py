"""DICE evaluation with the blank-mask convention and a paired signed-rank test."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import SegDataset, collate


class EvaluationError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


def dice(pred, gt) -> float:
    """2|P and G| / (|P| + |G|), defined as 1.0 when both masks are blank."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def _dice_batch(pred: torch.Tensor, gt: torch.Tensor) -> List[float]:
    inter = (pred & gt).flatten(1).sum(1).double()
    denom = (pred.flatten(1).sum(1) + gt.flatten(1).sum(1)).double()
    out = torch.where(denom == 0, torch.ones_like(denom), 2 * inter / denom.clamp_min(1))
    return out.tolist()


@dataclass
class DiceResult:
    per_sample: List[Tuple[str, str, float]]
    per_class: Dict[str, float]
    average: float
    extras: dict = field(default_factory=dict)

    def scores(self) -> Dict[Tuple[str, str], float]:
        return {(sid, c): d for sid, c, d in self.per_sample}

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "average": self.average,
                "per_sample": [list(t) for t in self.per_sample], **self.extras}

    @classmethod
    def from_dict(cls, d: dict) -> "DiceResult":
        extras = {k: v for k, v in d.items() if k not in ("per_class", "average", "per_sample")}
        return cls([tuple(t) for t in d["per_sample"]], dict(d["per_class"]), float(d["average"]), extras)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def table(self, name: str = "model") -> str:
        classes = list(self.per_class)
        head = "| Method | " + " | ".join(classes) + " | Avg. |"
        sep = "|" + "---|" * (len(classes) + 2)
        row = f"| {name} | " + " | ".join(f"{self.per_class[c]:.2f}" for c in classes) + f" | {self.average:.2f} |"
        return "\n".join([head, sep, row])


def aggregate(per_sample: Sequence[Tuple[str, str, float]], class_order: Optional[Sequence[str]] = None) -> DiceResult:
    """Mean per class over images, then unweighted mean over classes."""
    by_class: Dict[str, List[float]] = defaultdict(list)
    for _, c, d in per_sample:
        by_class[c].append(d)
    order = [c for c in (class_order or sorted(by_class)) if c in by_class]
    per_class = {c: float(np.mean(by_class[c])) for c in order}
    average = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return DiceResult(sorted(per_sample, key=lambda t: (t[0], t[1])), per_class, average)


@torch.no_grad()
def evaluate(model, dataset: SegDataset, label_map: Optional[Mapping[str, int]] = None, batch_size: int = 32,
             present_only: bool = False) -> DiceResult:
    """Query each (image, class) sample with the class name and score the binarized mask.

    The dataset is expected to contain every label for every image, so absent
    classes produce blank-ground-truth queries. ``present_only`` drops those.
    Also records, in ``extras``, the mean predicted foreground fraction on the
    blank-ground-truth queries.
    """
    label_map = label_map if label_map is not None else dataset.label_map
    unknown = sorted({s.prompt for s in dataset} - set(label_map))
    if unknown:
        raise EvaluationError(f"prompts not in label map: {unknown}")
    samples = [s for s in dataset if not (present_only and s.blank)]
    # fixed processing order so results do not depend on dataset order
    samples.sort(key=lambda s: (s.sample_id, s.prompt))
    was_training = model.training
    model.eval()
    per_sample: List[Tuple[str, str, float]] = []
    blank_fg: List[float] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images, prompts, masks = collate(chunk)
        pred = model(images, prompts) > 0
        gt = masks > 0.5
        for s, d in zip(chunk, _dice_batch(pred, gt)):
            per_sample.append((s.sample_id, s.prompt, d))
        empty = gt.flatten(1).sum(1) == 0
        blank_fg.extend(pred[empty].flatten(1).double().mean(1).tolist())
    model.train(was_training)
    order = sorted(label_map, key=label_map.get)
    result = aggregate(per_sample, order)
    blank_ids = {(s.sample_id, s.prompt) for s in samples if s.blank}
    blank_scores = [d for sid, c, d in per_sample if (sid, c) in blank_ids]
    result.extras = {
        "blank_foreground_fraction": float(np.mean(blank_fg)) if blank_fg else 0.0,
        "blank_dsc": float(np.mean(blank_scores)) if blank_scores else float("nan"),
        "n_queries": len(per_sample),
        "n_blank_queries": len(blank_scores),
    }
    return result


# --------------------------------------------------------------------------- significance


def _signed_ranks(diffs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Average ranks of |d| over non-zero differences, doubled to stay integral."""
    from scipy.stats import rankdata

    d = diffs[diffs != 0]
    ranks2 = np.rint(2 * rankdata(np.abs(d))).astype(np.int64)
    return d, ranks2


def _exact_pvalue(ranks2: np.ndarray, w2: int) -> float:
    # distribution of the (doubled) positive-rank sum under random signs
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    counts /= 2.0 ** len(ranks2)
    lower = counts[: w2 + 1].sum()
    upper = counts[w2:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def paired_significance(scores_a: Sequence[float], scores_b: Sequence[float], exact_max_n: int = 25) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired scores.

    Zero differences are dropped; tied magnitudes get average ranks. Exact
    null distribution for up to ``exact_max_n`` non-zero pairs, normal
    approximation (tie-corrected, continuity-corrected) above that.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired scores must be equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 5:
        raise InsufficientDataError(f"need at least 5 pairs, got {a.size}")
    d, ranks2 = _signed_ranks(a - b)
    n = d.size
    if n == 0:
        return 1.0
    w2 = int(ranks2[d > 0].sum())
    if n <= exact_max_n:
        return _exact_pvalue(ranks2, w2)
    w = w2 / 2.0
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks2, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    if var <= 0:
        return 1.0
    z = (abs(w - mean) - 0.5) / math.sqrt(var)
    return float(min(1.0, math.erfc(max(z, 0.0) / math.sqrt(2.0))))
