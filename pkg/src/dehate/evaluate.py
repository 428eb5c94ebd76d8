"""IoU scoring of predicted masks against ground truth, plus leaderboards.

Ground truth for a row comes from its mask PNG when present, otherwise it is
recovered from the original/blurred image pair.  Missing predictions score
0 and are listed rather than failing the run, so partial submissions can
still be ranked; unreadable predictions are recorded per id the same way.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import pngio
from .attention import BinaryMask
from .errors import DehateError, ManifestError
from .redact import ImageRGB8, recover_mask


@dataclass(frozen=True)
class IoUReport:
    per_instance: dict
    mean: float
    missing: tuple[str, ...]
    errors: dict

    def to_json_obj(self) -> dict:
        return {
            "mean": self.mean,
            "per_instance": dict(self.per_instance),
            "missing": list(self.missing),
            "errors": dict(self.errors),
        }


@dataclass(frozen=True)
class LeaderboardEntry:
    rank: int
    team: str
    iou: float


def iou(pred: BinaryMask, truth: BinaryMask) -> float:
    """Intersection over union; two empty masks count as a perfect 1.0."""
    if pred.dims != truth.dims:
        raise ValueError(f"mask dims {pred.dims} != {truth.dims}")
    intersection = int(np.count_nonzero(pred.bits & truth.bits))
    union = int(np.count_nonzero(pred.bits | truth.bits))
    if union == 0:
        return 1.0
    return intersection / union


def truth_mask(row) -> BinaryMask:
    """Ground truth for a manifest row: its mask file, or the difference
    between its original and blurred images."""
    if row.mask is not None:
        return BinaryMask(pngio.read_mask_bits(row.mask))
    if row.blurred is not None:
        original = ImageRGB8.read(row.image)
        blurred = ImageRGB8.read(row.blurred)
        return recover_mask(original, blurred, 0)
    raise ManifestError(f"{row.id}: no mask and no blurred image to score against")


def _score_row(row, pred_dir) -> tuple[float, str | None, str | None]:
    """Returns (iou, missing_id, error_message) for one row."""
    pred_path = os.path.join(pred_dir, f"{row.id}.png")
    if not os.path.exists(pred_path):
        return 0.0, row.id, None
    try:
        truth = truth_mask(row)
        pred = BinaryMask(pngio.read_mask_bits(pred_path))
        return iou(pred, truth), None, None
    except (DehateError, OSError, ValueError) as exc:
        return 0.0, None, str(exc)


def score(pred_dir, rows, threads: int = 1) -> IoUReport:
    """Score <id>.png predictions in pred_dir against every manifest row.

    Rows are processed in ascending-id order and the mean is accumulated in
    that order, so results do not depend on directory listing or thread
    scheduling.
    """
    ordered = sorted(rows, key=lambda r: r.id)
    ids = [r.id for r in ordered]
    if len(set(ids)) != len(ids):
        raise ManifestError("duplicate ids in scoring rows")

    def work(row):
        return _score_row(row, pred_dir)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, ordered))
    else:
        results = [work(row) for row in ordered]

    per_instance: dict[str, float] = {}
    missing: list[str] = []
    errors: dict[str, str] = {}
    total = 0.0
    for row, (value, miss, err) in zip(ordered, results):
        per_instance[row.id] = value
        total += value
        if miss is not None:
            missing.append(miss)
        if err is not None:
            errors[row.id] = err
    mean = total / len(ordered) if ordered else 0.0
    return IoUReport(per_instance=per_instance, mean=mean,
                     missing=tuple(missing), errors=errors)


def round2(value: float) -> float:
    """Round to 2 decimals, halves away from zero."""
    return float(Decimal(repr(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def leaderboard(reports: dict) -> list[LeaderboardEntry]:
    """Rank team reports descending by mean IoU, ties by team name."""
    if not reports:
        raise ValueError("no team reports to rank")
    ordered = sorted(reports.items(), key=lambda kv: (-kv[1].mean, kv[0]))
    return [
        LeaderboardEntry(rank=i, team=team, iou=round2(report.mean))
        for i, (team, report) in enumerate(ordered, start=1)
    ]


def leaderboard_csv(entries) -> str:
    lines = ["rank,team,iou"]
    lines += [f"{e.rank},{e.team},{e.iou:.2f}" for e in entries]
    return "\n".join(lines) + "\n"
