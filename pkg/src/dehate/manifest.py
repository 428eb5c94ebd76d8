"""Dataset manifest: one JSON object per line describing an instance.

Required keys: id, text, image, split (train or test).  Optional keys:
normalized_text, blurred, mask, attention (a [tensor, metadata] path pair).
Validation is structural only and never touches the filesystem, so a
manifest can be checked before any referenced file exists.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ManifestError

SPLITS = ("train", "test")
_REQUIRED = ("id", "text", "image", "split")
_OPTIONAL = ("normalized_text", "blurred", "mask", "attention")


@dataclass(frozen=True)
class ManifestRow:
    id: str
    text: str
    image: str
    split: str
    normalized_text: str | None = None
    blurred: str | None = None
    mask: str | None = None
    attention: tuple[str, str] | None = None

    def __post_init__(self):
        for name in _REQUIRED:
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ValueError(f"{name} must be a nonempty string")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        for name in ("normalized_text", "blurred", "mask"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, str) or not value):
                raise ValueError(f"{name} must be a nonempty string when present")
        if self.attention is not None:
            pair = tuple(self.attention)
            if len(pair) != 2 or not all(isinstance(p, str) and p for p in pair):
                raise ValueError("attention must be a [tensor, metadata] path pair")
            object.__setattr__(self, "attention", pair)

    def to_json_obj(self) -> dict:
        obj = {"id": self.id, "text": self.text, "image": self.image,
               "split": self.split}
        for name in ("normalized_text", "blurred", "mask"):
            value = getattr(self, name)
            if value is not None:
                obj[name] = value
        if self.attention is not None:
            obj["attention"] = list(self.attention)
        return obj


def _row_from_obj(obj: dict) -> ManifestRow:
    unknown = set(obj) - set(_REQUIRED) - set(_OPTIONAL)
    if unknown:
        raise ValueError(f"unknown keys {sorted(unknown)}")
    missing = [k for k in _REQUIRED if k not in obj]
    if missing:
        raise ValueError(f"missing keys {missing}")
    attention = obj.get("attention")
    if attention is not None:
        if not isinstance(attention, (list, tuple)):
            raise ValueError("attention must be a [tensor, metadata] path pair")
        attention = tuple(attention)
    return ManifestRow(
        id=obj["id"], text=obj["text"], image=obj["image"], split=obj["split"],
        normalized_text=obj.get("normalized_text"), blurred=obj.get("blurred"),
        mask=obj.get("mask"), attention=attention,
    )


def load_manifest(path) -> list[ManifestRow]:
    """Parse a JSON-lines manifest; blank lines are permitted and skipped."""
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{line_no}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{line_no}: row must be a JSON object")
            try:
                row = _row_from_obj(obj)
            except (ValueError, TypeError) as exc:
                raise ManifestError(f"{path}:{line_no}: {exc}") from exc
            if row.id in seen:
                raise ManifestError(f"{path}:{line_no}: duplicate id {row.id!r}")
            seen.add(row.id)
            rows.append(row)
    return rows


def save_manifest(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row.to_json_obj(), ensure_ascii=False) + "\n")


def validate_manifest(rows) -> dict:
    """Summarize split counts and structural problems.

    Returns {"train": n, "test": n, "total": n, "problems": [...]} where
    problems lists test rows that can never be scored (no mask and no
    blurred counterpart to recover one from).
    """
    counts = {split: 0 for split in SPLITS}
    problems: list[str] = []
    for row in rows:
        counts[row.split] += 1
        if row.split == "test" and row.mask is None and row.blurred is None:
            problems.append(f"{row.id}: test row has neither mask nor blurred image")
    return {
        "train": counts["train"],
        "test": counts["test"],
        "total": len(rows),
        "problems": problems,
    }
