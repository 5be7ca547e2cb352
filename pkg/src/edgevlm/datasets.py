"""JSONL readers/writers for caption, SFT and DPO records."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vision
from .errors import DatasetError, InputError

log = logging.getLogger(__name__)

SCHEMAS = {
    "caption": ("image", "prompt", "response"),
    "sft": ("image", "prompt", "response"),
    "dpo": ("image", "prompt", "original", "edited"),
    "pairs": ("image", "prompt", "chosen", "rejected"),
}


@dataclass
class JsonlDataset:
    records: list[dict]
    warnings: list[str] = field(default_factory=list)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def image_path(self, record: dict) -> Path:
        p = Path(record["image"])
        return p if p.is_absolute() or self.root is None else self.root / p


def read_jsonl_dataset(path: str | os.PathLike, kind: str) -> JsonlDataset:
    """Parse one record per line; malformed lines are skipped with a line-numbered warning."""
    if kind not in SCHEMAS:
        raise DatasetError(f"unknown dataset kind {kind!r}")
    fields = SCHEMAS[kind]
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    records, warnings = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            warnings.append(f"{path}:{lineno}: invalid JSON ({exc.msg})")
            continue
        if not isinstance(rec, dict):
            warnings.append(f"{path}:{lineno}: record is not an object")
            continue
        missing = [f for f in fields if f not in rec]
        if missing:
            warnings.append(f"{path}:{lineno}: missing field(s) {missing}")
            continue
        records.append(rec)
    for w in warnings:
        log.warning(w)
    if not records:
        raise DatasetError(f"{path} has no valid {kind} records")
    log.info("%s: %d %s records, %d skipped", path, len(records), kind, len(warnings))
    return JsonlDataset(records, warnings, path.parent)


def write_jsonl(path: str | os.PathLike, records) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")


def load_images(dataset: JsonlDataset) -> dict[str, vision.Image]:
    """Read each referenced PPM once."""
    cache: dict[str, vision.Image] = {}
    for rec in dataset.records:
        key = str(dataset.image_path(rec))
        if key not in cache:
            cache[key] = vision.read_ppm(key)
    return cache


def synthetic_dpo_records(n: int, size: int, seed: int = 0) -> list[tuple[vision.Image, dict]]:
    """Minimal-edit records: ``original`` names one attribute wrongly, ``edited`` fixes it."""
    rng = np.random.default_rng([seed, 2])
    colors = list(vision.COLORS)
    out = []
    for scene in vision.synthetic_scenes(n, seed + 1000):
        img = vision.render_scene(scene, size, rng)
        wrong = [c for c in colors if c != scene.color]
        bad = vision.SyntheticScene(wrong[rng.integers(len(wrong))], scene.shape, scene.side)
        out.append((img, {"prompt": "describe the image.", "original": bad.caption, "edited": scene.caption}))
    return out


def write_synthetic_dpo(out_dir: str | os.PathLike, n: int, size: int, seed: int = 0) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    recs = []
    for i, (img, rec) in enumerate(synthetic_dpo_records(n, size, seed)):
        name = f"dpo_{i:05d}.ppm"
        vision.write_ppm(out / name, img)
        recs.append({"image": name, **rec})
    path = out / "dpo_records.jsonl"
    write_jsonl(path, recs)
    return path


def check_image(img: vision.Image, size: int) -> None:
    if img.width != size or img.height != size:
        raise InputError(f"image is {img.width}x{img.height}, model expects {size}x{size}")
