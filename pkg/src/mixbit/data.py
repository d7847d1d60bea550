"""Synthetic detection scenes: colored geometric shapes on noise backgrounds.

Classes map to shape+color combinations (square/disk/diamond with distinct
channel emphasis), so the task is small enough to saturate in minutes on a
CPU while still exercising localization and classification. Generation is
fully seeded and byte-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# class id -> (shape, rgb color)
_PALETTE = [
    ("square", (0.95, 0.25, 0.20)),
    ("disk", (0.20, 0.90, 0.25)),
    ("diamond", (0.25, 0.35, 0.95)),
    ("square", (0.90, 0.85, 0.20)),
    ("disk", (0.85, 0.25, 0.90)),
    ("diamond", (0.20, 0.85, 0.90)),
]

_NOISE_AMPLITUDE = 0.15

DATASET_FORMAT_VERSION = 1


@dataclass
class SyntheticScene:
    image: np.ndarray                      # [3, S, S] float32 in [0, 1]
    boxes: list[tuple[int, float, float, float, float]]  # (cls, cx, cy, w, h)


@dataclass
class DetectionDataset:
    scenes: list[SyntheticScene]
    classes: int
    image_size: int
    seed: int
    max_objects: int

    @property
    def train(self) -> list[SyntheticScene]:
        return self.scenes[: (len(self.scenes) * 4) // 5]

    @property
    def val(self) -> list[SyntheticScene]:
        return self.scenes[(len(self.scenes) * 4) // 5:]


def _draw_shape(img: np.ndarray, shape: str, cy: int, cx: int, half: int,
                color: tuple[float, float, float]) -> tuple[int, int, int, int]:
    """Paint one shape; returns its tight pixel bounds (y1, x1, y2, x2)."""
    s = img.shape[1]
    y1, y2 = cy - half, cy + half + 1
    x1, x2 = cx - half, cx + half + 1
    yy, xx = np.mgrid[y1:y2, x1:x2]
    if shape == "square":
        mask = np.ones_like(yy, dtype=bool)
    elif shape == "disk":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= half ** 2
    elif shape == "diamond":
        mask = np.abs(yy - cy) + np.abs(xx - cx) <= half
    else:
        raise ValueError(f"unknown shape {shape!r}")
    for c in range(3):
        chan = img[c, y1:y2, x1:x2]
        chan[mask] = color[c]
    return y1, x1, y2, x2


def gen_synthetic_dataset(n_scenes: int, classes: int, seed: int,
                          image_size: int = 48, max_objects: int = 3
                          ) -> DetectionDataset:
    """Deterministic scenes with exact box labels; first 80% train, rest val."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if classes > len(_PALETTE):
        raise ValueError(f"at most {len(_PALETTE)} classes supported")
    if n_scenes < 1:
        raise ValueError("need at least one scene")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xda7a]))
    s = image_size
    cell = s // 6  # matches the detector's output stride
    scenes: list[SyntheticScene] = []
    for _ in range(n_scenes):
        img = rng.uniform(0.0, _NOISE_AMPLITUDE, size=(3, s, s)).astype(np.float32)
        n_obj = int(rng.integers(1, max_objects + 1))
        boxes: list[tuple[int, float, float, float, float]] = []
        used_cells: set[tuple[int, int]] = set()
        attempts = 0
        while len(boxes) < n_obj and attempts < 50:
            attempts += 1
            half = int(rng.integers(s // 8, s // 6 + 1))
            cy = int(rng.integers(half + 1, s - half - 1))
            cx = int(rng.integers(half + 1, s - half - 1))
            cell_key = (cy // cell, cx // cell)
            if cell_key in used_cells:
                continue
            # keep objects apart so each lands in its own head cell
            if any(abs(cy - int(b[2] * s)) < cell + 2 and abs(cx - int(b[1] * s)) < cell + 2
                   for b in boxes):
                continue
            cls = int(rng.integers(0, classes))
            shape, color = _PALETTE[cls]
            y1, x1, y2, x2 = _draw_shape(img, shape, cy, cx, half, color)
            used_cells.add(cell_key)
            boxes.append((cls,
                          (x1 + x2) / 2 / s, (y1 + y2) / 2 / s,
                          (x2 - x1) / s, (y2 - y1) / s))
        scenes.append(SyntheticScene(image=img, boxes=boxes))
    return DetectionDataset(scenes=scenes, classes=classes, image_size=image_size,
                            seed=seed, max_objects=max_objects)


def boxes_to_corners(box: tuple[float, float, float, float]) -> tuple[float, float, float, float]:
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def save_dataset(path, dataset: DetectionDataset) -> None:
    from .checkpoint import write_framed
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "dataset",
        "classes": dataset.classes,
        "image_size": dataset.image_size,
        "seed": dataset.seed,
        "max_objects": dataset.max_objects,
        "n_scenes": len(dataset.scenes),
        "boxes": [[list(b) for b in sc.boxes] for sc in dataset.scenes],
    }
    payload = np.stack([sc.image for sc in dataset.scenes]).astype("<f4")
    write_framed(path, header, payload.tobytes())


def load_dataset(path) -> DetectionDataset:
    from .checkpoint import read_framed
    header, payload = read_framed(path)
    if header.get("kind") != "dataset":
        raise ValueError(f"{path} is not a dataset file")
    n = header["n_scenes"]
    s = header["image_size"]
    images = np.frombuffer(payload, dtype="<f4").reshape(n, 3, s, s)
    scenes = [
        SyntheticScene(image=np.array(images[i], dtype=np.float32),
                       boxes=[(int(b[0]), float(b[1]), float(b[2]), float(b[3]), float(b[4]))
                              for b in header["boxes"][i]])
        for i in range(n)
    ]
    return DetectionDataset(scenes=scenes, classes=header["classes"],
                            image_size=s, seed=header["seed"],
                            max_objects=header["max_objects"])
