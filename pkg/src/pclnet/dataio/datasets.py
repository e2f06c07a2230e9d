"""Directory loaders for Sintel-style, FlyingChairs-style and plain frame folders."""

from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Iterator

import numpy as np

from .formats import IMAGE_SUFFIXES, read_flo, read_image
from .synthetic import Clip

log = logging.getLogger(__name__)

LAYOUTS = ("sintel", "chairs", "frames-dir")


def _natural_key(p: Path):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", p.name)]


def _images(d: Path) -> list[Path]:
    return sorted((p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES), key=_natural_key)


def clip_starts(n_frames: int, length: int) -> list[int]:
    """Start indices of clips of ``length`` frames; consecutive clips share one frame."""
    if n_frames < length:
        return []
    return list(range(0, n_frames - length + 1, length - 1))


class ClipDataset:
    """Deterministically ordered stream of clips from a directory tree.

    ``sintel``: ``<root>/<pass>/<scene>/*.png|ppm`` with ``<root>/flow/<scene>/*.flo``
    (``pass`` defaults to ``clean``; a root holding scene folders directly also works).
    ``chairs``: ``<root>/NNNNN_img1.ppm``, ``NNNNN_img2.ppm``, ``NNNNN_flow.flo``.
    ``frames-dir``: numbered frames in ``<root>`` or in its sub-folders, no flows.
    """

    def __init__(self, root, layout: str, length: int = 6, sintel_pass: str = "clean", require_flow: bool = False):
        self.root = Path(root)
        if layout not in LAYOUTS:
            raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset root {self.root} does not exist")
        self.layout = layout
        self.length = 2 if layout == "chairs" else length
        self.sintel_pass = sintel_pass
        self.require_flow = require_flow
        self.skipped = 0
        self._entries = self._index()

    def _index(self) -> list[tuple]:
        entries = []
        if self.layout == "chairs":
            for img1 in sorted(self.root.glob("*_img1.*"), key=_natural_key):
                stem = img1.name[: -len("_img1" + img1.suffix)]
                img2 = img1.with_name(f"{stem}_img2{img1.suffix}")
                flo = self.root / f"{stem}_flow.flo"
                if not img2.exists():
                    log.warning("skipping %s: second frame missing", img1)
                    self.skipped += 1
                    continue
                if not flo.exists():
                    if self.require_flow:
                        raise FileNotFoundError(f"missing flow {flo} for supervised pair")
                    flo = None
                entries.append((stem, [img1, img2], [flo]))
            return entries

        if self.layout == "sintel":
            frame_root = self.root / self.sintel_pass
            if not frame_root.is_dir():
                frame_root = self.root
            flow_root = self.root / "flow"
            scenes = sorted(d for d in frame_root.iterdir() if d.is_dir() and d.name != "flow")
        else:
            flow_root = None
            scenes = [self.root] if _images(self.root) else []
            scenes += sorted(d for d in self.root.iterdir() if d.is_dir())

        for scene in scenes:
            frames = _images(scene)
            flows_dir = None if flow_root is None else flow_root / scene.name
            for s in clip_starts(len(frames), self.length):
                window = frames[s : s + self.length]
                flos = [None] * (self.length - 1)
                if flows_dir is not None:
                    flos = [flows_dir / (p.stem + ".flo") for p in window[:-1]]
                    if not all(f.exists() for f in flos):
                        if self.require_flow:
                            missing = next(f for f in flos if not f.exists())
                            raise FileNotFoundError(f"missing flow {missing} for supervised clip")
                        flos = [None] * (self.length - 1)
                name = f"{scene.name if scene != self.root else self.root.name}_{s:04d}"
                entries.append((name, window, flos))
        return entries

    def __len__(self) -> int:
        return len(self._entries)

    def _load(self, entry) -> Clip:
        name, frame_paths, flow_paths = entry
        frames = np.concatenate([read_image(p) for p in frame_paths], axis=0)
        flows = None
        if all(f is not None for f in flow_paths):
            flows = np.concatenate([read_flo(f) for f in flow_paths], axis=0).astype(np.float64)
        return Clip(frames, flows, name)

    def __iter__(self) -> Iterator[Clip]:
        for entry in self._entries:
            try:
                clip = self._load(entry)
            except (OSError, ValueError) as exc:
                log.warning("skipping clip %s: %s", entry[0], exc)
                self.skipped += 1
                continue
            yield clip


def load_dataset(root, layout: str, length: int = 6, **kw) -> ClipDataset:
    return ClipDataset(root, layout, length, **kw)
