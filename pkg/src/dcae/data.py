"""Image datasets: procedural synthetic generators and image folders.

All images are stored as 8-bit RGB and mapped to ``[-1, 1]`` with
``x / 127.5 - 1`` when batched.
"""

import logging
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DataError

log = logging.getLogger(__name__)

GENERATORS = ("gradients", "checkerboards", "gaussian-blobs", "mixed")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


def to_unit_range(images: np.ndarray) -> torch.Tensor:
    """uint8 ``[N, H, W, 3]`` -> float32 ``[N, 3, H, W]`` in ``[-1, 1]``."""
    x = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).float().contiguous()
    return x / 127.5 - 1.0


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """float ``[N, 3, H, W]`` in ``[-1, 1]`` (clamped) -> uint8 ``[N, H, W, 3]``."""
    x = ((images.detach().float().clamp(-1, 1) + 1) * 127.5).round()
    return x.to(torch.uint8).permute(0, 2, 3, 1).cpu().numpy()


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    img = c0 + t[..., None] * (c1 - c0)
    # a radial term adds curvature so the ramp is not purely planar
    cy, cx = rng.uniform(0, 1, 2)
    r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    img += 0.25 * np.cos(2 * np.pi * rng.uniform(0.5, 2.0) * r)[..., None] * rng.uniform(-1, 1, 3)
    return np.clip(img, 0, 1)


def _checkerboard(rng: np.random.Generator, size: int, cell: int | None = None) -> np.ndarray:
    if cell is None:
        cell = int(rng.choice([2, 4, 8, 16]))
    yy, xx = np.mgrid[0:size, 0:size]
    mask = ((yy // cell + xx // cell) % 2).astype(bool)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    while np.array_equal(_quantize(c0), _quantize(c1)):
        c1 = rng.uniform(0, 1, 3)
    return np.where(mask[..., None], c1, c0)


def _blobs(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.broadcast_to(rng.uniform(0, 1, 3), (size, size, 3)).copy()
    # blob count scales with area so density is resolution independent
    n = max(1, int(rng.poisson(6 * (size / 64) ** 2)))
    for _ in range(n):
        cy, cx = rng.uniform(0, size, 2)
        sigma = np.exp(rng.uniform(np.log(1.5), np.log(16.0)))
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        color = rng.uniform(0, 1, 3)
        img += w[..., None] * (color - img)
    return np.clip(img, 0, 1)


def synthetic_image(generator: str, rng: np.random.Generator, size: int, cell: int | None = None) -> tuple[np.ndarray, int]:
    """Draw one ``[size, size, 3]`` uint8 image and its class label."""
    if generator == "mixed":
        label = int(rng.integers(0, 3))
        generator = GENERATORS[label]
    else:
        label = GENERATORS.index(generator)
    if generator == "gradients":
        img = _gradient(rng, size)
    elif generator == "checkerboards":
        img = _checkerboard(rng, size, cell)
    else:
        img = _blobs(rng, size)
    return _quantize(img), label


@dataclass
class SyntheticSpec:
    generator: str = "mixed"
    count: int = 1024
    cell: int | None = None


class DatasetHandle:
    """Finite, indexable image set with seeded shuffling.

    ``loader(index)`` returns ``(uint8 [H, W, 3], label)``; images are cached
    after first use.
    """

    def __init__(self, loader: Callable[[int], tuple[np.ndarray, int]], count: int, resolution: int,
                 seed: int = 0, source: str = "", num_classes: int = 0):
        if count < 1:
            raise DataError("dataset is empty")
        self._loader = loader
        self._cache: dict[int, tuple[np.ndarray, int]] = {}
        self.count = count
        self.resolution = resolution
        self.seed = seed
        self.source = source
        self.num_classes = num_classes

    def __len__(self) -> int:
        return self.count

    def _get(self, index: int) -> tuple[np.ndarray, int]:
        if index not in self._cache:
            img, label = self._loader(index)
            if img.shape != (self.resolution, self.resolution, 3):
                raise DataError(f"image {index} has shape {img.shape}, expected resolution {self.resolution}")
            self._cache[index] = (img, label)
        return self._cache[index]

    def get_batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        items = [self._get(int(i)) for i in indices]
        images = to_unit_range(np.stack([im for im, _ in items]))
        labels = torch.tensor([lb for _, lb in items], dtype=torch.long)
        return images, labels

    def take(self, n: int, start: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
        """The first ``n`` images in index order (for probes and evaluation)."""
        n = min(n, self.count - start)
        return self.get_batch(range(start, start + n))

    def order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.count)

    def _iter(self, batch_size: int) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        epoch, buf = 0, []
        while True:
            for idx in self.order(epoch):
                buf.append(idx)
                if len(buf) == batch_size:
                    yield self.get_batch(buf)
                    buf = []
            epoch += 1

    def batches(self, batch_size: int, prefetch: int = 0) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
        """Endless stream of ``(images, labels)`` batches in seeded order."""
        if prefetch <= 0:
            yield from self._iter(batch_size)
            return
        q: queue.Queue = queue.Queue(maxsize=prefetch)
        stop = threading.Event()

        def produce():
            for batch in self._iter(batch_size):
                while not stop.is_set():
                    try:
                        q.put(batch, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return

        worker = threading.Thread(target=produce, daemon=True)
        worker.start()
        try:
            while True:
                yield q.get()
        finally:
            stop.set()


def synthetic_dataset(spec: SyntheticSpec | dict, resolution: int, seed: int = 0) -> DatasetHandle:
    if isinstance(spec, dict):
        spec = SyntheticSpec(**spec)
    if spec.generator not in GENERATORS:
        raise DataError(f"unknown generator {spec.generator!r}; choose from {list(GENERATORS)}")

    def load(index: int):
        rng = np.random.default_rng([seed, index])
        return synthetic_image(spec.generator, rng, resolution, spec.cell)

    num_classes = 3 if spec.generator == "mixed" else 1
    return DatasetHandle(load, spec.count, resolution, seed=seed,
                         source=f"synthetic:{spec.generator}", num_classes=num_classes)


def _center_crop_resize(img: Image.Image, resolution: int) -> np.ndarray:
    img = img.convert("RGB")
    w, h = img.size
    s = min(w, h)
    left, top = (w - s) // 2, (h - s) // 2
    img = img.crop((left, top, left + s, top + s))
    if s != resolution:
        img = img.resize((resolution, resolution), Image.BICUBIC)
    return np.asarray(img, dtype=np.uint8)


def load_folder(path: str | Path, resolution: int, seed: int = 0) -> DatasetHandle:
    """Decode every image under ``path`` (center crop, resize); unreadable files are skipped."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no image files found in {root}")
    images = []
    for f in files:
        try:
            with Image.open(f) as im:
                images.append(_center_crop_resize(im, resolution))
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            log.warning("skipping undecodable image %s: %s", f, exc)
    if not images:
        raise DataError(f"none of the {len(files)} files in {root} could be decoded")
    perm = np.random.default_rng(seed).permutation(len(images))
    images = [images[i] for i in perm]
    return DatasetHandle(lambda i: (images[i], 0), len(images), resolution, seed=seed,
                         source=f"folder:{root}", num_classes=1)


def save_image_grid(rows: list[torch.Tensor], path: str | Path) -> None:
    """Write rows of ``[N, 3, H, W]`` images (same N and size) as one PNG."""
    tiles = [np.concatenate(list(to_uint8(r)), axis=1) for r in rows]
    Image.fromarray(np.concatenate(tiles, axis=0)).save(Path(path), format="PNG")
