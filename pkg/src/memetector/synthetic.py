"""Synthetic meme / regular images for desk-scale experiments.

Regular images are smooth colour gradients with mild noise. Memes are the
same kind of background with high-contrast caption strips at the top
and/or bottom: rows of uniform-height white glyph blocks with dark outlines.
Word boxes for the glyph runs are returned so the corpus also exercises
visual-part extraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vpu import BoundingBox


@dataclass
class SyntheticImage:
    pixels: np.ndarray
    label: int  # 1 = meme
    boxes: list[BoundingBox]


def background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.uniform(0, 255, 3)
    c1 = rng.uniform(0, 255, 3)
    angle = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = (np.cos(angle) * xx + np.sin(angle) * yy)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0 + t[..., None] * (c1 - c0)
    img += rng.normal(0, 8, img.shape)
    return img


def _caption(img: np.ndarray, rng: np.random.Generator, top: int, height: int) -> list[BoundingBox]:
    size = img.shape[1]
    boxes = []
    x = int(rng.integers(1, 4))
    while x < size - 3:
        word_start = x
        for _ in range(int(rng.integers(2, 6))):
            w = int(rng.integers(1, 3))
            if x + w + 1 >= size:
                break
            img[top - 1:top + height + 1, x - 1:x + w + 1] = 0
            img[top:top + height, x:x + w] = 255
            x += w + 1
        if x > word_start:
            boxes.append(BoundingBox(word_start - 1, top - 1, min(x, size), top + height + 1, "word"))
        x += int(rng.integers(2, 4))
    return boxes


def make_image(rng: np.random.Generator, meme: bool, size: int = 40) -> SyntheticImage:
    img = background(rng, size)
    boxes: list[BoundingBox] = []
    if meme:
        height = max(size // 5, 2)
        where = rng.integers(3)  # 0 top, 1 bottom, 2 both
        if where in (0, 2):
            boxes += _caption(img, rng, 2, height)
        if where in (1, 2):
            boxes += _caption(img, rng, size - height - 2, height)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SyntheticImage(pixels, int(meme), boxes)


def make_corpus(n: int, seed: int, size: int = 40) -> list[SyntheticImage]:
    """``n`` images, alternating regular / meme, in a seeded shuffled order."""
    rng = np.random.default_rng(seed)
    items = [make_image(rng, i % 2 == 1, size) for i in range(n)]
    order = rng.permutation(n)
    return [items[i] for i in order]
