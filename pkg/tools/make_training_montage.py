"""Freeze the 200-image lfw_subset set (100 faces then 100 non-faces, 25x25
float gray) into two montage PGMs under tests/assets/train/, 10 columns by
10 rows of 25x25 tiles each. Tests slice tiles back out row-major."""

import pathlib

import numpy as np
from skimage.data import lfw_subset

from sentinel.imaging import GrayImage, write_image

OUT = pathlib.Path(__file__).resolve().parents[1] / "tests" / "assets" / "train"
COLS = 10
TILE = 25


def montage(stack: np.ndarray) -> GrayImage:
    n = stack.shape[0]
    rows = (n + COLS - 1) // COLS
    canvas = np.zeros((rows * TILE, COLS * TILE), dtype=np.uint8)
    for i, img in enumerate(stack):
        r, c = divmod(i, COLS)
        canvas[r * TILE : (r + 1) * TILE, c * TILE : (c + 1) * TILE] = img
    return GrayImage(canvas)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    data = lfw_subset()
    as_u8 = np.clip(np.floor(data * 255.0 + 0.5), 0, 255).astype(np.uint8)
    write_image(montage(as_u8[:100]), OUT / "lfw_faces.pgm")
    write_image(montage(as_u8[100:]), OUT / "lfw_nonfaces.pgm")
    print("wrote", OUT / "lfw_faces.pgm")
    print("wrote", OUT / "lfw_nonfaces.pgm")


if __name__ == "__main__":
    main()
