"""Write ten 64x64 grayscale crops of scikit-image's bundled sample photos to data/clean/.

The crops are committed; rerun only to regenerate them.
"""
import pathlib

import numpy as np
import skimage.data
from skimage.color import rgb2gray

# (image name, top, left)
CROPS = [
    ("camera", 100, 200),
    ("astronaut", 60, 180),
    ("coffee", 150, 250),
    ("chelsea", 100, 150),
    ("coins", 100, 100),
    ("moon", 200, 200),
    ("rocket", 200, 300),
    ("clock", 100, 150),
    ("brick", 200, 200),
    ("page", 60, 150),
]


def main():
    out = pathlib.Path(__file__).resolve().parent.parent / "data" / "clean"
    out.mkdir(parents=True, exist_ok=True)
    for name, top, left in CROPS:
        img = getattr(skimage.data, name)()
        if img.ndim == 3:
            img = (rgb2gray(img) * 255.0).round().astype(np.uint8)
        crop = img[top : top + 64, left : left + 64]
        assert crop.shape == (64, 64), name
        with open(out / f"{name}.pgm", "wb") as f:
            f.write(b"P5\n64 64\n255\n")
            f.write(crop.astype(np.uint8).tobytes())


if __name__ == "__main__":
    main()
