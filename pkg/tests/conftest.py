import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from otappear.image_io import ImageBuffer  # noqa: E402


def synthetic_image(rng, h=24, w=24, noise=0.02):
    """Two-color horizontal ramp plus a flat disc and a little noise."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    c0, c1, c2 = rng.random((3, 3))
    img = c0 * (1 - xx[..., None]) + c1 * xx[..., None]
    disc = (yy - rng.random()) ** 2 + (xx - rng.random()) ** 2 < 0.06
    img[disc] = c2
    img = img + rng.normal(0.0, noise, img.shape)
    return ImageBuffer.clamped(img)


def random_image(rng, h=16, w=16):
    return ImageBuffer(rng.random((h, w, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
