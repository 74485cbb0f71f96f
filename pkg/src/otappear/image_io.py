"""Image and geometry-map loading/saving (PNG and binary PPM only)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
NORMAL_LENGTH_TOL = 0.05


class ImageFormatError(ValueError):
    """Raised for unsupported, malformed or out-of-range image data."""


@dataclass(frozen=True)
class ImageBuffer:
    """H x W x 3 float64 color array with every component in [0, 1].

    The array is made read-only on construction so buffers can be shared.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ImageFormatError(f"expected H x W x 3 data, got shape {arr.shape}")
        if arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ImageFormatError("zero-dimension image")
        if not np.all(np.isfinite(arr)):
            raise ImageFormatError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ImageFormatError(
                f"components must lie in [0, 1], got [{arr.min():.4g}, {arr.max():.4g}]"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    @classmethod
    def clamped(cls, data: np.ndarray) -> "ImageBuffer":
        return cls(np.clip(data, 0.0, 1.0))

    @classmethod
    def constant(cls, height: int, width: int, color) -> "ImageBuffer":
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float64), (height, width, 3)))


@dataclass(frozen=True)
class GeometryMaps:
    """Optional per-pixel position and normal maps for one image.

    ``normal_map`` stores unit normals encoded as (n + 1) / 2 per channel.
    """

    position_map: Optional[ImageBuffer] = None
    normal_map: Optional[ImageBuffer] = None

    def check_shape(self, shape: tuple[int, int]) -> None:
        for name in ("position_map", "normal_map"):
            m = getattr(self, name)
            if m is not None and m.shape != tuple(shape):
                raise ImageFormatError(
                    f"{name} is {m.shape[0]}x{m.shape[1]}, image is {shape[0]}x{shape[1]}"
                )

    def decoded_normals(self) -> Optional[np.ndarray]:
        if self.normal_map is None:
            return None
        return decode_normals(self.normal_map)


def encode_normals(normals: np.ndarray) -> ImageBuffer:
    return ImageBuffer((np.asarray(normals, dtype=np.float64) + 1.0) / 2.0)


def decode_normals(normal_map: ImageBuffer) -> np.ndarray:
    """Invert the (n + 1) / 2 encoding and check unit length within 8-bit tolerance."""
    n = normal_map.data * 2.0 - 1.0
    length = np.linalg.norm(n, axis=2)
    bad = np.abs(length - 1.0) > NORMAL_LENGTH_TOL
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ImageFormatError(
            f"normal at row {r}, col {c} has length {length[r, c]:.4f}; "
            f"expected 1 +/- {NORMAL_LENGTH_TOL}"
        )
    return n


def _sniff(head: bytes) -> str:
    if head.startswith(PNG_MAGIC):
        return "png"
    if head[:2] == b"P6":
        return "ppm"
    raise ImageFormatError("unsupported format: only PNG and binary PPM (P6) are accepted")


def _read_ppm(raw: bytes) -> np.ndarray:
    # header: magic, width, height, maxval separated by whitespace, '#' comments allowed
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        try:
            fields.append(int(raw[start:pos]))
        except ValueError as exc:
            raise ImageFormatError(f"bad PPM header field {raw[start:pos]!r}") from exc
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"PPM maxval must be 255, got {maxval}")
    if width <= 0 or height <= 0:
        raise ImageFormatError("zero-dimension image")
    pos += 1  # single whitespace byte after maxval
    body = raw[pos : pos + width * height * 3]
    if len(body) != width * height * 3:
        raise ImageFormatError("truncated PPM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3)


def load_image(path) -> ImageBuffer:
    """Load a PNG or P6 PPM file, scaling 8-bit values by 1/255."""
    path = Path(path)
    raw = path.read_bytes()
    kind = _sniff(raw[:8])
    if kind == "ppm":
        pixels = _read_ppm(raw)
    else:
        with Image.open(path) as im:
            if im.width == 0 or im.height == 0:
                raise ImageFormatError("zero-dimension image")
            pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageBuffer(pixels.astype(np.float64) / 255.0)


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] values to uint8 by round(v * 255); out-of-range input is rejected."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
        raise ImageFormatError("components must lie in [0, 1]; clamp before saving")
    return np.rint(values * 255.0).astype(np.uint8)


def save_image(image, path) -> None:
    """Write PNG or PPM depending on the file extension.

    Accepts an ImageBuffer or a raw array so that out-of-range data is
    rejected here rather than silently clamped.
    """
    data = image.data if isinstance(image, ImageBuffer) else np.asarray(image)
    pixels = to_bytes(data)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ImageFormatError("PPM output needs H x W x 3 data")
        header = f"P6\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + pixels.tobytes())
    elif suffix == ".png":
        Image.fromarray(pixels).save(path, format="PNG")
    else:
        raise ImageFormatError(f"unsupported output extension {suffix!r}; use .png or .ppm")


def save_mask(mask: np.ndarray, path) -> None:
    """Single-channel PNG with value round(m * 255)."""
    Image.fromarray(to_bytes(mask)).save(Path(path), format="PNG")


def load_geometry(position_path=None, normal_path=None) -> GeometryMaps:
    pos = load_image(position_path) if position_path else None
    nrm = load_image(normal_path) if normal_path else None
    maps = GeometryMaps(pos, nrm)
    if nrm is not None:
        decode_normals(nrm)
    return maps
