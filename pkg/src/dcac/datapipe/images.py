"""8-bit RGB image decoding/encoding and name-keyed image sources."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..errors import ImageFormatError

SUPPORTED_FORMATS = {"PNG", "PPM", "JPEG"}
EXTENSIONS = (".png", ".ppm", ".jpg", ".jpeg")


def load_image(path) -> np.ndarray:
    """Decode to a float64 [3, H, W] array with values v / 255."""
    try:
        with Image.open(path) as im:
            if im.format not in SUPPORTED_FORMATS:
                raise ImageFormatError(f"{path}: unsupported format {im.format}")
            im.load()
            rgb = im.convert("RGB")
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, ImageFormatError):
            raise
        raise ImageFormatError(f"{path}: cannot decode ({exc})") from exc
    arr = np.asarray(rgb, dtype=np.uint8)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[3, H, W] floats in [0, 1] -> [H, W, 3] uint8 (round half up)."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM", ".jpg": "JPEG", ".jpeg": "JPEG"}.get(path.suffix.lower())
    if fmt is None:
        raise ImageFormatError(f"{path}: unsupported extension")
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format=fmt)


class ImageSource:
    """Look up decoded images by ``image_name``.

    Backed either by a directory (``<root>/<image_name>.<ext>``, decoded
    lazily and cached) or by an in-memory mapping.
    """

    def __init__(self, root=None, images: Optional[Mapping[str, np.ndarray]] = None,
                 cache: bool = True):
        if (root is None) == (images is None):
            raise ValueError("pass exactly one of root or images")
        self.root = Path(root) if root is not None else None
        self._cache: Dict[str, np.ndarray] = dict(images) if images is not None else {}
        self._keep = cache or images is not None

    def path_for(self, name: str) -> Optional[Path]:
        if self.root is None:
            return None
        for ext in EXTENSIONS:
            p = self.root / f"{name}{ext}"
            if p.exists():
                return p
        return None

    def missing(self, names: Iterable[str]) -> List[str]:
        if self.root is None:
            return [n for n in names if n not in self._cache]
        return [n for n in names if n not in self._cache and self.path_for(n) is None]

    def __getitem__(self, name: str) -> np.ndarray:
        img = self._cache.get(name)
        if img is not None:
            return img
        path = self.path_for(name)
        if path is None:
            raise KeyError(name)
        img = load_image(path)
        if self._keep:
            self._cache[name] = img
        return img
