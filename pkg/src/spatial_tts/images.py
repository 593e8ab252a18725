"""Content-addressed image storage (``sha256:<hex>`` refs over raw bytes)."""

from __future__ import annotations

import base64
import threading
from pathlib import Path

from .domain import image_hash
from .errors import ResolutionError


class ImageStore:
    """Thread-safe in-memory map from content hash to encoded image bytes."""

    def __init__(self):
        self._data: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, data: bytes) -> str:
        ref = image_hash(data)
        with self._lock:
            self._data.setdefault(ref, data)
        return ref

    def put_file(self, path: str | Path) -> str:
        return self.put(Path(path).read_bytes())

    def get(self, ref: str) -> bytes:
        try:
            return self._data[ref]
        except KeyError:
            raise ResolutionError(f"image {ref} is not in the store") from None

    def __contains__(self, ref: str) -> bool:
        return ref in self._data

    def __len__(self) -> int:
        return len(self._data)


def b64encode(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64decode(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)
