"""Input validation helpers shared by loading, the estimator, and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import SchemaError


def check_box(box, where: str = "box") -> np.ndarray:
    """A box is (x, y, w, h) with positive size, inside the unit image."""
    arr = np.asarray(box, dtype=np.float64)
    if arr.shape != (4,):
        raise SchemaError(f"{where}: expected 4 coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{where}: non-finite coordinate")
    x, y, w, h = arr
    if w <= 0 or h <= 0:
        raise SchemaError(f"{where}: width/height must be positive, got w={w}, h={h}")
    if x < 0 or y < 0 or x + w > 1 + 1e-9 or y + h > 1 + 1e-9:
        raise SchemaError(f"{where}: box {arr.tolist()} leaves the unit image")
    return arr


def check_token_ids(token_ids, where: str = "tokens") -> None:
    for i, tok in enumerate(token_ids):
        if not isinstance(tok, (int, np.integer)) or tok < 0:
            raise SchemaError(f"{where}[{i}]: token ids must be nonnegative integers, got {tok!r}")


def check_mentions(mentions, n_tokens: int, where: str = "mentions") -> None:
    for i, span in enumerate(mentions):
        if span.start < 0 or span.end > n_tokens:
            raise SchemaError(
                f"{where}[{i}]: span [{span.start}, {span.end}) outside the {n_tokens}-token narration"
            )


def check_samples(samples, where: str = "dataset") -> None:
    seen: set[str] = set()
    for sample in samples:
        if sample.id in seen:
            raise SchemaError(f"{where}: duplicate sample id {sample.id!r}")
        seen.add(sample.id)
