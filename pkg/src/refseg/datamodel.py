"""Shared value types: binary masks, dataset records, loss weights, and the
line-delimited dataset format.

A dataset file is one JSON object per line. An optional first line of the form
``{"header": {...}}`` carries generator settings, the train/val split and a
content checksum; every other line is one example record with keys
``image, pos_text, neg_texts, target_rle, siblings_rle, category, width, height``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

# Fixed text length; id 0 is padding.
TEXT_LEN = 32
PAD_ID = 0

# A tokens x channels real matrix.
FeatureMatrix = torch.Tensor


class DatasetFormatError(ValueError):
    """A dataset record could not be parsed. ``offset`` is the absolute byte
    offset into the file (or byte string) where parsing failed."""

    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def check_features(x: torch.Tensor, name: str = "features") -> torch.Tensor:
    """Validate a feature matrix (optionally batched): at least 1 token and 1
    channel, and every entry finite."""
    if x.dim() < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"{name}: expected [..., tokens, channels], got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{name}: contains NaN or Inf")
    return x


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray  # bool [height, width]

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        bits = bits.astype(bool, copy=True)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    def _check(self, other: "BinaryMask") -> None:
        if self.shape != other.shape:
            raise ValueError(f"mask dimension mismatch: {self.shape} vs {other.shape}")

    def intersect(self, other: "BinaryMask") -> "BinaryMask":
        self._check(other)
        return BinaryMask(self.bits & other.bits)

    def union(self, other: "BinaryMask") -> "BinaryMask":
        self._check(other)
        return BinaryMask(self.bits | other.bits)

    def minus(self, other: "BinaryMask") -> "BinaryMask":
        self._check(other)
        return BinaryMask(self.bits & ~other.bits)

    __and__ = intersect
    __or__ = union
    __sub__ = minus

    def issubset(self, other: "BinaryMask") -> bool:
        self._check(other)
        return not bool((self.bits & ~other.bits).any())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.shape, self.bits.tobytes()))

    def to_rle(self) -> list[list[int]]:
        """Runs of true pixels as ``[start, length]`` pairs in row-major order."""
        flat = self.bits.ravel().astype(np.int8)
        edges = np.diff(np.concatenate([[0], flat, [0]]))
        starts = np.flatnonzero(edges == 1)
        ends = np.flatnonzero(edges == -1)
        return [[int(s), int(e - s)] for s, e in zip(starts, ends)]

    @classmethod
    def from_rle(cls, runs: Sequence[Sequence[int]], height: int, width: int) -> "BinaryMask":
        flat = np.zeros(height * width, dtype=bool)
        for run in runs:
            start, length = int(run[0]), int(run[1])
            if start < 0 or length < 0 or start + length > flat.size:
                raise ValueError(f"run {run} outside a {height}x{width} mask")
            flat[start:start + length] = True
        return cls(flat.reshape(height, width))


def mask_ops(a: BinaryMask, b: BinaryMask, op: str) -> BinaryMask:
    """Pointwise set operation: ``intersect``, ``union`` or ``minus``."""
    ops = {"intersect": a.intersect, "union": a.union, "minus": a.minus}
    if op not in ops:
        raise ValueError(f"unknown mask op {op!r}")
    return ops[op](b)


def _as_tokens(seq: Iterable[int]) -> tuple[int, ...]:
    return tuple(int(t) for t in seq)


@dataclass(frozen=True, eq=False)
class RISExample:
    image: np.ndarray  # float64 [H, W, C]
    positive_text: tuple[int, ...]
    negative_texts: tuple[tuple[int, ...], ...]
    target_mask: BinaryMask
    sibling_masks: tuple[BinaryMask, ...] = ()
    category_id: int = 0

    def __post_init__(self):
        image = np.array(self.image, dtype=np.float64)
        if image.ndim != 3:
            raise ValueError(f"image must be [H, W, C], got shape {image.shape}")
        image.setflags(write=False)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "positive_text", _as_tokens(self.positive_text))
        object.__setattr__(self, "negative_texts", tuple(_as_tokens(t) for t in self.negative_texts))
        object.__setattr__(self, "sibling_masks", tuple(self.sibling_masks))
        object.__setattr__(self, "category_id", int(self.category_id))
        hw = image.shape[:2]
        for m in (self.target_mask, *self.sibling_masks):
            if m.shape != hw:
                raise ValueError(f"mask shape {m.shape} does not match image {hw}")
        for m in self.sibling_masks:
            if (m.bits & self.target_mask.bits).any():
                raise ValueError("sibling mask overlaps the target mask")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def cocategory_mask(self) -> BinaryMask:
        """Union of the target and all same-category sibling masks."""
        bits = self.target_mask.bits.copy()
        for m in self.sibling_masks:
            bits |= m.bits
        return BinaryMask(bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RISExample):
            return NotImplemented
        return (
            self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and self.positive_text == other.positive_text
            and self.negative_texts == other.negative_texts
            and self.target_mask == other.target_mask
            and self.sibling_masks == other.sibling_masks
            and self.category_id == other.category_id
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class LossWeights:
    lambda_cpcl: float = 0.1
    lambda_tccl: float = 0.1

    def __post_init__(self):
        for name in ("lambda_cpcl", "lambda_tccl"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
            object.__setattr__(self, name, v)


# ---------------------------------------------------------------- serialization


def example_to_record(ex: RISExample) -> dict:
    return {
        "image": ex.image.tolist(),
        "pos_text": list(ex.positive_text),
        "neg_texts": [list(t) for t in ex.negative_texts],
        "target_rle": ex.target_mask.to_rle(),
        "siblings_rle": [m.to_rle() for m in ex.sibling_masks],
        "category": ex.category_id,
        "width": ex.width,
        "height": ex.height,
    }


def record_to_example(rec: dict) -> RISExample:
    h, w = int(rec["height"]), int(rec["width"])
    image = np.asarray(rec["image"], dtype=np.float64)
    if image.ndim != 3 or image.shape[:2] != (h, w):
        raise ValueError(f"image shape {image.shape} inconsistent with {h}x{w}")
    return RISExample(
        image=image,
        positive_text=rec["pos_text"],
        negative_texts=rec["neg_texts"],
        target_mask=BinaryMask.from_rle(rec["target_rle"], h, w),
        sibling_masks=tuple(BinaryMask.from_rle(r, h, w) for r in rec["siblings_rle"]),
        category_id=rec["category"],
    )


def serialize_example(ex: RISExample) -> bytes:
    # repr-based float formatting in json round-trips float64 exactly
    return json.dumps(example_to_record(ex), separators=(",", ":")).encode("utf-8")


def deserialize_example(data: bytes, base_offset: int = 0) -> RISExample:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DatasetFormatError(f"invalid utf-8: {e.reason}", base_offset + e.start) from e
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise DatasetFormatError(f"malformed record: {e.msg}", base_offset + offset) from e
    if not isinstance(rec, dict):
        raise DatasetFormatError("record is not an object", base_offset)
    try:
        return record_to_example(rec)
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"invalid record: {e!r}", base_offset) from e


@dataclass
class Dataset:
    examples: list[RISExample]
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def split(self, name: str) -> list[RISExample]:
        """Examples of the ``train`` or ``val`` split recorded in the header.
        Without a recorded split every example is in ``train``."""
        val = set(self.header.get("val_indices", []))
        if name == "val":
            return [ex for i, ex in enumerate(self.examples) if i in val]
        if name == "train":
            return [ex for i, ex in enumerate(self.examples) if i not in val]
        if name == "all":
            return list(self.examples)
        raise ValueError(f"unknown split {name!r}")


def content_checksum(lines: Iterable[bytes]) -> str:
    h = hashlib.sha256()
    for line in lines:
        h.update(line)
        h.update(b"\n")
    return h.hexdigest()


def write_dataset(path: str | Path, examples: Sequence[RISExample], header: dict | None = None) -> str:
    """Write examples (plus a header line) and return the content checksum."""
    lines = [serialize_example(ex) for ex in examples]
    checksum = content_checksum(lines)
    head = dict(header or {})
    head["sha256"] = checksum
    head["n"] = len(lines)
    with open(path, "wb") as f:
        f.write(json.dumps({"header": head}, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for line in lines:
            f.write(line)
            f.write(b"\n")
    return checksum


def read_dataset(path: str | Path) -> Dataset:
    header: dict = {}
    examples: list[RISExample] = []
    offset = 0
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f):
            line = raw.rstrip(b"\r\n")
            if line.strip():
                if lineno == 0 and line.startswith(b'{"header"'):
                    try:
                        header = json.loads(line)["header"]
                    except (json.JSONDecodeError, KeyError) as e:
                        raise DatasetFormatError(f"bad header: {e}", offset) from e
                else:
                    examples.append(deserialize_example(line, offset))
            offset += len(raw)
    return Dataset(examples, header)
