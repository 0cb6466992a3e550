"""Synthetic referring-segmentation scenes: coloured shapes on a 3x3 layout,
one templated expression per instance.

A shape is a category. In an NTA-eligible scene the referred target has one
or two same-shape siblings, each differing from it in exactly one attribute
(colour, size, or only its position), so a model that latches onto the
category rather than the described instance lights up the siblings.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import PAD_ID, TEXT_LEN, BinaryMask, RISExample

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
COLORS = tuple(PALETTE)
SIZES = {"small": 5.0, "large": 8.0}  # half-extent in pixels
POSITIONS = ("top left", "top", "top right", "left", "center", "right",
             "bottom left", "bottom", "bottom right")

SPECIALS = ("<pad>", "<bos>", "<eos>")
WORDS = ("the", "in", "small", "large", *COLORS, *SHAPES, "top", "bottom", "left", "right", "center")
VOCAB_SIZE = 40  # ids past the used words are reserved
VOCAB = {w: i for i, w in enumerate(SPECIALS + WORDS)}
assert len(VOCAB) <= VOCAB_SIZE and VOCAB["<pad>"] == PAD_ID
ID_TO_WORD = {i: w for w, i in VOCAB.items()}

TEMPLATE = "the {size} {color} {shape} in the {position}"
MAX_RETRIES = 20


@dataclass(frozen=True)
class Instance:
    shape: str
    color: str
    size: str
    cell: int  # 0..8, row-major over the 3x3 layout
    cx: float
    cy: float

    @property
    def extent(self) -> float:
        return SIZES[self.size]

    @property
    def position(self) -> str:
        return POSITIONS[self.cell]


def render_expression(inst: Instance) -> str:
    return TEMPLATE.format(size=inst.size, color=inst.color, shape=inst.shape, position=inst.position)


def tokenize(text: str, length: int = TEXT_LEN) -> tuple[int, ...]:
    ids = [VOCAB["<bos>"], *(VOCAB[w] for w in text.split()), VOCAB["<eos>"]]
    if len(ids) > length:
        ids = ids[: length - 1] + [VOCAB["<eos>"]]
    return tuple(ids + [PAD_ID] * (length - len(ids)))


def detokenize(ids: Sequence[int]) -> str:
    words = [ID_TO_WORD.get(int(i), f"<{int(i)}>") for i in ids]
    return " ".join(w for w in words if w not in SPECIALS)


def parse_expression(text: str) -> dict[str, str]:
    """Attribute slots named in an expression, e.g. ``{"shape": "circle", ...}``."""
    words = text.split()
    attrs: dict[str, str] = {}
    for w in words:
        if w in SIZES:
            attrs["size"] = w
        elif w in PALETTE:
            attrs["color"] = w
        elif w in SHAPES:
            attrs["shape"] = w
    if "in" in words:
        tail = words[words.index("in") + 1:]
        if tail[:1] == ["the"]:
            tail = tail[1:]
        pos = " ".join(tail)
        if pos not in POSITIONS:
            raise ValueError(f"unknown position {pos!r} in {text!r}")
        attrs["position"] = pos
    return attrs


def expression_matches(text: str, inst: Instance) -> bool:
    """True iff every attribute named in the expression holds for ``inst``."""
    have = {"size": inst.size, "color": inst.color, "shape": inst.shape, "position": inst.position}
    return all(have[k] == v for k, v in parse_expression(text).items())


def rasterize(inst: Instance, height: int = 64, width: int = 64) -> BinaryMask:
    """A pixel is inside iff its centre (x + 0.5, y + 0.5) lies in the shape."""
    return rasterize_shape(inst.shape, inst.cx, inst.cy, inst.extent, height, width)


def rasterize_shape(shape: str, cx: float, cy: float, r: float, height: int, width: int) -> BinaryMask:
    if r < 0:
        raise ValueError(f"negative extent {r}")
    if cx - r < 0 or cy - r < 0 or cx + r > width or cy + r > height:
        raise ValueError(f"{shape} at ({cx}, {cy}) with extent {r} leaves the {height}x{width} canvas")
    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    if shape == "circle":
        bits = (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    elif shape == "square":
        bits = (np.abs(px - cx) <= r) & (np.abs(py - cy) <= r)
    elif shape == "triangle":
        # apex up at (cx, cy - r), base along y = cy + r from cx - r to cx + r
        bits = (py <= cy + r) & (np.abs(px - cx) * 2 <= (py - (cy - r)))
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return BinaryMask(bits)


def _cell_center(cell: int, size: int) -> tuple[float, float]:
    step = size / 3
    row, col = divmod(cell, 3)
    return (col + 0.5) * step, (row + 0.5) * step


def _place(rng: np.random.Generator, shape: str, color: str, sz: str, cell: int, canvas: int) -> Instance:
    cx, cy = _cell_center(cell, canvas)
    slack = canvas / 6 - SIZES[sz] - 0.5
    jitter = rng.uniform(-1.0, 1.0, 2) * max(0.0, min(1.5, slack))
    return Instance(shape, color, sz, cell, float(cx + jitter[0]), float(cy + jitter[1]))


def _other(rng: np.random.Generator, options: Sequence[str], exclude: str) -> str:
    return str(rng.choice([o for o in options if o != exclude]))


def make_scene(rng: np.random.Generator, eligible: bool, canvas: int = 64,
               max_instances: int = 4) -> tuple[list[Instance], int]:
    """Returns the instances and the index of the referred target."""
    if eligible:
        n_sib = int(rng.integers(1, 3))
        n_other = int(rng.integers(0, max_instances - n_sib))
        n = 1 + n_sib + n_other
    else:
        n = int(rng.integers(1, min(len(SHAPES), max_instances) + 1))
    if n > 9:
        raise ValueError(f"{n} instances do not fit the 3x3 layout")
    cells = [int(c) for c in rng.choice(9, size=n, replace=False)]
    if eligible:
        shape = str(rng.choice(SHAPES))
        color, sz = str(rng.choice(COLORS)), str(rng.choice(list(SIZES)))
        insts = [_place(rng, shape, color, sz, cells[0], canvas)]
        for k in range(n_sib):
            kind = str(rng.choice(["color", "size", "position"]))
            c = _other(rng, COLORS, color) if kind == "color" else color
            s = _other(rng, list(SIZES), sz) if kind == "size" else sz
            insts.append(_place(rng, shape, c, s, cells[1 + k], canvas))
        others = [s for s in SHAPES if s != shape]
        for k in range(n_other):
            insts.append(_place(rng, str(rng.choice(others)), str(rng.choice(COLORS)),
                                str(rng.choice(list(SIZES))), cells[1 + n_sib + k], canvas))
        return insts, 0
    shapes = [str(s) for s in rng.choice(SHAPES, size=n, replace=False)]
    insts = [_place(rng, s, str(rng.choice(COLORS)), str(rng.choice(list(SIZES))), cells[k], canvas)
             for k, s in enumerate(shapes)]
    return insts, int(rng.integers(n))


def paint(insts: Sequence[Instance], canvas: int = 64) -> tuple[np.ndarray, list[BinaryMask]]:
    image = np.zeros((canvas, canvas, 3), dtype=np.float64)
    masks = []
    for inst in insts:
        m = rasterize(inst, canvas, canvas)
        image[m.bits] = PALETTE[inst.color]
        masks.append(m)
    return image, masks


def _valid(insts: Sequence[Instance], masks: Sequence[BinaryMask]) -> bool:
    total = sum(m.area for m in masks)
    union = np.zeros_like(masks[0].bits)
    for m in masks:
        union |= m.bits
    if total != int(union.sum()) or any(m.area == 0 for m in masks):
        return False
    texts = [render_expression(i) for i in insts]
    return len(set(texts)) == len(texts)


def scene_to_example(insts: Sequence[Instance], target: int, canvas: int = 64) -> RISExample:
    image, masks = paint(insts, canvas)
    tgt = insts[target]
    sib = [k for k, inst in enumerate(insts) if k != target and inst.shape == tgt.shape]
    return RISExample(
        image=image,
        positive_text=tokenize(render_expression(tgt)),
        negative_texts=tuple(tokenize(render_expression(insts[k])) for k in sib),
        target_mask=masks[target],
        sibling_masks=tuple(masks[k] for k in sib),
        category_id=SHAPES.index(tgt.shape),
    )


def generate_scene(seed: int, index: int, nta_fraction: float, canvas: int = 64,
                   max_instances: int = 4) -> tuple[list[Instance], int]:
    rng = np.random.default_rng([seed, index])
    eligible = bool(rng.random() < nta_fraction)
    for attempt in range(MAX_RETRIES):
        insts, target = make_scene(rng, eligible, canvas, max_instances)
        if _valid(insts, paint(insts, canvas)[1]):
            return insts, target
        log.info("scene %d/%d: infeasible layout on attempt %d, resampling", seed, index, attempt)
    raise RuntimeError(f"could not build scene {index} for seed {seed}")


def generate(seed: int, n_examples: int, nta_fraction: float = 0.5, canvas: int = 64,
             max_instances: int = 4) -> list[RISExample]:
    """Deterministic in (seed, arguments); example ``i`` uses the substream (seed, i)."""
    if not 0.0 <= nta_fraction <= 1.0:
        raise ValueError(f"nta_fraction {nta_fraction} outside [0, 1]")
    out = []
    for i in range(n_examples):
        insts, target = generate_scene(seed, i, nta_fraction, canvas, max_instances)
        out.append(scene_to_example(insts, target, canvas))
    return out


def is_val(seed: int, index: int, val_every: int = 10) -> bool:
    digest = hashlib.sha256(f"{seed}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % val_every == 0


def split_indices(seed: int, n: int) -> list[int]:
    """Indices of the ~10% validation split."""
    return [i for i in range(n) if is_val(seed, i)]


def dataset_header(seed: int, n: int, nta_fraction: float, canvas: int = 64,
                   max_instances: int = 4) -> dict:
    return {
        "generator": "synthbench/1",
        "seed": seed,
        "n_requested": n,
        "nta_fraction": nta_fraction,
        "canvas": canvas,
        "max_instances": max_instances,
        "text_len": TEXT_LEN,
        "vocab_size": VOCAB_SIZE,
        "val_indices": split_indices(seed, n),
    }
