"""Run configuration and its flat ``key = value`` text format.

Example::

    # comments start with '#'
    train.epochs = 30
    rca.layers = [1, 3, 5, 7, 9, 11]
    ablation.use_tccl = false
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .datamodel import TEXT_LEN, LossWeights
from .rca import parse_variant


@dataclass
class TrainConfig:
    # frozen encoders
    vision_seed: int = 42
    vision_dim: int = 64
    vision_layers: int = 12
    vision_hidden: int = 256
    patch: int = 8
    image_size: int = 64
    text_seed: int = 43
    text_dim: int = 64
    text_len: int = TEXT_LEN
    text_layers: int = 4
    text_hidden: int = 4096
    vocab_size: int = 40
    # adapters
    rca_layers: list[int] = field(default_factory=lambda: [1, 3, 5, 7, 9, 11])
    rca_variant: str = "add-rescaled"
    rca_init_rescale: float = 0.2
    rca_proj_dim: int = 16
    # target-aware learning
    tlm_cpcl_layers: list[int] = field(default_factory=lambda: [4, 8, 12])
    tlm_k_negatives: int = 3
    # head
    decoder_blocks: int = 2
    decoder_heads: int = 2
    decoder_pixel_dim: int = 16  # 0 disables the per-pixel colour branch
    predict_threshold: float = 0.5
    # optimisation
    epochs: int = 30
    learning_rate: float = 1e-4
    lr_decay_epoch: int | None = None  # default: 70% of epochs
    lr_decay_factor: float = 0.1
    batch_size: int = 8
    seed: int = 0
    lambda_cpcl: float = 0.1
    lambda_tccl: float = 0.1
    use_rca: bool = True
    use_cpcl: bool = True
    use_tccl: bool = True

    def __post_init__(self):
        self.rca_variant = parse_variant(self.rca_variant)
        for name in ("epochs", "lr_decay_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("batch_size", "vision_dim", "text_dim", "rca_proj_dim", "tlm_k_negatives",
                     "decoder_blocks", "decoder_heads"):
            if getattr(self, name) < (0 if name == "tlm_k_negatives" else 1):
                raise ValueError(f"{name} must be positive")
        if self.decoder_pixel_dim < 0:
            raise ValueError("decoder_pixel_dim must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if len(self.tlm_cpcl_layers) < 1:
            raise ValueError("tlm.cpcl_layers must name at least one layer")
        for i in self.tlm_cpcl_layers:
            if not 1 <= i <= self.vision_layers:
                raise ValueError(f"consistency layer {i} outside 1..{self.vision_layers}")
        self.rca_layers = [int(i) for i in self.rca_layers]
        self.tlm_cpcl_layers = [int(i) for i in self.tlm_cpcl_layers]
        LossWeights(self.lambda_cpcl, self.lambda_tccl)

    @property
    def decay_epoch(self) -> int:
        if self.lr_decay_epoch is not None:
            return self.lr_decay_epoch
        return int(round(0.7 * self.epochs))

    @property
    def weights(self) -> LossWeights:
        """Loss weights with disabled losses zeroed."""
        return LossWeights(self.lambda_cpcl if self.use_cpcl else 0.0,
                           self.lambda_tccl if self.use_tccl else 0.0)

    @property
    def active_rca_layers(self) -> list[int]:
        return list(self.rca_layers) if self.use_rca else []

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "TrainConfig":
        """Apply ``{"dotted.key" or field name: value}`` overrides; string values are parsed."""
        changes = {}
        for key, value in overrides.items():
            name = KEYS.get(key, key)
            if name not in _FIELDS:
                raise KeyError(f"unknown config key {key!r}")
            changes[name] = _coerce(name, value) if isinstance(value, str) else value
        return self.replace(**changes)

    def to_flat(self) -> dict[str, Any]:
        rev = {v: k for k, v in KEYS.items()}
        return {rev.get(f.name, f.name): getattr(self, f.name) for f in dataclasses.fields(self)}

    def dumps(self) -> str:
        lines = []
        for k, v in self.to_flat().items():
            lines.append(f"{k} = {_format(v)}")
        return "\n".join(lines) + "\n"


# dotted file key -> field name
KEYS = {
    "vision.seed": "vision_seed", "vision.dim": "vision_dim", "vision.layers": "vision_layers",
    "vision.hidden": "vision_hidden", "vision.patch": "patch", "vision.image_size": "image_size",
    "text.seed": "text_seed", "text.dim": "text_dim", "text.len": "text_len",
    "text.layers": "text_layers", "text.hidden": "text_hidden", "text.vocab": "vocab_size",
    "rca.layers": "rca_layers", "rca.variant": "rca_variant", "rca.init_rescale": "rca_init_rescale",
    "rca.proj_dim": "rca_proj_dim",
    "tlm.cpcl_layers": "tlm_cpcl_layers", "tlm.k_negatives": "tlm_k_negatives",
    "decoder.blocks": "decoder_blocks", "decoder.heads": "decoder_heads",
    "decoder.pixel_dim": "decoder_pixel_dim",
    "predict.threshold": "predict_threshold",
    "train.epochs": "epochs", "train.lr": "learning_rate", "train.lr_decay_epoch": "lr_decay_epoch",
    "train.lr_decay_factor": "lr_decay_factor", "train.batch_size": "batch_size", "train.seed": "seed",
    "loss.lambda_cpcl": "lambda_cpcl", "loss.lambda_tccl": "lambda_tccl",
    "ablation.use_rca": "use_rca", "ablation.use_cpcl": "use_cpcl", "ablation.use_tccl": "use_tccl",
}
_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
# whole-line comments, or " # ..." after a value; "#5" stays a value
_COMMENT = re.compile(r"^\s*#.*$|\s+#(\s.*)?$")
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False, "on": True, "off": False}


def _coerce(name: str, raw: str) -> Any:
    raw = raw.strip()
    default = _FIELDS[name].default
    if default is dataclasses.MISSING:
        default = _FIELDS[name].default_factory()
    if isinstance(default, bool):
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ValueError(f"{name}: expected a boolean, got {raw!r}") from None
    if isinstance(default, list):
        val = json.loads(raw)
        if not isinstance(val, list):
            raise ValueError(f"{name}: expected a list, got {raw!r}")
        return [int(v) for v in val]
    if name == "lr_decay_epoch":
        return None if raw.lower() in ("", "none", "auto") else int(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return json.dumps(v)
    if v is None:
        return "auto"
    return str(v)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = _COMMENT.sub("", line).strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS and key not in _FIELDS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        overrides[key] = value
    return (base or TrainConfig()).with_overrides(overrides)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config_text(Path(path).read_text(), base)


def parse_grid_text(text: str) -> list[tuple[str, dict[str, str]]]:
    """One cell per line: ``[name] key=value key=value ...``. A bare first
    token without '=' names the cell."""
    cells = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = _COMMENT.sub("", line).strip()
        if not line:
            continue
        tokens = line.split()
        name = f"cell{len(cells)}"
        if "=" not in tokens[0]:
            name, tokens = tokens[0], tokens[1:]
        deltas = {}
        for tok in tokens:
            if "=" not in tok:
                raise ValueError(f"grid line {lineno}: expected key=value, got {tok!r}")
            k, v = tok.split("=", 1)
            deltas[k] = v
        cells.append((name, deltas))
    return cells
