"""Small ReLU MLP classifiers over a flat parameter vector."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError


class Slot(NamedTuple):
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected ReLU classifier.

    Weights are stored ``(fan_in, fan_out)`` so a layer computes ``x @ W + b``.
    """

    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    num_classes: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError("all layer sizes must be >= 1", "model")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", "model.num_classes")
        if self.activation != "relu":
            raise ConfigError(f"unsupported activation {self.activation!r}", "model.activation")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(dims[:-1], dims[1:]))

    def layout(self) -> tuple[Slot, ...]:
        return self._layout

    @cached_property
    def _layout(self) -> tuple[Slot, ...]:
        slots, offset = [], 0
        for i, (fan_in, fan_out) in enumerate(self.layer_dims):
            for name, shape in ((f"fc{i}.weight", (fan_in, fan_out)), (f"fc{i}.bias", (fan_out,))):
                slots.append(Slot(name, shape, offset))
                offset += math.prod(shape)
        return tuple(slots)

    @property
    def num_params(self) -> int:
        return sum(s.size for s in self.layout())


@dataclass
class ParamVector:
    """All model parameters as one flat float64 array plus its layout."""

    values: np.ndarray
    layout: tuple[Slot, ...] = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not all(type(s) is Slot for s in self.layout):
            self.layout = tuple(Slot(s[0], tuple(s[1]), int(s[2])) for s in self.layout)
        expected = _layout_size(self.layout)
        if self.values.ndim != 1 or self.values.size != expected:
            raise ContractError(
                f"layout describes {expected} values but got array of shape {self.values.shape}"
            )

    @classmethod
    def zeros(cls, layout) -> "ParamVector":
        return cls(np.zeros(sum(Slot(*s).size for s in layout)), layout)

    @classmethod
    def flatten(cls, arrays: dict[str, np.ndarray], layout) -> "ParamVector":
        values = np.empty(sum(Slot(*s).size for s in layout))
        for name, shape, offset in layout:
            block = np.asarray(arrays[name], dtype=np.float64)
            if block.shape != tuple(shape):
                raise ContractError(f"{name}: expected shape {tuple(shape)}, got {block.shape}")
            values[offset : offset + block.size] = block.reshape(-1)
        return cls(values, layout)

    def unflatten(self) -> dict[str, np.ndarray]:
        """Per-layer arrays; these are views into ``values``."""
        return {s.name: self.values[s.offset : s.offset + s.size].reshape(s.shape) for s in self.layout}

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def like(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __len__(self) -> int:
        return self.values.size


@lru_cache(maxsize=64)
def _layout_size(layout: tuple[Slot, ...]) -> int:
    return sum(s.size for s in layout)


def check_layout(a: ParamVector, b: ParamVector) -> None:
    if a.layout != b.layout:
        raise ContractError("parameter vectors have different layouts")


def init_params(spec: MlpSpec, seed: int | np.random.Generator) -> ParamVector:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    theta = ParamVector.zeros(spec.layout())
    blocks = theta.unflatten()
    for slot in theta.layout:
        if slot.name.endswith(".weight"):
            blocks[slot.name][...] = rng.normal(0.0, np.sqrt(2.0 / slot.shape[0]), size=slot.shape)
    return theta


def forward(spec: MlpSpec, theta, x) -> Tensor:
    """Logits of the MLP for a batch ``x``.

    ``theta`` is either a :class:`ParamVector` (no gradient) or a flat
    :class:`~flatmatch.autodiff.Tensor`, which makes the logits
    differentiable with respect to it when a tape is active.
    """
    layout = spec.layout()
    if isinstance(theta, ParamVector):
        if theta.layout != layout:
            raise ContractError("parameter layout does not match the model spec")
        theta = Tensor(theta.values)
    elif theta.shape != (spec.num_params,):
        raise ContractError(f"expected {spec.num_params} parameters, got tensor of shape {theta.shape}")
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.ndim != 2 or h.shape[1] != spec.input_dim:
        raise ContractError(f"input must be batch x {spec.input_dim}, got {h.shape}")
    n_layers = len(layout) // 2
    for i in range(n_layers):
        w, b = layout[2 * i], layout[2 * i + 1]
        h = ad.add_bias(ad.matmul(h, ad.view(theta, w.offset, w.shape)), ad.view(theta, b.offset, b.shape))
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def predict_proba(spec: MlpSpec, theta: ParamVector, x) -> np.ndarray:
    return softmax(forward(spec, theta, x).data)


def perturb(theta: ParamVector, eps: ParamVector) -> ParamVector:
    """``theta + eps`` as a new vector; ``theta`` is left untouched."""
    check_layout(theta, eps)
    return theta.like(theta.values + eps.values)


def _blocks(slot: Slot, values: np.ndarray) -> list[np.ndarray]:
    """Filter blocks of one layer: weight columns (one per output unit) or the whole bias."""
    block = values[slot.offset : slot.offset + slot.size].reshape(slot.shape)
    if block.ndim == 2:
        return [block[:, j] for j in range(block.shape[1])]
    return [block]


def random_direction(theta: ParamVector, seed: int, filter_normalized: bool = True) -> ParamVector:
    """Gaussian direction in parameter space, deterministic in ``seed``.

    With ``filter_normalized`` every filter block (a weight column or a bias
    vector) is rescaled to the norm of the matching block of ``theta``.
    Blocks where ``theta`` is all-zero keep their raw Gaussian values.
    """
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(theta.values.size)
    if filter_normalized:
        for slot in theta.layout:
            for db, tb in zip(_blocks(slot, d), _blocks(slot, theta.values)):
                t_norm = np.linalg.norm(tb)
                if t_norm > 0:
                    db *= t_norm / np.linalg.norm(db)
    return theta.like(d)


def block_norms(theta: ParamVector) -> list[float]:
    return [float(np.linalg.norm(b)) for s in theta.layout for b in _blocks(s, theta.values)]


# ---------------------------------------------------------------------------
# checkpoints: "<stem>.layout" (name,shape,offset per line) + "<stem>.bin" (<f8)


def save_checkpoint(theta: ParamVector, stem: str | Path) -> tuple[Path, Path]:
    stem = Path(stem)
    layout_path, data_path = stem.with_suffix(".layout"), stem.with_suffix(".bin")
    lines = [f"{s.name},{'x'.join(map(str, s.shape))},{s.offset}" for s in theta.layout]
    layout_path.write_text("\n".join(lines) + "\n")
    data_path.write_bytes(theta.values.astype("<f8").tobytes())
    return layout_path, data_path


def load_checkpoint(stem: str | Path) -> ParamVector:
    stem = Path(stem)
    layout = []
    for line in stem.with_suffix(".layout").read_text().splitlines():
        if not line.strip():
            continue
        name, shape, offset = line.split(",")
        layout.append(Slot(name, tuple(int(d) for d in shape.split("x")), int(offset)))
    values = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8").astype(np.float64)
    return ParamVector(values, tuple(layout))
