"""Heterogeneous model zoo, the shared small extractor and feature mixing.

Every zoo model is a dense extractor producing a ``d``-wide representation
followed by a single linear header ``d -> C``. The five variants keep the
width ratios of a classic 5-model heterogeneity benchmark (first hidden width
4x, 3x, 2x, 1.6x and 1x the representation width, the second variant carrying
one extra ``d -> d`` layer), so parameter counts are strictly decreasing from
variant 0 to variant 4. The homogeneous extractor uses a hidden width of
``d / 2`` and is therefore smaller than any zoo extractor.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import DenseLayer, Parameter, Tape, as_tensor, backward, forward

NUM_VARIANTS = 5
# (first hidden width / d, number of extra d->d layers)
ZOO_LAYOUT = ((4.0, 0), (3.0, 1), (2.0, 0), (1.6, 0), (1.0, 0))
HOMO_HIDDEN_RATIO = 0.5
CHECKPOINT_VERSION = 1


def param_count(model) -> int:
    """Number of scalar parameters in a layer, stack, or model."""
    if isinstance(model, DenseLayer):
        return model.weights.size + model.bias.size
    if isinstance(model, Parameter):
        return model.size
    if hasattr(model, "parameters"):
        return sum(p.size for p in model.parameters())
    return sum(param_count(layer) for layer in model)


def _layers_params(layers: Sequence[DenseLayer]) -> list[Parameter]:
    return [p for layer in layers for p in layer.parameters()]


@dataclass
class SplitModel:
    extractor: list[DenseLayer]
    header: DenseLayer
    variant: int = -1

    def __post_init__(self):
        if not self.extractor:
            raise ValueError("extractor needs at least one layer")
        if self.header.activation != "identity":
            raise ValueError("header must produce logits (identity activation)")
        if self.extractor[-1].out_dim != self.header.in_dim:
            raise ValueError(
                f"extractor width {self.extractor[-1].out_dim} != header input {self.header.in_dim}"
            )

    @property
    def d(self) -> int:
        return self.header.in_dim

    @property
    def num_classes(self) -> int:
        return self.header.out_dim

    def extractor_params(self) -> list[Parameter]:
        return _layers_params(self.extractor)

    def header_params(self) -> list[Parameter]:
        return self.header.parameters()

    def parameters(self) -> list[Parameter]:
        return self.extractor_params() + self.header_params()

    def layers(self) -> list[DenseLayer]:
        return [*self.extractor, self.header]

    def copy(self) -> "SplitModel":
        return SplitModel([layer.copy() for layer in self.extractor], self.header.copy(), self.variant)

    def logits(self, x) -> np.ndarray:
        return forward(self.layers(), x)[0]


@dataclass
class HomoExtractor:
    layers: list[DenseLayer]

    @property
    def d(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[Parameter]:
        return _layers_params(self.layers)

    def copy(self) -> "HomoExtractor":
        return HomoExtractor([layer.copy() for layer in self.layers])

    def __call__(self, x) -> np.ndarray:
        return forward(self.layers, x)[0]


@dataclass
class MixVector:
    alpha: Parameter
    lr: float

    @classmethod
    def ones(cls, d: int, lr: float) -> "MixVector":
        return cls(Parameter(np.ones(d), name="alpha"), lr)

    @property
    def d(self) -> int:
        return self.alpha.shape[0]

    def mean(self) -> float:
        return float(self.alpha.value.mean())

    def copy(self) -> "MixVector":
        return MixVector(self.alpha.copy(), self.lr)


def zoo_widths(variant_id: int, d: int) -> list[int]:
    """Output widths of the extractor layers of a zoo variant."""
    if not 0 <= variant_id < NUM_VARIANTS:
        raise ValueError(f"variant_id must be in [0, {NUM_VARIANTS}), got {variant_id}")
    ratio, extra = ZOO_LAYOUT[variant_id]
    hidden = max(1, int(round(ratio * d)))
    return [hidden] + [d] * extra + [d]


def homo_widths(d: int) -> list[int]:
    return [max(1, int(round(HOMO_HIDDEN_RATIO * d))), d]


def _stack_count(input_dim: int, widths: Sequence[int]) -> int:
    dims = [input_dim, *widths]
    return sum(a * b + b for a, b in zip(dims, dims[1:]))


def _stack(input_dim: int, widths: Sequence[int], rng: np.random.Generator) -> list[DenseLayer]:
    layers, prev = [], input_dim
    for w in widths:
        layers.append(DenseLayer.init(prev, w, rng, "relu"))
        prev = w
    return layers


def build_zoo_model(variant_id: int, input_dim: int, d: int, num_classes: int,
                    seed) -> SplitModel:
    widths = zoo_widths(variant_id, d)
    if input_dim < 1 or d < 1 or num_classes < 2:
        raise ValueError("input_dim and d must be positive and num_classes >= 2")
    rng = np.random.default_rng(seed)
    extractor = _stack(input_dim, widths, rng)
    header = DenseLayer.init(d, num_classes, rng, "identity")
    return SplitModel(extractor, header, variant_id)


def build_homo_extractor(input_dim: int, d: int, seed, zoo_d: int | None = None) -> HomoExtractor:
    """Build the shared small extractor; ``zoo_d`` enforces the width-matching rule."""
    if zoo_d is not None and zoo_d != d:
        raise ValueError(f"homogeneous extractor width {d} must equal zoo representation width {zoo_d}")
    if input_dim < 1 or d < 1:
        raise ValueError("input_dim and d must be positive")
    homo = HomoExtractor(_stack(input_dim, homo_widths(d), np.random.default_rng(seed)))
    smallest = min(_stack_count(input_dim, zoo_widths(v, d)) for v in range(NUM_VARIANTS))
    if param_count(homo) >= smallest:
        raise ValueError(
            f"homogeneous extractor ({param_count(homo)} params) is not smaller than every zoo extractor"
        )
    return homo


def mix_features(rg, rf, alpha) -> np.ndarray:
    """Dimension-wise blend: global features weighted by 1-alpha, local by alpha."""
    rg = as_tensor(rg, "global representation")
    rf = as_tensor(rf, "local representation")
    alpha = as_tensor(alpha, "alpha")
    if rg.shape != rf.shape:
        raise ValueError(f"representation shapes differ: {rg.shape} vs {rf.shape}")
    if alpha.shape != rg.shape[-1:]:
        raise ValueError(f"alpha shape {alpha.shape} does not match width {rg.shape[-1]}")
    return rg * (1.0 - alpha) + rf * alpha


@dataclass
class MixedTape:
    homo_tape: Tape
    extractor_tape: Tape
    header_tape: Tape
    rg: np.ndarray
    rf: np.ndarray
    alpha: Parameter = field(repr=False)


def mixed_forward(x, homo: HomoExtractor, model: SplitModel,
                  alpha: MixVector | Parameter | np.ndarray) -> tuple[np.ndarray, MixedTape]:
    """Logits of the mixed model: header(mix(homo(x), extractor(x), alpha))."""
    if homo.d != model.d:
        raise ValueError(f"homogeneous width {homo.d} != model representation width {model.d}")
    if isinstance(alpha, MixVector):
        alpha = alpha.alpha
    elif not isinstance(alpha, Parameter):
        alpha = Parameter(alpha, frozen=True, name="alpha")
    rg, homo_tape = forward(homo.layers, x)
    rf, ext_tape = forward(model.extractor, x)
    mixed = mix_features(rg, rf, alpha.value)
    logits, head_tape = forward([model.header], mixed)
    return logits, MixedTape(homo_tape, ext_tape, head_tape, rg, rf, alpha)


def mixed_backward(tape: MixedTape, dlogits) -> None:
    dmix = backward(tape.header_tape, dlogits)
    a = tape.alpha.value
    tape.alpha.accumulate((dmix * (tape.rf - tape.rg)).sum(axis=0))
    if any(not p.frozen for p in _layers_params(tape.extractor_tape.layers)):
        backward(tape.extractor_tape, dmix * a)
    if any(not p.frozen for p in _layers_params(tape.homo_tape.layers)):
        backward(tape.homo_tape, dmix * (1.0 - a))


# -- checkpoints -------------------------------------------------------------

def _layer_meta(layer: DenseLayer) -> dict:
    return {"in_dim": layer.in_dim, "out_dim": layer.out_dim, "activation": layer.activation}


def save_checkpoint(path, **parts) -> None:
    """Write models to a versioned ``.npz``-style zip: JSON manifest + raw arrays.

    ``parts`` maps names to :class:`SplitModel`, :class:`HomoExtractor`,
    :class:`MixVector` or a list of :class:`DenseLayer`.
    """
    manifest = {"version": CHECKPOINT_VERSION, "parts": {}}
    arrays: dict[str, np.ndarray] = {}

    def put_layers(prefix, layers):
        for j, layer in enumerate(layers):
            arrays[f"{prefix}.{j}.weights"] = layer.weights.value
            arrays[f"{prefix}.{j}.bias"] = layer.bias.value
        return [_layer_meta(layer) for layer in layers]

    for name, part in parts.items():
        if isinstance(part, SplitModel):
            manifest["parts"][name] = {
                "kind": "split", "variant": part.variant,
                "extractor": put_layers(f"{name}.extractor", part.extractor),
                "header": put_layers(f"{name}.header", [part.header]),
            }
        elif isinstance(part, HomoExtractor):
            manifest["parts"][name] = {"kind": "homo", "layers": put_layers(f"{name}.layers", part.layers)}
        elif isinstance(part, MixVector):
            arrays[f"{name}.alpha"] = part.alpha.value
            manifest["parts"][name] = {"kind": "mix", "d": part.d, "lr": part.lr}
        else:
            manifest["parts"][name] = {"kind": "stack", "layers": put_layers(f"{name}.layers", list(part))}

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True))
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[key], dtype="<f8"), allow_pickle=False)
            zi = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(zi, buf.getvalue())


def load_checkpoint(path: str | Path) -> dict:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")

        def arr(key):
            return np.load(io.BytesIO(zf.read(f"{key}.npy")), allow_pickle=False)

        def get_layers(prefix, metas):
            layers = []
            for j, meta in enumerate(metas):
                w, b = arr(f"{prefix}.{j}.weights"), arr(f"{prefix}.{j}.bias")
                if w.shape != (meta["out_dim"], meta["in_dim"]):
                    raise ValueError(f"{prefix}.{j}: stored shape {w.shape} disagrees with manifest")
                layers.append(DenseLayer(Parameter(w, name="weights"), Parameter(b, name="bias"),
                                         meta["activation"]))
            return layers

        out = {}
        for name, meta in manifest["parts"].items():
            kind = meta["kind"]
            if kind == "split":
                out[name] = SplitModel(get_layers(f"{name}.extractor", meta["extractor"]),
                                       get_layers(f"{name}.header", meta["header"])[0], meta["variant"])
            elif kind == "homo":
                out[name] = HomoExtractor(get_layers(f"{name}.layers", meta["layers"]))
            elif kind == "mix":
                out[name] = MixVector(Parameter(arr(f"{name}.alpha"), name="alpha"), meta["lr"])
            elif kind == "stack":
                out[name] = get_layers(f"{name}.layers", meta["layers"])
            else:
                raise ValueError(f"unknown checkpoint part kind {kind!r}")
        return out
