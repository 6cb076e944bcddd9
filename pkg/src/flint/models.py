"""Predictor with hidden-layer taps, attribute interpreter and decoder.

A small declarative layer grammar describes all three networks:

    conv:cin:cout:k:s     2-d convolution, no padding
    trconv:cin:cout:k:s   transposed convolution, no padding
    maxpool:w             max pooling, window = stride = w
    avgpool:a             adaptive average pooling to a x a
    relu                  rectifier
    flatten               (C,H,W) -> C*H*W
    fc:in:out             fully connected
    reshape:c:h:w         flat -> (c,h,w)

The predictor f maps images to class logits.  Selected hidden layers are
tapped; their flattened outputs concatenate into f_I(x) of width D.  The
attribute net Psi maps R^D to a non-negative dictionary Phi(x) in R^J
(its last layer must be a rectifier).  The linear head h turns Phi into
class probabilities via softmax(Phi W), W of shape J x C, no bias.  The
decoder d maps R^J back to image shape.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn


class ShapeError(ValueError):
    """Layer chains that do not compose, or data of the wrong shape."""


class TapIndexError(ValueError):
    """Tap index outside the hidden-layer range."""


LayerSpec = Tuple  # ("conv", cin, cout, k, s), ("relu",), ...

_LAYER_ARITY = {"conv": 4, "trconv": 4, "maxpool": 1, "avgpool": 1,
                "relu": 0, "flatten": 0, "fc": 2, "reshape": 3}


def layers_from_string(text: str) -> Tuple[LayerSpec, ...]:
    """Parse a comma-separated layer chain, e.g. "conv:1:20:5:1,relu,maxpool:2"."""
    layers = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            raise ValueError("empty layer entry")
        parts = piece.split(":")
        kind = parts[0]
        if kind not in _LAYER_ARITY:
            raise ValueError(f"unknown layer kind {kind!r}")
        if len(parts) - 1 != _LAYER_ARITY[kind]:
            raise ValueError(f"layer {piece!r}: expected {_LAYER_ARITY[kind]} arguments")
        args = []
        for a in parts[1:]:
            v = int(a)
            if v < 1:
                raise ValueError(f"layer {piece!r}: arguments must be positive")
            args.append(v)
        layers.append((kind, *args))
    return tuple(layers)


def layers_to_string(layers: Sequence[LayerSpec]) -> str:
    return ",".join(":".join([l[0]] + [str(a) for a in l[1:]]) for l in layers)


def _describe(layers: Sequence[LayerSpec], index: int) -> str:
    """Human-readable name of a 1-based layer position ('input' for 0)."""
    if index == 0:
        return "input"
    spec = layers[index - 1]
    return f"layer {index} ({':'.join(str(p) for p in spec)})"


# A propagated shape is ("chw", c, h, w) or ("flat", n).

def _shape_str(shape) -> str:
    if shape[0] == "chw":
        return f"(C={shape[1]}, H={shape[2]}, W={shape[3]})"
    return f"flat width {shape[1]}"


def propagate_shapes(layers: Sequence[LayerSpec], input_shape: Tuple[int, int, int]):
    """Walk the chain and return the shape after every layer.

    Raises ShapeError naming the offending layer pair on any mismatch.
    """
    shapes = []
    cur = ("chw", *input_shape) if len(input_shape) == 3 else ("flat", input_shape[0])
    for i, spec in enumerate(layers, start=1):
        kind = spec[0]

        def fail(reason: str):
            raise ShapeError(f"{_describe(layers, i - 1)} -> {_describe(layers, i)}: "
                             f"{reason} (incoming shape {_shape_str(cur)})")

        if kind in ("conv", "trconv", "maxpool", "avgpool") and cur[0] != "chw":
            fail(f"{kind} needs a (C,H,W) input")
        if kind == "conv":
            _, cin, cout, k, s = spec
            if cur[1] != cin:
                fail(f"conv expects {cin} input maps, got {cur[1]}")
            h, w = (cur[2] - k) // s + 1, (cur[3] - k) // s + 1
            if cur[2] < k or cur[3] < k or h < 1 or w < 1:
                fail(f"kernel {k} does not fit {cur[2]}x{cur[3]}")
            cur = ("chw", cout, h, w)
        elif kind == "trconv":
            _, cin, cout, k, s = spec
            if cur[1] != cin:
                fail(f"trconv expects {cin} input maps, got {cur[1]}")
            cur = ("chw", cout, (cur[2] - 1) * s + k, (cur[3] - 1) * s + k)
        elif kind == "maxpool":
            w_ = spec[1]
            if cur[2] < w_ or cur[3] < w_:
                fail(f"pool window {w_} exceeds {cur[2]}x{cur[3]}")
            cur = ("chw", cur[1], cur[2] // w_, cur[3] // w_)
        elif kind == "avgpool":
            cur = ("chw", cur[1], spec[1], spec[1])
        elif kind == "relu":
            pass
        elif kind == "flatten":
            if cur[0] != "chw":
                fail("flatten needs a (C,H,W) input")
            cur = ("flat", cur[1] * cur[2] * cur[3])
        elif kind == "fc":
            _, n_in, n_out = spec
            if cur[0] != "flat":
                fail("fc needs a flat input (insert flatten?)")
            if cur[1] != n_in:
                fail(f"fc expects width {n_in}, got {cur[1]}")
            cur = ("flat", n_out)
        elif kind == "reshape":
            _, c, h, w = spec
            if cur[0] != "flat":
                fail("reshape needs a flat input")
            if cur[1] != c * h * w:
                fail(f"reshape to ({c},{h},{w}) needs width {c * h * w}, got {cur[1]}")
            cur = ("chw", c, h, w)
        shapes.append(cur)
    return shapes


def flat_size(shape) -> int:
    return shape[1] if shape[0] == "flat" else shape[1] * shape[2] * shape[3]


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PredictorSpec:
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]     # (channels, height, width)
    class_count: int

    def validate(self):
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        shapes = propagate_shapes(self.layers, self.input_shape)
        if shapes[-1] != ("flat", self.class_count):
            raise ShapeError(f"predictor must end with {self.class_count} logits, "
                             f"got {_shape_str(shapes[-1])}")
        return shapes


@dataclass(frozen=True)
class TapConfig:
    tap_indices: Tuple[int, ...]                  # 1-based layer positions
    tap_dims: Optional[Tuple[int, ...]] = None    # filled by resolve()
    total_dim: Optional[int] = None

    def resolve(self, predictor: PredictorSpec) -> "TapConfig":
        """Compute flattened tap widths against a predictor spec."""
        n_layers = len(predictor.layers)
        if not self.tap_indices:
            raise TapIndexError("at least one tap index is required")
        if list(self.tap_indices) != sorted(set(self.tap_indices)):
            raise TapIndexError(f"tap indices must be strictly increasing, got {self.tap_indices}")
        for t in self.tap_indices:
            if t < 1 or t >= n_layers:
                raise TapIndexError(
                    f"tap index {t} invalid: hidden layers are 1..{n_layers - 1} "
                    f"(layer {n_layers} is the output layer)")
        shapes = predictor.validate()
        dims = tuple(flat_size(shapes[t - 1]) for t in self.tap_indices)
        return replace(self, tap_dims=dims, total_dim=sum(dims))


@dataclass(frozen=True)
class InterpreterSpec:
    attribute_count: int                 # J
    psi_layers: Tuple[LayerSpec, ...]    # flat D -> flat J, last layer relu

    def validate(self, total_dim: int):
        if self.attribute_count < 1:
            raise ValueError("attribute_count must be >= 1")
        if not self.psi_layers or self.psi_layers[-1] != ("relu",):
            raise ValueError("psi_layers must end with relu so attributes stay non-negative")
        shapes = propagate_shapes(self.psi_layers, (total_dim,))
        if shapes[-1] != ("flat", self.attribute_count):
            raise ShapeError(f"attribute net must output width {self.attribute_count}, "
                             f"got {_shape_str(shapes[-1])}")


@dataclass(frozen=True)
class DecoderSpec:
    layers: Tuple[LayerSpec, ...]        # flat J -> input_shape

    def validate(self, attribute_count: int, input_shape: Tuple[int, int, int]):
        shapes = propagate_shapes(self.layers, (attribute_count,))
        if shapes[-1] != ("chw", *input_shape):
            raise ShapeError(f"decoder must output {input_shape}, got {_shape_str(shapes[-1])}")


@dataclass(frozen=True)
class BundleSpecs:
    predictor: PredictorSpec
    taps: TapConfig
    interpreter: InterpreterSpec
    decoder: DecoderSpec


@dataclass
class ParameterStore:
    """Named float arrays for all four networks, with trainability flags."""
    arrays: "OrderedDict[str, np.ndarray]"
    trainable: Dict[str, bool]

    OWNERS = ("f", "psi", "head", "dec")

    def owner(self, name: str) -> str:
        prefix = name.split(".", 1)[0]
        if prefix not in self.OWNERS:
            raise ValueError(f"parameter {name!r} has no owner network")
        return prefix

    def digest(self, owners: Optional[Sequence[str]] = None) -> str:
        """sha256 over names, shapes, dtypes and raw bytes, in sorted name order."""
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            if owners is not None and self.owner(name) not in owners:
                continue
            arr = self.arrays[name]
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(str(arr.dtype).encode())
            h.update(arr.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Torch modules
# ---------------------------------------------------------------------------

class Reshape(nn.Module):
    def __init__(self, c, h, w):
        super().__init__()
        self.target = (c, h, w)

    def forward(self, x):
        return x.reshape(x.shape[0], *self.target)


def _make_layer(spec: LayerSpec) -> nn.Module:
    kind = spec[0]
    if kind == "conv":
        return nn.Conv2d(spec[1], spec[2], spec[3], stride=spec[4])
    if kind == "trconv":
        return nn.ConvTranspose2d(spec[1], spec[2], spec[3], stride=spec[4])
    if kind == "maxpool":
        return nn.MaxPool2d(spec[1])
    if kind == "avgpool":
        return nn.AdaptiveAvgPool2d(spec[1])
    if kind == "relu":
        return nn.ReLU()
    if kind == "flatten":
        return nn.Flatten()
    if kind == "fc":
        return nn.Linear(spec[1], spec[2])
    if kind == "reshape":
        return Reshape(spec[1], spec[2], spec[3])
    raise ValueError(f"unknown layer kind {kind!r}")


class ModelBundle(nn.Module):
    """Predictor, attribute net, linear head and decoder as one module.

    Construct through build_bundle for validated, seeded initialization.
    """

    def __init__(self, specs: BundleSpecs):
        super().__init__()
        taps = specs.taps if specs.taps.total_dim is not None \
            else specs.taps.resolve(specs.predictor)
        specs.interpreter.validate(taps.total_dim)
        specs.decoder.validate(specs.interpreter.attribute_count,
                               specs.predictor.input_shape)
        self.specs = replace(specs, taps=taps)
        self.input_shape = specs.predictor.input_shape
        self.class_count = specs.predictor.class_count
        self.attribute_count = specs.interpreter.attribute_count
        self.total_tap_dim = taps.total_dim

        self.f = nn.ModuleList(_make_layer(s) for s in specs.predictor.layers)
        self.psi = nn.ModuleList(_make_layer(s) for s in specs.interpreter.psi_layers)
        self.head = nn.Linear(self.attribute_count, self.class_count, bias=False)
        self.dec = nn.ModuleList(_make_layer(s) for s in specs.decoder.layers)
        self._tap_set = set(taps.tap_indices)

    # -- forward passes ----------------------------------------------------

    def forward_with_taps(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Run the predictor, returning (logits, concatenated flattened taps)."""
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected batch of shape (N, {', '.join(map(str, self.input_shape))}), "
                             f"got {tuple(x.shape)}")
        if x.shape[0] < 1:
            raise ShapeError("empty batch")
        taps = []
        out = x
        for i, layer in enumerate(self.f, start=1):
            out = layer(out)
            if i in self._tap_set:
                taps.append(out.flatten(start_dim=1))
        return out, torch.cat(taps, dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(x)[0]

    def attributes(self, f_i_x: torch.Tensor) -> torch.Tensor:
        """Attribute dictionary Phi from concatenated tap activations."""
        if f_i_x.ndim != 2 or f_i_x.shape[1] != self.total_tap_dim:
            raise ShapeError(f"expected tap width {self.total_tap_dim}, "
                             f"got {tuple(f_i_x.shape)}")
        out = f_i_x
        for layer in self.psi:
            out = layer(out)
        return out

    def interpreter_forward(self, phi: torch.Tensor) -> torch.Tensor:
        """Class probabilities of the interpreter: softmax(Phi W)."""
        if phi.ndim != 2 or phi.shape[1] != self.attribute_count:
            raise ShapeError(f"expected attribute width {self.attribute_count}, "
                             f"got {tuple(phi.shape)}")
        return torch.softmax(self.head(phi), dim=1)

    def decode(self, phi: torch.Tensor) -> torch.Tensor:
        if phi.ndim != 2 or phi.shape[1] != self.attribute_count:
            raise ShapeError(f"expected attribute width {self.attribute_count}, "
                             f"got {tuple(phi.shape)}")
        out = phi
        for layer in self.dec:
            out = layer(out)
        return out

    def attributes_from_input(self, x: torch.Tensor) -> torch.Tensor:
        return self.attributes(self.forward_with_taps(x)[1])

    # -- parameters --------------------------------------------------------

    def head_matrix(self) -> np.ndarray:
        """W as a J x C array: column c scores class c."""
        return self.head.weight.detach().cpu().numpy().T.copy()

    def parameter_store(self) -> ParameterStore:
        arrays = OrderedDict()
        trainable = {}
        for name, p in self.named_parameters():
            arrays[name] = p.detach().cpu().numpy().copy()
            trainable[name] = bool(p.requires_grad)
        return ParameterStore(arrays, trainable)

    def load_parameter_store(self, store: ParameterStore):
        params = dict(self.named_parameters())
        if set(params) != set(store.arrays):
            missing = set(params) ^ set(store.arrays)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        with torch.no_grad():
            for name, arr in store.arrays.items():
                p = params[name]
                if tuple(p.shape) != arr.shape:
                    raise ShapeError(f"parameter {name}: expected {tuple(p.shape)}, got {arr.shape}")
                p.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(p.dtype))
                p.requires_grad_(store.trainable[name])
        return self

    def checksum(self) -> str:
        return self.parameter_store().digest()

    def predictor_digest(self) -> str:
        return self.parameter_store().digest(owners=("f",))

    def freeze_predictor(self):
        for p in self.f.parameters():
            p.requires_grad_(False)
        return self

    def predictor_frozen(self) -> bool:
        return all(not p.requires_grad for p in self.f.parameters())

    def num_parameters(self) -> Dict[str, int]:
        counts = {"f": 0, "psi": 0, "head": 0, "dec": 0}
        for name, p in self.named_parameters():
            counts[name.split(".", 1)[0]] += p.numel()
        counts["total"] = sum(counts.values())
        return counts

    # -- numpy convenience -------------------------------------------------

    def predict(self, images: np.ndarray, batch_size: int = 256,
                with_reconstruction: bool = False) -> Dict[str, np.ndarray]:
        """Batched no-grad forward over a numpy image array.

        Returns f_logits, f_probs, phi, g_probs (and x_hat on request).
        """
        dtype = next(self.parameters()).dtype
        outs = {k: [] for k in ("f_logits", "f_probs", "phi", "g_probs", "x_hat")}
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = torch.as_tensor(images[start:start + batch_size], dtype=dtype)
                logits, f_i = self.forward_with_taps(x)
                phi = self.attributes(f_i)
                outs["f_logits"].append(logits.numpy())
                outs["f_probs"].append(torch.softmax(logits, dim=1).numpy())
                outs["phi"].append(phi.numpy())
                outs["g_probs"].append(self.interpreter_forward(phi).numpy())
                if with_reconstruction:
                    outs["x_hat"].append(self.decode(phi).numpy())
        result = {k: np.concatenate(v) for k, v in outs.items() if v}
        return result


def _init_parameters(bundle: ModelBundle, seed: int):
    """Fan-in-scaled uniform weights, zero biases, reproducible given seed."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in bundle.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / float(np.sqrt(fan_in))
                p.uniform_(-bound, bound, generator=gen)


def build_bundle(predictor_spec: PredictorSpec, tap_config: TapConfig,
                 interpreter_spec: InterpreterSpec, decoder_spec: DecoderSpec,
                 seed: int = 0, dtype: torch.dtype = torch.float32) -> ModelBundle:
    """Validate the four specs against each other and build an initialized bundle."""
    taps = tap_config.resolve(predictor_spec)
    bundle = ModelBundle(BundleSpecs(predictor_spec, taps, interpreter_spec, decoder_spec))
    bundle.to(dtype)
    _init_parameters(bundle, seed)
    return bundle
