"""Named architecture presets, all expressed in the declarative layer grammar."""
from __future__ import annotations

from typing import Optional

from .models import (BundleSpecs, DecoderSpec, InterpreterSpec, PredictorSpec,
                     TapConfig, layers_from_string)


def _bundle(predictor: str, input_shape, class_count, taps, psi: str,
            attribute_count: int, decoder: str) -> BundleSpecs:
    return BundleSpecs(
        PredictorSpec(layers_from_string(predictor), tuple(input_shape), class_count),
        TapConfig(tuple(taps)),
        InterpreterSpec(attribute_count, layers_from_string(psi)),
        DecoderSpec(layers_from_string(decoder)),
    )


def desk_shapes(attribute_count: int = 12) -> BundleSpecs:
    """Small two-conv net for the 28x28 synthetic shapes corpus (8 classes).

    Tap = output of the last pooling layer, flattened width 512.
    """
    j = attribute_count
    return _bundle(
        "conv:1:16:5:1,relu,maxpool:2,conv:16:32:5:1,relu,maxpool:2,"
        "flatten,fc:512:128,relu,fc:128:8",
        (1, 28, 28), 8, (6,),
        f"fc:512:64,relu,fc:64:{j},relu", j,
        f"fc:{j}:98,relu,reshape:2:7:7,trconv:2:8:2:2,relu,trconv:8:1:2:2",
    )


def lenet_gray(attribute_count: int = 25, class_count: int = 10) -> BundleSpecs:
    """LeNet-style predictor for 28x28 grayscale corpora (MNIST and similar).

    Two 5x5 conv+pool stages (20 then 50 maps) into 500-unit and C-unit
    fully-connected layers; the tap is the flattened final conv stage output
    (width 800), feeding an 80-unit attribute net.
    """
    j = attribute_count
    return _bundle(
        "conv:1:20:5:1,relu,maxpool:2,conv:20:50:5:1,relu,maxpool:2,"
        f"flatten,fc:800:500,relu,fc:500:{class_count}",
        (1, 28, 28), class_count, (6,),
        f"fc:800:80,relu,fc:80:{j},relu", j,
        f"fc:{j}:392,relu,reshape:8:7:7,trconv:8:16:2:2,relu,trconv:16:1:2:2",
    )


def deep_gray(attribute_count: int = 36, class_count: int = 10) -> BundleSpecs:
    """Deeper plain-conv preset with two taps (demonstrates multi-tap wiring).

    Taps after each pooling stage: widths 4608 and 1600, D = 6208.
    """
    j = attribute_count
    return _bundle(
        "conv:1:16:3:1,relu,conv:16:32:3:1,relu,maxpool:2,conv:32:64:3:1,relu,maxpool:2,"
        f"flatten,fc:1600:256,relu,fc:256:{class_count}",
        (1, 28, 28), class_count, (5, 8),
        f"fc:6208:128,relu,fc:128:{j},relu", j,
        f"fc:{j}:392,relu,reshape:8:7:7,trconv:8:16:2:2,relu,trconv:16:1:2:2",
    )


PRESETS = {
    "desk_shapes": desk_shapes,
    "lenet_gray": lenet_gray,
    "deep_gray": deep_gray,
}


def get_preset(name: str, attribute_count: Optional[int] = None) -> BundleSpecs:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    factory = PRESETS[name]
    return factory(attribute_count) if attribute_count is not None else factory()
