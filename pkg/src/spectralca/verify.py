"""Module-by-module gradient verification: tape gradients vs central
finite differences, in 64-bit, over representative builds of every
computational layer up to the full published-size block."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import CrossAttention
from .block import CFG32, SpectralCABlock, SpectralCAConfig
from .classifier import ModelConfig, PatchClassifier
from .nn import BatchNorm, Conv2D, Conv3D, LayerNorm, Linear, cross_entropy, dropout, relu, silu, softmax
from .tensor import GradCheckReport, Parameter, Tensor, grad_check

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_STEP = 1e-4

# Quadratic probe losses are scaled down so that structurally dead
# directions (key-projection biases behind softmax, conv biases behind
# training-mode batch norm) keep their finite-difference rounding noise
# well under the relative-error floor.
_PROBE_SCALE = 0.01


def _quadratic(out: Tensor) -> Tensor:
    return T.scale(T.mean_all(T.mul(out, out)), _PROBE_SCALE)


def _check(f, params, rng, samples) -> GradCheckReport:
    return grad_check(f, params, h=GRADCHECK_STEP, tol=GRADCHECK_TOLERANCE,
                      rng=rng, samples_per_parameter=samples)


def _tensor_ops_report(seed: int, samples: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    a = Parameter(rng.standard_normal((2, 3, 4)), name="a")
    b = Parameter(rng.standard_normal((2, 3, 4)), name="b")
    w = Parameter(rng.standard_normal((2, 4, 4)), name="w")

    def f():
        s = T.add(a, T.scale(b, 0.5))
        m = T.mul(s, b)
        cat = T.concat_channels(m, T.expand(T.mean_axis(a, 1), 1, 2))
        prod = T.matmul(T.transpose(cat, (0, 2, 1)), T.reshape(w, (2, 4, 4)))
        return _quadratic(prod)

    return _check(f, [a, b, w], rng, samples)


def _nn_ops_report(seed: int, samples: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    conv2 = Conv2D(2, 3, rng, dtype=np.float64)
    bn2 = BatchNorm(3, dtype=np.float64)
    conv3 = Conv3D(2, 2, 3, rng, dtype=np.float64)
    ln = LayerNorm(3, dtype=np.float64)
    lin = Linear(3, 4, rng, dtype=np.float64)
    head = Linear(2, 3, rng, dtype=np.float64)
    x2 = Parameter(rng.standard_normal((2, 2, 4, 5)), name="x2")
    x3 = Parameter(rng.standard_normal((2, 2, 3, 3, 3)), name="x3")
    labels = np.array([0, 2])
    layers = [conv2, bn2, conv3, ln, lin, head]

    def f():
        a = silu(bn2(conv2(x2), training=True))
        tokens = ln(T.transpose(T.reshape(a, (2, 3, 20)), (0, 2, 1)))
        tokens = dropout(lin(tokens), 0.2, training=True, rng=np.random.default_rng(5))
        sm = softmax(tokens, axis=-1)
        b = relu(conv3(x3))
        pooled = T.mean_axis(T.mean_axis(T.mean_axis(b, 2), 2), 2)
        ce = cross_entropy(head(pooled), labels)
        return T.add(_quadratic(sm), T.scale(ce, _PROBE_SCALE))

    params = [x2, x3] + [p for layer in layers for p in layer.parameters()]
    return _check(f, params, rng, samples)


def _attention_report(seed: int, samples: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    ca = CrossAttention(8, 2, rng, dtype=np.float64)
    s = Parameter(rng.standard_normal((1, 4, 8)), name="spatial")
    p = Parameter(rng.standard_normal((1, 3, 8)), name="spectral")

    def f():
        a1, a2 = ca(s, p)
        return T.add(_quadratic(a1), _quadratic(a2))

    return _check(f, [s, p] + ca.parameters(), rng, samples)


def _block_report(config: SpectralCAConfig, input_shape, seed: int,
                  samples: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    block = SpectralCABlock(config, rng, dtype=np.float64)
    x = Parameter(rng.standard_normal(input_shape), name="x")

    def f():
        return _quadratic(block(x, training=True))

    return _check(f, [x] + block.parameters(), rng, samples)


def _classifier_report(seed: int, samples: int) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    config = ModelConfig(
        num_classes=3, patch_size=5, bands=8, depth=1, stem_channels=2,
        block1=SpectralCAConfig(channels=2, dim=4, heads=2, dropout_rate=0.0),
    )
    model = PatchClassifier(config, rng, dtype=np.float64)
    x = Parameter(rng.standard_normal((2, 1, 5, 5, 8)), name="x")
    labels = np.array([0, 2])

    def f():
        return T.scale(cross_entropy(model(x, training=True), labels), _PROBE_SCALE)

    return _check(f, [x] + model.parameters(), rng, samples)


TINY_BLOCK_CONFIG = SpectralCAConfig(channels=2, dim=4, heads=2, dropout_rate=0.0)
SPOT_CONFIG = SpectralCAConfig(channels=CFG32.channels, dim=CFG32.dim,
                               heads=CFG32.heads, dropout_rate=0.0)


def gradcheck_suite(seed: int = 0, samples_per_parameter: int = 200,
                    include_full_size_spot: bool = True) -> dict[str, GradCheckReport]:
    """Run every module's gradient check; keys are module names, values
    carry per-parameter worst relative errors."""
    suite = {
        "tensor_ops": _tensor_ops_report(seed, samples_per_parameter),
        "nn_ops": _nn_ops_report(seed + 1, samples_per_parameter),
        "attention": _attention_report(seed + 2, samples_per_parameter),
        "block_tiny": _block_report(TINY_BLOCK_CONFIG, (1, 2, 3, 3, 3), seed + 3,
                                    samples_per_parameter),
        "classifier_tiny": _classifier_report(seed + 4, samples_per_parameter),
    }
    if include_full_size_spot:
        suite["block_full_size_spot"] = _block_report(
            SPOT_CONFIG, (1, CFG32.channels, 3, 3, 4), seed + 5, samples_per_parameter
        )
    return suite
