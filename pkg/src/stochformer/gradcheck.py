"""Finite-difference verification of every layer type and the full model.

Each check draws fresh seeded inputs and parameters per trial, evaluates a
random weighted sum of the layer output (a plain sum is degenerate after
normalisation), and compares taped gradients with central differences. Dropout
masks and depth draws are frozen by replaying the same RngStream; LWTA winner
masks are frozen with :func:`~stochformer.layers.frozen_lwta_masks`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .layers import (INFER, TRAIN, BatchNorm, Dense, LayerNorm, LocallyConnected1d,
                     LwtaLayer, SrAttention, StochasticDepth, dropout, frozen_lwta_masks)
from .model import ModelConfig, StochasticTransformer
from .rng import RngStream
from .tensor import Tensor, finite_difference_check, gelu, matmul, softmax_lastdim

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3
EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    trials: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<22} trials={self.trials:<4} max_rel_err={self.max_error:.3e}"
                f"  tol={self.tolerance:.0e}  {self.seconds:.1f}s")


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def check_function(forward, inputs: dict, rng: RngStream, max_coords: int | None = None) -> float:
    """Worst relative error of ``forward(**inputs)`` over every tensor in ``inputs``.

    ``forward`` must be deterministic; it is called under a frozen LWTA mask
    tape that is rewound before every evaluation.
    """
    with frozen_lwta_masks() as tape:
        tape.rewind()
        probe = forward(**inputs)
        weights = rng.fork("weights").normal(probe.shape)

        def scalar(_x):
            tape.rewind()
            return _weighted(forward(**inputs), weights)

        worst = 0.0
        for name, t in inputs.items():
            coords = None
            if max_coords is not None and t.size > max_coords:
                coords = rng.fork(f"coords/{name}").permutation(t.size)[:max_coords]
            worst = max(worst, finite_difference_check(scalar, t, EPS, coords))
    return worst


def _params(module) -> dict:
    return {name.replace(".", "_"): p for name, p in module.named_parameters()}


def _randn(rng: RngStream, label: str, shape) -> Tensor:
    return Tensor(rng.fork(label).normal(shape), requires_grad=True)


# -- individual checks --------------------------------------------------------

def trial_dense(rng):
    layer = Dense(5, 4, rng.fork("init"))
    layer.bias.data[:] = rng.fork("bias").normal(4)
    x = _randn(rng, "x", (3, 5))
    return check_function(lambda x, **_: layer.forward(x), {"x": x, **_params(layer)}, rng)


def trial_matmul_softmax(rng):
    a = _randn(rng, "a", (2, 3, 4))
    b = _randn(rng, "b", (4, 5))
    return check_function(lambda a, b: softmax_lastdim(matmul(a, b)), {"a": a, "b": b}, rng)


def trial_lwta(rng):
    layer = LwtaLayer(6, 8, 2, rng.fork("init"))
    x = _randn(rng, "x", (4, 6))
    return check_function(lambda x, **_: layer.forward(x), {"x": x, **_params(layer)}, rng)


def trial_locally_connected(rng):
    layer = LocallyConnected1d(6, 3, 2, 2, 4, rng.fork("init"))
    layer.bias.data[:] = rng.fork("bias").normal(layer.bias.shape)
    x = _randn(rng, "x", (2, 6, 3))
    return check_function(lambda x, **_: layer.forward(x), {"x": x, **_params(layer)}, rng)


def trial_dropout(rng):
    x = _randn(rng, "x", (4, 7))
    stream = rng.fork("mask")
    return check_function(lambda x: dropout(x, 0.3, TRAIN, stream.fork("d")), {"x": x}, rng)


def trial_gelu(rng):
    x = Tensor(3.0 * rng.fork("x").normal((5, 6)), requires_grad=True)
    return check_function(lambda x: gelu(x), {"x": x}, rng)


def trial_stochastic_depth(rng):
    branch = Dense(4, 4, rng.fork("branch"))
    node = StochasticDepth(0.5)
    x = _randn(rng, "x", (3, 4))
    stream = rng.fork("draw")
    worst = 0.0
    for mode in (TRAIN, INFER):
        def fwd(x, _mode=mode, **_):
            return node.forward(x, lambda h: gelu(branch.forward(h)), _mode, stream.fork("sd"))
        worst = max(worst, check_function(fwd, {"x": x, **_params(branch)}, rng))
    return worst


def trial_sr_attention(rng):
    worst = 0.0
    for heads, ratio in ((1, 1), (2, 2)):
        layer = SrAttention(4, heads, ratio, rng.fork(f"init{heads}"))
        x = _randn(rng, f"x{heads}", (2, 4, 4))
        worst = max(worst, check_function(lambda x, **_: layer.forward(x),
                                          {"x": x, **_params(layer)}, rng.fork(f"c{heads}")))
    return worst


def trial_batchnorm(rng):
    layer = BatchNorm(3)
    layer.gamma.data[:] = 1.0 + 0.5 * rng.fork("g").normal(3)
    layer.beta.data[:] = rng.fork("b").normal(3)
    x = _randn(rng, "x", (5, 3))
    worst = check_function(lambda x, **_: layer.forward(x, TRAIN), {"x": x, **_params(layer)}, rng)
    layer.running_var = 0.5 + rng.fork("rv").uniform(3)
    return max(worst, check_function(lambda x, **_: layer.forward(x, INFER),
                                     {"x": x, **_params(layer)}, rng))


def trial_layernorm(rng):
    layer = LayerNorm(5)
    layer.gamma.data[:] = 1.0 + 0.5 * rng.fork("g").normal(5)
    x = _randn(rng, "x", (3, 5))
    return check_function(lambda x, **_: layer.forward(x), {"x": x, **_params(layer)}, rng)


GRADCHECK_MODEL = dict(patch_h=2, patch_w=3, n_coeffs=6, max_frames=8, d_model=8, n_heads=2,
                       n_blocks=3, reduction=2, ffn_hidden=(16,), lcn_kernel=2, lcn_stride=2,
                       lcn_filters=4, head_lwta=4, head_dense=(4, 1), survival_p=0.5,
                       dropout_rate=0.2)


def trial_full_model(rng, coords: int = 12):
    seed = int(rng.fork("seed").integers(0, 2 ** 31))
    model = StochasticTransformer(ModelConfig(seed=seed, **GRADCHECK_MODEL))
    batch = 3.0 * rng.fork("mfcc").normal((2, 7, 6))
    stream = rng.fork("masks")
    params = dict(model.named_parameters())
    # sample a handful of tensors per trial, a few coordinates each
    names = sorted(params)
    chosen = [names[i] for i in rng.fork("pick").permutation(len(names))[:coords]]
    inputs = {n.replace(".", "_"): params[n] for n in chosen}
    return check_function(lambda **_: model.forward(batch, TRAIN, stream), inputs, rng, max_coords=3)


LAYER_CHECKS = [
    ("dense", trial_dense),
    ("matmul+softmax", trial_matmul_softmax),
    ("lwta", trial_lwta),
    ("locally_connected", trial_locally_connected),
    ("dropout(frozen)", trial_dropout),
    ("gelu", trial_gelu),
    ("stochastic_depth", trial_stochastic_depth),
    ("sr_attention", trial_sr_attention),
    ("batchnorm", trial_batchnorm),
    ("layernorm", trial_layernorm),
]


def run_gradcheck(trials: int = 100, seed: int = 0, progress=None) -> list[CheckResult]:
    root = RngStream(seed).fork("gradcheck")
    checks = [(name, fn, LAYER_TOL) for name, fn in LAYER_CHECKS]
    checks.append(("full_model", trial_full_model, MODEL_TOL))
    results = []
    for name, fn, tol in checks:
        started = time.perf_counter()
        worst = max(fn(root.fork(name).fork(t)) for t in range(trials))
        res = CheckResult(name, trials, worst, tol, time.perf_counter() - started)
        results.append(res)
        if progress:
            progress(res)
    return results
