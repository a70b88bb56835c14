"""Differentiable layers over :mod:`stochformer.tensor`.

Every stochastic layer takes an explicit ``mode`` ("train" or "infer") and an
:class:`~stochformer.rng.RngStream`. The model hands each layer a stream forked
by name from the caller's stream, so replaying a forward pass with the same
stream reproduces every dropout mask and depth draw. LWTA winner masks are
data-dependent; :func:`frozen_lwta_masks` pins them for finite-difference checks.
"""

from __future__ import annotations

import contextlib
import contextvars
import math

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, InputError
from .rng import RngStream
from .tensor import Tensor, gelu, matmul, softmax_lastdim

TRAIN = "train"
INFER = "infer"


def check_mode(mode: str) -> str:
    if mode not in (TRAIN, INFER):
        raise ContractError(f"mode must be 'train' or 'infer', got {mode!r}")
    return mode


class Module:
    """Parameter container with dotted names (``block0.attn.w_q``)."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = None
        object.__setattr__(self, name, np.asarray(value, dtype=np.float64))

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update((name, b.copy()) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict):
        expected = {name: p.shape for name, p in self.named_parameters()}
        expected.update((name, b.shape) for name, b in self.named_buffers())
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        if missing or extra:
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, shape in expected.items():
            if tuple(state[name].shape) != tuple(shape):
                raise ContractError(
                    f"parameter {name}: checkpoint shape {state[name].shape} != model shape {shape}")
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=np.float64)
        for name, _ in self.named_buffers():
            owner, attr = self._resolve(name)
            object.__setattr__(owner, attr, np.array(state[name], dtype=np.float64))

    def _resolve(self, dotted: str):
        parts = dotted.split(".")
        owner = self
        for part in parts[:-1]:
            owner = owner._modules[part]
        return owner, parts[-1]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def glorot(rng: RngStream, fan_in: int, fan_out: int, shape) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor((2.0 * rng.uniform(shape) - 1.0) * limit, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: RngStream, bias: bool = True):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = glorot(rng.fork("weight"), n_in, n_out, (n_in, n_out))
        if bias:
            self.bias = zeros((n_out,))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


# -- LWTA -----------------------------------------------------------------

def lwta_mask(pre: np.ndarray, block: int) -> np.ndarray:
    """1.0 where a unit is the (first) maximum of its block and positive, else 0.0."""
    pre = np.asarray(pre)
    k = pre.shape[-1]
    if block < 1 or k % block:
        raise ConfigError(f"LWTA width {k} is not divisible by block size {block}")
    grouped = pre.reshape(pre.shape[:-1] + (k // block, block))
    winner = grouped.argmax(axis=-1)
    mask = np.zeros_like(grouped)
    np.put_along_axis(mask, winner[..., None], 1.0, axis=-1)
    mask *= grouped > 0
    return mask.reshape(pre.shape)


class MaskTape:
    """Records LWTA masks on the first pass and replays them after :meth:`rewind`."""

    def __init__(self):
        self.masks = []
        self.cursor = None

    def rewind(self):
        self.cursor = 0 if self.masks else None

    def next(self, pre: np.ndarray, block: int) -> np.ndarray:
        if self.cursor is None:
            mask = lwta_mask(pre, block)
            self.masks.append(mask)
            return mask
        mask = self.masks[self.cursor]
        if mask.shape != pre.shape:
            raise ContractError("frozen LWTA mask does not match the replayed forward pass")
        self.cursor += 1
        return mask


_mask_tape = contextvars.ContextVar("lwta_mask_tape", default=None)


@contextlib.contextmanager
def frozen_lwta_masks():
    tape = MaskTape()
    token = _mask_tape.set(tape)
    try:
        yield tape
    finally:
        _mask_tape.reset(token)


def lwta_activation(pre: Tensor, block: int) -> Tensor:
    """Keep each block's positive maximum, zero everything else; gradient only reaches winners."""
    tape = _mask_tape.get()
    mask = lwta_mask(pre.data, block) if tape is None else tape.next(pre.data, block)
    return pre * Tensor(mask)


class LwtaLayer(Module):
    """Linear map without bias followed by block-wise winner-take-all."""

    def __init__(self, n_in: int, n_out: int, block: int, rng: RngStream):
        super().__init__()
        if block < 1 or n_out % block:
            raise ConfigError(f"LWTA width {n_out} is not divisible by block size {block}")
        self.block = block
        self.weight = glorot(rng.fork("weight"), n_in, n_out, (n_in, n_out))

    def forward(self, x: Tensor, mode: str = INFER) -> Tensor:
        return lwta_activation(matmul(x, self.weight), self.block)


# -- locally connected ----------------------------------------------------

class LocallyConnected1d(Module):
    """Like a 1-D convolution but every output position owns its filter bank."""

    def __init__(self, length: int, channels: int, kernel: int, stride: int, filters: int,
                 rng: RngStream):
        super().__init__()
        if kernel < 1 or stride < 1 or length < kernel or (length - kernel) % stride:
            raise ConfigError(
                f"locally connected geometry length={length}, kernel={kernel}, stride={stride} "
                "does not tile the input")
        self.length, self.channels = length, channels
        self.kernel, self.stride, self.filters = kernel, stride, filters
        self.positions = (length - kernel) // stride + 1
        fan_in = kernel * channels
        self.weight = glorot(rng.fork("weight"), fan_in, filters, (self.positions, fan_in, filters))
        self.bias = zeros((self.positions, filters))

    def patch_indices(self) -> np.ndarray:
        return np.arange(self.positions)[:, None] * self.stride + np.arange(self.kernel)[None, :]

    def forward(self, x: Tensor, mode: str = INFER) -> Tensor:
        if x.ndim != 3 or x.shape[1:] != (self.length, self.channels):
            raise DimensionError(
                f"locally connected layer expects (batch, {self.length}, {self.channels}), got {x.shape}")
        batch = x.shape[0]
        patches = x.take(self.patch_indices(), axis=1)  # B x P x k x C
        patches = patches.reshape(batch, self.positions, self.kernel * self.channels)
        out = matmul(patches.transpose(1, 0, 2), self.weight)  # P x B x F
        return out.transpose(1, 0, 2) + self.bias


# -- dropout --------------------------------------------------------------

def dropout(x: Tensor, rate: float, mode: str, rng: RngStream | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1 / (1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if check_mode(mode) == INFER or rate == 0.0:
        return x
    keep = rng.uniform(x.shape) >= rate
    return x * Tensor(keep / (1.0 - rate))


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: Tensor, mode: str, rng: RngStream | None) -> Tensor:
        return dropout(x, self.rate, mode, rng)


class GELU(Module):
    def forward(self, x: Tensor, mode: str = INFER) -> Tensor:
        return gelu(x)


# -- stochastic depth -----------------------------------------------------

class StochasticDepth(Module):
    """Residual gate: ``x + b * branch(x)`` with ``b ~ Bernoulli(p)`` in training, ``x + p * branch(x)`` at inference."""

    def __init__(self, survival_p: float):
        super().__init__()
        if not 0.0 < survival_p <= 1.0:
            raise ConfigError(f"survival probability must lie in (0, 1], got {survival_p}")
        self.survival_p = survival_p

    def draw(self, rng: RngStream) -> bool:
        if self.survival_p == 1.0:
            return True
        return bool(rng.uniform() < self.survival_p)

    def forward(self, x: Tensor, branch, mode: str, rng: RngStream | None) -> Tensor:
        if check_mode(mode) == TRAIN:
            if not self.draw(rng):
                return x
            return x + _checked(branch(x), x)
        out = _checked(branch(x), x)
        return x + out if self.survival_p == 1.0 else x + out * self.survival_p


def _checked(out: Tensor, x: Tensor) -> Tensor:
    if out.shape != x.shape:
        raise ContractError(f"residual branch changed shape {x.shape} -> {out.shape}")
    return out


# -- normalisation --------------------------------------------------------

class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = ones((features,))
        self.beta = zeros((features,))

    def forward(self, x: Tensor, mode: str = INFER) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True).expand(x.shape)
        centred = x - mu
        var = (centred * centred).mean(axis=-1, keepdims=True).expand(x.shape)
        return centred / (var + self.eps).sqrt() * self.gamma + self.beta


class BatchNorm(Module):
    """Per-feature normalisation over every leading axis (batch, or batch x sequence)."""

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.features, self.momentum, self.eps = features, momentum, eps
        self.gamma = ones((features,))
        self.beta = zeros((features,))
        self.register_buffer("running_mean", np.zeros(features))
        self.register_buffer("running_var", np.ones(features))

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.shape[-1] != self.features:
            raise DimensionError(f"batchnorm expects {self.features} features, got shape {x.shape}")
        shape = x.shape
        flat = x.reshape(-1, self.features)
        if check_mode(mode) == TRAIN:
            if flat.shape[0] < 2:
                raise ContractError("batchnorm in training mode needs at least 2 rows")
            mu = flat.mean(axis=0)
            centred = flat - mu
            var = (centred * centred).mean(axis=0)
            y = centred / (var + self.eps).sqrt()
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mu.data
            self.running_var = (1.0 - m) * self.running_var + m * var.data
        else:
            y = (flat - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return (y * self.gamma + self.beta).reshape(shape)


# -- attention ------------------------------------------------------------

def baseline_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Unscaled ``softmax(Q K^T) V``."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes disagree: Q{q.shape} K{k.shape} V{v.shape}")
    return matmul(softmax_lastdim(matmul(q, k.swap_last())), v)


class SrAttention(Module):
    """Multi-head attention whose keys and values come from a sequence-reduced input.

    With reduction ratio ``Ri > 1`` every ``Ri`` consecutive tokens are
    concatenated, projected back to ``d_model`` and layer-normalised before the
    key/value projections. ``Ri == 1`` skips the reduction.
    """

    def __init__(self, d_model: int, n_heads: int, reduction: int, rng: RngStream):
        super().__init__()
        if n_heads < 1 or d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        if reduction < 1:
            raise ConfigError(f"reduction ratio must be >= 1, got {reduction}")
        self.d_model, self.n_heads, self.reduction = d_model, n_heads, reduction
        self.d_head = d_model // n_heads
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w_{name}", glorot(rng.fork(f"w_{name}"), d_model, d_model, (d_model, d_model)))
            setattr(self, f"b_{name}", zeros((d_model,)))
        if reduction > 1:
            self.w_sr = glorot(rng.fork("w_sr"), reduction * d_model, d_model,
                               (reduction * d_model, d_model))
            self.b_sr = zeros((d_model,))
            self.norm = LayerNorm(d_model)

    def reduce(self, x: Tensor) -> Tensor:
        if self.reduction == 1:
            return x
        b, n, d = x.shape
        merged = x.reshape(b, n // self.reduction, self.reduction * d)
        return self.norm.forward(matmul(merged, self.w_sr) + self.b_sr)

    def _heads(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return t.reshape(b, n, self.n_heads, self.d_head).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, mode: str = INFER, return_attention: bool = False):
        if x.ndim != 3 or x.shape[2] != self.d_model:
            raise DimensionError(f"attention expects (batch, seq, {self.d_model}), got {x.shape}")
        b, n, d = x.shape
        if n % self.reduction:
            raise InputError(f"sequence length {n} is not divisible by reduction ratio {self.reduction}")
        reduced = self.reduce(x)
        q = self._heads(matmul(x, self.w_q) + self.b_q)
        k = self._heads(matmul(reduced, self.w_k) + self.b_k)
        v = self._heads(matmul(reduced, self.w_v) + self.b_v)
        logits = matmul(q, k.swap_last()) * (1.0 / math.sqrt(self.d_head))
        weights = softmax_lastdim(logits)  # B x H x N x N/Ri
        mixed = matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        out = matmul(mixed, self.w_o) + self.b_o
        return (out, weights.data) if return_attention else out
