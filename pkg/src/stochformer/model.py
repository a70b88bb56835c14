"""The stochastic transformer regressor and its checkpoint format."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgtext
from .dsp import FeatureConfig, MfccMatrix
from .errors import ConfigError, ContractError, DataLoadError, InputError
from .layers import (INFER, TRAIN, BatchNorm, Dense, Dropout, LocallyConnected1d,
                     LwtaLayer, Module, SrAttention, StochasticDepth, check_mode)
from .rng import RngStream
from .serialization import read_named, write_named
from .tensor import Tensor, gelu


@dataclass(frozen=True)
class ModelConfig:
    patch_h: int = 4
    patch_w: int = 13
    n_coeffs: int = 13
    max_frames: int = 128
    d_model: int = 64
    n_heads: int = 8
    n_blocks: int = 3
    lwta_block: int = 2
    dropout_rate: float = 0.2
    survival_p: float = 0.2
    reduction: int = 2
    ffn_hidden: tuple[int, ...] = (128,)
    lcn_kernel: int = 2
    lcn_stride: int = 2
    lcn_filters: int = 32
    head_lwta: int = 64
    head_dense: tuple[int, ...] = (64, 32, 1)
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for the sinusoidal position encoding")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if not 0.0 < self.survival_p <= 1.0:
            raise ConfigError(f"survival_p must lie in (0, 1], got {self.survival_p}")
        if self.d_model % self.lwta_block or self.head_lwta % self.lwta_block:
            raise ConfigError("LWTA widths must be divisible by lwta_block")
        if not self.head_dense or self.head_dense[-1] != 1:
            raise ConfigError("head_dense must end with a single output unit")
        if min(self.patch_h, self.patch_w, self.max_frames, self.n_coeffs) < 1:
            raise ConfigError("patch sizes, max_frames and n_coeffs must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        """Patch grid (rows, cols), with rows padded until the token count divides by ``reduction``."""
        rows = math.ceil(self.max_frames / self.patch_h)
        cols = math.ceil(self.n_coeffs / self.patch_w)
        while (rows * cols) % self.reduction:
            rows += 1
        return rows, cols

    @property
    def seq_len(self) -> int:
        rows, cols = self.grid
        return rows * cols

    def to_text(self) -> str:
        return "\n".join(sorted(cfgtext.to_lines(self))) + "\n"


@dataclass
class PatchSequence:
    patches: np.ndarray  # batch x n_patches x (patch_h * patch_w)
    grid: tuple[int, int]
    patch_shape: tuple[int, int]
    frames: list = field(default_factory=list)

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]


def _as_batch(m) -> list[np.ndarray]:
    if isinstance(m, MfccMatrix):
        return [m.values]
    if isinstance(m, np.ndarray):
        return [m] if m.ndim == 2 else list(m)
    return [x.values if isinstance(x, MfccMatrix) else np.asarray(x, dtype=np.float64) for x in m]


def patchify(m, cfg: ModelConfig) -> PatchSequence:
    """Zero-pad MFCC matrices onto the patch grid and flatten non-overlapping patches row-major.

    Accepts one matrix, a list of matrices or a batch x frames x coeffs array.
    Frames beyond ``max_frames`` are dropped.
    """
    mats = _as_batch(m)
    if not mats:
        raise InputError("empty batch")
    rows, cols = cfg.grid
    ph, pw = cfg.patch_h, cfg.patch_w
    canvas = np.zeros((len(mats), rows * ph, cols * pw))
    frames = []
    for i, mat in enumerate(mats):
        mat = np.asarray(mat, dtype=np.float64)
        if mat.ndim != 2 or mat.size == 0:
            raise InputError(f"MFCC matrix {i} is empty or not 2-D (shape {mat.shape})")
        if mat.shape[1] != cfg.n_coeffs:
            raise ContractError(
                f"MFCC matrix {i} has {mat.shape[1]} coefficients, model expects {cfg.n_coeffs}")
        n = min(mat.shape[0], cfg.max_frames)
        canvas[i, :n, : mat.shape[1]] = mat[:n]
        frames.append(n)
    patches = (canvas.reshape(len(mats), rows, ph, cols, pw)
               .transpose(0, 1, 3, 2, 4)
               .reshape(len(mats), rows * cols, ph * pw))
    return PatchSequence(patches, (rows, cols), (ph, pw), frames)


def fourier_position_encoding(seq_len: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ConfigError(f"position encoding needs an even d_model, got {d_model}")
    pos = np.arange(seq_len)[:, None]
    i = np.arange(d_model // 2)[None, :]
    angle = pos / 10000.0 ** (2.0 * i / d_model)
    pe = np.empty((seq_len, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def _fork(rng: RngStream | None, label: str) -> RngStream | None:
    return None if rng is None else rng.fork(label)


class EncoderBlock(Module):
    """``x + b * attention(batchnorm(x))`` behind a stochastic depth gate."""

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        self.bn = BatchNorm(cfg.d_model, momentum=cfg.bn_momentum)
        self.attn = SrAttention(cfg.d_model, cfg.n_heads, cfg.reduction, rng.fork("attn"))
        self.sd = StochasticDepth(cfg.survival_p)

    def branch(self, x: Tensor, mode: str) -> Tensor:
        return self.attn.forward(self.bn.forward(x, mode), mode)

    def forward(self, x: Tensor, mode: str, rng: RngStream | None = None) -> Tensor:
        return self.sd.forward(x, lambda h: self.branch(h, mode), mode, _fork(rng, "sd"))


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: tuple, rate: float, rng: RngStream):
        super().__init__()
        widths = [d_model, *hidden, d_model]
        self.n_layers = len(widths) - 1
        for i in range(self.n_layers):
            setattr(self, f"fc{i}", Dense(widths[i], widths[i + 1], rng.fork(f"fc{i}")))
        self.drop = Dropout(rate)

    def forward(self, x: Tensor, mode: str, rng: RngStream | None = None) -> Tensor:
        for i in range(self.n_layers):
            x = getattr(self, f"fc{i}").forward(x)
            if i < self.n_layers - 1:
                x = self.drop.forward(gelu(x), mode, _fork(rng, f"drop{i}"))
        return x


class RegressionUnit(Module):
    """Locally connected -> mean pool -> dropout -> LWTA -> GELU dense stack -> scalar."""

    def __init__(self, cfg: ModelConfig, rng: RngStream):
        super().__init__()
        self.lcn = LocallyConnected1d(cfg.seq_len, cfg.d_model, cfg.lcn_kernel, cfg.lcn_stride,
                                      cfg.lcn_filters, rng.fork("lcn"))
        self.drop = Dropout(cfg.dropout_rate)
        self.lwta = LwtaLayer(cfg.lcn_filters, cfg.head_lwta, cfg.lwta_block, rng.fork("lwta"))
        widths = [cfg.head_lwta, *cfg.head_dense]
        self.n_dense = len(cfg.head_dense)
        for i in range(self.n_dense):
            setattr(self, f"fc{i}", Dense(widths[i], widths[i + 1], rng.fork(f"fc{i}")))

    def forward(self, x: Tensor, mode: str, rng: RngStream | None = None) -> Tensor:
        h = self.lcn.forward(x).mean(axis=1)
        h = self.drop.forward(h, mode, _fork(rng, "drop"))
        h = self.lwta.forward(h)
        for i in range(self.n_dense):
            h = getattr(self, f"fc{i}").forward(h)
            if i < self.n_dense - 1:
                h = gelu(h)
        return h.reshape(h.shape[0])


class StochasticTransformer(Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = RngStream(cfg.seed).fork("init")
        self.embed = Dense(cfg.patch_h * cfg.patch_w, cfg.d_model, rng.fork("embed"))
        self.lwta_in = LwtaLayer(cfg.d_model, cfg.d_model, cfg.lwta_block, rng.fork("lwta_in"))
        for i in range(cfg.n_blocks):
            setattr(self, f"block{i}", EncoderBlock(cfg, rng.fork(f"block{i}")))
        self.lwta_out = LwtaLayer(cfg.d_model, cfg.d_model, cfg.lwta_block, rng.fork("lwta_out"))
        self.bn_out = BatchNorm(cfg.d_model, momentum=cfg.bn_momentum)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_hidden, cfg.dropout_rate, rng.fork("ffn"))
        self.head = RegressionUnit(cfg, rng.fork("head"))
        self.position = fourier_position_encoding(cfg.seq_len, cfg.d_model)
        # score = target_offset + target_scale * network output
        self.register_buffer("target_offset", np.array(0.0))
        self.register_buffer("target_scale", np.array(1.0))

    @property
    def blocks(self) -> list[EncoderBlock]:
        return [getattr(self, f"block{i}") for i in range(self.cfg.n_blocks)]

    def encode(self, batch) -> Tensor:
        ps = patchify(batch, self.cfg)
        return self.embed.forward(Tensor(ps.patches)) + Tensor(self.position)

    def forward(self, batch, mode: str = INFER, rng: RngStream | None = None) -> Tensor:
        """Predicted score for each MFCC matrix in ``batch`` (shape ``(batch,)``)."""
        if check_mode(mode) == TRAIN and rng is None:
            raise ContractError("training-mode forward needs an RngStream")
        x = self.lwta_in.forward(self.encode(batch))
        for i, block in enumerate(self.blocks):
            x = block.forward(x, mode, _fork(rng, f"block{i}"))
        x = self.bn_out.forward(self.lwta_out.forward(x), mode)
        x = self.ffn.forward(x, mode, _fork(rng, "ffn"))
        out = self.head.forward(x, mode, _fork(rng, "head"))
        if self.target_scale != 1.0 or self.target_offset != 0.0:
            out = out * float(self.target_scale) + float(self.target_offset)
        return out

    __call__ = forward

    def predict(self, batch) -> np.ndarray:
        from .tensor import no_grad
        with no_grad():
            return self.forward(batch, INFER).data.copy()


def count_parameters(cfg: ModelConfig | None = None) -> int:
    return StochasticTransformer(cfg or ModelConfig()).num_parameters()


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = b"STCK"


def checkpoint_bytes(model: StochasticTransformer, features: FeatureConfig | None = None,
                     extra: dict | None = None) -> bytes:
    """Config header (sorted key=value text) followed by the named-tensor container."""
    lines = cfgtext.to_lines(model.cfg, "model.")
    lines += cfgtext.to_lines(features or FeatureConfig(), "feature.")
    lines += [f"meta.{k}={v}" for k, v in (extra or {}).items()]
    header = ("\n".join(sorted(lines)) + "\n").encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    write_named(buf, dict(sorted(model.state_dict().items())))
    return buf.getvalue()


def save_checkpoint(path, model, features=None, extra=None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, features, extra))


def load_checkpoint(path):
    """Returns ``(model, feature_config, meta)``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataLoadError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataLoadError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    entries = cfgtext.parse_text(raw[8:8 + n].decode("utf-8"))
    groups = {"model": {}, "feature": {}, "meta": {}}
    for key, value in entries.items():
        group, _, name = key.partition(".")
        if group not in groups:
            raise DataLoadError(f"{path}: unknown header key {key}")
        groups[group][name] = value
    model = StochasticTransformer(cfgtext.from_mapping(ModelConfig, groups["model"]))
    features = cfgtext.from_mapping(FeatureConfig, groups["feature"])
    model.load_state_dict(read_named(io.BytesIO(raw[8 + n:])))
    return model, features, groups["meta"]
