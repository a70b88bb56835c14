"""Adam with decoupled weight decay, the MSE objective and the training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgtext
from .data import Corpus, batch_iterator, pad_batch
from .dsp import FeatureConfig
from .errors import ConfigError, ContractError, NumericError
from .layers import INFER, TRAIN
from .metrics import EvalReport, evaluate
from .model import StochasticTransformer, save_checkpoint
from .rng import RngStream
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    patience: int = 50
    checkpoint_every: int = 0
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    target_scaling: str = "none"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batchnorm needs two rows)")
        if self.epochs < 0 or self.patience < 0 or self.checkpoint_every < 0:
            raise ConfigError("epochs, patience and checkpoint_every must be non-negative")
        if self.target_scaling not in ("none", "minmax"):
            raise ConfigError(f"target_scaling must be 'none' or 'minmax', got {self.target_scaling!r}")


# -- optimizer ----------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, tcfg: TrainConfig) -> "OptimizerState":
        return cls(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay)


def adam_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """One in-place update of ``params`` (name -> Tensor or ndarray).

    Weight decay is decoupled: parameters shrink by ``lr * weight_decay``
    before the bias-corrected Adam step.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        value = p.data if isinstance(p, Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        if g.shape != value.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {value.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if state.weight_decay:
            value -= state.lr * state.weight_decay * value
        value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    if pred.size != target.size:
        raise ContractError(f"{pred.size} predictions vs {target.size} targets")
    if target.size == 0:
        raise ContractError("mse_loss on an empty batch")
    diff = pred.reshape(target.size) - Tensor(target)
    return (diff * diff).mean()


# -- reports ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    val_ccc: float
    wall_s: float = 0.0


REPORT_COLUMNS = ("epoch", "train_loss", "val_rmse", "val_ccc")


@dataclass
class TrainReport:
    """Per-epoch history.

    ``to_text`` holds only seed-determined values so two identical runs give
    identical files; wall-clock times go to ``timing_text``.
    """

    seed: int
    config: str
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_rmse: float = float("nan")
    best_val_ccc: float = float("nan")
    stopped_early: bool = False

    def to_text(self) -> str:
        lines = ["# stochformer train report v1", f"# seed={self.seed}"]
        lines += [f"# {line}" for line in self.config.splitlines()]
        lines.append("\t".join(REPORT_COLUMNS))
        for r in self.epochs:
            lines.append(f"{r.epoch}\t{r.train_loss!r}\t{r.val_rmse!r}\t{r.val_ccc!r}")
        lines.append(f"# best_epoch={self.best_epoch}")
        lines.append(f"# best_val_rmse={self.best_val_rmse!r}")
        lines.append(f"# best_val_ccc={self.best_val_ccc!r}")
        lines.append(f"# stopped_early={'true' if self.stopped_early else 'false'}")
        return "\n".join(lines) + "\n"

    def timing_text(self) -> str:
        return "epoch\twall_s\n" + "".join(f"{r.epoch}\t{r.wall_s:.6f}\n" for r in self.epochs)

    @classmethod
    def from_text(cls, text: str) -> "TrainReport":
        meta, rows = {}, []
        for line in text.splitlines():
            if line.startswith("# ") and "=" in line:
                key, _, value = line[2:].partition("=")
                meta.setdefault(key.strip(), value.strip())
            elif line and not line.startswith("#") and not line.startswith("epoch"):
                e, loss, r, c = line.split("\t")
                rows.append(EpochRecord(int(e), float(loss), float(r), float(c)))
        return cls(int(meta.get("seed", 0)), "", rows, int(meta.get("best_epoch", 0)),
                   float(meta.get("best_val_rmse", "nan")), float(meta.get("best_val_ccc", "nan")),
                   meta.get("stopped_early") == "true")


# -- loop -------------------------------------------------------------------

def predict_split(model: StochasticTransformer, corpus: Corpus, split: str,
                  batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    entries = corpus.split(split)
    if not entries:
        raise ContractError(f"split {split!r} is empty")
    preds = []
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        batch = pad_batch([corpus.features[e.id] for e in chunk], model.cfg.max_frames)
        preds.append(model.predict(batch))
    return np.concatenate(preds), np.array([e.pcl_c for e in entries])


def evaluate_split(model, corpus, split: str) -> EvalReport:
    pred, target = predict_split(model, corpus, split)
    return evaluate(pred, target, split)


def set_output_scaling(model: StochasticTransformer, corpus: Corpus, split: str, mode: str) -> None:
    """Initialise the output affine map from the training targets.

    ``none`` starts the final bias at the training mean; ``minmax`` also maps
    the network's unit range onto [min, max] of the training scores.
    """
    scores = np.array([e.pcl_c for e in corpus.split(split)])
    final = getattr(model.head, f"fc{model.head.n_dense - 1}")
    if mode == "minmax":
        lo, hi = float(scores.min()), float(scores.max())
        model.target_offset = np.array(lo)
        model.target_scale = np.array(hi - lo if hi > lo else 1.0)
        final.bias.data[...] = 0.5
    else:
        final.bias.data[...] = scores.mean()


def train(model: StochasticTransformer, corpus: Corpus, tcfg: TrainConfig | None = None,
          features: FeatureConfig | None = None, train_split: str = "train",
          val_split: str = "val", checkpoint_dir=None) -> TrainReport:
    """Fit ``model`` in place; on return it holds the best-validation-RMSE weights."""
    tcfg = tcfg or TrainConfig()
    if not corpus.split(train_split) or not corpus.split(val_split):
        raise ContractError("training needs non-empty train and validation splits")
    snapshot = "\n".join(sorted(cfgtext.to_lines(model.cfg, "model.") + cfgtext.to_lines(tcfg, "train.")))
    report = TrainReport(tcfg.seed, snapshot)
    if tcfg.epochs == 0:
        return report
    set_output_scaling(model, corpus, train_split, tcfg.target_scaling)
    params = dict(model.named_parameters())
    state = OptimizerState.from_config(tcfg)
    root = RngStream(tcfg.seed).fork("train")
    best_state = model.state_dict()
    best = math.inf
    since_best = 0
    for epoch in range(1, tcfg.epochs + 1):
        started = time.perf_counter()
        losses = []
        batches = batch_iterator(corpus, train_split, tcfg.batch_size, tcfg.seed, epoch,
                                 model.cfg.max_frames)
        for step, (x, y) in enumerate(batches):
            model.zero_grad()
            try:
                loss = mse_loss(model.forward(x, TRAIN, root.fork(epoch).fork(step)), y)
            except NumericError as exc:
                raise NumericError(f"non-finite forward pass at epoch {epoch}, step {step}: {exc}") from exc
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss at epoch {epoch}, step {step}")
            loss.backward()
            adam_step(params, {n: p.grad for n, p in params.items()}, state)
            losses.append(loss.item())
        if not losses:
            raise ContractError(
                f"split {train_split!r} yields no full batch of size {tcfg.batch_size}")
        ev = evaluate_split(model, corpus, val_split)
        report.epochs.append(EpochRecord(epoch, float(np.mean(losses)), ev.rmse, ev.ccc,
                                         time.perf_counter() - started))
        log.debug("epoch %d loss %.4f val_rmse %.4f", epoch, np.mean(losses), ev.rmse)
        if ev.rmse < best:
            best, since_best = ev.rmse, 0
            best_state = model.state_dict()
            report.best_epoch, report.best_val_rmse, report.best_val_ccc = epoch, ev.rmse, ev.ccc
        else:
            since_best += 1
        if checkpoint_dir and tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch:04d}.ckpt", model, features)
        if tcfg.patience and since_best >= tcfg.patience:
            report.stopped_early = True
            break
    model.load_state_dict(best_state)
    return report
