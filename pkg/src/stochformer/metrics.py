"""Regression metrics: root mean square error and concordance correlation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError


def _pair(pred, target, min_len: int = 1):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if p.size != t.size:
        raise ContractError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    if p.size < min_len:
        raise ContractError(f"need at least {min_len} samples, got {p.size}")
    return p, t


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def ccc(pred, target) -> float:
    """Lin's concordance correlation with population (1/K) moments."""
    p, t = _pair(pred, target, min_len=2)
    mp, mt = p.mean(), t.mean()
    vp = np.mean((p - mp) ** 2)
    vt = np.mean((t - mt) ** 2)
    cov = np.mean((p - mp) * (t - mt))
    denom = (mt - mp) ** 2 + vt + vp
    if denom == 0.0:
        raise NumericError("CCC is undefined when both vectors are the same constant")
    return float(2.0 * cov / denom)


@dataclass
class EvalReport:
    rmse: float
    ccc: float
    n: int
    split: str = "test"

    def to_text(self) -> str:
        return (f"split {self.split}: n={self.n}  RMSE={self.rmse:.6f}  CCC={self.ccc:.6f}\n"
                + self.to_kv())

    def to_kv(self) -> str:
        return "\n".join([f"split={self.split}", f"n={self.n}",
                          f"rmse={self.rmse!r}", f"ccc={self.ccc!r}"]) + "\n"


def evaluate(pred, target, split: str = "test") -> EvalReport:
    p, t = _pair(pred, target)
    try:
        c = ccc(p, t)
    except (NumericError, ContractError):
        c = float("nan")
    return EvalReport(rmse(p, t), c, int(p.size), split)
