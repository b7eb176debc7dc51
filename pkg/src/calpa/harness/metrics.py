"""Steganalysis detection metrics.

Labels are cover 0 and stego 1; an image is flagged as stego when its score
reaches the threshold (``score >= tau``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from calpa.harness.checkpoint import ModelCheckpoint
from calpa.harness.data import to_input

DETECTION_LEVELS = (0.3, 0.5, 0.7)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    p_fa: dict[float, float]
    p_md: float
    p_e: float

    def row(self) -> dict:
        out = {"accuracy": self.accuracy, "P_E": self.p_e, "P_MD": self.p_md}
        for d, v in sorted(self.p_fa.items(), reverse=True):
            out[f"P_FA({round(d * 100)}%)"] = v
        return out


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    covers, stegos = scores[labels == 0], scores[labels == 1]
    if len(covers) == 0 or len(stegos) == 0:
        raise ValueError("metrics need at least one cover and one stego score")
    return covers, stegos


def roc(cover_scores, stego_scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(thresholds, P_FA, P_D)`` over every distinct score plus ±inf."""
    c = np.sort(np.asarray(cover_scores, dtype=np.float64))
    s = np.sort(np.asarray(stego_scores, dtype=np.float64))
    taus = np.concatenate([[-np.inf], np.unique(np.concatenate([c, s])), [np.inf]])
    p_fa = 1.0 - np.searchsorted(c, taus, side="left") / len(c)
    p_d = 1.0 - np.searchsorted(s, taus, side="left") / len(s)
    return taus, p_fa, p_d


def p_e(cover_scores, stego_scores) -> tuple[float, float]:
    """Minimal ``(P_FA + P_MD) / 2`` over thresholds; returns ``(P_E, P_MD)`` there."""
    _, p_fa, p_d = roc(cover_scores, stego_scores)
    errors = 0.5 * (p_fa + (1.0 - p_d))
    i = int(np.argmin(errors))
    return float(errors[i]), float(1.0 - p_d[i])


def p_fa_at(cover_scores, stego_scores, detection: float) -> float:
    """False-alarm rate at the highest threshold detecting a ``detection`` share of stegos."""
    if not 0 <= detection <= 1:
        raise ValueError(f"detection probability must lie in [0, 1], got {detection}")
    s = np.sort(np.asarray(stego_scores, dtype=np.float64))[::-1]
    need = max(1, math.ceil(detection * len(s) - 1e-9))
    tau = s[need - 1]
    return float(np.mean(np.asarray(cover_scores, dtype=np.float64) >= tau))


def compute_metrics(scores, labels, levels=DETECTION_LEVELS) -> Metrics:
    covers, stegos = _split(scores, labels)
    pe, pmd = p_e(covers, stegos)
    acc = float(np.mean((np.asarray(scores) > 0.5) == (np.asarray(labels) == 1)))
    return Metrics(acc, {d: p_fa_at(covers, stegos, d) for d in levels}, pmd, pe)


def evaluate(model, dataset, split: str = "test", batch_size: int = 200) -> Metrics:
    """Score a split with a network or checkpoint and compute :class:`Metrics`."""
    net = model.network() if isinstance(model, ModelCheckpoint) else model
    images, labels = dataset.labeled(split)
    if len(images) == 0:
        raise ValueError(f"split {split!r} is empty")
    if np.sum(labels == 0) != np.sum(labels == 1):
        raise ValueError(f"split {split!r} is not balanced")
    scores = net.predict_scores(to_input(images, net.dtype), batch_size)
    return compute_metrics(scores, labels)
