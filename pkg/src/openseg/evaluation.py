"""Leave-one-class-out evaluation protocol and metrics.

Remaps one class to the unknown sentinel, calibrates thresholds as
order statistics of the unknown pixels' knownness scores at preset true
positive rates, and computes known-class accuracy, unknown precision,
Cohen's kappa and ROC/AUC from pooled pixel scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import (
    BadClass,
    DimMismatch,
    EmptyMatrix,
    NoUnknowns,
    SingleClassMask,
)
from .tensor_store import IGNORE_LABEL


@dataclass(frozen=True)
class LocoSplit:
    """Result of hiding one class: training mask, remapped labels, id map."""

    train_mask: np.ndarray      # H x W bool; True = usable for fitting
    eval_labels: np.ndarray     # H x W int32; knowns compacted, uuc -> unknown_id
    id_map: dict[int, int]      # original class id -> compacted id
    n_known: int

    @property
    def unknown_id(self) -> int:
        return self.n_known


@dataclass(frozen=True)
class Calibration:
    threshold: float
    achieved_tpr: float
    target_tpr: float


@dataclass(frozen=True)
class EvalReport:
    acc_known: float
    pre_unknown: float
    kappa: float
    auc: float
    tpr_target: float
    threshold: float
    achieved_tpr: float
    confusion: np.ndarray       # (n_known + 1) x (n_known + 1), true x predicted
    n_known: int
    unscored_classes: list[int] = field(default_factory=list)


def loco_remap(labels: np.ndarray, uuc: int, n_classes: int) -> LocoSplit:
    """Hide class ``uuc``: exclude it from fitting and relabel it unknown.

    Remaining class ids are compacted to 0..n_classes-2; the unknown
    sentinel is n_classes-1 (== number of remaining known classes).
    """
    if not 0 <= uuc < n_classes:
        raise BadClass(f"uuc {uuc} outside 0..{n_classes - 1}")
    labels = np.asarray(labels)
    n_known = n_classes - 1
    train_mask = (labels != uuc) & (labels != IGNORE_LABEL)

    id_map = {}
    nxt = 0
    for c in range(n_classes):
        if c == uuc:
            id_map[c] = n_known
        else:
            id_map[c] = nxt
            nxt += 1

    lut = np.full(n_classes + 1, IGNORE_LABEL, dtype=np.int32)  # slot -1 wraps to the end
    for c, v in id_map.items():
        lut[c] = v
    eval_labels = lut[labels]
    return LocoSplit(train_mask=train_mask, eval_labels=eval_labels,
                     id_map=id_map, n_known=n_known)


def remap_train_labels(labels: np.ndarray, split: LocoSplit) -> np.ndarray:
    """Compacted labels for fitting: ignore everywhere outside the train mask."""
    out = np.where(split.train_mask, split.eval_labels, IGNORE_LABEL)
    return out.astype(np.int32)


def calibrate_threshold(scores: np.ndarray, unknown_mask: np.ndarray,
                        tpr: float) -> Calibration:
    """Threshold as the ceil(tpr * N)-th smallest unknown-pixel score.

    The flag rule is score <= threshold, so the achieved TPR is at least
    the target and minimal among achievable values; score ties may push
    it above the target.
    """
    if not 0.0 < tpr <= 1.0:
        raise BadClass(f"tpr must be in (0, 1], got {tpr}")
    u = np.asarray(scores)[np.asarray(unknown_mask, dtype=bool)]
    if u.size == 0:
        raise NoUnknowns("calibration requires at least one unknown pixel")
    k = int(np.ceil(tpr * u.size))
    t = float(np.sort(u)[k - 1])
    achieved = float(np.mean(u <= t))
    return Calibration(threshold=t, achieved_tpr=achieved, target_tpr=tpr)


def apply_threshold(scores: np.ndarray, prior: np.ndarray, threshold: float,
                    unknown_id: int) -> np.ndarray:
    """Flag unknown where score <= threshold, else keep the prior class."""
    if scores.shape != prior.shape:
        raise DimMismatch("scores and prior prediction dims differ")
    return np.where(scores <= threshold, unknown_id, prior).astype(np.int32)


def roc_auc(scores: np.ndarray, unknown_mask: np.ndarray,
            valid_mask: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """ROC for detecting unknowns from negated knownness scores.

    AUC uses the rank (Mann-Whitney) formula with ties counted 0.5.
    The curve is emitted as (FPR, TPR) points at every distinct score.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    m = np.asarray(unknown_mask, dtype=bool).ravel()
    if valid_mask is not None:
        v = np.asarray(valid_mask, dtype=bool).ravel()
        s, m = s[v], m[v]
    n_pos = int(m.sum())
    n_neg = int(m.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise SingleClassMask("ROC needs both known and unknown pixels")

    stat = -s  # larger = more unknown
    ranks = rankdata(stat)
    auc = (float(ranks[m].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-stat, kind="stable")
    sorted_stat = stat[order]
    pos_sorted = m[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(~pos_sorted)
    distinct = np.flatnonzero(np.diff(sorted_stat) != 0.0)
    idx = np.concatenate([distinct, [stat.size - 1]])
    curve = np.column_stack([
        np.concatenate([[0.0], fp[idx] / n_neg]),
        np.concatenate([[0.0], tp[idx] / n_pos]),
    ])
    return curve, float(auc)


def cohen_kappa(confusion: np.ndarray) -> float:
    """Chance-corrected agreement from a square confusion matrix."""
    c = np.asarray(confusion, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix has zero total count")
    p_o = np.trace(c) / total
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / (total * total)
    if p_e >= 1.0:
        return 1.0  # single populated cell forces p_o == 1
    return float((p_o - p_e) / (1.0 - p_e))


def confusion_matrix(truth: np.ndarray, pred: np.ndarray, n_labels: int) -> np.ndarray:
    """Counts over valid (non-ignore) pixels, truth rows x prediction columns."""
    t = np.asarray(truth).ravel()
    p = np.asarray(pred).ravel()
    valid = t != IGNORE_LABEL
    t, p = t[valid], p[valid]
    return np.bincount(t * n_labels + p, minlength=n_labels * n_labels).reshape(
        n_labels, n_labels
    )


def evaluate(
    pred: np.ndarray,
    eval_labels: np.ndarray,
    unknown_mask: np.ndarray,
    scores: np.ndarray,
    n_known: int,
    tpr_target: float = float("nan"),
    threshold: float = float("nan"),
    achieved_tpr: float = float("nan"),
    kappa_include_unknown: bool = True,
    unscored_classes: list[int] | None = None,
) -> EvalReport:
    """Assemble the full metric report for one thresholded prediction."""
    if not (pred.shape == eval_labels.shape == unknown_mask.shape == scores.shape):
        raise DimMismatch("prediction, labels, mask and scores must share dims")
    unknown_id = n_known
    valid = eval_labels != IGNORE_LABEL
    conf = confusion_matrix(eval_labels, pred, n_known + 1)

    known = valid & (eval_labels < n_known) & (eval_labels >= 0)
    acc_known = float(np.mean(pred[known] == eval_labels[known])) if known.any() else 0.0

    flagged = valid & (pred == unknown_id)
    pre_unknown = (
        float(np.mean(eval_labels[flagged] == unknown_id)) if flagged.any() else 0.0
    )

    kappa_conf = conf if kappa_include_unknown else conf[:n_known, :n_known]
    kappa = cohen_kappa(kappa_conf)
    _, auc = roc_auc(scores, unknown_mask, valid)
    return EvalReport(
        acc_known=acc_known,
        pre_unknown=pre_unknown,
        kappa=kappa,
        auc=auc,
        tpr_target=tpr_target,
        threshold=threshold,
        achieved_tpr=achieved_tpr,
        confusion=conf,
        n_known=n_known,
        unscored_classes=sorted(unscored_classes or []),
    )
