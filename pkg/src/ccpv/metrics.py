"""Verification metrics on distance scores.

Scores are distances: a trial is accepted when ``distance <= threshold``.
FAR is the accepted fraction of impostor trials, GAR the accepted fraction of
genuine trials and FRR = 1 - GAR. All rates are fractions in [0, 1].
"""

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInput, EmptyScores

DEFAULT_FAR_TARGETS = (1e-3, 1e-5, 1e-6)


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise ValueError("scores must be finite")

    def require_both(self):
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise EmptyScores("need at least one genuine and one impostor score")

    def to_csv(self, path):
        """Dump as ``label,distance`` with round-trippable floats."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["label", "distance"])
            for v in self.genuine:
                w.writerow(["genuine", repr(float(v))])
            for v in self.impostor:
                w.writerow(["impostor", repr(float(v))])
        return path

    @classmethod
    def from_csv(cls, path):
        gen, imp = [], []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                (gen if row["label"] == "genuine" else imp).append(float(row["distance"]))
        return cls(gen, imp)


def _rates(scores, thresholds):
    """FAR and GAR at each threshold via sorted counts."""
    g = np.sort(scores.genuine)
    i = np.sort(scores.impostor)
    gar = np.searchsorted(g, thresholds, side="right") / g.size
    far = np.searchsorted(i, thresholds, side="right") / i.size
    return far, gar


def candidate_thresholds(scores):
    """Sorted distinct scores plus the midpoints between consecutive ones."""
    u = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    mids = (u[:-1] + u[1:]) / 2
    return np.unique(np.concatenate([u, mids]))


def eer(scores):
    """Equal error rate and its threshold.

    Sweeps :func:`candidate_thresholds`, takes the point minimizing
    ``|FAR - FRR|`` (smallest threshold on ties) and reports
    ``(FAR + FRR) / 2`` there.
    """
    scores.require_both()
    t = candidate_thresholds(scores)
    far, gar = _rates(scores, t)
    frr = 1.0 - gar
    k = int(np.argmin(np.abs(far - frr)))  # argmin returns the first, i.e. smallest threshold
    return float((far[k] + frr[k]) / 2), float(t[k])


def gar_at_far(scores, far_target):
    """GAR at the largest threshold whose FAR does not exceed ``far_target``.

    When even the smallest score threshold is above the target, returns 0.0
    and emits a ``RuntimeWarning``.
    """
    if not 0 < far_target < 1:
        raise ValueError("far_target must lie in (0, 1)")
    scores.require_both()
    t = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    far, gar = _rates(scores, t)
    ok = np.nonzero(far <= far_target)[0]
    if ok.size == 0:
        warnings.warn(f"no threshold reaches FAR <= {far_target}; reporting GAR 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    return float(gar[ok[-1]])


@dataclass
class RocCurve:
    far: np.ndarray
    gar: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self):
        return list(zip(self.far.tolist(), self.gar.tolist(), self.thresholds.tolist()))

    def to_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "far", "gar"])
            for f, g, t in zip(self.far, self.gar, self.thresholds):
                w.writerow([repr(float(t)), repr(float(f)), repr(float(g))])
        return path

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [(float(r["threshold"]), float(r["far"]), float(r["gar"]))
                    for r in csv.DictReader(fh)]
        if not rows:
            raise EmptyScores(f"{path} contains no ROC points")
        t, f, g = (np.array(c) for c in zip(*rows))
        return cls(f, g, t)


def roc(scores, n_points=None):
    """Exact step ROC at every distinct score threshold, ascending.

    With ``n_points`` set, thresholds are subsampled uniformly by index
    (first and last kept).
    """
    scores.require_both()
    t = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    if n_points is not None and 0 < n_points < t.size:
        idx = np.unique(np.round(np.linspace(0, t.size - 1, max(n_points, 2))).astype(int))
        t = t[idx]
    far, gar = _rates(scores, t)
    return RocCurve(far, gar, t)


def rank1_acc(rankings):
    """Fraction of ``(true_identity, ranked_identities)`` whose top entry is correct."""
    rankings = list(rankings)
    if not rankings:
        raise EmptyInput("no rankings given")
    hits = sum(1 for truth, ranked in rankings if len(ranked) and ranked[0] == truth)
    return hits / len(rankings)


def metrics_report(protocol, scores, acc=None, far_targets=DEFAULT_FAR_TARGETS):
    """JSON-ready summary of one protocol run."""
    e, thr = eer(scores)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        gars = {repr(float(f)): gar_at_far(scores, f) for f in far_targets}
    return {
        "protocol": protocol,
        "eer": e,
        "gar_at_far": gars,
        "acc": acc,
        "n_genuine": int(scores.genuine.size),
        "n_impostor": int(scores.impostor.size),
        "threshold": thr,
    }
