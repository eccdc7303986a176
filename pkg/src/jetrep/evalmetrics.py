"""Evaluation metrics: accuracy, macro-F1, macro/micro ROC-AUC, per-class
one-vs-rest AUC, background rejection at fixed signal efficiency, and
signal efficiency at fixed background efficiency.

AUC is the exact Mann-Whitney statistic (ties get half credit) computed
by sort-and-rank. Rejection/efficiency operating points use the empirical
step-function ROC with no interpolation; running out of background
statistics is flagged instead of reported as infinity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .jetdata import LABEL_NAMES, N_CLASSES, SIGNAL_LABELS, ClassLabel


class MetricError(Exception):
    pass


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # [N, 7] softmax probabilities
    labels: np.ndarray  # [N] int

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 2 or self.scores.shape[1] != N_CLASSES:
            raise MetricError(f"scores must be [N, {N_CLASSES}], got {self.scores.shape}")
        if self.scores.shape[0] < 1:
            raise MetricError("need at least one sample")
        if self.labels.shape != (self.scores.shape[0],):
            raise MetricError("labels length must match scores")
        if np.any(self.labels < 0) or np.any(self.labels >= N_CLASSES):
            raise MetricError("labels outside [0, 7)")
        rowsum = self.scores.sum(axis=1)
        if np.any(np.abs(rowsum - 1.0) > 1e-9):
            raise MetricError("score rows must sum to 1 within 1e-9")


def _tie_averaged_ranks(values):
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # 1-based average rank
        i = j + 1
    return ranks


def roc_auc_binary(scores, labels):
    """Exact Mann-Whitney AUC: P(s_pos > s_neg) + 0.5 P(equal)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: both classes must be present")
    ranks = _tie_averaged_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def per_class_auc(sm: ScoreMatrix):
    """One-vs-rest AUC per class; classes absent from the labels are None."""
    out = {}
    for label in ClassLabel:
        binary = (sm.labels == int(label)).astype(np.int64)
        if binary.sum() == 0 or binary.sum() == len(binary):
            out[label] = None
        else:
            out[label] = roc_auc_binary(sm.scores[:, int(label)], binary)
    return out


def macro_auc(sm: ScoreMatrix):
    aucs = per_class_auc(sm)
    missing = [LABEL_NAMES[l] for l, v in aucs.items() if v is None]
    if missing:
        raise MetricError(f"macro AUC undefined; classes absent: {missing}")
    return float(np.mean([aucs[l] for l in ClassLabel]))


def micro_auc(sm: ScoreMatrix):
    if sm.scores.shape[0] < 2:
        raise MetricError("micro AUC needs at least 2 samples")
    onehot = np.zeros_like(sm.scores)
    onehot[np.arange(len(sm.labels)), sm.labels] = 1.0
    return roc_auc_binary(sm.scores.reshape(-1), onehot.reshape(-1).astype(np.int64))


@dataclass
class RejectionResult:
    value: float
    unsaturated: bool  # True when no background passed (value = N_bkg + 1 bound)


def rejection_at_efficiency(scores, labels, target_es=0.5):
    """Background rejection 1/eps_B at the tightest cut with eps_S >= target.

    The threshold is the k-th largest signal score, k = ceil(target * N_sig).
    With zero passing background the rejection is reported as N_bkg + 1 and
    flagged unsaturated.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    sig = scores[labels == 1]
    bkg = scores[labels == 0]
    if sig.size == 0 or bkg.size == 0:
        raise MetricError("rejection undefined: both classes must be present")
    k = max(1, math.ceil(target_es * sig.size))
    threshold = np.sort(sig)[::-1][k - 1]
    eb = float(np.count_nonzero(bkg >= threshold)) / bkg.size
    if eb == 0.0:
        return RejectionResult(float(bkg.size + 1), True)
    return RejectionResult(1.0 / eb, False)


def efficiency_at_background(scores, labels, target_eb=1e-2):
    """Signal efficiency at the loosest cut with eps_B <= target.

    The threshold is the smallest observed score whose background
    pass-fraction is within budget; requires N_bkg >= 1/target to resolve.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    sig = np.sort(scores[labels == 1])
    bkg = np.sort(scores[labels == 0])
    if sig.size == 0 or bkg.size == 0:
        raise MetricError("efficiency undefined: both classes must be present")
    needed = math.ceil(1.0 / target_eb)
    if bkg.size < needed:
        raise MetricError(
            f"eps_B = {target_eb} unresolvable with {bkg.size} background "
            f"samples; need at least {needed}")
    budget = math.floor(target_eb * bkg.size)
    candidates = np.unique(scores)
    # count of background >= t is monotone in t: binary search the first
    # candidate meeting the budget
    counts = bkg.size - np.searchsorted(bkg, candidates, side="left")
    ok = np.flatnonzero(counts <= budget)
    if ok.size == 0:
        return 0.0
    threshold = candidates[ok[0]]
    return float(sig.size - np.searchsorted(sig, threshold, side="left")) / sig.size


def accuracy(sm: ScoreMatrix):
    """Mean argmax-correct; argmax ties resolve to the lowest class index."""
    return float(np.mean(np.argmax(sm.scores, axis=1) == sm.labels))


def macro_f1(sm: ScoreMatrix):
    """Unweighted mean F1 over classes, 0/0 counted as 0."""
    pred = np.argmax(sm.scores, axis=1)
    f1s = []
    for c in range(N_CLASSES):
        tp = np.count_nonzero((pred == c) & (sm.labels == c))
        fp = np.count_nonzero((pred == c) & (sm.labels != c))
        fn = np.count_nonzero((pred != c) & (sm.labels == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    accuracy: float
    macro_auc: float
    micro_auc: float
    macro_f1: float
    auc: dict = field(default_factory=dict)                 # 7 classes
    rejection_at_es50: dict = field(default_factory=dict)   # 6 signal classes
    es_at_eb1e2: dict = field(default_factory=dict)         # 6 signal classes

    def to_json(self):
        doc = {
            "accuracy": self.accuracy,
            "macro_auc": self.macro_auc,
            "micro_auc": self.micro_auc,
            "macro_f1": self.macro_f1,
            "auc": self.auc,
            "rejection_at_es50": self.rejection_at_es50,
            "es_at_eb1e2": self.es_at_eb1e2,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(doc["accuracy"], doc["macro_auc"], doc["micro_auc"],
                   doc["macro_f1"], doc["auc"], doc["rejection_at_es50"],
                   doc["es_at_eb1e2"])

    def render_tables(self, method="model"):
        """Aligned text tables mirroring the global / per-class AUC /
        rejection / efficiency report layout."""
        sig_names = [LABEL_NAMES[l] for l in SIGNAL_LABELS]
        lines = ["Global metrics",
                 _table(["method", "accuracy", "macro_auc", "micro_auc", "macro_f1"],
                        [[method, f"{self.accuracy:.4f}", f"{self.macro_auc:.4f}",
                          f"{self.micro_auc:.4f}", f"{self.macro_f1:.4f}"]])]
        lines += ["", "Per-class one-vs-rest AUC",
                  _table(["method"] + [f"auc_{n}" for n in
                                       [LABEL_NAMES[l] for l in ClassLabel]],
                         [[method] + [f"{self.auc[LABEL_NAMES[l]]:.4f}"
                                      for l in ClassLabel]])]
        rej_cells = []
        for n in sig_names:
            entry = self.rejection_at_es50[n]
            flag = "*" if entry["unsaturated"] else ""
            rej_cells.append(f"{entry['value']:.1f}{flag}")
        lines += ["", "Background rejection at eS = 50% (* = unsaturated)",
                  _table(["method"] + [f"rej_{n}" for n in sig_names],
                         [[method] + rej_cells])]
        lines += ["", "Signal efficiency at eB = 1e-2",
                  _table(["method"] + [f"es_{n}" for n in sig_names],
                         [[method] + [f"{self.es_at_eb1e2[n]:.4f}" for n in sig_names]])]
        return "\n".join(lines)


def _table(header, rows):
    widths = [max(len(str(header[i])), *(len(str(r[i])) for r in rows))
              for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*header)]
    out.append("  ".join("-" * w for w in widths))
    out += [fmt.format(*row) for row in rows]
    return "\n".join(out)


def compute_report(sm: ScoreMatrix) -> MetricReport:
    """All global and per-class quantities for one model on one split."""
    aucs = per_class_auc(sm)
    report = MetricReport(
        accuracy=accuracy(sm),
        macro_auc=macro_auc(sm),
        micro_auc=micro_auc(sm),
        macro_f1=macro_f1(sm),
        auc={LABEL_NAMES[l]: aucs[l] for l in ClassLabel},
    )
    for label in SIGNAL_LABELS:
        name = LABEL_NAMES[label]
        binary = (sm.labels == int(label)).astype(np.int64)
        scores = sm.scores[:, int(label)]
        rej = rejection_at_efficiency(scores, binary, 0.5)
        report.rejection_at_es50[name] = {"value": rej.value,
                                          "unsaturated": rej.unsaturated}
        report.es_at_eb1e2[name] = efficiency_at_background(scores, binary, 1e-2)
    return report
