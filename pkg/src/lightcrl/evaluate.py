"""Evaluation protocols: zero-shot, retrieval, linear probe, accuracy.

Rankings break ties toward the lower index everywhere, so every metric is a
deterministic function of the scores.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autograd import Tensor
from .errors import ContractError, ShapeError
from .train import ClassifierConfig, LinearHead, accuracy, encode_features, train_classifier


@dataclass
class EvalReport:
    metric: str
    value: float
    support: int
    k: int | None = None
    direction: str | None = None
    per_class: list | None = None
    confusion: np.ndarray | None = field(default=None, repr=False)
    epoch: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ContractError(f"{self.metric}: value {self.value} outside [0, 1]")

    def to_json(self):
        rec = {"metric": self.metric, "k": self.k, "direction": self.direction, "value": self.value, "support": self.support}
        if self.per_class is not None:
            rec["per_class"] = self.per_class
        if self.epoch is not None:
            rec["epoch"] = self.epoch
        return json.dumps(rec)


def write_reports(reports, fh):
    for r in reports:
        fh.write(r.to_json() + "\n")


@dataclass
class ClassPrototypeSet:
    names: list
    proto2: np.ndarray

    def __post_init__(self):
        self.proto2 = np.asarray(self.proto2)
        if self.proto2.ndim != 2 or self.proto2.shape[0] < 2:
            raise ContractError("need at least two class prototypes")
        if len(self.names) != self.proto2.shape[0]:
            raise ContractError("one name per prototype row")
        if not np.isfinite(self.proto2).all():
            raise ContractError("prototype rows must be finite")

    @property
    def num_classes(self):
        return self.proto2.shape[0]

    @classmethod
    def from_pairs(cls, pairs):
        """Prototypes from a set whose row ``c`` is the class-``c`` pair."""
        order = np.argsort(pairs.labels, kind="stable") if pairs.labels is not None else np.arange(pairs.n)
        names = [str(int(pairs.labels[i])) if pairs.labels is not None else str(i) for i in order]
        return cls(names, pairs.m2[order])


def true_ranks(scores, targets):
    """Rank of ``scores[i, targets[i]]`` within row ``i`` (0 = best, ties to lower index)."""
    scores = np.asarray(scores)
    targets = np.asarray(targets)
    s = scores[np.arange(len(targets)), targets][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    return ((scores > s) | ((scores == s) & (cols < targets[:, None]))).sum(axis=1)


def topk_accuracy(scores, labels, k):
    return float(np.mean(true_ranks(scores, labels) < k))


def softmax_probabilities(sim, temperature=1.0):
    return kernels.softmax_rows(np.ascontiguousarray(sim / temperature))


def zero_shot_classify(params, queries1, labels, protos, topk=(1,), temperature=1.0):
    """Classify modality-1 rows by cosine similarity to encoded class prototypes.

    Returns ``(reports, probs)`` with one top-k report per requested ``k`` and
    the per-query softmax over classes of ``similarity / temperature``.
    """
    c = protos.num_classes
    for k in topk:
        if not 1 <= k <= c:
            raise ContractError(f"top-{k} requested but only {c} classes")
    labels = np.asarray(labels)
    q = encode_features(params, np.asarray(queries1), 1)
    p = encode_features(params, protos.proto2, 2)
    sim = q @ p.T
    probs = softmax_probabilities(sim, temperature)
    reports = [EvalReport("zeroshot_top_k", topk_accuracy(probs, labels, k), len(labels), k=k) for k in topk]
    return reports, probs


def recall_at_k(a, b, ks):
    """Cross-modal recall@k for aligned unit-row matrices, both directions.

    Returns a dict ``{"1->2": {k: recall}, "2->1": {k: recall}}``.
    """
    a = np.ascontiguousarray(a.data if isinstance(a, Tensor) else a)
    b = np.ascontiguousarray(b.data if isinstance(b, Tensor) else b)
    if a.shape != b.shape:
        raise ShapeError(f"recall_at_k: shapes differ, {a.shape} vs {b.shape}")
    n = a.shape[0]
    for k in ks:
        if not 1 <= k <= n:
            raise ContractError(f"recall@{k} needs 1 <= k <= n={n}")
    sim = np.ascontiguousarray(a @ b.T)
    out = {}
    for direction, s in (("1->2", sim), ("2->1", np.ascontiguousarray(sim.T))):
        ranks = kernels.partner_ranks(s)
        out[direction] = {k: float(np.mean(ranks < k)) for k in ks}
    return out


def retrieval_recall_at_k(params, pairs, ks=(1, 5, 10)):
    """Encode both sides of ``pairs`` and report recall@k per direction."""
    if pairs.n < max(ks):
        raise ContractError(f"recall@{max(ks)} needs at least that many pairs, got {pairs.n}")
    a = encode_features(params, pairs.m1, 1)
    b = encode_features(params, pairs.m2, 2)
    res = recall_at_k(a, b, ks)
    return [EvalReport("recall_at_k", res[d][k], pairs.n, k=k, direction=d) for d in ("1->2", "2->1") for k in ks]


def confusion_and_accuracy(pred, true, num_classes=None):
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction/label length mismatch: {pred.shape} vs {true.shape}")
    c = num_classes or int(max(pred.max(initial=-1), true.max(initial=-1)) + 1)
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    support = conf.sum(axis=1)
    per_class = [float(conf[i, i] / support[i]) if support[i] else 0.0 for i in range(c)]
    return EvalReport("accuracy", accuracy(pred, true), len(true), per_class=per_class, confusion=conf)


@dataclass
class ProbeResult:
    head: LinearHead
    curve: list
    final_accuracy: float


def train_linear_probe(params, labeled, test=None, epochs=100, lr=1e-2, eval_every=20, batch_k=64, seed=0, num_classes=None):
    """Fit a zero-initialised linear head on frozen modality-1 features.

    Features are encoded once and cached; ``params`` is never touched.
    Accuracy on ``test`` (default: the training rows) is logged every
    ``eval_every`` epochs and after the last.
    """
    if labeled.labels is None or (test is not None and test.labels is None):
        raise ContractError("linear probe needs labelled data")
    test = test if test is not None else labeled
    c = num_classes or max(labeled.num_classes, test.num_classes)
    feats = encode_features(params, labeled.m1, 1)
    test_feats = encode_features(params, test.m1, 1)
    head = LinearHead.zeros(feats.shape[1], c, params.dtype)
    cfg = ClassifierConfig(epochs=epochs, lr=lr, batch_k=batch_k, eval_every=eval_every, seed=seed)

    def evaluate():
        return accuracy(head.predict(test_feats), test.labels)

    curve = train_classifier(lambda idx: Tensor(feats[idx]), labeled.labels, head, cfg, None, evaluate)
    return ProbeResult(head, curve, curve[-1][1])
