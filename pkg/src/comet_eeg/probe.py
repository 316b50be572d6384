"""Linear probing on a frozen encoder and the downstream metrics."""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from . import diffengine as de
from .diffengine import Tensor
from .model import ModelState, as_tensors, encode_full, split_global
from .train import AdamW


def extract_features(samples, state: ModelState, batch_size: int = 32, include_global: bool = False,
                     allow_new_channels: bool = False) -> np.ndarray:
    """Unmasked encoder outputs, ``(n_samples, C * N [+1], d)`` channel-major."""
    ids = state.channel_ids(samples[0].channel_names, allow_new=allow_new_channels)
    p = as_tensors(state.encoder_params())
    chunks = []
    for start in range(0, len(samples), batch_size):
        x = np.stack([s.data for s in samples[start:start + batch_size]])
        out, _ = encode_full(x, ids, p, state.config)
        patches, g = split_global(out)
        feats = patches.tokens.data
        if include_global:
            feats = np.concatenate([feats, g.data[:, None, :]], axis=1)
        chunks.append(feats)
    return np.concatenate(chunks)


def param_checksum(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class ProbeHead:
    """Per-patch projection ``d -> h`` followed by ``P * h -> n_classes``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def initialize(cls, n_patches: int, dim: int, hidden: int, n_classes: int, rng) -> "ProbeHead":
        return cls(rng.normal(0, 1 / np.sqrt(dim), (dim, hidden)), np.zeros(hidden),
                   rng.normal(0, 1 / np.sqrt(n_patches * hidden), (n_patches * hidden, n_classes)),
                   np.zeros(n_classes))

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def logits(self, features):
        return _head_logits(as_tensors(self.params()), np.asarray(features)).data

    def predict(self, features) -> np.ndarray:
        return self.logits(features).argmax(axis=1)


def _head_logits(p: dict, x: np.ndarray) -> Tensor:
    B, P, _ = x.shape
    h = Tensor(x) @ p["w1"] + p["b1"]
    return de.reshape(h, (B, P * p["w1"].shape[1])) @ p["w2"] + p["b2"]


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    rows = np.arange(logits.shape[0])
    return de.mean(de.logsumexp(logits) - logits[rows, labels])


def train_probe(features, labels, epochs: int = 100, lr: float = 1e-3, *, hidden: int = 16, batch_size: int = 64,
                val: tuple | None = None, val_fraction: float = 0.2, patience: int = 10, seed: int = 0,
                weight_decay: float = 0.0) -> ProbeHead:
    """Fit the head by cross-entropy; keeps the epoch with best validation
    balanced accuracy and stops after ``patience`` epochs without improvement."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("probing needs at least two classes")
    n_classes = int(labels.max()) + 1
    rng = np.random.default_rng(np.random.SeedSequence([seed, 4242]))
    if val is None:
        perm = rng.permutation(len(labels))
        n_val = int(round(len(labels) * val_fraction))
        val = (features[perm[:n_val]], labels[perm[:n_val]])
        features, labels = features[perm[n_val:]], labels[perm[n_val:]]
    head = ProbeHead.initialize(features.shape[1], features.shape[2], hidden, n_classes, rng)
    params = head.params()
    opt = AdamW(params)
    best, best_score, stale = head, -np.inf, 0
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            leaves = as_tensors(params, requires_grad=True)
            loss = cross_entropy(_head_logits(leaves, features[idx]), labels[idx])
            table = de.backward(loss, wrt=leaves.values())
            params = opt.step(params, {k: table[id(t)] for k, t in leaves.items()}, lr, weight_decay)
        current = ProbeHead(**params)
        if len(val[1]):
            score = balanced_accuracy(current.predict(val[0]), val[1])
        else:
            score = balanced_accuracy(current.predict(features), labels)
        if score > best_score:
            best, best_score, stale = current, score, 0
        else:
            stale += 1
            if stale >= patience:
                break
    return best


def linear_probe(state: ModelState, train_samples, train_labels, test_samples, test_labels, *,
                 epochs: int = 100, lr: float = 1e-3, hidden: int = 16, seed: int = 0,
                 include_global: bool = False) -> tuple:
    """Extract frozen features, fit a head, report test metrics.

    Returns ``(head, MetricReport)``. Raises if the encoder changed.
    """
    before = param_checksum(state.encoder_params())
    f_train = extract_features(train_samples, state, include_global=include_global)
    f_test = extract_features(test_samples, state, include_global=include_global)
    head = train_probe(f_train, train_labels, epochs, lr, hidden=hidden, seed=seed)
    if param_checksum(state.encoder_params()) != before:
        raise RuntimeError("encoder parameters changed during probing")
    logits = head.logits(f_test)
    scores = _softmax(logits)[:, 1] if head.n_classes == 2 else None
    return head, metrics(logits.argmax(1), test_labels, scores)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class MetricReport:
    balanced_accuracy: float
    kappa: float
    f1_weighted: float
    auroc: float | None
    confusion: list
    classes: list

    def as_dict(self) -> dict:
        return asdict(self)


def confusion_matrix(pred, labels, classes=None) -> tuple:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if classes is None:
        classes = np.union1d(labels, pred)
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(labels, pred):
        cm[pos[t], pos[p]] += 1
    return cm, np.asarray(classes)


def balanced_accuracy(pred, labels) -> float:
    """Mean recall over the classes present in ``labels``."""
    cm, _ = confusion_matrix(pred, labels)
    support = cm.sum(axis=1)
    present = support > 0
    return float(np.mean(np.diag(cm)[present] / support[present]))


def cohen_kappa(pred, labels) -> float:
    cm, _ = confusion_matrix(pred, labels)
    n = cm.sum()
    p_o = np.trace(cm) / n
    p_e = float((cm.sum(axis=0) * cm.sum(axis=1)).sum()) / (n * n)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def f1_weighted(pred, labels) -> float:
    cm, _ = confusion_matrix(pred, labels)
    tp = np.diag(cm).astype(float)
    pred_tot, true_tot = cm.sum(axis=0), cm.sum(axis=1)
    denom = pred_tot + true_tot
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float((f1 * true_tot).sum() / true_tot.sum())


def auroc(scores, labels) -> float:
    """Rank-statistic AUROC for binary labels; ties get midranks."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size != 2:
        raise ValueError("AUROC is defined here for exactly two classes")
    positive = labels == classes[1]
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    n_pos, n_neg = positive.sum(), (~positive).sum()
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metrics(pred, labels, scores=None) -> MetricReport:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    auc = None
    if scores is not None:
        if np.unique(labels).size > 2:
            raise ValueError("AUROC requested for more than two classes")
        auc = auroc(scores, labels)
    cm, classes = confusion_matrix(pred, labels)
    return MetricReport(balanced_accuracy(pred, labels), cohen_kappa(pred, labels), f1_weighted(pred, labels),
                        auc, cm.tolist(), classes.tolist())
