"""Top-1 accuracy, mean cross-entropy and cost of an evaluated submodel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import ElasticParams, SubmodelConfig, SubmodelView, build_submodel, forward, macs
from .data import Dataset


@dataclass
class Metrics:
    accuracy: float
    loss: float
    macs: int
    predictions: np.ndarray


def predict_logits(view: SubmodelView, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with nx.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward(view, x[i: i + batch_size]).data)
    return np.concatenate(out, axis=0)


def metrics_from_logits(logits: np.ndarray, y: np.ndarray, cost: int = 0) -> Metrics:
    y = np.asarray(y)
    logp = nx.log_softmax_np(np.asarray(logits, dtype=np.float64))
    pred = logp.argmax(axis=1)
    return Metrics(
        accuracy=float(np.mean(pred == y)),
        loss=float(-logp[np.arange(len(y)), y].mean()),
        macs=int(cost),
        predictions=pred,
    )


def evaluate(params: ElasticParams, cfg: SubmodelConfig, x: np.ndarray, y: np.ndarray,
             batch_size: int = 256) -> Metrics:
    view = build_submodel(params, cfg)
    return metrics_from_logits(predict_logits(view, x, batch_size), y, macs(cfg, params.spec))


def evaluate_split(params: ElasticParams, cfg: SubmodelConfig, dataset: Dataset, split: str = "val") -> Metrics:
    x, y = (dataset.val_x, dataset.val_y) if split == "val" else (dataset.train_x, dataset.train_y)
    return evaluate(params, cfg, x, y)


def mean_token_baseline(dataset: Dataset, steps: int = 500, lr: float = 0.5, l2: float = 1e-3) -> float:
    """Validation accuracy of softmax regression on the mean token.

    A reference point for task difficulty: it sees no positional structure.
    """
    def feats(x):
        f = x[:, 1:, :].mean(axis=1)
        return np.concatenate([f, np.ones((len(f), 1))], axis=1)

    X, y = feats(dataset.train_x), dataset.train_y
    mu, sd = X[:, :-1].mean(0), X[:, :-1].std(0) + 1e-12
    X[:, :-1] = (X[:, :-1] - mu) / sd
    C = dataset.num_classes
    W = np.zeros((X.shape[1], C))
    onehot = np.eye(C)[y]
    for _ in range(steps):
        p = np.exp(nx.log_softmax_np(X @ W))
        W -= lr * (X.T @ (p - onehot) / len(y) + l2 * W)
    Xv = feats(dataset.val_x)
    Xv[:, :-1] = (Xv[:, :-1] - mu) / sd
    return float(np.mean((Xv @ W).argmax(axis=1) == dataset.val_y))
