"""Frozen-feature evaluation: weighted k-NN on l2-normalized backbone embeddings."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from . import tensor as T
from .policy import apply_crops, center_crops


@dataclass
class EmbeddingBank:
    features: np.ndarray  # (n, d), unit rows
    labels: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def make_bank(features: np.ndarray, labels: np.ndarray, num_classes: int = None) -> EmbeddingBank:
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("labels outside the class range")
    return EmbeddingBank(normalize_rows(features), labels, num_classes)


def extract_embeddings(network, images: np.ndarray, labels: np.ndarray, size: int,
                       num_classes: int = None, crop_ratio: float = 1.0,
                       batch_size: int = 256) -> EmbeddingBank:
    """Resize + center-crop every image to ``size`` and embed it with the backbone."""
    if len(images) == 0:
        raise ValueError("cannot embed an empty dataset")
    feats = []
    crops = center_crops(1, images.shape[-1], crop_ratio)
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            chunk = images[lo:lo + batch_size]
            x = apply_crops(chunk, np.repeat(crops, len(chunk), axis=0), size)
            feats.append(network.embed(T.Tensor(x)).data.astype(np.float64))
    return make_bank(np.concatenate(feats), labels, num_classes)


def knn_predict(train: EmbeddingBank, test: EmbeddingBank, k: int, temperature: float = 0.07) -> np.ndarray:
    if k <= 0:
        raise ValueError("k must be positive")
    if k > len(train):
        raise ValueError(f"k={k} exceeds the training bank size {len(train)}")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    sims = test.features @ train.features.T
    # stable sort so equal similarities fall back to the lower training index
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top_sims = np.take_along_axis(sims, top, axis=1)
    weights = np.exp(top_sims / temperature)
    votes = np.zeros((len(test), train.num_classes))
    rows = np.repeat(np.arange(len(test)), k)
    np.add.at(votes, (rows, train.labels[top].ravel()), weights.ravel())
    return np.argmax(votes, axis=1)


def knn_classify(train: EmbeddingBank, test: EmbeddingBank, k: int, temperature: float = 0.07) -> float:
    """Top-1 accuracy of temperature-weighted k-NN voting."""
    pred = knn_predict(train, test, k, temperature)
    return float(np.mean(pred == test.labels))


def knn_sweep(train: EmbeddingBank, test: EmbeddingBank, ks: Iterable[int] = (5, 10, 20),
              temperature: float = 0.07) -> dict:
    per_k = {int(k): knn_classify(train, test, int(k), temperature) for k in ks if k <= len(train)}
    if not per_k:
        raise ValueError("no k fits the training bank")
    best_k = max(per_k, key=lambda k: (per_k[k], -k))
    return {"per_k": per_k, "best_k": best_k, "best": per_k[best_k]}


def linear_probe(train: EmbeddingBank, test: EmbeddingBank, c: float = 1.0) -> float:
    """Logistic regression on frozen features (needs scikit-learn)."""
    from sklearn.linear_model import LogisticRegression

    clf = LogisticRegression(C=c, max_iter=2000)
    clf.fit(train.features, train.labels)
    return float(clf.score(test.features, test.labels))


def write_report(path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    serial = json.loads(json.dumps(report, default=_jsonable))
    path.write_text(json.dumps(serial, indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def compare_reports(paths: Sequence) -> List[Dict]:
    """One row per report: name, best k, best accuracy, and every per-k accuracy."""
    rows = []
    for p in paths:
        rep = json.loads(Path(p).read_text())
        knn = rep.get("knn", rep)
        row = {"run": rep.get("name", Path(p).parent.name or Path(p).stem),
               "best_k": knn["best_k"], "knn_best": knn["best"]}
        for k, acc in sorted(knn["per_k"].items(), key=lambda kv: int(kv[0])):
            row[f"knn@{k}"] = acc
        if "linear" in rep:
            row["linear"] = rep["linear"]
        rows.append(row)
    return rows
