"""Edit accuracy, Inception Score and per-attribute Frechet distance.

Translations follow the attribute-reversal protocol: every test image is
edited once per attribute, flipping that attribute (hair colours switch off
their siblings when switched on). Expression datasets instead translate to
each expression class.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .domain import ContractError, reverse_attribute, set_expression, to_one_hot

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("method", "lambda_sc", "attribute", "accuracy", "ssfid", "is_mean", "is_std")

Translator = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


# --------------------------------------------------------------------------
# external attribute classifier

class AttributeClassifier(nn.Module):
    """Small multi-label CNN. ``forward`` returns per-attribute probabilities."""

    def __init__(self, names: Sequence[str], resolution: int, widths: Sequence[int] = (32, 64, 128)):
        super().__init__()
        self.names = list(names)
        self.resolution = resolution
        self.widths = tuple(widths)
        layers, c = [], 3
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, 2, 1), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
                       nn.Conv2d(w, w, 3, 1, 1), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            c = w
        self.body = nn.Sequential(*layers)
        self.fc = nn.Linear(c, len(self.names))
        self.heldout_accuracy: dict[str, float] = {}

    def features(self, x):
        return self.body(x).mean(dim=(2, 3))

    def logits(self, x):
        return self.fc(self.features(x))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def train_attribute_classifier(images: torch.Tensor, labels: torch.Tensor, names: Sequence[str],
                               heldout: tuple[torch.Tensor, torch.Tensor] | None = None,
                               epochs: int = 15, batch_size: int = 64, lr: float = 1e-3,
                               seed: int = 0) -> AttributeClassifier:
    """Fit the evaluation classifier; held-out per-attribute accuracy is stored on it.

    Without an explicit ``heldout`` pair, the last 10% of the inputs are held out.
    """
    if len(images) == 0:
        raise ContractError("cannot train a classifier on an empty dataset")
    labels = labels.float()
    if heldout is None:
        n_hold = max(1, len(images) // 10) if len(images) > 1 else 0
        heldout = (images[len(images) - n_hold:], labels[len(images) - n_hold:])
        images, labels = images[:len(images) - n_hold], labels[:len(labels) - n_hold]
    constant = [n for n, col in zip(names, labels.T) if bool((col == col[0]).all())]
    if constant:
        warnings.warn(f"attributes with a single class in the training set: {constant}", stacklevel=2)
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = AttributeClassifier(names, images.shape[-1])
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    net.train()
    for _ in range(epochs):
        perm = torch.randperm(len(images), generator=gen)
        for i in range(0, len(images), batch_size):
            idx = perm[i:i + batch_size]
            if len(idx) < 2:
                continue
            loss = F.binary_cross_entropy_with_logits(net.logits(images[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    net.eval()
    if len(heldout[0]):
        acc = attribute_accuracy(net, *heldout)
        net.heldout_accuracy = dict(zip(net.names, acc.tolist()))
        log.info("classifier held-out accuracy %s", net.heldout_accuracy)
    return net


@torch.no_grad()
def predict(classifier: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    classifier.eval()
    return torch.cat([classifier(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def attribute_accuracy(classifier: nn.Module, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    pred = predict(classifier, images) > 0.5
    return (pred == (labels > 0.5)).float().mean(dim=0)


def save_classifier(net: AttributeClassifier, path: str | Path) -> None:
    torch.save({"names": net.names, "resolution": net.resolution, "widths": list(net.widths),
                "heldout_accuracy": net.heldout_accuracy, "state_dict": net.state_dict()}, path)


def load_classifier(path: str | Path) -> AttributeClassifier:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    net = AttributeClassifier(ckpt["names"], ckpt["resolution"], ckpt["widths"])
    net.load_state_dict(ckpt["state_dict"])
    net.heldout_accuracy = ckpt["heldout_accuracy"]
    return net.eval()


# --------------------------------------------------------------------------
# embedders for the Frechet distance

class RandomProjectionEmbedder(nn.Module):
    """Fixed, seeded random convolutional features followed by global pooling."""

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.convs = nn.ModuleList([nn.Conv2d(3, 32, 3, 2, 1), nn.Conv2d(32, dim, 3, 2, 1)])
        for conv in self.convs:
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu", generator=gen)
            nn.init.zeros_(conv.bias)
        self.requires_grad_(False)

    def forward(self, x):
        for conv in self.convs:
            x = F.relu(conv(x))
        return x.mean(dim=(2, 3))


class ClassifierEmbedder(nn.Module):
    """Penultimate-layer features of an attribute classifier."""

    def __init__(self, classifier: AttributeClassifier):
        super().__init__()
        self.classifier = classifier

    def forward(self, x):
        return self.classifier.features(x)


def make_embedder(kind: str, classifier: AttributeClassifier | None = None, seed: int = 0) -> nn.Module:
    if kind == "random":
        return RandomProjectionEmbedder(seed=seed).eval()
    if kind == "classifier":
        if classifier is None:
            raise ContractError("classifier embedder needs a classifier")
        return ClassifierEmbedder(classifier).eval()
    raise ContractError(f"unknown embedder {kind!r}")


@torch.no_grad()
def embed(embedder: nn.Module, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    embedder.eval()
    out = [embedder(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return torch.cat(out).double().numpy()


# --------------------------------------------------------------------------
# metrics

def _symmetric_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(real: np.ndarray, fake: np.ndarray, jitter: float = 1e-6) -> float:
    """Frechet distance between Gaussians fitted to two embedding sets.

    ``||mu_r - mu_f||^2 + Tr(S_r + S_f - 2 (S_r S_f)^{1/2})``, with the cross
    term evaluated as ``Tr((S_r^{1/2} S_f S_r^{1/2})^{1/2})``.
    """
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.ndim == 1:
        real = real[:, None]
    if fake.ndim == 1:
        fake = fake[:, None]
    if real.shape[1] != fake.shape[1]:
        raise ContractError(f"embedding dimension mismatch: {real.shape[1]} vs {fake.shape[1]}")
    if len(real) < 2 or len(fake) < 2:
        raise ContractError("frechet_distance needs at least two samples per set")
    if not (np.isfinite(real).all() and np.isfinite(fake).all()):
        raise ContractError("frechet_distance got non-finite embeddings")
    mu_r, mu_f = real.mean(0), fake.mean(0)
    cov_r = np.atleast_2d(np.cov(real, rowvar=False))
    cov_f = np.atleast_2d(np.cov(fake, rowvar=False))
    scale = max(np.trace(cov_r), np.trace(cov_f), 1.0) / len(cov_r)
    if min(np.linalg.eigvalsh(cov_r)[0], np.linalg.eigvalsh(cov_f)[0]) < jitter * scale:
        offset = jitter * scale * np.eye(len(cov_r))
        cov_r, cov_f = cov_r + offset, cov_f + offset
    root_r = _symmetric_sqrt(cov_r)
    cross = np.linalg.eigvalsh(root_r @ cov_f @ root_r)
    tr_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    value = float(((mu_r - mu_f) ** 2).sum() + np.trace(cov_r) + np.trace(cov_f) - 2.0 * tr_cross)
    if not math.isfinite(value):
        raise ContractError("frechet_distance produced a non-finite value")
    return max(value, 0.0)


def inception_score_from_probs(probs, n_splits: int = 10, seed: int = 0, shuffle: bool = True):
    """``exp(E_x KL(p(y|x) || p(y)))`` per split; returns ``(mean, std)`` over splits."""
    p = np.asarray(probs, dtype=np.float64)
    if len(p) < n_splits:
        raise ContractError(f"need at least {n_splits} images for {n_splits} splits, got {len(p)}")
    if shuffle:
        p = p[np.random.default_rng(seed).permutation(len(p))]
    scores = []
    for part in np.array_split(p, n_splits):
        marginal = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0).sum(axis=1)
        scores.append(math.exp(kl.mean()))
    return float(np.mean(scores)), float(np.std(scores))


@torch.no_grad()
def inception_score(images: torch.Tensor, classifier: AttributeClassifier, n_splits: int = 10,
                    seed: int = 0, batch_size: int = 256):
    """IS of ``images`` under the softmax of the classifier's attribute logits."""
    classifier.eval()
    logits = torch.cat([classifier.logits(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
    probs = torch.softmax(logits.double(), dim=1).numpy()
    return inception_score_from_probs(probs, n_splits, seed)


def target_labels(y_src: torch.Tensor, k: int, protocol: str, groups=()) -> torch.Tensor:
    if protocol == "reverse":
        return reverse_attribute(y_src, k, groups)
    if protocol == "expression":
        return set_expression(y_src, k)
    raise ContractError(f"unknown edit protocol {protocol!r}")


@torch.no_grad()
def translate(G: Translator, images: torch.Tensor, y_diff: torch.Tensor, batch_size: int = 128) -> torch.Tensor:
    was_training = getattr(G, "training", False)
    if hasattr(G, "eval"):
        G.eval()
    out = torch.cat([G(images[i:i + batch_size], y_diff[i:i + batch_size])
                     for i in range(0, len(images), batch_size)])
    if was_training:
        G.train()
    return out


def translations(G: Translator, images, labels, protocol="reverse", groups=()):
    """Yield ``(k, y_trg, translated images)`` for each attribute edit."""
    labels = labels.float()
    for k in range(labels.shape[1]):
        y_trg = target_labels(labels, k, protocol, groups)
        yield k, y_trg, translate(G, images, y_trg - labels)


def edit_accuracy(G: Translator, images: torch.Tensor, labels: torch.Tensor, classifier: AttributeClassifier,
                  protocol: str = "reverse", groups=(), names: Sequence[str] | None = None) -> dict:
    """Fraction of edits whose classifier prediction for the edited attribute matches the target."""
    res = getattr(classifier, "resolution", None)
    if res is not None and images.shape[-1] != res:
        raise ContractError(f"classifier resolution {res} does not match images {images.shape[-1]}")
    names = list(names or getattr(classifier, "names", range(labels.shape[1])))
    per = {}
    for k, y_trg, out in translations(G, images, labels, protocol, groups):
        pred = predict(classifier, out)[:, k] > 0.5
        per[str(names[k])] = float((pred == (y_trg[:, k] > 0.5)).float().mean())
    return {"per_attribute": per, "mean": float(np.mean(list(per.values())))}


def ssfid_protocol(G: Translator, images: torch.Tensor, labels: torch.Tensor, embedder: nn.Module,
                   protocol: str = "reverse", groups=(), names: Sequence[str] | None = None) -> dict:
    """Average over attribute edits of the Frechet distance to the real images."""
    names = list(names or range(labels.shape[1]))
    real = embed(embedder, images)
    per = {}
    for k, _, out in translations(G, images, labels, protocol, groups):
        per[str(names[k])] = frechet_distance(real, embed(embedder, out))
    return {"per_attribute": per, "mean": float(np.mean(list(per.values())))}


def evaluate(G: Translator, images, labels, classifier, embedder, names, method="secgan", lambda_sc=float("nan"),
             protocol="reverse", groups=(), n_splits=10, seed=0) -> dict:
    """Full metric suite over one test set: edit accuracy, ssFID stand-in and IS."""
    acc = edit_accuracy(G, images, labels, classifier, protocol, groups, names)
    real = embed(embedder, images)
    fid, pool = {}, []
    for k, _, out in translations(G, images, labels, protocol, groups):
        fid[str(names[k])] = frechet_distance(real, embed(embedder, out))
        pool.append(out)
    is_mean, is_std = inception_score(torch.cat(pool), classifier, n_splits, seed)
    return {
        "method": method, "lambda_sc": lambda_sc,
        "accuracy": acc["per_attribute"], "accuracy_mean": acc["mean"],
        "ssfid": fid, "ssfid_mean": float(np.mean(list(fid.values()))),
        "is_mean": is_mean, "is_std": is_std,
    }


def make_translator(G: nn.Module, parser: nn.Module | None = None, concat: bool = False) -> Translator:
    """Wrap a generator as ``(x, y_diff) -> x_out``, appending the parsed mask for concat models."""
    if not concat:
        return G

    class _Concat(nn.Module):
        def __init__(self):
            super().__init__()
            self.G, self.parser = G, parser

        def forward(self, x, y_diff):
            return self.G(torch.cat([x, to_one_hot(self.parser(x))], dim=1), y_diff)

    return _Concat()


# --------------------------------------------------------------------------
# reports

def accuracy_breakdown_report(results: Mapping[str, Mapping]) -> dict:
    """Per-method, per-attribute accuracy table plus bar-chart data.

    ``results`` maps a method name to an ``edit_accuracy``-style dict (or a
    full evaluation dict with an ``accuracy`` entry).
    """
    methods = list(results)
    per = {m: dict(r.get("per_attribute", r.get("accuracy"))) for m, r in results.items()}
    attributes = list(per[methods[0]]) if methods else []
    table = [[per[m][a] for a in attributes] for m in methods]
    means = {m: float(np.mean(row)) for m, row in zip(methods, table)}
    return {
        "methods": methods, "attributes": attributes, "table": table, "means": means,
        "bars": [{"method": m, "attribute": a, "accuracy": per[m][a]} for m in methods for a in attributes],
    }


def report_rows(result: Mapping) -> list[dict]:
    rows = [
        {"method": result["method"], "lambda_sc": result["lambda_sc"], "attribute": a,
         "accuracy": acc, "ssfid": result["ssfid"][a], "is_mean": "", "is_std": ""}
        for a, acc in result["accuracy"].items()
    ]
    rows.append({"method": result["method"], "lambda_sc": result["lambda_sc"], "attribute": "mean",
                 "accuracy": result["accuracy_mean"], "ssfid": result["ssfid_mean"],
                 "is_mean": result["is_mean"], "is_std": result["is_std"]})
    return rows


def write_report(result: Mapping, out_dir: str | Path, key: str, extra: Mapping | None = None) -> tuple[Path, Path]:
    """Write ``report_<key>.csv`` and ``summary_<key>.json``; never overwrites another key's files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"report_{key}.csv", out / f"summary_{key}.json"
    with csv_path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in report_rows(result):
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    json_path.write_text(json.dumps({"key": key, **(extra or {}), **result}, indent=2, sort_keys=True))
    return csv_path, json_path


def read_report(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in REPORT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ContractError(f"{path}: report is missing column {missing[0]!r}")
        return list(reader)


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """``[B, 3, H, W]`` in [-1, 1] -> ``[B, H, W, 3]`` uint8."""
    x = ((images.detach().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return x.permute(0, 2, 3, 1).numpy()


def save_image_grid(rows: Sequence[torch.Tensor], path: str | Path) -> None:
    grid = np.concatenate([np.concatenate(list(to_uint8(r)), axis=1) for r in rows], axis=0)
    Image.fromarray(grid).save(path)
