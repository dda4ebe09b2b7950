"""Linear decoding of the negation indicator from residual-stream states.

States are taken at the last token of Y in both prompts of an entry. Per
layer and snapshot point, the pipeline reduces them to two dimensions with
PCA, fits a Fisher LDA direction, keeps the single direction with the best
training accuracy across all layers, and then measures how well a 1-D
threshold on that direction separates the classes at every layer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import corpus
from .errors import DataError
from .model.tokenizer import Tokenizer
from .model.transformer import POINTS, TraceRequest, Transformer
from .parallel import ordered_map
from .reporting import csv_text, line_svg

LDA_RIDGE = 1e-4
DEFAULT_FOLDS = 10

Key = tuple  # (0-based layer, point)


@dataclass(frozen=True)
class PCA:
    mean: np.ndarray  # [d]
    basis: np.ndarray  # [d, k], orthonormal columns
    variance: np.ndarray  # [k] eigenvalues, descending
    total_variance: float

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.basis

    def reconstruct(self, z) -> np.ndarray:
        return z @ self.basis.T + self.mean

    @property
    def explained_ratio(self) -> np.ndarray:
        if self.total_variance == 0:
            return np.zeros_like(self.variance)
        return self.variance / self.total_variance


def pca_fit(x, k: int = 2) -> PCA:
    """Top-``k`` eigenvectors of the centered covariance.

    Each component's sign is fixed so its largest-magnitude entry is
    positive, which keeps fits reproducible.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("PCA needs at least two samples")
    if not 1 <= k <= x.shape[1]:
        raise ValueError(f"k={k} out of range for dimension {x.shape[1]}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:k]
    basis = vecs[:, order]
    flip = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(k)])
    basis = basis * np.where(flip == 0, 1.0, flip)
    return PCA(mean, basis, np.clip(vals[order], 0.0, None), float(np.clip(vals, 0.0, None).sum()))


@dataclass(frozen=True)
class LDA:
    w: np.ndarray  # unit vector
    threshold: float

    def score(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) @ self.w

    def predict(self, z) -> np.ndarray:
        return (self.score(z) > self.threshold).astype(int)

    def accuracy(self, z, labels) -> float:
        return float(np.mean(self.predict(z) == np.asarray(labels)))


def lda_fit(z, labels) -> LDA:
    """Fisher discriminant for labels {0, 1}; class 1 scores above the threshold.

    The pooled within-class scatter gets a ridge of 1e-4 times its mean
    eigenvalue, and the threshold is the midpoint of the projected class
    means.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    labels = np.asarray(labels)
    c0, c1 = z[labels == 0], z[labels == 1]
    if len(c0) < 2 or len(c1) < 2:
        raise DataError("LDA needs at least two samples per class")
    m0, m1 = c0.mean(axis=0), c1.mean(axis=0)
    sw = (c0 - m0).T @ (c0 - m0) + (c1 - m1).T @ (c1 - m1)
    dim = z.shape[1]
    lam = LDA_RIDGE * np.trace(sw) / dim
    if lam <= 0:
        lam = 1e-12
    w = np.linalg.solve(sw + lam * np.eye(dim), m1 - m0)
    norm = np.linalg.norm(w)
    if norm == 0:
        w = np.zeros(dim)
        w[0] = 1.0
    else:
        w = w / norm
    return LDA(w, float(w @ (m0 + m1) / 2))


@dataclass(frozen=True)
class DirectionModel:
    """A separating direction in residual space taken from one (layer, point)."""

    layer: int
    point: str
    mean: np.ndarray
    basis: np.ndarray
    w2: np.ndarray  # LDA direction inside the PCA plane
    threshold: float
    train_accuracy: float

    @property
    def direction(self) -> np.ndarray:
        return self.basis @ self.w2


def fit_direction(hp: np.ndarray, hm: np.ndarray, key: Key) -> DirectionModel:
    x = np.vstack([hp, hm]).astype(np.float64)
    y = np.r_[np.zeros(len(hp), int), np.ones(len(hm), int)]
    pca = pca_fit(x, 2)
    z = pca.transform(x)
    lda = lda_fit(z, y)
    return DirectionModel(key[0], key[1], pca.mean, pca.basis, lda.w, lda.threshold, lda.accuracy(z, y))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairStates:
    """Rows ``n`` of ``plus[key]`` and ``minus[key]`` both come from entry ``n``."""

    keys: tuple
    plus: dict
    minus: dict

    @property
    def n(self) -> int:
        return len(next(iter(self.plus.values())))

    def swapped(self, mask) -> "PairStates":
        """Exchange the plus/minus rows of the entries where ``mask`` is True."""
        mask = np.asarray(mask, dtype=bool)[:, None]
        plus = {k: np.where(mask, self.minus[k], self.plus[k]) for k in self.keys}
        minus = {k: np.where(mask, self.plus[k], self.minus[k]) for k in self.keys}
        return PairStates(self.keys, plus, minus)


def collect_pair_states(
    entries: Sequence[corpus.DatasetEntry],
    model: Transformer,
    tokenizer: Tokenizer,
    points: Sequence[str] = POINTS,
    workers: int = 1,
) -> PairStates:
    """Residual snapshots at the last token of Y in P+ and P-."""
    L = model.config.n_layers
    keys = tuple((i, pt) for i in range(L) for pt in points)

    def one(e):
        pos_p, pos_m = corpus.locate_y_span(e, tokenizer)
        out = []
        for text, pos in ((e.p_plus, pos_p), (e.p_minus, pos_m)):
            req = TraceRequest(ao=(), mo=(), ap=(), residual=keys, positions=(pos,))
            _, rec = model.forward(corpus.prompt_ids(text, tokenizer), req)
            out.append({k: rec.resid[k][0] for k in keys})
        return out

    per = ordered_map(one, entries, workers)
    plus = {k: np.stack([p[0][k] for p in per]) for k in keys}
    minus = {k: np.stack([p[1][k] for p in per]) for k in keys}
    return PairStates(keys, plus, minus)


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    if folds < 2:
        raise ValueError("need at least two folds")
    if n < folds:
        raise DataError(f"{n} entries cannot fill {folds} folds")
    if n == folds:
        raise DataError("folds equal to the entry count would be leave-one-out; use fewer folds")
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, folds)


@dataclass(frozen=True)
class CVReport:
    keys: tuple
    accuracy: dict  # key -> mean test accuracy
    fold_accuracy: dict  # key -> per-fold test accuracies
    chosen: tuple  # best-train key per fold
    folds: int

    @property
    def best_direction(self) -> Key:
        """Most frequently chosen direction source; the earliest key wins ties."""
        counts = {k: self.chosen.count(k) for k in self.keys}
        top = max(counts.values())
        return next(k for k in self.keys if counts[k] == top)

    def peak(self, point: str | None = None) -> tuple[Key, float]:
        ks = [k for k in self.keys if point is None or k[1] == point]
        best = max(ks, key=lambda k: (self.accuracy[k], -self.keys.index(k)))
        return best, self.accuracy[best]

    def rows(self) -> list[list]:
        return [[k[0] + 1, k[1], self.accuracy[k]] for k in self.keys]

    def to_csv(self, chash: str | None = None) -> str:
        return csv_text(["layer", "point", "mean_accuracy"], self.rows(), chash)

    def to_svg(self, chash: str | None = None) -> str:
        points = sorted({k[1] for k in self.keys}, key=lambda p: POINTS.index(p) if p in POINTS else 99)
        series = {pt: [(k[0] + 1, self.accuracy[k]) for k in self.keys if k[1] == pt] for pt in points}
        return line_svg(series, "cross-validated decoding accuracy", "layer", "accuracy", chash)

    def summary(self) -> dict:
        (bl, bp), acc = self.peak()
        dl, dp = self.best_direction
        return {
            "folds": self.folds,
            "peak_layer": bl + 1,
            "peak_point": bp,
            "peak_accuracy": acc,
            "direction_layer": dl + 1,
            "direction_point": dp,
        }


def decode_not_states(states: PairStates, folds: int = DEFAULT_FOLDS, seed: int = 0) -> CVReport:
    """Cross-validated pipeline on pre-collected paired states."""
    n = states.n
    splits = fold_indices(n, folds, seed)
    keys = states.keys
    fold_acc = {k: [] for k in keys}
    chosen = []
    for f, test in enumerate(splits):
        train = np.sort(np.concatenate([s for g, s in enumerate(splits) if g != f]))
        test = np.sort(test)
        fits = [fit_direction(states.plus[k][train], states.minus[k][train], k) for k in keys]
        best = max(range(len(keys)), key=lambda j: (fits[j].train_accuracy, -j))
        u = fits[best].direction
        chosen.append(keys[best])
        y_tr = np.r_[np.zeros(len(train), int), np.ones(len(train), int)]
        y_te = np.r_[np.zeros(len(test), int), np.ones(len(test), int)]
        for k in keys:
            hp = states.plus[k].astype(np.float64)
            hm = states.minus[k].astype(np.float64)
            s_tr = np.r_[hp[train] @ u, hm[train] @ u]
            s_te = np.r_[hp[test] @ u, hm[test] @ u]
            clf = lda_fit(s_tr, y_tr)
            fold_acc[k].append(clf.accuracy(s_te[:, None], y_te))
    return CVReport(
        keys,
        {k: float(np.mean(v)) for k, v in fold_acc.items()},
        {k: tuple(v) for k, v in fold_acc.items()},
        tuple(chosen),
        folds,
    )


def decode_not_pipeline(
    entries,
    model: Transformer,
    tokenizer: Tokenizer,
    folds: int = DEFAULT_FOLDS,
    seed: int = 0,
    points: Sequence[str] = POINTS,
    workers: int = 1,
) -> CVReport:
    states = collect_pair_states(entries, model, tokenizer, points, workers)
    return decode_not_states(states, folds, seed)


def planted_states(
    n: int,
    n_layers: int,
    d: int,
    planted_layer: int,
    point: str = "mid",
    separation: float = 8.0,
    noise: float = 1.0,
    seed: int = 0,
    points: Sequence[str] = POINTS,
) -> PairStates:
    """Synthetic paired states where only ``(planted_layer, point)`` carries the class.

    Every snapshot shares a per-entry Gaussian background; at the planted
    snapshot the negative member is shifted along one fixed unit direction.
    """
    rng = np.random.default_rng(seed)
    keys = tuple((i, pt) for i in range(n_layers) for pt in points)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    plus, minus = {}, {}
    for k in keys:
        base = rng.standard_normal((n, d)) * noise
        hp = base + rng.standard_normal((n, d)) * noise * 0.5
        hm = base + rng.standard_normal((n, d)) * noise * 0.5
        if k == (planted_layer, point):
            hm = hm + separation * direction
        plus[k], minus[k] = hp.astype(np.float32), hm.astype(np.float32)
    return PairStates(keys, plus, minus)
