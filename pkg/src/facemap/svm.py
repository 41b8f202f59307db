"""Linear SVM via dual coordinate descent, one-vs-rest training, scoring.

Solves min_w 0.5 ||w||^2 + C sum_i max(0, 1 - y_i w^T x_i) through its box-
constrained dual, visiting coordinates in a seeded random permutation each
epoch and stopping when the largest projected-gradient violation drops
below ``tol``. The bias is an augmented, regularized constant-1 feature.

When there are far fewer samples than features the solver maintains the
Gram matrix and a full gradient vector instead of w, which makes each
coordinate update O(n) instead of O(D); the iterates are identical up to
rounding. Multiclass is one binary model per expression against the rest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, SingleClass
from .scan import EXPRESSIONS
from .tensor import read_tensor, write_tensor

DEFAULT_C = 1.0
DEFAULT_TOL = 1e-4
DEFAULT_MAX_EPOCHS = 1000


@dataclass
class LinearModel:
    w: np.ndarray
    bias: float
    positive_label: object
    map_kind: str = ""


@dataclass
class SolverResult:
    w: np.ndarray                 # solution in the (possibly augmented) space
    alpha: np.ndarray             # dual variables, 0 <= alpha <= C
    epochs: int
    final_violation: float
    objective_trace: list = field(default_factory=list)  # (primal, dual) per epoch


def primal_objective(X, y, w, C):
    margins = 1.0 - y * (X @ w)
    return 0.5 * float(w @ w) + C * float(np.maximum(margins, 0.0).sum())


def dual_objective(alpha, w):
    return 0.5 * float(w @ w) - float(alpha.sum())


def duality_gap(X, y, w, alpha, C):
    """Relative primal-dual gap of a solver state."""
    p = primal_objective(X, y, w, C)
    d = dual_objective(alpha, w)
    return (p + d) / max(abs(p), 1e-300)


def dual_coordinate_descent(X, y, C=DEFAULT_C, tol=DEFAULT_TOL,
                            max_epochs=DEFAULT_MAX_EPOCHS, seed=0,
                            record_objectives=False) -> SolverResult:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    if y.shape != (n,):
        raise DimMismatch(f"labels shape {y.shape}, expected ({n},)")
    use_gram = n <= 4096 and n * 8 <= d  # gradient updates O(n) beat O(d)
    alpha = np.zeros(n)
    w = np.zeros(d)
    q = np.einsum("ij,ij->i", X, X)
    if use_gram:
        yky = (X @ X.T) * np.outer(y, y)
        grad = -np.ones(n)  # grad_i = y_i x_i . w - 1, maintained incrementally
    rng = np.random.default_rng(seed)
    trace = []
    epochs = 0
    violation = np.inf
    for epoch in range(max_epochs):
        epochs = epoch + 1
        violation = 0.0
        for i in rng.permutation(n):
            if q[i] <= 0.0:
                # zero sample: hinge is constant, dual optimum sits at C
                alpha[i] = C
                continue
            g = grad[i] if use_gram else y[i] * (X[i] @ w) - 1.0
            a = alpha[i]
            if a <= 0.0:
                pg = min(g, 0.0)
            elif a >= C:
                pg = max(g, 0.0)
            else:
                pg = g
            violation = max(violation, abs(pg))
            if pg == 0.0:
                continue
            new = min(max(a - g / q[i], 0.0), C)
            if new != a:
                if use_gram:
                    grad += (new - a) * yky[i]
                else:
                    w += (new - a) * y[i] * X[i]
                alpha[i] = new
        if record_objectives:
            w_now = X.T @ (alpha * y) if use_gram else w
            trace.append((primal_objective(X, y, w_now, C),
                          dual_objective(alpha, w_now)))
        if violation < tol:
            break
    if use_gram:
        w = X.T @ (alpha * y)
    return SolverResult(w=w, alpha=alpha, epochs=epochs,
                        final_violation=violation, objective_trace=trace)


def train(features, labels, C=DEFAULT_C, tol=DEFAULT_TOL,
          max_epochs=DEFAULT_MAX_EPOCHS, seed=0, fit_bias=True,
          positive_label=1, map_kind="") -> LinearModel:
    """Train one binary hinge-loss model; labels are +/-1."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DimMismatch(f"features must be (n, d), got {X.shape}")
    y = np.asarray(labels, dtype=np.float64)
    if not (np.any(y > 0) and np.any(y < 0)):
        raise SingleClass("training set has a single class")
    if fit_bias:
        X = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    res = dual_coordinate_descent(X, y, C=C, tol=tol,
                                  max_epochs=max_epochs, seed=seed)
    if fit_bias:
        return LinearModel(w=res.w[:-1], bias=float(res.w[-1]),
                           positive_label=positive_label, map_kind=map_kind)
    return LinearModel(w=res.w, bias=0.0,
                       positive_label=positive_label, map_kind=map_kind)


def train_one_vs_rest(features, labels, C=DEFAULT_C, tol=DEFAULT_TOL,
                      max_epochs=DEFAULT_MAX_EPOCHS, seed=0,
                      classes=EXPRESSIONS, map_kind="") -> list[LinearModel]:
    """One binary model per class in ``classes`` order, class vs rest."""
    labels = np.asarray(labels)
    for cls in classes:
        if not np.any(labels == cls):
            raise SingleClass(f"no samples for class {cls!r}")
    models = []
    for k, cls in enumerate(classes):
        y = np.where(labels == cls, 1.0, -1.0)
        models.append(train(features, y, C=C, tol=tol, max_epochs=max_epochs,
                            seed=seed + k, positive_label=cls,
                            map_kind=map_kind))
    return models


def score(models, features) -> np.ndarray:
    """Decision values, one row per sample and one column per model."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise DimMismatch(f"features must be (n, d), got {X.shape}")
    W = np.stack([m.w for m in models])
    if W.shape[1] != X.shape[1]:
        raise DimMismatch(
            f"feature dim {X.shape[1]} vs model dim {W.shape[1]}"
        )
    b = np.array([m.bias for m in models])
    return X @ W.T + b


def save_models(directory, models, map_kind: str) -> None:
    """One FTNSR1 tensor of length D+1 (w then bias) per class, plus a
    sidecar text manifest with the class order."""
    os.makedirs(directory, exist_ok=True)
    lines = [f"map {map_kind}", "classes " + " ".join(
        str(m.positive_label) for m in models)]
    for m in models:
        write_tensor(os.path.join(directory, f"{map_kind}.{m.positive_label}.svm.ftnsr"),
                     np.concatenate([m.w, [m.bias]]))
    with open(os.path.join(directory, f"{map_kind}.models.txt"), "w",
              encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_models(directory, map_kind: str) -> list[LinearModel]:
    sidecar = os.path.join(directory, f"{map_kind}.models.txt")
    with open(sidecar, "r", encoding="utf-8") as f:
        fields = dict(line.split(" ", 1) for line in f.read().splitlines() if line)
    classes = fields["classes"].split()
    models = []
    for cls in classes:
        vec = read_tensor(os.path.join(directory, f"{map_kind}.{cls}.svm.ftnsr"))
        models.append(LinearModel(w=vec[:-1], bias=float(vec[-1]),
                                  positive_label=cls, map_kind=map_kind))
    return models
