"""Subject-disjoint cross-validation, sum-rule score fusion, reporting.

Two protocols over the manifest's level-3/4 scans: protocol I redraws the
subject subset every round, protocol II draws it once and keeps it fixed
(each round still gets a fresh 10-way partition). Within a fold, one-vs-
rest SVMs are trained per attribute map on the training subjects, test
scores are fused by plain elementwise summation over nested map sets, and
predictions are the per-row argmax (ties: lowest expression index).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, InsufficientSubjects
from .scan import EXPRESSIONS
from .svm import score, train_one_vs_rest

ELIGIBLE_INTENSITIES = (3, 4)
N_FOLDS = 10

# nested fusion sets reported alongside the six single maps
FUSION_SETS = {
    "n": ("nx", "ny", "nz"),
    "g+n": ("geom", "nx", "ny", "nz"),
    "g+n+c": ("geom", "nx", "ny", "nz", "si"),
    "g+n+c+t": ("geom", "nx", "ny", "nz", "si", "tex"),
}
FULL_FUSION = "g+n+c+t"


@dataclass(frozen=True)
class Fold:
    train_subjects: tuple
    test_subjects: tuple


@dataclass
class FoldPlan:
    rounds: list[list[Fold]]
    seed: int
    protocol: str


@dataclass
class EvalReport:
    rows: list                      # (round, fold, name, accuracy) tuples
    mean_accuracy: dict             # name -> mean accuracy in percent
    confusion: np.ndarray           # (6, 6) row-normalized percentages
    per_round: list                 # full-fusion accuracy per round
    fusion_names: tuple


def eligible_rows(manifest_rows):
    """Manifest rows usable for the protocols: the six expressions at the
    two strongest intensity levels."""
    return [r for r in manifest_rows
            if r.expression in EXPRESSIONS and r.intensity in ELIGIBLE_INTENSITIES]


def make_folds(manifest_rows, protocol="II", rounds=1, seed=0,
               subject_count=60, n_folds=N_FOLDS,
               subject_pool="all") -> FoldPlan:
    """Build a subject-disjoint fold plan.

    Protocol I draws a fresh ``subject_count``-subject subset each round;
    protocol II draws it once and reuses it, re-partitioning every round.
    ``subject_pool='fixed'`` makes protocol I draw rounds from one initial
    subset instead of the whole manifest.
    """
    if protocol not in ("I", "II"):
        raise ValueError(f"protocol must be 'I' or 'II', got {protocol!r}")
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    subjects = sorted({r.subject_id for r in eligible_rows(manifest_rows)})
    if len(subjects) < subject_count:
        raise InsufficientSubjects(
            f"{len(subjects)} eligible subjects, need {subject_count}"
        )
    if subject_count < n_folds:
        raise InsufficientSubjects(
            f"cannot split {subject_count} subjects into {n_folds} folds"
        )
    rng = np.random.default_rng(seed)
    subjects = np.array(subjects)

    pool = subjects
    if protocol == "I" and subject_pool == "fixed":
        pool = rng.choice(subjects, size=subject_count, replace=False)
    fixed_subset = None
    if protocol == "II":
        fixed_subset = rng.choice(subjects, size=subject_count, replace=False)

    plan_rounds = []
    for _ in range(rounds):
        if protocol == "I":
            subset = rng.choice(pool, size=subject_count, replace=False)
        else:
            subset = fixed_subset
        order = rng.permutation(subset)
        chunks = np.array_split(order, n_folds)
        folds = []
        for k in range(n_folds):
            test = tuple(sorted(chunks[k].tolist()))
            train = tuple(sorted(np.concatenate(
                [chunks[j] for j in range(n_folds) if j != k]).tolist()))
            folds.append(Fold(train_subjects=train, test_subjects=test))
        plan_rounds.append(folds)
    return FoldPlan(rounds=plan_rounds, seed=seed, protocol=protocol)


def fuse_scores(per_map_scores) -> np.ndarray:
    """Sum-rule fusion: elementwise sum of equally shaped score matrices."""
    mats = [np.asarray(s, dtype=np.float64) for s in per_map_scores]
    if not mats:
        raise DimMismatch("no score matrices to fuse")
    for s in mats[1:]:
        if s.shape != mats[0].shape:
            raise DimMismatch(f"score shapes differ: {s.shape} vs {mats[0].shape}")
    return np.sum(mats, axis=0)


def _accuracy(pred, truth):
    return 100.0 * float(np.mean(pred == truth))


def evaluate(features_by_map, labels, subjects, plan: FoldPlan,
             C=1.0, tol=1e-4, max_epochs=1000, seed=0) -> EvalReport:
    """Run the full protocol over per-map feature matrices.

    ``features_by_map`` maps kind -> (n_samples, D) arrays sharing one
    sample order with ``labels`` and ``subjects``. Single-map accuracies
    are reported for every provided map; fusion columns are reported for
    each nested set whose maps are all present.
    """
    labels = np.asarray(labels)
    subjects = np.asarray(subjects)
    kinds = list(features_by_map)
    for kind in kinds:
        X = features_by_map[kind]
        if len(X) != len(labels):
            raise DimMismatch(
                f"map {kind}: {len(X)} feature rows for {len(labels)} labels"
            )
    fusions = {name: maps for name, maps in FUSION_SETS.items()
               if all(m in kinds for m in maps)}
    label_idx = {e: i for i, e in enumerate(EXPRESSIONS)}

    rows = []
    confusion = np.zeros((len(EXPRESSIONS), len(EXPRESSIONS)))
    per_round = []
    full_name = FULL_FUSION if FULL_FUSION in fusions else None

    for r, folds in enumerate(plan.rounds):
        round_accs = []
        for f, fold in enumerate(folds):
            train_set = set(fold.train_subjects)
            test_set = set(fold.test_subjects)
            assert not (train_set & test_set), "subject leakage in fold plan"
            tr = np.isin(subjects, fold.train_subjects)
            te = np.isin(subjects, fold.test_subjects)
            if not np.any(te):
                continue
            truth = labels[te]
            per_map = {}
            for k_i, kind in enumerate(kinds):
                X = features_by_map[kind]
                models = train_one_vs_rest(
                    X[tr], labels[tr], C=C, tol=tol, max_epochs=max_epochs,
                    seed=seed * 1_000_003 + r * 10_007 + f * 101 + k_i * 7,
                    map_kind=kind,
                )
                per_map[kind] = score(models, X[te])
                pred = np.asarray(EXPRESSIONS)[np.argmax(per_map[kind], axis=1)]
                rows.append((r, f, kind, _accuracy(pred, truth)))
            for name, maps in fusions.items():
                fused = fuse_scores([per_map[m] for m in maps])
                pred = np.asarray(EXPRESSIONS)[np.argmax(fused, axis=1)]
                acc = _accuracy(pred, truth)
                rows.append((r, f, name, acc))
                if name == full_name:
                    round_accs.append(acc)
                    for t, p in zip(truth, pred):
                        confusion[label_idx[t], label_idx[p]] += 1.0
        if round_accs:
            per_round.append(float(np.mean(round_accs)))

    names = kinds + list(fusions)
    mean_accuracy = {}
    for name in names:
        vals = [acc for (_, _, n, acc) in rows if n == name]
        mean_accuracy[name] = float(np.mean(vals)) if vals else float("nan")

    row_sums = confusion.sum(axis=1, keepdims=True)
    row_sums[row_sums == 0.0] = 1.0
    confusion = 100.0 * confusion / row_sums
    return EvalReport(rows=rows, mean_accuracy=mean_accuracy,
                      confusion=confusion, per_round=per_round,
                      fusion_names=tuple(fusions))


def write_report_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["round", "fold", "map_or_fusion", "accuracy"])
        for r, fold, name, acc in report.rows:
            writer.writerow([r, fold, name, repr(float(acc))])


def write_confusion_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([""] + list(EXPRESSIONS))
        for i, expr in enumerate(EXPRESSIONS):
            writer.writerow([expr] + [repr(float(v)) for v in report.confusion[i]])
