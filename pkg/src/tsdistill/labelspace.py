"""Labels as points on the probability simplex, and every transformation
applied to them: softmax (plain and tempered), smoothing, and the two
calibration strategies that move a wrongly-predicted soft label into the
area of its true class.

Labels are plain 1-D float64 arrays of length ``C >= 2`` whose entries are
nonnegative and sum to one. :func:`as_label` / :func:`as_logits` are the
validating constructors; every public operation routes its inputs through
them.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

__all__ = [
    "SIMPLEX_ATOL",
    "as_label",
    "as_logits",
    "is_one_hot",
    "predicted_class",
    "argmax_toward",
    "hard_label",
    "softmax",
    "softmax_tempered",
    "smooth_hard_label",
    "label_distance",
    "min_wrong_distance",
    "brute_force_delta",
    "needs_calibration",
    "calibrate_translate",
    "calibrate_reorder",
    "calibrate_set",
    "save_soft_labels",
    "load_soft_labels",
]

# Tolerance on sum(probs) == 1 for a vector to count as a label.
SIMPLEX_ATOL = 1e-9

# Entries below this are treated as floating-point dust and clamped to zero
# when a calibration output is re-validated.
_DUST = 1e-12


def as_label(probs) -> np.ndarray:
    """Validate and return ``probs`` as a label vector.

    Raises ``ValueError`` unless the input is a finite 1-D vector with
    ``C >= 2``, nonnegative entries, and sum within ``SIMPLEX_ATOL`` of 1.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size < 2:
        raise ValueError(f"label must be a 1-D vector with C >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("label entries must be finite")
    if np.any(p < 0):
        raise ValueError(f"label entries must be nonnegative, got min {p.min()}")
    total = p.sum()
    if abs(total - 1.0) > SIMPLEX_ATOL:
        raise ValueError(f"label entries must sum to 1 (got {total!r})")
    return p


def as_logits(scores) -> np.ndarray:
    """Validate and return ``scores`` as a logits vector (finite, 1-D, C >= 2)."""
    z = np.asarray(scores, dtype=np.float64)
    if z.ndim != 1 or z.size < 2:
        raise ValueError(f"logits must be a 1-D vector with C >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    return z


def is_one_hot(label: np.ndarray) -> bool:
    """True iff ``label`` is exactly one-hot (a simplex vertex)."""
    p = np.asarray(label, dtype=np.float64)
    return p.ndim == 1 and p.size >= 2 and np.count_nonzero(p == 1.0) == 1 and np.count_nonzero(p) == 1


def predicted_class(label) -> int:
    """Argmax with ties broken toward the lowest index."""
    return int(np.argmax(label))


def argmax_toward(label, c: int, atol: float = _DUST) -> int:
    """Argmax with ties broken toward class ``c``.

    Calibrated labels may land exactly on a decision boundary; for the
    purpose of checking which class area a calibrated label lies in, a tie
    involving ``c`` counts as ``c``.
    """
    p = np.asarray(label, dtype=np.float64)
    if p[c] >= p.max() - atol:
        return int(c)
    return int(np.argmax(p))


def hard_label(c: int, n_classes: int) -> np.ndarray:
    """One-hot label putting all mass on class ``c``."""
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if not 0 <= c < n_classes:
        raise ValueError(f"class index {c} out of range [0, {n_classes})")
    y = np.zeros(n_classes, dtype=np.float64)
    y[c] = 1.0
    return y


def softmax_tempered(z, tau: float) -> np.ndarray:
    """Softmax of ``z / tau``.

    ``tau=1`` is the plain softmax; ``tau`` above 1 flattens the output
    toward uniform, below 1 sharpens it. Computed with max-subtraction so
    large logits cannot overflow.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = as_logits(z) / tau
    s = s - s.max()
    e = np.exp(s)
    return e / e.sum()


def softmax(z) -> np.ndarray:
    """Normalize logits to a label. Invariant to adding a constant to ``z``."""
    return softmax_tempered(z, 1.0)


def smooth_hard_label(y_h, eps: float) -> np.ndarray:
    """Mix a one-hot label with the uniform distribution.

    The true class keeps ``(1 - eps) + eps/C``; every other class receives
    ``eps/C``. ``eps=0`` returns the hard label unchanged, ``eps=1`` the
    uniform label.
    """
    y = as_label(y_h)
    if not is_one_hot(y):
        raise ValueError("smooth_hard_label expects a one-hot label")
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"smoothing coefficient must lie in [0, 1], got {eps}")
    return (1.0 - eps) * y + eps / y.size


def label_distance(a, b) -> float:
    """Euclidean distance between two labels of equal dimension."""
    pa, pb = as_label(a), as_label(b)
    if pa.size != pb.size:
        raise ValueError(f"dimension mismatch: {pa.size} vs {pb.size}")
    return float(np.linalg.norm(pa - pb))


def min_wrong_distance() -> float:
    """Minimum distance between a vertex and any label whose argmax is a
    different class: exactly ``1/sqrt(2)``.

    The minimizer splits the mass evenly between the true class and one
    other (both at 1/2); :func:`brute_force_delta` recovers the same value
    by grid search and exists to cross-check this constant.
    """
    return 1.0 / math.sqrt(2.0)


def brute_force_delta(n_classes: int, step: float) -> float:
    """Grid-search the minimum distance from a vertex to the wrong-argmax
    region of the simplex.

    Enumerates simplex points on a grid of spacing ``step`` (C in {2,3,4}),
    keeps those whose argmax is not the vertex class under lowest-index
    tie-breaking, and returns the smallest Euclidean distance to the
    vertex. Converges to :func:`min_wrong_distance` as ``step`` shrinks.
    """
    if n_classes not in (2, 3, 4):
        raise ValueError(f"supported class counts are 2, 3, 4; got {n_classes}")
    n_axis = int(round(1.0 / step)) + 1
    if n_axis < 10:
        raise ValueError(f"step {step} leaves fewer than 10 grid points per axis")
    ax = np.linspace(0.0, 1.0, n_axis)
    grids = np.meshgrid(*([ax] * (n_classes - 1)), indexing="ij")
    free = np.stack([g.ravel() for g in grids], axis=1)
    rest = 1.0 - free.sum(axis=1)
    feasible = rest >= -1e-12
    points = np.concatenate([free[feasible], rest[feasible, None].clip(min=0.0)], axis=1)
    # vertex class 0 w.l.o.g.; wrong argmax under lowest-index tie-break
    wrong = np.argmax(points, axis=1) != 0
    if not np.any(wrong):
        raise ValueError("grid contains no wrong-argmax points; step too coarse")
    diffs = points[wrong]
    diffs[:, 0] -= 1.0
    return float(np.sqrt(np.einsum("ij,ij->i", diffs, diffs).min()))


def needs_calibration(y_t, y_h) -> bool:
    """True iff the predicted label's argmax disagrees with the true class.

    Only labels for which this holds are calibrated; ties are broken toward
    the lowest index, so an exact tie with the true class at index 0 does
    not trigger calibration.
    """
    t, h = as_label(y_t), as_label(y_h)
    if t.size != h.size:
        raise ValueError(f"dimension mismatch: {t.size} vs {h.size}")
    if not is_one_hot(h):
        raise ValueError("needs_calibration expects a one-hot reference label")
    return predicted_class(t) != predicted_class(h)


def _clean_simplex(p: np.ndarray) -> np.ndarray:
    """Clamp sub-1e-12 dust to zero and renormalize (float-drift guard)."""
    q = np.where(p < _DUST, 0.0, p)
    return q / q.sum()


def calibrate_translate(y_t, y_h) -> np.ndarray:
    """Move a wrong label straight toward the true vertex by exactly
    ``min_wrong_distance()``.

    The output is ``y_t + (delta/d) * (y_h - y_t)`` with ``d`` the current
    distance; since ``d >= delta`` for any wrong label, the step
    coefficient lies in (0, 1] and the result stays on the simplex. The
    distance to the vertex shrinks by exactly ``delta``, which is enough to
    land in the true class area (ties on the boundary break toward the
    true class).
    """
    t, h = as_label(y_t), as_label(y_h)
    if not needs_calibration(t, h):
        raise ValueError("label already predicts the true class; nothing to calibrate")
    d = float(np.linalg.norm(h - t))
    w = min_wrong_distance() / d
    return _clean_simplex(t + w * (h - t))


def calibrate_reorder(y_t, c: int) -> np.ndarray:
    """Permute the values of a wrong label so the true class holds the
    maximum.

    The true class receives the former maximum and every value ranked above
    the true class' former rank slides one rank down the chain; values
    ranked below keep their places. The output is a permutation of the
    input values, so it stays on the simplex and keeps the shape of the
    distribution.
    """
    t = as_label(y_t)
    if not 0 <= c < t.size:
        raise ValueError(f"class index {c} out of range [0, {t.size})")
    if predicted_class(t) == c:
        raise ValueError("label already predicts the true class; nothing to calibrate")
    order = np.argsort(-t, kind="stable")  # descending, ties keep index order
    rank_of_c = int(np.nonzero(order == c)[0][0])
    out = t.copy()
    for r in range(rank_of_c):
        out[order[r]] = t[order[r + 1]]
    out[c] = t[order[0]]
    return out


def calibrate_set(y_t_list, y_h_list, strategy: str) -> list[np.ndarray]:
    """Calibrate every wrongly-predicted label in a batch.

    Labels whose argmax already matches the true class pass through
    unchanged (the same array object, not a copy); the rest are calibrated
    with the chosen strategy, ``"translate"`` or ``"reorder"``.
    """
    if strategy not in ("translate", "reorder"):
        raise ValueError(f"unknown strategy {strategy!r}; expected 'translate' or 'reorder'")
    if len(y_t_list) != len(y_h_list):
        raise ValueError(f"length mismatch: {len(y_t_list)} labels vs {len(y_h_list)} references")
    out = []
    for t, h in zip(y_t_list, y_h_list):
        if not needs_calibration(t, h):
            out.append(t)
        elif strategy == "translate":
            out.append(calibrate_translate(t, h))
        else:
            out.append(calibrate_reorder(t, predicted_class(as_label(h))))
    return out


# ---------------------------------------------------------------------------
# soft-label files
#
# One record per sample: C comma-separated decimal probabilities, newline
# terminated, after a header line `# C=<int> N=<int> source=<teacher-id>`.
# Values are written with repr precision so a load returns bit-identical
# float64 values.
# ---------------------------------------------------------------------------


def _write_rows(path, rows: np.ndarray, source: str) -> None:
    n, c = rows.shape
    lines = [f"# C={c} N={n} source={source}"]
    lines.extend(",".join(repr(float(v)) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_rows(path) -> tuple[np.ndarray, str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# "):
        raise ValueError(f"{path}: missing header line")
    fields = dict(part.split("=", 1) for part in lines[0][2:].split(" ") if "=" in part)
    try:
        c, n = int(fields["C"]), int(fields["N"])
        source = fields["source"]
    except KeyError as exc:
        raise ValueError(f"{path}: header missing field {exc}") from exc
    body = lines[1:]
    if len(body) != n:
        raise ValueError(f"{path}: header says N={n} but found {len(body)} records")
    rows = np.empty((n, c), dtype=np.float64)
    for i, line in enumerate(body):
        parts = line.split(",")
        if len(parts) != c:
            raise ValueError(f"{path}: record {i} has {len(parts)} values, expected {c}")
        rows[i] = [float(p) for p in parts]
    return rows, source


def save_soft_labels(path, labels, source: str) -> None:
    """Write a batch of labels to the soft-label file format."""
    rows = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    for row in rows:
        as_label(row)
    _write_rows(path, rows, source)


def load_soft_labels(path) -> tuple[np.ndarray, str]:
    """Read a soft-label file; returns ``(labels, source)`` with labels as
    an (N, C) array whose rows are validated simplex points."""
    rows, source = _read_rows(path)
    for row in rows:
        as_label(row)
    return rows, source
