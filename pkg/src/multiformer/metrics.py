"""Classification metrics over confusion matrices, plus map rendering.

A confusion matrix is a K*K int64 array, entry [i][j] counting pixels
of true class i+1 predicted as class j+1. All ratios are formed from
exact integer sums with a single final division.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .exceptions import ConfigError, UndefinedMetricError


def confusion_matrix(true_labels, predicted_labels, num_classes: int) -> np.ndarray:
    """Count (true, predicted) pairs of 1-based labels into a K*K matrix."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(np.asarray(true_labels).ravel(), np.asarray(predicted_labels).ravel()):
        cm[int(t) - 1, int(p) - 1] += 1
    return cm


def _as_cm(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise UndefinedMetricError(f"confusion matrix must be square, got shape {cm.shape}")
    if (cm < 0).any():
        raise UndefinedMetricError("confusion matrix has negative counts")
    return cm


def overall_accuracy(cm) -> float:
    cm = _as_cm(cm)
    total = int(cm.sum())
    if total == 0:
        raise UndefinedMetricError("overall accuracy undefined for an empty confusion matrix")
    return int(np.trace(cm)) / total


def per_class_accuracy(cm) -> list[float | None]:
    """Recall per class; None marks classes absent from the test side."""
    cm = _as_cm(cm)
    out: list[float | None] = []
    for i in range(cm.shape[0]):
        row = int(cm[i].sum())
        out.append(int(cm[i, i]) / row if row else None)
    return out


def average_accuracy(cm) -> float:
    """Mean per-class recall over classes that actually appear."""
    recalls = [r for r in per_class_accuracy(cm) if r is not None]
    if not recalls:
        raise UndefinedMetricError("average accuracy undefined: every class row is empty")
    return sum(recalls) / len(recalls)


def kappa(cm) -> float:
    """Chance-corrected agreement: (observed - expected) / (1 - expected),
    with expected agreement from the row/column marginals."""
    cm = _as_cm(cm)
    total = int(cm.sum())
    if total == 0:
        raise UndefinedMetricError("kappa undefined for an empty confusion matrix")
    marginal = int((cm.sum(axis=1, dtype=np.int64) * cm.sum(axis=0, dtype=np.int64)).sum())
    numerator = total * int(np.trace(cm)) - marginal
    denominator = total * total - marginal
    if denominator == 0:
        raise UndefinedMetricError("kappa undefined: expected agreement is 1 (single occupied cell)")
    return numerator / denominator


def format_report(cm) -> str:
    """The metrics report: OA, AA, kappa, then one line per class."""
    lines = [
        f"OA {overall_accuracy(cm):.4f}",
        f"AA {average_accuracy(cm):.4f}",
        f"kappa {kappa(cm):.4f}",
    ]
    for i, recall in enumerate(per_class_accuracy(cm), start=1):
        lines.append(f"C{i} absent" if recall is None else f"C{i} {recall:.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# classification map rendering
# ---------------------------------------------------------------------------

# distinct, print-friendly colors; class 0 (unlabeled) is always black
_BASE_COLORS = [
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (210, 245, 60),
    (250, 190, 190),
    (0, 128, 128),
    (220, 190, 255),
    (170, 110, 40),
    (255, 250, 200),
    (128, 0, 0),
    (170, 255, 195),
    (128, 128, 0),
    (255, 215, 180),
    (0, 0, 128),
    (128, 128, 128),
]


def default_palette(num_classes: int) -> dict[int, tuple[int, int, int]]:
    """Deterministic palette covering classes 0..num_classes."""
    palette = {i: _BASE_COLORS[i] for i in range(min(num_classes + 1, len(_BASE_COLORS)))}
    for i in range(len(_BASE_COLORS), num_classes + 1):
        hue = (i * 0.61803398875) % 1.0  # golden-ratio spacing keeps hues apart
        palette[i] = _hsv_to_rgb(hue, 0.85, 0.95)
    return palette


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return int(r * 255), int(g * 255), int(b * 255)


def render_map(predictions: np.ndarray, palette: Mapping[int, Sequence[int]], path) -> None:
    """Write a binary PPM (P6) image, one palette color per raster cell."""
    predictions = np.asarray(predictions)
    if predictions.ndim != 2:
        raise ConfigError(f"prediction raster must be H*W, got shape {predictions.shape}")
    classes = np.unique(predictions)
    missing = [int(c) for c in classes if int(c) not in palette]
    if missing:
        raise ConfigError(f"palette missing entries for classes {missing}")
    h, w = predictions.shape
    lut = np.zeros((int(classes.max()) + 1, 3), dtype=np.uint8)
    for cls in classes:
        lut[int(cls)] = palette[int(cls)]
    pixels = lut[predictions]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
