"""Per-batch selection of confusable pairs: mispredicted images with similar captions.

For every image in a batch, a softmax at temperature sigma over its
similarities to all batch captions gives a prediction distribution. A row is
selected when (a) the most likely caption is not its own, and (b) the
predicted caption is close to the true caption (cosine at least lambda).
Selection is bookkeeping over detached values; no gradients flow through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ParameterError, ShapeError


@dataclass
class BatchSelection:
    uncertainty: Tensor  # [N x N], row i = softmax over captions for image i
    argmax_index: np.ndarray  # per-row predicted caption index
    caption_similarity: np.ndarray  # s_i = <w_pred, w_i>
    mask_f: np.ndarray  # prediction differs from the row index
    mask_s: np.ndarray  # predicted caption close to the true one
    mask: np.ndarray  # mask_f AND mask_s
    selected: list[int]  # ascending indices where mask holds

    def __post_init__(self):
        if self.selected != sorted(self.selected):
            raise ShapeError("selected indices must be ascending")

    @property
    def count(self) -> int:
        return len(self.selected)


def full_batch_selection(n: int) -> BatchSelection:
    """Selection covering every row; the 'no selection filter' ablation."""
    return BatchSelection(
        uncertainty=Tensor(np.eye(n, dtype=np.float32)),
        argmax_index=np.arange(n, dtype=np.int64),
        caption_similarity=np.ones(n),
        mask_f=np.ones(n, dtype=bool),
        mask_s=np.ones(n, dtype=bool),
        mask=np.ones(n, dtype=bool),
        selected=list(range(n)),
    )


def _rows(x) -> np.ndarray:
    arr = x.values if isinstance(x, Tensor) else np.asarray(x)
    arr = arr.astype(np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D block of row vectors, got shape {arr.shape}")
    return arr


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def caption_uncertainty(images, texts, sigma: float) -> Tensor:
    """Softmax over batch captions per image at temperature sigma; detached."""
    if not (np.isfinite(sigma) and sigma > 0):
        raise ParameterError(f"sigma must be positive, got {sigma!r}")
    v, w = _rows(images), _rows(texts)
    if v.shape != w.shape:
        raise ShapeError(f"images {v.shape} and texts {w.shape} disagree")
    return Tensor(_row_softmax((v @ w.T) / sigma))


def misprediction_mask(uncertainty) -> np.ndarray:
    """True where the row argmax is off-diagonal. Ties resolve to the lowest index."""
    u = _rows(uncertainty)
    if u.shape[0] != u.shape[1]:
        raise ShapeError(f"uncertainty must be square, got {u.shape}")
    argmax = np.argmax(u, axis=1)
    return argmax != np.arange(u.shape[0])


def similar_caption_mask(texts, argmax_index: np.ndarray, threshold: float) -> np.ndarray:
    """True where the predicted caption's cosine to the true caption is >= threshold."""
    w = _rows(texts)
    idx = np.asarray(argmax_index, dtype=np.int64)
    if idx.shape != (w.shape[0],):
        raise ShapeError(f"argmax index shape {idx.shape} does not match {w.shape[0]} rows")
    sims = np.sum(w[idx] * w, axis=1)
    return sims >= threshold


def selection_from_uncertainty(uncertainty, texts, threshold: float) -> BatchSelection:
    """Assemble a selection from a precomputed uncertainty matrix."""
    u = _rows(uncertainty)
    w = _rows(texts)
    argmax = np.argmax(u, axis=1)
    mask_f = argmax != np.arange(u.shape[0])
    sims = np.sum(w[argmax] * w, axis=1)
    mask_s = sims >= threshold
    mask = mask_f & mask_s
    return BatchSelection(
        uncertainty=uncertainty if isinstance(uncertainty, Tensor) else Tensor(u),
        argmax_index=argmax,
        caption_similarity=sims,
        mask_f=mask_f,
        mask_s=mask_s,
        mask=mask,
        selected=[int(i) for i in np.nonzero(mask)[0]],
    )


def select_batch(images, texts, sigma: float, threshold: float) -> BatchSelection:
    """Full selection pipeline: uncertainty, both masks, ascending indices."""
    u = caption_uncertainty(images, texts, sigma)
    return selection_from_uncertainty(u, texts, threshold)
