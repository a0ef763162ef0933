"""Prototypical kernel learning: base kernels, pixel assembling, one-off update."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, relu, row_cosine, softmax


@dataclass(frozen=True)
class KernelBank:
    """Class kernels, one row per class.

    The first ``base_count`` rows are base classes (row 0 is background);
    the rest are registered novel classes. ``sessions`` records, for every
    row, the session that contributed it (0 for base).
    """

    kernels: np.ndarray
    class_ids: tuple
    base_count: int
    sessions: tuple = field(default=None)

    def __post_init__(self):
        k = np.array(self.kernels, copy=True)
        if k.ndim != 2 or k.shape[0] < 1:
            raise ShapeError(f"kernels must be (N, C) with N >= 1, got {k.shape}")
        if not np.all(np.isfinite(k)):
            raise ValueError("kernel bank contains non-finite values")
        ids = tuple(int(c) for c in self.class_ids)
        if len(ids) != k.shape[0]:
            raise ShapeError("one class id per kernel row is required")
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        if not 0 <= self.base_count <= k.shape[0]:
            raise ValueError("base_count out of range")
        sess = self.sessions
        if sess is None:
            sess = (0,) * self.base_count + (1,) * (k.shape[0] - self.base_count)
        sess = tuple(int(s) for s in sess)
        if len(sess) != k.shape[0]:
            raise ShapeError("one session tag per kernel row is required")
        k.setflags(write=False)
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "sessions", sess)

    @property
    def n_classes(self):
        return self.kernels.shape[0]

    @property
    def channels(self):
        return self.kernels.shape[1]

    @property
    def base_rows(self):
        return self.kernels[: self.base_count]

    @property
    def novel_rows(self):
        return self.kernels[self.base_count:]

    def with_base_rows(self, rows):
        """Copy of the bank with the base rows replaced."""
        rows = np.asarray(rows, dtype=self.kernels.dtype)
        if rows.shape != self.base_rows.shape:
            raise ShapeError(f"base rows must be {self.base_rows.shape}, got {rows.shape}")
        k = np.concatenate([rows, self.novel_rows], axis=0)
        return KernelBank(k, self.class_ids, self.base_count, self.sessions)


def _kernels(bank_or_rows):
    if isinstance(bank_or_rows, KernelBank):
        return bank_or_rows.base_rows
    return np.asarray(bank_or_rows)


def class_logits(kernels, feat):
    """1x1 convolution of each kernel row over a (B, C, H, W) feature map."""
    kernels = np.asarray(kernels)
    feat = np.asarray(feat)
    if feat.ndim != 4:
        raise ShapeError(f"feature map must be (B, C, H, W), got {feat.shape}")
    if kernels.shape[1] != feat.shape[1]:
        raise ShapeError(f"channel mismatch: kernels {kernels.shape[1]} vs features {feat.shape[1]}")
    return np.einsum("nc,bchw->bnhw", kernels, feat, optimize=True)


def segment_scores(bank, feat):
    """Per-pixel class probabilities, softmax over the class axis."""
    return softmax(class_logits(_kernels(bank), feat), axis=1)


def assemble_pixel_features(scores, feat):
    """Score-weighted sum of pixel features: (B, N, H, W) x (B, C, H, W) -> (B, N, C)."""
    scores = np.asarray(scores)
    feat = np.asarray(feat)
    if scores.ndim != 4 or feat.ndim != 4:
        raise ShapeError("scores and features must both be rank 4")
    if scores.shape[0] != feat.shape[0] or scores.shape[2:] != feat.shape[2:]:
        raise ShapeError(f"batch/spatial mismatch: {scores.shape} vs {feat.shape}")
    b, n = scores.shape[:2]
    c = feat.shape[1]
    s = scores.reshape(b, n, -1)
    f = feat.reshape(b, c, -1)
    return np.matmul(s, f.transpose(0, 2, 1))


def adaptation_learning_rate(bank, protos_i):
    """alpha_j = ReLU(cos(K_j, P_j)), shape (1, N_b)."""
    k = _kernels(bank)
    p = np.asarray(protos_i)
    if k.shape != p.shape:
        raise ShapeError(f"kernel rows {k.shape} and prototypes {p.shape} differ")
    return relu(row_cosine(k, p))[None, :]


def prototypical_kernel_update(bank, protos_i, step_scale=1.0, fixed_alpha=None):
    """One-off update of the base kernels toward one image's prototypes.

    Uses the squared-error sum gradient 2 (K - P). Rows whose rate is zero
    come back bit-identical. ``fixed_alpha`` replaces the cosine-gated rate
    with a constant (the fixed-rate ablation).
    """
    k = _kernels(bank)
    p = np.asarray(protos_i, dtype=k.dtype)
    if fixed_alpha is None:
        alpha = adaptation_learning_rate(k, p)[0]
    else:
        if k.shape != p.shape:
            raise ShapeError(f"kernel rows {k.shape} and prototypes {p.shape} differ")
        alpha = np.full(k.shape[0], fixed_alpha, dtype=k.dtype)
    rate = (step_scale * alpha).astype(k.dtype)
    grad = 2 * (k - p)
    out = k - rate[:, None] * grad
    gated = rate == 0
    out[gated] = k[gated]
    return out


def refresh_kernels(bank, feat, step_scale=1.0, fixed_alpha=None):
    """Per-image updated base kernels for a batch: (B, N_b, C)."""
    k = _kernels(bank)
    protos = assemble_pixel_features(segment_scores(k, feat), feat)
    return np.stack([prototypical_kernel_update(k, protos[i], step_scale, fixed_alpha)
                     for i in range(protos.shape[0])])


def predict_mask(updated_rows, feat):
    """Argmax of the softmax scores; ties go to the lowest class index.

    ``updated_rows`` is (N, C) shared by the batch, or (B, N, C) per image.
    """
    rows = np.asarray(updated_rows)
    feat = np.asarray(feat)
    if rows.ndim == 2:
        logits = class_logits(rows, feat)
    else:
        if rows.shape[0] != feat.shape[0]:
            raise ShapeError("need one set of kernels per image")
        logits = np.concatenate([class_logits(rows[i], feat[i:i + 1]) for i in range(rows.shape[0])])
    # np.argmax returns the first maximum
    return np.argmax(softmax(logits, axis=1), axis=1)
