"""Conditional-bias inference: cosine class scores fused with the foreground mask."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .fcp import fcp_forward
from .pkl import KernelBank, assemble_pixel_features, prototypical_kernel_update, segment_scores
from .tensor import ShapeError, ZERO_NORM
from .training import FIXED_ALPHA


@dataclass(frozen=True)
class InferenceConfig:
    bias_b: float = 0.5
    fg_threshold: float = 0.5
    use_pkl_update: bool = True
    use_fcp: bool = True
    use_cbbi: bool = True
    novel_only_bias: bool = False
    fixed_alr: bool = False

    def validate(self):
        if self.bias_b < 0:
            raise ConfigError("bias_b must be >= 0")
        if not 0 < self.fg_threshold < 1:
            raise ConfigError("fg_threshold must lie in (0, 1)")


@dataclass
class CandidateMaps:
    top1_value: np.ndarray
    top2_value: np.ndarray
    top1_class: np.ndarray
    top2_class: np.ndarray


def classwise_cosine_scores(bank, feat):
    """Cosine between every kernel row and every pixel feature: (B, N, H, W).

    ``bank`` is a KernelBank, an (N, C) array, or per-image kernels (B, N, C).
    """
    k = bank.kernels if isinstance(bank, KernelBank) else np.asarray(bank)
    feat = np.asarray(feat)
    if feat.ndim != 4:
        raise ShapeError(f"feature map must be (B, C, H, W), got {feat.shape}")
    if k.shape[-1] != feat.shape[1]:
        raise ShapeError(f"channel mismatch: kernels {k.shape[-1]} vs features {feat.shape[1]}")
    b, c, h, w = feat.shape
    if k.ndim == 2:
        k = np.broadcast_to(k, (b,) + k.shape)
    elif k.shape[0] != b:
        raise ShapeError("need one set of kernels per image")
    f = feat.reshape(b, c, -1)
    kn = np.linalg.norm(k, axis=2)
    fn = np.linalg.norm(f, axis=1)
    dots = np.matmul(k, f)
    denom = kn[:, :, None] * fn[:, None, :]
    ok = (kn[:, :, None] >= ZERO_NORM) & (fn[:, None, :] >= ZERO_NORM)
    out = np.where(ok, dots / np.where(ok, denom, 1), 0)
    return out.reshape(b, -1, h, w).astype(feat.dtype, copy=False)


def inference_pkl_refresh(bank, feat, step_scale=1.0, fixed_alpha=None):
    """Refresh the base rows of ``bank`` on a single image; novel rows untouched.

    Scores come from the base rows only.
    """
    feat = np.asarray(feat)
    if feat.ndim == 3:
        feat = feat[None]
    if feat.shape[0] != 1:
        raise ShapeError("refresh works on one image at a time")
    base = bank.base_rows
    protos = assemble_pixel_features(segment_scores(base, feat), feat)[0]
    return bank.with_base_rows(prototypical_kernel_update(base, protos, step_scale, fixed_alpha))


def top2(scores):
    """Largest and second-largest class score per pixel; ties favour the lower index."""
    scores = np.asarray(scores)
    if scores.ndim != 4:
        raise ShapeError("scores must be (B, N, H, W)")
    if scores.shape[1] < 2:
        raise ConfigError("top2 needs at least two classes")
    c1 = np.argmax(scores, axis=1)
    v1 = np.take_along_axis(scores, c1[:, None], axis=1)[:, 0]
    rest = scores.copy()
    np.put_along_axis(rest, c1[:, None], -np.inf, axis=1)
    c2 = np.argmax(rest, axis=1)
    v2 = np.take_along_axis(scores, c2[:, None], axis=1)[:, 0]
    return CandidateMaps(v1, v2, c1, c2)


def cbbi_decide(cands, fg_mask, cfg, base_count=None):
    """Row index per pixel: top2 wins inside the foreground if top2 + b > top1.

    With ``cfg.novel_only_bias`` the bias is only added where the second
    candidate is a novel row (index >= ``base_count``).
    """
    fg = np.asarray(fg_mask)
    if fg.shape != cands.top1_class.shape:
        raise ShapeError(f"foreground mask {fg.shape} does not match candidates {cands.top1_class.shape}")
    gate = fg == 1
    if cfg.novel_only_bias:
        if base_count is None:
            raise ConfigError("novel_only_bias needs base_count")
        gate &= cands.top2_class >= base_count
    boosted = cands.top2_value + np.asarray(cfg.bias_b, dtype=cands.top2_value.dtype)
    flip = gate & (boosted > cands.top1_value)
    return np.where(flip, cands.top2_class, cands.top1_class)


def foreground_mask(model, feat, cfg):
    """Binary foreground of each image, with the image alone as its episode."""
    feat = np.asarray(feat)
    probs = np.concatenate([fcp_forward(feat[i:i + 1], model.fcp) for i in range(feat.shape[0])])
    return (probs > cfg.fg_threshold).astype(np.int64)


def infer_rows(model, registry, feat, cfg=None):
    """Like :func:`infer` but returns kernel-row indices."""
    cfg = cfg or InferenceConfig()
    cfg.validate()
    feat = np.asarray(feat)
    if feat.ndim != 4:
        raise ShapeError(f"feature map must be (B, C, H, W), got {feat.shape}")
    bank = registry.bank
    if cfg.use_pkl_update:
        fixed = FIXED_ALPHA if (cfg.fixed_alr or model.fixed_alr) else None
        kernels = np.stack([inference_pkl_refresh(bank, feat[i], model.step_scale, fixed).kernels
                            for i in range(feat.shape[0])])
    else:
        kernels = bank.kernels
    scores = classwise_cosine_scores(kernels, feat)
    if bank.n_classes < 2:
        return np.zeros((feat.shape[0],) + feat.shape[2:], dtype=np.int64)
    cands = top2(scores)
    if not cfg.use_cbbi:
        return cands.top1_class
    if cfg.use_fcp:
        fg = foreground_mask(model, feat, cfg)
    else:
        fg = np.zeros_like(cands.top1_class)
    return cbbi_decide(cands, fg, cfg, bank.base_count)


def infer(model, registry, feat, cfg=None):
    """Per-pixel class ids (B, H, W) for a batch of feature maps."""
    rows = infer_rows(model, registry, feat, cfg)
    ids = np.asarray(registry.bank.class_ids, dtype=np.int64)
    return ids[rows]
