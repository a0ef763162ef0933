"""Foreground contextual perception: class-agnostic foreground from a pseudo episode.

Pipeline per query image ``b`` of an episode::

    correlation volume -> hybrid pooling -> correlation mask
    -> masked prototypes (wGAP) -> refined responses -> residual decoder

Sums over episode images are taken over sorted operands so that the result
does not depend on the order of the episode.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import ShapeError, conv2d, l2_normalize, relu, sigmoid, softmax

log = logging.getLogger(__name__)

MASK_THRESHOLD = 0.5
DECODER_LAYERS = 4


@dataclass
class EpisodeBatch:
    feats: np.ndarray
    fg_truth: np.ndarray = None
    label_truth: np.ndarray = None

    def __post_init__(self):
        self.feats = np.asarray(self.feats)
        if self.feats.ndim != 4 or self.feats.shape[0] < 1:
            raise ShapeError(f"episode features must be (B>=1, C, H, W), got {self.feats.shape}")
        b, _, h, w = self.feats.shape
        if self.fg_truth is not None:
            self.fg_truth = np.asarray(self.fg_truth)
            if self.fg_truth.shape != (b, h, w):
                raise ShapeError("fg_truth must be (B, H, W)")
            if not np.all((self.fg_truth == 0) | (self.fg_truth == 1)):
                raise ValueError("fg_truth must be binary")
        if self.label_truth is not None:
            self.label_truth = np.asarray(self.label_truth)
            if self.label_truth.shape != (b, h, w):
                raise ShapeError("label_truth must be (B, H, W)")
            if self.fg_truth is not None and not np.array_equal(self.fg_truth, self.label_truth != 0):
                raise ValueError("fg_truth disagrees with label_truth")

    def __len__(self):
        return self.feats.shape[0]

    def permuted(self, order):
        order = list(order)
        pick = lambda a: None if a is None else a[order]
        return EpisodeBatch(self.feats[order], pick(self.fg_truth), pick(self.label_truth))


def decoder_channels(channels):
    """Channel widths C -> C/2 -> C/4 -> C/8 -> 1 of the decoder.

    Widths bottom out at 1, so tiny maps (C < 8, used for gradient checks)
    still get a valid chain; otherwise C must be a multiple of 8.
    """
    if channels < 1 or (channels >= 8 and channels % 8):
        raise ConfigError(f"decoder needs channels divisible by 8, got {channels}")
    return [channels] + [max(1, channels >> k) for k in (1, 2, 3)] + [1]


@dataclass
class FcpParams:
    """Named parameter arrays of the FCP branch.

    ``phi.*`` and ``theta.*`` are the two 1x1 projections; ``dec{k}.*`` are
    the four 3x3 decoder convolutions.
    """

    tensors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, channels, rng, dtype=np.float32):
        chain = decoder_channels(channels)
        t = {}
        bound = np.sqrt(1.0 / channels)
        for name in ("phi", "theta"):
            t[f"{name}.weight"] = rng.uniform(-bound, bound, (channels, channels)).astype(dtype)
            t[f"{name}.bias"] = np.zeros(channels, dtype=dtype)
        for k in range(DECODER_LAYERS):
            cin, cout = chain[k], chain[k + 1]
            bound = np.sqrt(1.0 / (cin * 9))
            t[f"dec{k}.weight"] = rng.uniform(-bound, bound, (cout, cin, 3, 3)).astype(dtype)
            t[f"dec{k}.bias"] = np.zeros(cout, dtype=dtype)
        return cls(t)

    @property
    def channels(self):
        return self.tensors["phi.weight"].shape[0]

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return sorted(self.tensors)

    def astype(self, dtype):
        return FcpParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self):
        return FcpParams({k: v.copy() for k, v in self.tensors.items()})

    def validate(self):
        chain = decoder_channels(self.channels)
        for k in range(DECODER_LAYERS):
            w = self.tensors[f"dec{k}.weight"]
            if w.shape != (chain[k + 1], chain[k], 3, 3):
                raise ConfigError(f"dec{k}.weight has shape {w.shape}, expected {(chain[k + 1], chain[k], 3, 3)}")
        for v in self.tensors.values():
            if not np.all(np.isfinite(v)):
                raise ValueError("FCP parameters contain non-finite values")


def _feats(ep):
    return ep.feats if isinstance(ep, EpisodeBatch) else np.asarray(ep)


def project(weight, bias, feat_i):
    """1x1 convolution of a single (C, H, W) map, flattened to (C, HW)."""
    f = feat_i.reshape(feat_i.shape[0], -1)
    return weight @ f + bias[:, None]


def pairwise_correlation(ep, params, b):
    """A[i, p, q] = <phi(F_i)[:, p], theta(F_b)[:, q]>, shape (B, HW, HW)."""
    feats = _feats(ep)
    if not 0 <= b < feats.shape[0]:
        raise IndexError(f"query index {b} outside episode of size {feats.shape[0]}")
    q = project(params["theta.weight"], params["theta.bias"], feats[b])
    return np.stack([project(params["phi.weight"], params["phi.bias"], f).T @ q for f in feats])


def _sorted_mean(x, axis=0):
    return np.sum(np.sort(x, axis=axis), axis=axis) / x.shape[axis]


def hybrid_pool(vol, shape=None):
    """Max over episode pixels, then mean over episode images."""
    vol = np.asarray(vol)
    if vol.ndim != 3 or vol.shape[1] < 1:
        raise ShapeError(f"correlation volume must be (B, HW, HW), got {vol.shape}")
    pooled = _sorted_mean(vol.max(axis=1), axis=0)
    if shape is not None:
        pooled = pooled.reshape(shape)
    return pooled


def correlation_mask(abar):
    """Spatial softmax rescaled by HW (uniform -> 1.0), thresholded at 0.5."""
    abar = np.asarray(abar)
    hw = abar.size
    norm = softmax(abar.reshape(-1)) * hw
    return (norm > MASK_THRESHOLD).astype(abar.dtype).reshape(abar.shape)


def wgap(feat_b, mask, strict=False):
    """Masked average of L2-normalised pixel features.

    An all-zero mask falls back to the full image (logged); with
    ``strict`` it raises instead.
    """
    feat_b = np.asarray(feat_b)
    mask = np.asarray(mask)
    if feat_b.ndim != 3 or mask.shape != feat_b.shape[1:]:
        raise ShapeError(f"wgap expects (C, H, W) features and (H, W) mask, got {feat_b.shape}, {mask.shape}")
    total = mask.sum()
    if total == 0:
        if strict:
            raise ValueError("empty mask")
        log.warning("wgap: empty correlation mask, falling back to the full image")
        mask = np.ones_like(mask)
        total = mask.sum()
    unit = l2_normalize(feat_b.reshape(feat_b.shape[0], -1), axis=0)
    return (unit @ mask.reshape(-1).astype(unit.dtype)) / unit.dtype.type(total)


def refined_responses(protos, feat_b):
    """R(h, w): mean over prototypes of <p_i, normalised F_b(h, w)>."""
    protos = np.asarray(protos)
    feat_b = np.asarray(feat_b)
    if protos.ndim != 2 or feat_b.ndim != 3 or protos.shape[1] != feat_b.shape[0]:
        raise ShapeError(f"channel mismatch: prototypes {protos.shape} vs features {feat_b.shape}")
    unit = l2_normalize(feat_b.reshape(feat_b.shape[0], -1), axis=0)
    return _sorted_mean(protos @ unit, axis=0).reshape(feat_b.shape[1:])


def decoder_input(feat, resp):
    return feat + feat * resp[:, None]


def decode_foreground(feat, resp, params, cache=None):
    """M_f = sigmoid(D(F + F * R)) with D = conv-ReLU x3, conv.

    If ``cache`` is a dict, activations needed by the backward pass are
    stored in it.
    """
    feat = np.asarray(feat)
    resp = np.asarray(resp)
    decoder_channels(feat.shape[1])
    if resp.shape != (feat.shape[0],) + feat.shape[2:]:
        raise ShapeError(f"responses must be (B, H, W), got {resp.shape}")
    h = decoder_input(feat, resp)
    for k in range(DECODER_LAYERS):
        x = h
        z, cols = conv2d(x, params[f"dec{k}.weight"], params[f"dec{k}.bias"], return_cols=True)
        h = relu(z) if k < DECODER_LAYERS - 1 else z
        if cache is not None:
            cache[f"x{k}"] = x
            cache[f"cols{k}"] = cols
            cache[f"z{k}"] = z
    out = sigmoid(h[:, 0])
    if cache is not None:
        cache["out"] = out
    return out


@dataclass
class FcpTrace:
    pooled: np.ndarray
    masks: np.ndarray
    protos: np.ndarray
    responses: np.ndarray
    fallbacks: list


def foreground_responses(ep, params):
    """Everything upstream of the decoder; returns an :class:`FcpTrace`."""
    feats = _feats(ep)
    b, _, h, w = feats.shape
    phis = [project(params["phi.weight"], params["phi.bias"], f).T for f in feats]
    thetas = [project(params["theta.weight"], params["theta.bias"], f) for f in feats]
    pooled = np.empty((b, h, w), dtype=feats.dtype)
    for q in range(b):
        maxed = np.stack([(phi @ thetas[q]).max(axis=0) for phi in phis])
        pooled[q] = _sorted_mean(maxed, axis=0).reshape(h, w)
    masks = np.stack([correlation_mask(a) for a in pooled])
    fallbacks = [bool(m.sum() == 0) for m in masks]
    protos = np.stack([wgap(feats[i], masks[i]) for i in range(b)])
    resp = np.stack([refined_responses(protos, feats[q]) for q in range(b)])
    return FcpTrace(pooled, masks, protos, resp, fallbacks)


def fcp_forward(ep, params, trace=False, cache=None):
    """Foreground probabilities (B, H, W) in (0, 1) for an episode."""
    feats = _feats(ep)
    tr = foreground_responses(feats, params)
    out = decode_foreground(feats, tr.responses, params, cache=cache)
    if trace:
        return out, tr
    return out
