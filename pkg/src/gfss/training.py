"""Losses, the hand-written reverse pass, and the SGD trainer.

The trainable parameters are the base kernel rows and every FCP tensor.
Gradients are accumulated by hand over the primitives the forward pass is
built from. Two conventions matter for anyone checking them:

* the adaptation rate of the one-off kernel update is treated as a
  constant (stop-gradient); gradients still flow through both the kernels
  and the assembled prototypes, which depend on the kernels;
* the correlation mask is a hard threshold, so the two 1x1 projections of
  the FCP branch receive a zero loss gradient and change only through
  weight decay.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import io
from .errors import ConfigError, DataError, FrozenModelError, TrainingError
from .fcp import DECODER_LAYERS, FcpParams, decode_foreground, foreground_responses
from .pkl import KernelBank, adaptation_learning_rate, prototypical_kernel_update
from .tensor import conv2d_backward, log_softmax, softmax

LOG_FLOOR = math.log(1e-12)


@dataclass(frozen=True)
class TrainConfig:
    lambda_mix: float = 0.6
    lr: float = 2.5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    steps: int = 500
    batch: int = 4
    classes_per_image: int = 2
    seed: int = 0
    step_scale: float = 1.0
    fixed_alr: bool = False
    use_pkl: bool = True
    use_fcp: bool = True

    def validate(self):
        if not 0 <= self.lambda_mix <= 1:
            raise ConfigError("lambda_mix must lie in [0, 1]")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")


FIXED_ALPHA = 0.5


# ---------------------------------------------------------------- losses


def cross_entropy_loss(scores, truth):
    """Mean over pixels of -log score of the true class (log argument floored at 1e-12).

    ``scores`` is softmax-normalised (B, N, H, W) or (N, H, W).
    """
    scores = np.asarray(scores)
    truth = np.asarray(truth).astype(np.int64)
    if scores.ndim == 3:
        scores, truth = scores[None], truth[None]
    n = scores.shape[1]
    if truth.min() < 0 or truth.max() >= n:
        raise DataError(f"labels must lie in [0, {n})")
    picked = np.take_along_axis(scores, truth[:, None], axis=1)[:, 0]
    return float(np.mean(-np.log(np.maximum(picked, 1e-12))))


def iou_loss(pred, truth):
    """Soft IoU loss averaged over images; an empty union counts as 0."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DataError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if not np.all((truth == 0) | (truth == 1)):
        raise DataError("IoU truth must be binary")
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    axes = tuple(range(1, pred.ndim))
    inter = np.sum(pred * truth, axis=axes)
    union = np.sum(pred + truth - pred * truth, axis=axes)
    per = np.where(union > 0, 1 - inter / np.where(union > 0, union, 1), 0.0)
    return float(np.mean(per))


def total_loss(ce_per_image, iou, lambda_mix):
    if not 0 <= lambda_mix <= 1:
        raise ConfigError("lambda_mix must lie in [0, 1]")
    return lambda_mix * float(np.sum(ce_per_image)) + (1 - lambda_mix) * iou


# ---------------------------------------------------------- forward/backward


def _pkl_image(k, f, y, cfg, alpha=None, need_grad=True, weight=1.0):
    """CE of one image after the one-off kernel update.

    ``k`` (N, C), ``f`` (C, HW), ``y`` (HW,). Returns ce, dK, alpha.
    """
    n = k.shape[0]
    hw = f.shape[1]
    s = softmax(k @ f, axis=0)
    if cfg.use_pkl:
        p = s @ f.T
        if alpha is None:
            if cfg.fixed_alr:
                alpha = np.full(n, FIXED_ALPHA, dtype=k.dtype)
            else:
                alpha = adaptation_learning_rate(k, p)[0]
        kt = prototypical_kernel_update(k, p, cfg.step_scale, fixed_alpha=alpha)
        g = (2 * cfg.step_scale * alpha).astype(k.dtype)
    else:
        kt = k
    logp = log_softmax(kt @ f, axis=0)
    picked = logp[y, np.arange(hw)]
    active = ~(picked <= LOG_FLOOR)  # NaN stays active so it reaches the loss
    ce = -np.mean(np.where(active, picked, LOG_FLOOR))
    if not need_grad:
        return ce, None, alpha
    dz = np.exp(logp)
    dz[y, np.arange(hw)] -= 1
    dz *= active[None, :] * (weight / hw)
    dkt = dz @ f.T
    if not cfg.use_pkl:
        return ce, dkt, alpha
    dk = (1 - g)[:, None] * dkt
    dp = g[:, None] * dkt
    ds = dp @ f
    dzs = s * (ds - np.sum(s * ds, axis=0, keepdims=True))
    dk += dzs @ f.T
    return ce, dk, alpha


def _iou_grad(out, y, weight):
    """Loss and d(loss)/d(out) of the batch-mean soft IoU loss, scaled by ``weight``."""
    b = out.shape[0]
    axes = (1, 2)
    inter = np.sum(out * y, axis=axes)
    union = np.sum(out + y - out * y, axis=axes)
    ok = union > 0
    safe = np.where(ok, union, 1)
    per = np.where(ok, 1 - inter / safe, 0)
    # d(I/U)/dp = (y U - I (1 - y)) / U^2
    dratio = (y * safe[:, None, None] - inter[:, None, None] * (1 - y)) / (safe ** 2)[:, None, None]
    dout = -dratio * ok[:, None, None] * (weight / b)
    return float(np.mean(per)), dout


def forward_backward(kernels, fcp, ep, cfg, alphas=None, need_grad=True):
    """Total loss of one episode and its gradients.

    ``alphas`` (B, N_b) pins the adaptation rates, which the gradient treats
    as constants anyway; finite-difference checks pass the rates observed at
    the base point. Returns ``(report, grads, alphas)``.
    """
    feats = ep.feats
    labels = ep.label_truth
    if labels is None:
        raise DataError("training episodes need label masks")
    b, c, h, w = feats.shape
    nb = kernels.shape[0]
    if labels.min() < 0 or labels.max() >= nb:
        raise DataError(f"episode labels must be base classes in [0, {nb})")
    lam = cfg.lambda_mix
    dk = np.zeros_like(kernels)
    ces = []
    used = []
    for i in range(b):
        f = feats[i].reshape(c, -1)
        y = labels[i].reshape(-1).astype(np.int64)
        a = None if alphas is None else alphas[i]
        ce, g, a = _pkl_image(kernels, f, y, cfg, a, need_grad, weight=lam)
        ces.append(float(ce))
        used.append(a)
        if need_grad:
            dk += g
    grads = {"kernels": dk} if need_grad else None

    iou = 0.0
    if cfg.use_fcp:
        cache = {}
        tr = foreground_responses(feats, fcp)
        out = decode_foreground(feats, tr.responses, fcp, cache=cache)
        fg = ep.fg_truth if ep.fg_truth is not None else (labels != 0).astype(feats.dtype)
        iou, dout = _iou_grad(out.astype(np.float64), fg, 1 - lam)
        if need_grad:
            grads.update(_decoder_backward(fcp, cache, dout.astype(feats.dtype)))
    if need_grad:
        for name in fcp.names():
            grads.setdefault(name, np.zeros_like(fcp[name]))
    total = lam * sum(ces) + (1 - lam) * iou
    report = {"ce": ces, "iou": iou, "total": total}
    alphas_out = None if not cfg.use_pkl else np.stack(used)
    return report, grads, alphas_out


def _decoder_backward(fcp, cache, dout):
    out = cache["out"]
    dz = (dout * out * (1 - out))[:, None]
    grads = {}
    for k in reversed(range(DECODER_LAYERS)):
        x = cache[f"x{k}"]
        if k < DECODER_LAYERS - 1:
            dz = dz * (cache[f"z{k}"] > 0)
        dw, db, dx = conv2d_backward(dz, x.shape, fcp[f"dec{k}.weight"], cache[f"cols{k}"], need_input_grad=k > 0)
        grads[f"dec{k}.weight"] = dw
        grads[f"dec{k}.bias"] = db
        dz = dx
    return grads


# ------------------------------------------------------------------ state


@dataclass
class TrainState:
    kernels: np.ndarray
    class_ids: tuple
    fcp: FcpParams
    momentum: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, n_base, channels, seed=0, dtype=np.float32):
        """Kernels and FCP weights uniform in +-sqrt(1/fan_in), biases zero."""
        rng = np.random.default_rng([seed, 7])
        bound = np.sqrt(1.0 / channels)
        kernels = rng.uniform(-bound, bound, (n_base, channels)).astype(dtype)
        fcp = FcpParams.init(channels, rng, dtype)
        return cls(kernels, tuple(range(n_base)), fcp)

    def params(self):
        out = {"kernels": self.kernels}
        out.update(self.fcp.tensors)
        return out

    def copy(self):
        return TrainState(self.kernels.copy(), self.class_ids, self.fcp.copy(),
                          {k: v.copy() for k, v in self.momentum.items()}, self.step)


def _check_finite(report, state, grads=None):
    bad_grads = sorted(n for n, g in (grads or {}).items() if not np.all(np.isfinite(g)))
    if not np.isfinite(report["total"]) or bad_grads:
        diag = {
            "step": state.step,
            "ce": report["ce"],
            "iou": report["iou"],
            "kernel_norms": np.linalg.norm(state.kernels, axis=1).tolist(),
            "param_max_abs": {k: float(np.max(np.abs(v))) for k, v in state.params().items()},
            "nonfinite_grads": bad_grads,
        }
        raise TrainingError(f"non-finite loss at step {state.step}", diag)


def sgd_update(state, grads, cfg):
    """SGD with momentum and coupled weight decay, in place on ``state``.

    g = grad + wd * p;  v = mu * v + g;  p = p - lr * v
    """
    params = state.params()
    dtype = state.kernels.dtype.type
    lr, mu, wd = dtype(cfg.lr), dtype(cfg.momentum), dtype(cfg.weight_decay)
    for name in sorted(params):
        p = params[name]
        g = grads[name].astype(p.dtype) + wd * p
        v = state.momentum.get(name)
        v = g if v is None else mu * v + g
        state.momentum[name] = v
        new = p - lr * v
        if name == "kernels":
            state.kernels = new
        else:
            state.fcp.tensors[name] = new
    state.step += 1


def train_step(state, ep, cfg):
    """One SGD step on an episode; returns ``(state, loss_report)``."""
    if isinstance(state, FrozenModel):
        raise FrozenModelError("a frozen model cannot be trained")
    report, grads, _ = forward_backward(state.kernels, state.fcp, ep, cfg)
    _check_finite(report, state, grads)
    report = {"step": state.step, "ce": float(np.sum(report["ce"])), "iou": report["iou"], "total": report["total"]}
    sgd_update(state, grads, cfg)
    return state, report


def train(world, cfg, state=None, log_path=None, callback=None):
    """Run ``cfg.steps`` steps on freshly sampled base-class episodes.

    Episode ``t`` is drawn with counter ``t`` so runs are reproducible and
    resumable. Loss records are appended to ``log_path`` as JSON lines.
    """
    from .synthgen import sample_episode

    cfg.validate()
    if state is None:
        state = TrainState.init(world.spec.n_base, world.spec.channels, cfg.seed)
    reports = []
    fh = open(log_path, "a") if log_path else None
    try:
        for _ in range(cfg.steps):
            ep = sample_episode(world, cfg.batch, cfg.classes_per_image, counter=state.step)
            state, rep = train_step(state, ep, cfg)
            reports.append(rep)
            if fh:
                fh.write(json.dumps(rep, sort_keys=True) + "\n")
            if callback:
                callback(rep)
    finally:
        if fh:
            fh.close()
    return state, reports


# ----------------------------------------------------------------- freeze


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FrozenModel:
    """Immutable trained model: base kernel bank plus FCP weights."""

    bank: KernelBank
    fcp: FcpParams
    step_scale: float = 1.0
    fixed_alr: bool = False
    trained_steps: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fcp", FcpParams({k: _readonly(v) for k, v in self.fcp.tensors.items()}))


def freeze(state, cfg=None):
    """Snapshot a trained state; freezing a frozen model returns it unchanged."""
    if isinstance(state, FrozenModel):
        return state
    cfg = cfg or TrainConfig()
    bank = KernelBank(state.kernels, state.class_ids, len(state.class_ids))
    return FrozenModel(bank, state.fcp, cfg.step_scale, cfg.fixed_alr, state.step)


# ------------------------------------------------------------ checkpoints


def save_checkpoint(path, model, cfg=None):
    """Write a frozen model or train state as GFST tensors plus manifest.json."""
    io.fresh_dir(path)
    if isinstance(model, FrozenModel):
        kernels, class_ids, fcp = model.bank.base_rows, model.bank.class_ids, model.fcp
        meta = {"kind": "frozen", "step_scale": model.step_scale, "fixed_alr": model.fixed_alr,
                "step": model.trained_steps}
        momentum = {}
    else:
        kernels, class_ids, fcp = model.kernels, model.class_ids, model.fcp
        meta = {"kind": "state", "step": model.step}
        momentum = model.momentum
    files = {"kernels": "kernels.gfst"}
    io.save_tensor(os.path.join(path, "kernels.gfst"), kernels)
    for name in fcp.names():
        files[name] = f"{name}.gfst"
        io.save_tensor(os.path.join(path, files[name]), fcp[name])
    mom_files = {}
    for name in sorted(momentum):
        mom_files[name] = f"momentum.{name}.gfst"
        io.save_tensor(os.path.join(path, mom_files[name]), momentum[name])
    meta.update({"class_ids": list(class_ids), "tensors": files, "momentum": mom_files})
    if cfg is not None:
        meta["train_config"] = asdict(cfg)
    io.save_manifest(os.path.join(path, "manifest.json"), meta)


def load_checkpoint(path):
    meta = io.load_manifest(os.path.join(path, "manifest.json"))
    t = {name: io.load_tensor(os.path.join(path, fn)) for name, fn in meta["tensors"].items()}
    kernels = t.pop("kernels")
    fcp = FcpParams(t)
    class_ids = tuple(meta["class_ids"])
    if meta["kind"] == "frozen":
        bank = KernelBank(kernels, class_ids, len(class_ids))
        return FrozenModel(bank, fcp, meta["step_scale"], meta["fixed_alr"], meta["step"])
    momentum = {n: io.load_tensor(os.path.join(path, fn)) for n, fn in meta["momentum"].items()}
    return TrainState(kernels, class_ids, fcp, momentum, meta["step"])


def config_from_dict(d):
    known = {f for f in TrainConfig.__dataclass_fields__}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown train config keys: {sorted(extra)}")
    return replace(TrainConfig(), **d)
