"""Experiment plumbing: run configuration, on-disk datasets, GFSS/CIFSS runs, ablations."""

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import io
from .cbbi import InferenceConfig, infer
from .errors import ConfigError, DataError
from .metrics import ConfusionMatrix, confusion_accumulate, evaluate
from .registry import SessionRegistry, SupportSet, extend_session
from .synthgen import World, WorldSpec, make_world, sample_eval_set, sample_supports
from .training import TrainConfig, freeze, train


@dataclass(frozen=True)
class RunSettings:
    eval_images: int = 40
    eval_counter: int = 0
    k_shots: int = 1
    support_counter: int = 0
    sessions: int = 1
    classes_per_session: int = 0  # 0: all novel classes split evenly over the sessions

    def validate(self):
        if self.eval_images < 1:
            raise ConfigError("eval_images must be >= 1")
        if self.k_shots < 1:
            raise ConfigError("k_shots must be >= 1")
        if self.sessions < 1:
            raise ConfigError("sessions must be >= 1")
        if self.classes_per_session < 0:
            raise ConfigError("classes_per_session must be >= 0")


_SECTIONS = {"world": WorldSpec, "train": TrainConfig, "infer": InferenceConfig, "run": RunSettings}


@dataclass(frozen=True)
class RunConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferenceConfig = field(default_factory=InferenceConfig)
    run: RunSettings = field(default_factory=RunSettings)

    def validate(self):
        self.world.validate()
        self.train.validate()
        self.infer.validate()
        self.run.validate()
        return self

    def to_flat(self):
        out = {}
        for sec in _SECTIONS:
            for k, v in asdict(getattr(self, sec)).items():
                out[f"{sec}.{k}"] = v
        return out

    @classmethod
    def from_flat(cls, flat, base=None):
        """Apply dotted keys (``"train.lr": 0.05``) on top of ``base``; unknown keys raise."""
        base = base or cls()
        parts = {sec: {} for sec in _SECTIONS}
        for key, value in flat.items():
            sec, _, name = key.partition(".")
            if sec not in _SECTIONS or name not in {f.name for f in fields(_SECTIONS[sec])}:
                raise ConfigError(f"unknown config key {key!r}")
            parts[sec][name] = _coerce(_SECTIONS[sec], name, value)
        return cls(**{sec: replace(getattr(base, sec), **parts[sec]) for sec in _SECTIONS})

    def with_seed(self, seed):
        return replace(self, world=replace(self.world, seed=int(seed)), train=replace(self.train, seed=int(seed)))

    def to_json(self):
        return json.dumps(self.to_flat(), indent=2, sort_keys=True)


def _coerce(cls, name, value):
    default = {f.name: f.default for f in fields(cls)}[name]
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ConfigError(f"{name} expects a boolean, got {value!r}")
            return value.lower() in ("true", "1")
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name} expects an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name} expects an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name} expects a number, got {value!r}") from None
    return str(value)


def parse_override(text):
    """``key=value`` with the value read as JSON when possible."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=(), seed=None):
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``."""
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                flat = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(flat, dict):
            raise ConfigError("config file must hold one flat object of dotted keys")
        cfg = RunConfig.from_flat(flat, cfg)
    if overrides:
        cfg = RunConfig.from_flat(dict(parse_override(o) for o in overrides), cfg)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg.validate()


# Desk-scale experiment: the default world with a step budget of 500 and a
# learning rate and update scale that converge inside it.
DESK_OVERRIDES = {"train.steps": 500, "train.lr": 0.05, "train.step_scale": 1 / 16}


def desk_config(**extra):
    return RunConfig.from_flat({**DESK_OVERRIDES, **extra}).validate()


# ------------------------------------------------------------------ datasets


@dataclass
class Dataset:
    world: World
    eval_feats: np.ndarray
    eval_labels: np.ndarray
    supports: dict  # class id -> SupportSet

    @property
    def eval_fg(self):
        return (self.eval_labels != 0).astype(self.eval_feats.dtype)


def build_dataset(cfg):
    world = make_world(cfg.world)
    feats, labels = sample_eval_set(world, cfg.run.eval_images, counter=cfg.run.eval_counter)
    supports = {c: sample_supports(world, c, cfg.run.k_shots, cfg.run.support_counter) for c in world.novel_ids}
    return Dataset(world, feats, labels, supports)


def save_dataset(path, ds):
    io.fresh_dir(path)
    j = lambda name: os.path.join(path, name)  # noqa: E731
    io.save_tensor(j("prototypes.gfst"), ds.world.prototypes)
    io.save_tensor(j("eval_feats.gfst"), ds.eval_feats)
    io.save_tensor(j("eval_labels.gfst"), ds.eval_labels.astype(np.float32))
    io.save_tensor(j("eval_fg.gfst"), ds.eval_fg)
    sup = {}
    for c, s in sorted(ds.supports.items()):
        sup[str(c)] = {"feats": f"support_{c}_feats.gfst", "masks": f"support_{c}_masks.gfst"}
        io.save_tensor(j(sup[str(c)]["feats"]), s.feats)
        io.save_tensor(j(sup[str(c)]["masks"]), s.masks)
    io.save_manifest(j("manifest.json"), {
        "kind": "dataset",
        "world": ds.world.spec.to_dict(),
        "base_ids": ds.world.base_ids,
        "novel_ids": ds.world.novel_ids,
        "prototypes": "prototypes.gfst",
        "eval": {"feats": "eval_feats.gfst", "labels": "eval_labels.gfst", "fg": "eval_fg.gfst"},
        "supports": sup,
    })


def load_dataset(path):
    mpath = os.path.join(path, "manifest.json")
    if not os.path.isfile(mpath):
        raise DataError(f"{path} is not a dataset directory (no manifest.json)")
    meta = io.load_manifest(mpath)
    j = lambda name: os.path.join(path, name)  # noqa: E731
    world = World(WorldSpec(**meta["world"]), io.load_tensor(j(meta["prototypes"])))
    feats = io.load_tensor(j(meta["eval"]["feats"]))
    labels = io.load_tensor(j(meta["eval"]["labels"])).astype(np.int64)
    supports = {int(c): SupportSet(io.load_tensor(j(f["feats"])), io.load_tensor(j(f["masks"])), int(c))
                for c, f in meta["supports"].items()}
    return Dataset(world, feats, labels, supports)


# ---------------------------------------------------------------------- runs


def train_model(world, train_cfg, log_path=None):
    state, _ = train(world, train_cfg, log_path=log_path)
    return freeze(state, train_cfg)


def evaluate_predictions(pred, truth, world, class_ids=None, tag=""):
    acc = confusion_accumulate(pred, truth, ConfusionMatrix(world.n_classes))
    novel = [c for c in world.novel_ids if class_ids is None or c in class_ids]
    return evaluate(acc, world.base_ids, novel, tag)


def run_gfss(ds, model, infer_cfg, tag="gfss"):
    """Register every novel class in one session, then evaluate the eval set."""
    reg = extend_session(SessionRegistry.from_model(model), model,
                         [ds.supports[c] for c in ds.world.novel_ids])
    pred = infer(model, reg, ds.eval_feats, infer_cfg)
    return reg, evaluate_predictions(pred, ds.eval_labels, ds.world, reg.class_ids, tag)


def session_plan(novel_ids, sessions, classes_per_session=0):
    """Split novel ids, in order, into ``sessions`` consecutive groups."""
    novel_ids = list(novel_ids)
    if classes_per_session == 0:
        if len(novel_ids) % sessions:
            raise ConfigError(f"{len(novel_ids)} novel classes do not split evenly into {sessions} sessions")
        classes_per_session = len(novel_ids) // sessions
    need = sessions * classes_per_session
    if need > len(novel_ids) or classes_per_session < 1:
        raise ConfigError(f"{sessions} sessions of {classes_per_session} classes need {need} novel classes, "
                          f"world has {len(novel_ids)}")
    return [novel_ids[t * classes_per_session:(t + 1) * classes_per_session] for t in range(sessions)]


@dataclass
class SessionResult:
    session: int
    report: object
    new_class_iou: dict


CIFSS_COLUMNS = ("session", "classes", "miou_base", "miou_novel", "hiou", "new_class_iou")


def run_cifss(ds, model, infer_cfg, plan, n_eval=None, eval_counter=0):
    """Session 0 is the base model; each later session registers one group.

    Each session is evaluated on fresh images of the classes seen so far,
    drawn with the same counter, so a single session covering every novel
    class evaluates exactly the images of :func:`run_gfss`.
    """
    world = ds.world
    n_eval = n_eval or ds.eval_feats.shape[0]
    reg = SessionRegistry.from_model(model)
    results = []
    seen = []
    for t in range(len(plan) + 1):
        if t:
            reg = extend_session(reg, model, [ds.supports[c] for c in plan[t - 1]], t)
            seen += plan[t - 1]
        if set(seen) == set(world.novel_ids) and n_eval == ds.eval_feats.shape[0]:
            feats, labels = ds.eval_feats, ds.eval_labels
        else:
            feats, labels = sample_eval_set(world, n_eval, world.base_objects + seen, counter=eval_counter)
        pred = infer(model, reg, feats, infer_cfg)
        rep = evaluate_predictions(pred, labels, world, reg.class_ids, tag=f"session{t}")
        new = {c: rep.per_class_iou.get(c, 0.0) for c in (plan[t - 1] if t else [])}
        results.append(SessionResult(t, rep, new))
    return reg, results


def cifss_table(results):
    rows = [",".join(CIFSS_COLUMNS)]
    for r in results:
        cells = [r.session, " ".join(str(c) for c in r.new_class_iou) or "-",
                 r.report.miou_base, r.report.miou_novel, r.report.hiou,
                 " ".join(f"{c}:{v!r}" for c, v in r.new_class_iou.items()) or "-"]
        rows.append(",".join("" if v is None else str(v) for v in cells))
    return "\n".join(rows) + "\n"


# ----------------------------------------------------------------- ablation

# tag -> (train overrides, inference overrides)
ABLATIONS = {
    "full": ({}, {}),
    "no-pkl": ({"use_pkl": False}, {"use_pkl_update": False}),
    "no-fcp": ({"use_fcp": False}, {"use_fcp": False}),
    "no-cbbi": ({}, {"use_cbbi": False}),
    "no-cbbi-no-pkl": ({"use_pkl": False}, {"use_cbbi": False, "use_pkl_update": False}),
    "fixed-alr": ({"fixed_alr": True}, {"fixed_alr": True}),
}


def run_ablation(ds, cfg, tags=None, log=None):
    """One tagged EvalReport per ablation; models sharing train settings are trained once."""
    tags = list(tags or ABLATIONS)
    unknown = [t for t in tags if t not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown ablation tags {unknown}; choose from {list(ABLATIONS)}")
    models = {}
    reports = []
    for tag in tags:
        t_over, i_over = ABLATIONS[tag]
        key = tuple(sorted(t_over.items()))
        if key not in models:
            if log:
                log(f"training for {tag}")
            models[key] = train_model(ds.world, replace(cfg.train, **t_over))
        _, rep = run_gfss(ds, models[key], replace(cfg.infer, **i_over), tag=tag)
        reports.append(rep)
    return reports
