"""Seeded synthetic feature-map world standing in for a pretrained backbone.

Each class owns a unit prototype vector; a pixel's feature is its class
prototype plus isotropic Gaussian noise. Images are background (class 0)
with a few object regions laid out as rectangles or blobs. Every draw is a
pure function of ``(world seed, draw kind, counter)``.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .fcp import EpisodeBatch
from .registry import SupportSet
from .errors import ConfigError
from .tensor import l2_normalize


_KIND = {"world": 0, "episode": 1, "support": 2, "eval": 3}
# Leading salt: SeedSequence drops trailing zeros, so an unsalted [seed, 0]
# key would replay default_rng(seed).
_SALT = 0x6F55


def _stream(seed, kind, counter=None):
    key = [_SALT, seed, _KIND[kind]] + ([] if counter is None else [counter])
    return np.random.default_rng(key)


@dataclass(frozen=True)
class WorldSpec:
    channels: int = 16
    n_base: int = 6
    n_novel: int = 2
    height: int = 32
    width: int = 32
    noise_sigma: float = 0.3
    min_pairwise_angle: float = 60.0
    layout: str = "blocks"
    seed: int = 0

    def validate(self):
        if self.channels < 8 or self.channels % 8:
            raise ConfigError("channels must be >= 8 and divisible by 8")
        if self.n_base < 2:
            raise ConfigError("need at least background plus one base object class")
        if self.n_novel < 0:
            raise ConfigError("n_novel must be non-negative")
        if self.height < 2 or self.width < 2:
            raise ConfigError("images must be at least 2x2")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 0 <= self.min_pairwise_angle <= 180:
            raise ConfigError("min_pairwise_angle must lie in [0, 180] degrees")
        if self.layout not in ("blocks", "blobs"):
            raise ConfigError(f"unknown layout {self.layout!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class World:
    spec: WorldSpec
    prototypes: np.ndarray

    @property
    def n_classes(self):
        return self.prototypes.shape[0]

    @property
    def base_ids(self):
        return list(range(self.spec.n_base))

    @property
    def base_objects(self):
        return list(range(1, self.spec.n_base))

    @property
    def novel_ids(self):
        return list(range(self.spec.n_base, self.spec.n_base + self.spec.n_novel))

    def rng(self, kind, counter=0):
        return _stream(self.spec.seed, kind, counter)


@dataclass
class SyntheticSample:
    feat: np.ndarray
    labels: np.ndarray
    fg: np.ndarray


def _rejection_prototypes(rng, n, c, max_cos, tries=2000, restarts=20):
    for _ in range(restarts):
        protos = []
        for _ in range(tries):
            v = l2_normalize(rng.normal(size=c))
            if all(float(v @ p) <= max_cos + 1e-12 for p in protos):
                protos.append(v)
                if len(protos) == n:
                    return np.array(protos)
    return None


def make_world(spec):
    """Unit prototypes for all classes with pairwise angle >= the requested minimum."""
    spec.validate()
    rng = _stream(spec.seed, "world")
    n = spec.n_base + spec.n_novel
    c = spec.channels
    max_cos = np.cos(np.radians(spec.min_pairwise_angle))
    protos = None
    if spec.min_pairwise_angle < 90:
        protos = _rejection_prototypes(rng, n, c, max_cos)
    if protos is None:
        if n > c or spec.min_pairwise_angle > 90:
            raise ConfigError(f"cannot place {n} prototypes {spec.min_pairwise_angle} degrees apart in {c} dimensions")
        # orthonormal columns via QR meet any angle up to 90 degrees
        q, r = np.linalg.qr(rng.normal(size=(c, n)))
        protos = (q * np.sign(np.diag(r))).T
    return World(spec, protos.astype(np.float64))


def block_layout(rng, height, width, classes):
    """Background with one non-overlapping rectangle per class.

    Returns the label map and the list of ``(class, y0, x0, h, w)`` boxes.
    """
    labels = np.zeros((height, width), dtype=np.int64)
    boxes = []
    lo_h, hi_h = max(1, height // 4), max(1, height // 2)
    lo_w, hi_w = max(1, width // 4), max(1, width // 2)
    for cls in classes:
        for attempt in range(200):
            shrink = 1 + attempt // 50
            bh = max(1, int(rng.integers(lo_h, hi_h + 1)) // shrink)
            bw = max(1, int(rng.integers(lo_w, hi_w + 1)) // shrink)
            y0 = int(rng.integers(0, height - bh + 1))
            x0 = int(rng.integers(0, width - bw + 1))
            if np.all(labels[y0:y0 + bh, x0:x0 + bw] == 0):
                labels[y0:y0 + bh, x0:x0 + bw] = cls
                boxes.append((int(cls), y0, x0, bh, bw))
                break
        else:
            raise ConfigError("could not place all objects; use fewer classes per image")
    return labels, boxes


def blob_layout(rng, height, width, classes):
    """Background with one irregular blob per class (union of discs)."""
    labels = np.zeros((height, width), dtype=np.int64)
    yy, xx = np.mgrid[:height, :width]
    r_lo = max(1.5, min(height, width) / 10)
    r_hi = max(r_lo + 0.5, min(height, width) / 5)
    for cls in classes:
        for _ in range(200):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            blob = np.zeros_like(labels, dtype=bool)
            for _ in range(int(rng.integers(2, 5))):
                oy, ox = cy + rng.normal(scale=r_lo), cx + rng.normal(scale=r_lo)
                r = rng.uniform(r_lo, r_hi)
                blob |= (yy - oy) ** 2 + (xx - ox) ** 2 <= r * r
            if blob.any() and np.all(labels[blob] == 0):
                labels[blob] = cls
                break
        else:
            raise ConfigError("could not place all blobs; use fewer classes per image")
    return labels, None


def render(world, labels, rng, dtype=np.float32):
    """Features for a label map: prototype of each pixel's class plus noise."""
    spec = world.spec
    feat = world.prototypes[labels].transpose(2, 0, 1)
    if spec.noise_sigma > 0:
        feat = feat + rng.normal(scale=spec.noise_sigma, size=feat.shape)
    return feat.astype(dtype)


def _layout(world, rng, classes):
    fn = block_layout if world.spec.layout == "blocks" else blob_layout
    return fn(rng, world.spec.height, world.spec.width, classes)


def sample_image(world, classes, rng, dtype=np.float32):
    labels, _ = _layout(world, rng, classes)
    feat = render(world, labels, rng, dtype)
    return SyntheticSample(feat[None], labels[None], (labels != 0)[None].astype(dtype))


def sample_episode(world, batch, classes_per_image=2, counter=0, dtype=np.float32):
    """A pseudo episode of ``batch`` base-class images."""
    pool = world.base_objects
    if classes_per_image >= world.spec.n_base or classes_per_image < 1:
        raise ConfigError(f"classes_per_image must be in [1, {world.spec.n_base - 1}]")
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    rng = world.rng("episode", counter)
    samples = []
    for _ in range(batch):
        classes = rng.choice(pool, size=classes_per_image, replace=False)
        samples.append(sample_image(world, classes, rng, dtype))
    feats = np.concatenate([s.feat for s in samples])
    labels = np.concatenate([s.labels for s in samples])
    fg = np.concatenate([s.fg for s in samples])
    return EpisodeBatch(feats, fg, labels)


def sample_supports(world, class_id, k_shots=1, counter=0, dtype=np.float32):
    """``k_shots`` images of a novel class on background, with binary masks."""
    if class_id not in world.novel_ids:
        raise ConfigError(f"class {class_id} is not in the novel split")
    if k_shots < 1:
        raise ConfigError("k_shots must be >= 1")
    rng = world.rng("support", counter * 100003 + class_id)
    feats, masks = [], []
    for _ in range(k_shots):
        s = sample_image(world, [class_id], rng, dtype)
        feats.append(s.feat[0])
        masks.append((s.labels[0] == class_id).astype(dtype))
    return SupportSet(np.stack(feats), np.stack(masks), class_id)


def make_cifss_stream(world, sessions, classes_per_session=1, k_shots=1, counter=0, dtype=np.float32):
    """Disjoint groups of novel-class support sets, one group per session."""
    need = sessions * classes_per_session
    if sessions < 1 or classes_per_session < 1:
        raise ConfigError("need at least one session with one class")
    if need > world.spec.n_novel:
        raise ConfigError(f"{need} novel classes requested, only {world.spec.n_novel} available")
    ids = world.novel_ids[:need]
    return [[sample_supports(world, c, k_shots, counter, dtype)
             for c in ids[t * classes_per_session:(t + 1) * classes_per_session]]
            for t in range(sessions)]


def sample_eval_set(world, n_images, classes=None, classes_per_image=2, counter=0, dtype=np.float32):
    """Test images drawn from ``classes`` (default: every object class).

    Images cycle through the pool so every class appears.
    """
    pool = list(classes) if classes is not None else world.base_objects + world.novel_ids
    pool = [c for c in pool if c != 0]
    k = min(classes_per_image, len(pool))
    rng = world.rng("eval", counter)
    feats, labels = [], []
    for i in range(n_images):
        first = pool[i % len(pool)]
        rest = [c for c in pool if c != first]
        extra = list(rng.choice(rest, size=k - 1, replace=False)) if k > 1 else []
        s = sample_image(world, [first] + extra, rng, dtype)
        feats.append(s.feat[0])
        labels.append(s.labels[0])
    return np.stack(feats), np.stack(labels)
