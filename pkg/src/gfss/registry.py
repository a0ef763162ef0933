"""Novel-class registration and class-incremental session streams."""

import os
from dataclasses import dataclass

import numpy as np

from . import io
from .errors import DataError, RegistryError
from .fcp import wgap
from .pkl import KernelBank


@dataclass
class SupportSet:
    """K annotated shots of one novel class: feats (K, C, H, W), masks (K, H, W)."""

    feats: np.ndarray
    masks: np.ndarray
    class_id: int

    def __post_init__(self):
        self.feats = np.asarray(self.feats)
        self.masks = np.asarray(self.masks)
        if self.feats.ndim != 4 or self.feats.shape[0] < 1:
            raise DataError("support features must be (K>=1, C, H, W)")
        if self.masks.shape != (self.feats.shape[0],) + self.feats.shape[2:]:
            raise DataError("one (H, W) mask per shot is required")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise DataError("support masks must be binary")
        if np.any(self.masks.reshape(self.masks.shape[0], -1).sum(axis=1) == 0):
            raise DataError(f"empty support mask for class {self.class_id}")
        self.class_id = int(self.class_id)

    @property
    def shots(self):
        return self.feats.shape[0]


def class_kernel(support):
    """Shot-averaged wGAP of the annotated region (not renormalised)."""
    rows = [wgap(support.feats[k], support.masks[k], strict=True) for k in range(support.shots)]
    return np.sum(rows, axis=0) / len(rows)


def register_novel(model, supports):
    """One kernel row per support set, in the given order: (N_n, C)."""
    c = model.bank.channels
    rows = []
    for s in supports:
        if s.feats.shape[1] != c:
            raise DataError(f"support channels {s.feats.shape[1]} differ from model channels {c}")
        rows.append(class_kernel(s).astype(model.bank.kernels.dtype))
    if not rows:
        return np.zeros((0, c), dtype=model.bank.kernels.dtype)
    return np.stack(rows)


def concat_kernels(bank, novel_rows, class_ids, session=1):
    """Append novel rows after the existing ones; the input bank is untouched."""
    novel_rows = np.asarray(novel_rows, dtype=bank.kernels.dtype).reshape(-1, bank.channels)
    class_ids = [int(c) for c in class_ids]
    if len(class_ids) != novel_rows.shape[0]:
        raise RegistryError("one class id per novel row is required")
    clash = set(class_ids) & set(bank.class_ids)
    if clash or len(set(class_ids)) != len(class_ids):
        raise RegistryError(f"duplicate class ids: {sorted(clash) or class_ids}")
    if not class_ids:
        return bank
    k = np.concatenate([bank.kernels, novel_rows])
    return KernelBank(k, bank.class_ids + tuple(class_ids), bank.base_count,
                      bank.sessions + (session,) * len(class_ids))


@dataclass(frozen=True)
class Session:
    session_id: int
    class_ids: tuple
    rows: np.ndarray


class SessionRegistry:
    """Base session plus incremental novel sessions, append-only.

    ``bank`` is the whole-class kernel bank: base rows first, then each
    session's rows in arrival order.
    """

    def __init__(self, bank):
        if bank.base_count != bank.n_classes:
            raise RegistryError("a registry starts from a base-only bank")
        self._bank = bank
        self._sessions = (Session(0, bank.class_ids, bank.kernels),)

    @classmethod
    def from_model(cls, model):
        return cls(model.bank)

    @property
    def bank(self):
        return self._bank

    @property
    def sessions(self):
        return self._sessions

    @property
    def current_session(self):
        return self._sessions[-1].session_id

    @property
    def class_ids(self):
        return self._bank.class_ids

    def novel_class_ids(self):
        return self._bank.class_ids[self._bank.base_count:]

    def _append(self, session_id, class_ids, rows):
        new = object.__new__(SessionRegistry)
        new._bank = concat_kernels(self._bank, rows, class_ids, session_id)
        new._sessions = self._sessions + (Session(session_id, tuple(class_ids), new._bank.kernels[-len(class_ids):]),)
        return new


def extend_session(reg, model, supports, session_id=None):
    """Register one novel session; returns a new registry.

    ``session_id`` defaults to the next id and must otherwise equal it:
    sessions arrive strictly in order.
    """
    expected = reg.current_session + 1
    if session_id is not None and session_id != expected:
        raise RegistryError(f"session {session_id} out of order; next session is {expected}")
    ids = [s.class_id for s in supports]
    seen = set(reg.class_ids)
    overlap = seen.intersection(ids)
    if overlap or len(set(ids)) != len(ids):
        raise RegistryError(f"classes already registered or repeated: {sorted(overlap) or ids}")
    if not ids:
        raise RegistryError("a session must register at least one class")
    if reg.bank.channels != model.bank.channels:
        raise RegistryError("model and registry channel counts differ")
    rows = register_novel(model, supports)
    return reg._append(expected, ids, rows)


def save_registry(path, reg):
    """Registry directory: kernels.gfst plus manifest.json."""
    io.fresh_dir(path)
    bank = reg.bank
    io.save_tensor(os.path.join(path, "kernels.gfst"), bank.kernels)
    io.save_manifest(os.path.join(path, "manifest.json"), {
        "class_ids": list(bank.class_ids),
        "base_count": bank.base_count,
        "row_sessions": list(bank.sessions),
        "sessions": [{"session_id": s.session_id, "class_ids": list(s.class_ids)} for s in reg.sessions],
    })


def load_registry(path):
    meta = io.load_manifest(os.path.join(path, "manifest.json"))
    k = io.load_tensor(os.path.join(path, "kernels.gfst"))
    bank = KernelBank(k, meta["class_ids"], meta["base_count"], meta["row_sessions"])
    nb = bank.base_count
    reg = SessionRegistry(KernelBank(k[:nb], bank.class_ids[:nb], nb))
    start = nb
    for s in meta["sessions"][1:]:
        n = len(s["class_ids"])
        reg = reg._append(s["session_id"], s["class_ids"], k[start:start + n])
        start += n
    return reg
