"""Deterministic DDIM inversion/reverse steps, Tweedie estimate, runners.

Chains walk integer levels: -1 is the clean-data boundary (alpha == 1),
levels 0..T-1 are the schedule grid. Inversion runs -1 -> T-1 and records
the source latent and its feature map at every grid level into a
TrajectoryCache; reverse runs T-1 -> -1.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .backends import (PromptEmbedding, as_latent, classifier_free_epsilon)
from .errors import CacheError, NumericGuardError
from .schedule import DATA_LEVEL, DiffusionSchedule

Tensor = torch.Tensor

_MAGIC = "guidedit-cache v1"


@dataclass
class LatentState:
    """A latent at a sampling level with its prompt conditioning role."""

    x: Tensor
    t: int
    role: str  # "source" | "target"
    y: PromptEmbedding

    def __post_init__(self):
        self.x = as_latent(self.x)


def prompt_fingerprint(prompt_text: str) -> str:
    return hashlib.sha256(prompt_text.encode()).hexdigest()[:16]


class TrajectoryCache:
    """Per-grid-level records of (source latent, feature map).

    Immutable once inversion completes; with store_features off, feature
    maps are recomputed on demand through the bound feature function.
    """

    def __init__(self, schedule_fingerprint: str, prompt_fp: str,
                 store_features: bool = True, feature_fn=None,
                 schedule_block: str = ""):
        self.schedule_fingerprint = schedule_fingerprint
        self.prompt_fingerprint = prompt_fp
        self.schedule_block = schedule_block
        self.store_features = store_features
        self._feature_fn = feature_fn
        self._latents: dict[int, Tensor] = {}
        self._features: dict[int, Tensor] = {}
        self._complete = False

    def record(self, level: int, x: Tensor, feats: Tensor | None):
        if self._complete:
            raise CacheError("cache is complete; writes are rejected")
        self._latents[level] = as_latent(x).detach().clone()
        if feats is not None and self.store_features:
            self._features[level] = as_latent(feats).detach().clone()

    def complete(self):
        self._complete = True

    @property
    def is_complete(self) -> bool:
        return self._complete

    def levels(self) -> list[int]:
        return sorted(self._latents)

    def latent(self, level: int) -> Tensor:
        if level not in self._latents:
            raise CacheError(f"no cache record at level {level}")
        return self._latents[level]

    def features(self, level: int) -> Tensor:
        if level in self._features:
            return self._features[level]
        if level not in self._latents:
            raise CacheError(f"no cache record at level {level}")
        if self._feature_fn is None:
            raise CacheError(f"no feature map at level {level} and no feature "
                             "function bound for recomputation")
        return self._feature_fn(self._latents[level], level)

    # -- container file ----------------------------------------------------

    def save(self, path):
        if not self._complete:
            raise CacheError("cannot save an incomplete cache")
        levels = self.levels()
        if not levels:
            raise CacheError("cannot save an empty cache")
        latent_shape = tuple(self._latents[levels[0]].shape)
        feat_shape = (tuple(self._features[levels[0]].shape)
                      if self._features else None)
        header = [_MAGIC]
        header.append(self.schedule_block.rstrip("\n"))
        header.append(f"prompt.sha256={self.prompt_fingerprint}")
        header.append("latent.shape=" + ",".join(map(str, latent_shape)))
        header.append("feature.shape=" + (",".join(map(str, feat_shape))
                                          if feat_shape else "none"))
        header.append("dtype=float32")
        header.append("levels=" + ",".join(map(str, levels)))
        header.append("end-header")
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode())
            for lv in levels:
                _write_array(fh, self._latents[lv])
                if feat_shape is not None:
                    _write_array(fh, self._features[lv])

    @classmethod
    def load(cls, path) -> "TrajectoryCache":
        with open(path, "rb") as fh:
            data = fh.read()
        marker = b"end-header\n"
        cut = data.find(marker)
        if cut < 0 or not data.startswith(_MAGIC.encode()):
            raise CacheError(f"not a trajectory cache file: {path}")
        head = data[:cut].decode().splitlines()
        fields = dict(line.split("=", 1) for line in head[1:] if "=" in line)
        latent_shape = tuple(int(v) for v in fields["latent.shape"].split(","))
        feat_raw = fields.get("feature.shape", "none")
        feat_shape = (None if feat_raw == "none"
                      else tuple(int(v) for v in feat_raw.split(",")))
        levels = [int(v) for v in fields["levels"].split(",")]
        sched_block = "\n".join(l for l in head[1:] if l.startswith("schedule.")) + "\n"
        fp = hashlib.sha256(sched_block.encode()).hexdigest()[:16]
        cache = cls(fp, fields.get("prompt.sha256", ""),
                    store_features=feat_shape is not None,
                    schedule_block=sched_block)
        offset = cut + len(marker)
        for lv in levels:
            arr, offset = _read_array(data, offset, latent_shape)
            feats = None
            if feat_shape is not None:
                feats, offset = _read_array(data, offset, feat_shape)
            cache.record(lv, arr, feats)
        cache.complete()
        return cache


def _write_array(fh, tensor: Tensor):
    arr = tensor.detach().cpu().numpy().astype("<f4")
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.tobytes())


def _read_array(data: bytes, offset: int, shape) -> tuple[Tensor, int]:
    (count,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).copy()
    offset += 4 * count
    return torch.as_tensor(arr.reshape(shape), dtype=torch.float64), offset


# ---------------------------------------------------------------------------
# steps


def _predict(backend, x, t, y, y_null, w):
    if y_null is None or w == 1.0:
        return backend.epsilon(x, t, y)
    return classifier_free_epsilon(backend, x, t, y, y_null, w)


def _guard_finite(x: Tensor, what: str):
    if not torch.isfinite(x).all():
        raise NumericGuardError(f"{what} produced non-finite values")
    return x


def invert_step(state: LatentState, schedule: DiffusionSchedule, backend, *,
                y_null: PromptEmbedding | None = None, w: float = 1.0,
                cache: TrajectoryCache | None = None) -> LatentState:
    """One inversion step, level t -> t+1.

    Records the (input latent, feature map) pair into the active cache when
    the input sits on the grid.
    """
    t = state.t
    if not DATA_LEVEL <= t <= schedule.T - 2:
        raise ValueError(f"invert_step: level {t} has no successor on the grid")
    a_cur = schedule.alpha(t)
    a_next = schedule.alpha(t + 1)
    eps = _predict(backend, state.x, t, state.y, y_null, w)
    x_next = (a_next ** 0.5 * (state.x - (1 - a_cur) ** 0.5 * eps) / a_cur ** 0.5
              + (1 - a_next) ** 0.5 * eps)
    _guard_finite(x_next, f"inversion step at level {t}")
    if cache is not None and t >= 0:
        feats = backend.features(state.x, t, state.y) if cache.store_features else None
        cache.record(t, state.x, feats)
    return LatentState(x=x_next, t=t + 1, role=state.role, y=state.y)


def reverse_step(state: LatentState, schedule: DiffusionSchedule, backend, *,
                 y_null: PromptEmbedding | None = None,
                 w: float = 1.0) -> LatentState:
    """One plain reverse step, level t -> t-1."""
    t = state.t
    if not 0 <= t <= schedule.T - 1:
        raise ValueError(f"reverse_step: level {t} has no predecessor")
    a_cur = schedule.alpha(t)
    a_prev = schedule.alpha(t - 1)
    eps = _predict(backend, state.x, t, state.y, y_null, w)
    x_prev = (a_prev ** 0.5 * (state.x - (1 - a_cur) ** 0.5 * eps) / a_cur ** 0.5
              + (1 - a_prev) ** 0.5 * eps)
    _guard_finite(x_prev, f"reverse step at level {t}")
    return LatentState(x=x_prev, t=t - 1, role=state.role, y=state.y)


def tweedie_estimate(x: Tensor, t: int, y: PromptEmbedding,
                     schedule: DiffusionSchedule, backend, *,
                     y_null: PromptEmbedding | None = None,
                     w: float = 1.0) -> Tensor:
    """One-step clean-sample prediction (x - sqrt(1-a) eps) / sqrt(a)."""
    a = schedule.alpha(t)
    if a <= 0:
        raise ValueError("tweedie estimate undefined at alpha == 0")
    x = as_latent(x)
    eps = _predict(backend, x, t, y, y_null, w)
    return (x - (1 - a) ** 0.5 * eps) / a ** 0.5


# ---------------------------------------------------------------------------
# trajectory runners


def run_inversion(x0, y_src: PromptEmbedding, schedule: DiffusionSchedule,
                  backend, *, y_null: PromptEmbedding | None = None,
                  w: float = 1.0, store_features: bool = True
                  ) -> tuple[Tensor, TrajectoryCache]:
    """Invert clean data to the terminal latent, filling the cache.

    Returns the terminal latent (level T-1) and the completed cache with a
    record at every grid level.
    """
    x0 = as_latent(x0)
    _guard_finite(x0, "inversion input")
    feature_fn = (lambda x, lv: backend.features(x, lv, y_src))
    cache = TrajectoryCache(schedule.fingerprint(), prompt_fingerprint(y_src.prompt_text),
                            store_features=store_features, feature_fn=feature_fn,
                            schedule_block=schedule.serialize())
    state = LatentState(x=x0, t=DATA_LEVEL, role="source", y=y_src)
    for _ in range(schedule.T):
        try:
            state = invert_step(state, schedule, backend, y_null=y_null, w=w,
                                cache=cache)
        except NumericGuardError as exc:
            raise NumericGuardError(f"inversion aborted at level {state.t}: {exc}") from exc
    terminal = schedule.T - 1
    feats = backend.features(state.x, terminal, y_src) if store_features else None
    cache.record(terminal, state.x, feats)
    cache.complete()
    return state.x, cache


def run_reverse(x_terminal, y: PromptEmbedding, schedule: DiffusionSchedule,
                backend, *, y_null: PromptEmbedding | None = None,
                w: float = 1.0, role: str = "target") -> Tensor:
    """Plain reverse trajectory from the terminal level down to clean data."""
    state = LatentState(x=as_latent(x_terminal), t=schedule.T - 1, role=role, y=y)
    _guard_finite(state.x, "reverse input")
    for _ in range(schedule.T):
        try:
            state = reverse_step(state, schedule, backend, y_null=y_null, w=w)
        except NumericGuardError as exc:
            raise NumericGuardError(f"reverse aborted at level {state.t}: {exc}") from exc
    return state.x
