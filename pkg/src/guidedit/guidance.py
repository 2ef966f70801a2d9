"""Representation guidance: distance objectives and the guided reverse step.

The guided step rewrites the plain reverse update through the gamma
coefficient and subtracts the gradient of a scalar objective evaluated at
the current target latent. Objectives combine a prompt-similarity hinge
(align closer to the target prompt than the source prompt, by margin
beta_p) and a feature hinge (stay nearer the cached source features than
the previous target step's features).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch

from .backends import (PromptEmbedding, as_latent, classifier_free_epsilon,
                       cosine_sim, gradient_of)
from .ddim import TrajectoryCache, tweedie_estimate
from .errors import NumericGuardError
from .schedule import DiffusionSchedule, gamma

Tensor = torch.Tensor

FIRST_STEP_POLICIES = ("skip-prev-term", "use-current")


@dataclass
class GuidanceConfig:
    """Weights and safeguards for guided sampling.

    lambda1/lambda2 weight the prompt and feature hinges, beta_f scales the
    source-feature distance, beta_p is the prompt-similarity margin,
    lambda3/lambda4 weight the coherence (cycle-consistency) terms, and
    cfg_scale is the classifier-free guidance scale of the step's noise
    prediction (inversion_cfg_scale covers the inversion pass, conditional
    by default).
    """

    lambda1: float = 1.0
    lambda2: float = 1.0
    beta_f: float = 1.0
    beta_p: float = 0.0
    lambda3: float = 0.0
    lambda4: float = 0.0
    cfg_scale: float = 1.0
    inversion_cfg_scale: float = 1.0
    gradient_clip: float | None = None
    first_step_policy: str = "skip-prev-term"
    grad_mode: str = "auto"
    fd_step: float = 1e-4
    fd_probes: int | None = None

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "beta_f", "lambda3", "lambda4", "cfg_scale",
                     "inversion_cfg_scale"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
            setattr(self, name, v)
        self.beta_p = float(self.beta_p)
        if not math.isfinite(self.beta_p):
            raise ValueError("beta_p must be finite")
        if self.gradient_clip is not None and self.gradient_clip <= 0:
            raise ValueError("gradient_clip must be positive when set")
        if self.first_step_policy not in FIRST_STEP_POLICIES:
            raise ValueError(f"first_step_policy must be one of {FIRST_STEP_POLICIES}")


@dataclass
class PrevTarget:
    """Previous-step target latent with its feature map (held constant)."""

    x: Tensor
    t: int
    features: Tensor


@dataclass
class GuidanceContext:
    """Everything a guidance objective needs besides the current latent."""

    schedule: DiffusionSchedule
    backend: object                    # predictor + features + encoder + codec
    cache: TrajectoryCache
    p_src: str
    p_tgt: str
    y_src: PromptEmbedding
    y_tgt: PromptEmbedding
    y_null: PromptEmbedding | None = None
    prev_target: PrevTarget | None = None
    text_src: Tensor = field(init=False)
    text_tgt: Tensor = field(init=False)

    def __post_init__(self):
        # constant text embeddings; detached so objectives only
        # differentiate through the image path
        self.text_src = self.y_src.vector.detach()
        self.text_tgt = self.y_tgt.vector.detach()

    def source_features(self, t: int) -> Tensor:
        return self.cache.features(t)

    def image_embedding(self, x: Tensor, t: int) -> Tensor:
        """CLIP-style embedding of the decoded Tweedie estimate."""
        x0_hat = tweedie_estimate(x, t, self.y_tgt, self.schedule, self.backend)
        return self.backend.encode_image(self.backend.decode(x0_hat))

    def set_prev_target(self, x: Tensor, t: int):
        feats = self.backend.features(x, t, self.y_tgt)
        self.prev_target = PrevTarget(x=x.detach().clone(), t=t,
                                      features=feats.detach().clone())


def _frob(a: Tensor, b: Tensor) -> Tensor:
    return torch.linalg.vector_norm(a - b)


def naive_distance(x, t: int, ctx: GuidanceContext, cfg: GuidanceConfig) -> Tensor:
    """Negative target-prompt similarity plus scaled source-feature distance."""
    x = as_latent(x)
    e_img = ctx.image_embedding(x, t)
    sim_tgt = cosine_sim(e_img, ctx.text_tgt)
    feat = ctx.backend.features(x, t, ctx.y_tgt)
    value = -sim_tgt + cfg.beta_f * _frob(feat, ctx.source_features(t))
    if not torch.isfinite(value):
        raise NumericGuardError(f"naive distance non-finite at level {t}")
    return value


def representation_guidance(x, t: int, ctx: GuidanceContext,
                            cfg: GuidanceConfig) -> Tensor:
    """Triplet-hinge distance objective steering the guided reverse step.

    First hinge: the decoded estimate should match the target prompt more
    than the source prompt by margin beta_p. Second hinge: the current
    feature map should sit closer (scaled by beta_f) to the cached source
    features than to the previous target step's features. At the first
    reverse step the previous target does not exist; the configured policy
    either skips the second hinge or substitutes the current latent.
    """
    x = as_latent(x)
    value = x.new_zeros(())

    if cfg.lambda1 != 0.0:
        e_img = ctx.image_embedding(x, t)
        sim_tgt = cosine_sim(e_img, ctx.text_tgt)
        sim_src = cosine_sim(e_img, ctx.text_src)
        value = value - cfg.lambda1 * torch.clamp(sim_tgt - sim_src - cfg.beta_p, max=0.0)

    if cfg.lambda2 != 0.0 and ctx.prev_target is not None:
        feat = ctx.backend.features(x, t, ctx.y_tgt)
        d_src = _frob(feat, ctx.source_features(t))
        d_prev = _frob(feat, ctx.prev_target.features)
        value = value + cfg.lambda2 * torch.clamp(cfg.beta_f * d_src - d_prev, min=0.0)

    if not torch.isfinite(value):
        raise NumericGuardError(f"representation guidance non-finite at level {t}")
    return value


def clip_gradient(grad: Tensor, max_norm: float | None) -> Tensor:
    if max_norm is None:
        return grad
    norm = torch.linalg.vector_norm(grad)
    if float(norm) > max_norm:
        grad = grad * (max_norm / norm)
    return grad


def guided_reverse_step(x, t: int, ctx: GuidanceContext, cfg: GuidanceConfig,
                        objective: Callable[[Tensor], Tensor] | None,
                        report: dict | None = None) -> Tensor:
    """One guided reverse step, level t -> t-1.

    Computes sqrt(a_{t-1}/a_t) x - sqrt(1-a_t) gamma_t eps - grad(objective);
    with a zero objective this reproduces the plain reverse update through
    the gamma identity. The noise prediction uses the classifier-free
    combination when cfg_scale != 1. A report dict, when supplied, receives
    the objective value and gradient norm for tracing.
    """
    x = as_latent(x)
    sched = ctx.schedule
    a_cur = sched.alpha(t)
    a_prev = sched.alpha(t - 1)
    g_t = gamma(sched, t)

    x_in = x.detach()
    if cfg.cfg_scale != 1.0 and ctx.y_null is not None:
        eps = classifier_free_epsilon(ctx.backend, x_in, t, ctx.y_tgt, ctx.y_null,
                                      cfg.cfg_scale)
    else:
        eps = ctx.backend.epsilon(x_in, t, ctx.y_tgt)

    out = math.sqrt(a_prev / a_cur) * x - math.sqrt(1 - a_cur) * g_t * eps
    if objective is not None:
        grad = gradient_of(objective, x, mode=cfg.grad_mode,
                           differentiable=ctx.backend.supports_differentiation,
                           fd_step=cfg.fd_step, fd_probes=cfg.fd_probes,
                           report=report)
        if grad.shape != x.shape:
            raise NumericGuardError("guidance gradient shape mismatch")
        grad = clip_gradient(grad, cfg.gradient_clip)
        if report is not None:
            report["grad_norm"] = float(torch.linalg.vector_norm(grad))
        out = out - grad
    elif report is not None:
        report["value"] = 0.0
        report["grad_norm"] = 0.0

    if not torch.isfinite(out).all():
        raise NumericGuardError(f"guided reverse step non-finite at level {t}")
    return out


def build_distance_objective(t: int, ctx: GuidanceContext,
                             cfg: GuidanceConfig) -> Callable[[Tensor], Tensor] | None:
    """Distance objective for level t, or None when both weights are zero.

    Shared by the plain guided sampler and the interleaved one so their
    zero-weight collapses agree bitwise.
    """
    if cfg.lambda1 == 0.0 and cfg.lambda2 == 0.0:
        return None
    return lambda z: representation_guidance(z, t, ctx, cfg)
