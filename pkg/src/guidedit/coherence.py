"""Coherence guidance: cycle-consistency objectives and the interleaved sampler.

Two chains run side by side: a guided forward chain re-inverts the source
image while a guided backward chain denoises the target. Each forward step
optimizes an efficient cycle objective matching terminal latents; each
backward step adds a cycle objective matching clean-image estimates to the
distance objective. Both cycle estimates pair a one-step terminal
extrapolation with a full plain trajectory of the opposite direction, and
only the single noise prediction inside the differentiated estimate
carries gradient.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import torch

from .backends import (PromptEmbedding, as_latent, classifier_free_epsilon,
                       gradient_of)
from .ddim import LatentState, invert_step, run_reverse, tweedie_estimate
from .errors import NumericGuardError
from .guidance import (GuidanceConfig, GuidanceContext, build_distance_objective,
                       clip_gradient, guided_reverse_step)
from .schedule import DATA_LEVEL, DiffusionSchedule

Tensor = torch.Tensor

# The cycle objectives are unsquared norms, so their gradient keeps unit
# magnitude however small the gap; below this relative threshold the gap is
# rounding noise and the subgradient at the kink is taken as zero.
CYCLE_ZERO_TOL = 1e-12


def _cycle_gap_negligible(value: float, reference: Tensor) -> bool:
    scale = 1.0 + float(torch.linalg.vector_norm(reference))
    return value <= CYCLE_ZERO_TOL * scale


@dataclass
class CycleEstimates:
    """The four latent estimates entering the cycle objectives."""

    terminal_fwd: Tensor    # one-step terminal extrapolation of the source chain
    clean_fwd: Tensor       # plain reverse of terminal_fwd down to clean data
    clean_bwd: Tensor       # Tweedie estimate of the current target latent
    terminal_bwd: Tensor    # plain inversion of clean_bwd up to the terminal
    t0: int


def one_step_terminal_estimate(x, t0: int, y: PromptEmbedding,
                               schedule: DiffusionSchedule, backend, *,
                               y_null: PromptEmbedding | None = None,
                               w: float = 1.0) -> Tensor:
    """Single-evaluation extrapolation from level t0 to the terminal level.

    sqrt(a_T/a_t0) x + (sqrt(1-a_T) - sqrt(a_T (1-a_t0)/a_t0)) eps(x, t0).
    At t0 == terminal the map is the identity and x is returned unchanged.
    """
    x = as_latent(x)
    terminal = schedule.terminal_level
    if not DATA_LEVEL <= t0 <= terminal:
        raise ValueError(f"t0 level {t0} outside [-1, {terminal}]")
    if t0 == terminal:
        return x
    a0 = schedule.alpha(t0)
    a_T = schedule.alpha(terminal)
    if y_null is not None and w != 1.0:
        eps = classifier_free_epsilon(backend, x, t0, y, y_null, w)
    else:
        eps = backend.epsilon(x, t0, y)
    coef = math.sqrt(1 - a_T) - math.sqrt(a_T * (1 - a0) / a0)
    return math.sqrt(a_T / a0) * x + coef * eps


def estimate_cycle(x_src, src_level: int, x_tgt, tgt_level: int,
                   ctx, cfg: GuidanceConfig) -> CycleEstimates:
    """Compute all four cycle estimates for the current chain states.

    Constant with respect to any differentiation; used for inspection and
    tests (the samplers stream the pieces they need instead).
    """
    sched = ctx.schedule
    backend = ctx.backend
    with torch.no_grad():
        terminal_fwd = one_step_terminal_estimate(
            as_latent(x_src), src_level, ctx.y_src, sched, backend,
            y_null=ctx.y_null, w=cfg.inversion_cfg_scale)
        clean_fwd = run_reverse(terminal_fwd, ctx.y_tgt, sched, backend,
                                y_null=ctx.y_null, w=cfg.cfg_scale)
        clean_bwd = tweedie_estimate(as_latent(x_tgt), tgt_level, ctx.y_tgt,
                                     sched, backend, y_null=ctx.y_null,
                                     w=cfg.cfg_scale)
        terminal_bwd = _plain_inversion(clean_bwd, ctx.y_src, sched, backend,
                                        ctx.y_null, cfg.inversion_cfg_scale)
    return CycleEstimates(terminal_fwd=terminal_fwd, clean_fwd=clean_fwd,
                          clean_bwd=clean_bwd, terminal_bwd=terminal_bwd,
                          t0=src_level)


def cycle_objective(clean_fwd: Tensor, clean_bwd: Tensor) -> Tensor:
    """Euclidean gap between the two clean-image estimates."""
    if clean_fwd.shape != clean_bwd.shape:
        raise NumericGuardError("cycle objective: estimate shapes differ")
    return torch.linalg.vector_norm(clean_fwd - clean_bwd)


def efficient_cycle_objective(terminal_fwd: Tensor, terminal_bwd: Tensor) -> Tensor:
    """Euclidean gap between the two terminal-latent estimates."""
    if terminal_fwd.shape != terminal_bwd.shape:
        raise NumericGuardError("efficient cycle objective: estimate shapes differ")
    return torch.linalg.vector_norm(terminal_fwd - terminal_bwd)


def _plain_inversion(x0: Tensor, y: PromptEmbedding, schedule: DiffusionSchedule,
                     backend, y_null, w) -> Tensor:
    """Full plain inversion from clean data to the terminal level, no cache."""
    state = LatentState(x=x0, t=DATA_LEVEL, role="source", y=y)
    for _ in range(schedule.T):
        state = invert_step(state, schedule, backend, y_null=y_null, w=w)
    return state.x


def forward_with_guidance(x_src, t: int, y_src: PromptEmbedding,
                          schedule: DiffusionSchedule, backend,
                          cfg: GuidanceConfig, *,
                          target_terminal: Tensor | None = None,
                          objective=None,
                          y_null: PromptEmbedding | None = None,
                          report: dict | None = None) -> Tensor:
    """One guided inversion step, level t -> t+1, on the source chain.

    Subtracts the gradient of lambda3 times the efficient cycle objective,
    whose differentiated path runs through the single noise prediction of
    the one-step terminal estimate at the input's own level; the opposing
    terminal estimate is held constant. With lambda3 == 0 (or no target
    estimate yet) this is the plain inversion update. An explicit
    objective callable replaces the cycle objective (it is still scaled by
    lambda3).
    """
    x = as_latent(x_src)
    if not DATA_LEVEL <= t <= schedule.T - 2:
        raise ValueError(f"forward_with_guidance: level {t} has no successor")
    a_cur = schedule.alpha(t)
    a_next = schedule.alpha(t + 1)
    w = cfg.inversion_cfg_scale
    if y_null is not None and w != 1.0:
        eps = classifier_free_epsilon(backend, x.detach(), t, y_src, y_null, w)
    else:
        eps = backend.epsilon(x.detach(), t, y_src)
    # sqrt(1-a_t) gamma'_t expanded so the data boundary (a_t == 1) stays defined
    coef_eps = math.sqrt((1 - a_cur) * a_next / a_cur) - math.sqrt(1 - a_next)
    out = math.sqrt(a_next / a_cur) * x - coef_eps * eps

    if cfg.lambda3 != 0.0 and (objective is not None or target_terminal is not None):
        if objective is None:
            const = target_terminal.detach()

            def objective(z: Tensor) -> Tensor:
                est = one_step_terminal_estimate(z, t, y_src, schedule, backend,
                                                 y_null=y_null, w=w)
                return efficient_cycle_objective(est, const)

            with torch.no_grad():
                gap = float(objective(x))
            if _cycle_gap_negligible(gap, const):
                if report is not None:
                    report["value"] = cfg.lambda3 * gap
                    report["grad_norm"] = 0.0
                if not torch.isfinite(out).all():
                    raise NumericGuardError(
                        f"guided forward step non-finite at level {t}")
                return out

        loss = objective

        def scaled(z: Tensor) -> Tensor:
            return cfg.lambda3 * loss(z)

        grad = gradient_of(scaled, x, mode=cfg.grad_mode,
                           differentiable=backend.supports_differentiation,
                           fd_step=cfg.fd_step, fd_probes=cfg.fd_probes,
                           report=report)
        grad = clip_gradient(grad, cfg.gradient_clip)
        if report is not None:
            report["grad_norm"] = float(torch.linalg.vector_norm(grad))
        out = out - grad

    if not torch.isfinite(out).all():
        raise NumericGuardError(f"guided forward step non-finite at level {t}")
    return out


def backward_with_guidance(x_tgt, t: int, ctx: GuidanceContext, cfg: GuidanceConfig,
                           *, clean_fwd: Tensor | None = None,
                           report: dict | None = None) -> Tensor:
    """One guided reverse step whose objective adds the cycle term.

    The cycle term compares a constant forward-path clean estimate against
    the Tweedie estimate of the differentiated latent; with lambda4 == 0 it
    reduces exactly to the distance-guided step.
    """
    distance = build_distance_objective(t, ctx, cfg)
    l_cycle = 0.0
    if cfg.lambda4 == 0.0 or clean_fwd is None:
        objective = distance
    else:
        const = clean_fwd.detach()

        def cycle_part(z: Tensor) -> Tensor:
            est = tweedie_estimate(z, t, ctx.y_tgt, ctx.schedule, ctx.backend)
            return cycle_objective(const, est)

        with torch.no_grad():
            l_cycle = float(cycle_part(as_latent(x_tgt)))

        if _cycle_gap_negligible(l_cycle, const):
            objective = distance  # norm kink: subgradient zero at coincidence
        elif distance is None:
            objective = lambda z: cfg.lambda4 * cycle_part(z)
        else:
            objective = lambda z: distance(z) + cfg.lambda4 * cycle_part(z)

    out = guided_reverse_step(x_tgt, t, ctx, cfg, objective, report=report)
    if report is not None:
        report["l_cycle"] = l_cycle
        report["l_dist"] = report.get("value", 0.0) - cfg.lambda4 * l_cycle
    return out


def interleaved_translation(x0_src: Tensor, x_terminal: Tensor,
                            ctx: GuidanceContext, cfg: GuidanceConfig, *,
                            trace: list | None = None,
                            timings: bool = True) -> Tensor:
    """Alternate guided forward and backward steps until the target is clean.

    Seeds the source chain with the clean source data and the target chain
    with the plain-inversion terminal; at every iteration the source chain
    advances one level first and the backward step then consumes its
    freshly updated latent for the cycle estimate.
    """
    sched = ctx.schedule
    backend = ctx.backend
    T = sched.T
    src = LatentState(x=as_latent(x0_src), t=DATA_LEVEL, role="source", y=ctx.y_src)
    tgt_x = as_latent(x_terminal)

    ctx.prev_target = None
    if cfg.first_step_policy == "use-current":
        ctx.set_prev_target(tgt_x, T - 1)

    for level in range(T - 1, -1, -1):
        started = time.perf_counter() if timings else None
        # forward step on the source chain (its input level is T-level-2)
        fwd_report: dict = {}
        target_terminal = None
        if cfg.lambda3 != 0.0:
            with torch.no_grad():
                clean_bwd = tweedie_estimate(tgt_x, level, ctx.y_tgt, sched, backend,
                                             y_null=ctx.y_null, w=cfg.cfg_scale)
                target_terminal = _plain_inversion(clean_bwd, ctx.y_src, sched, backend,
                                                   ctx.y_null, cfg.inversion_cfg_scale)
        try:
            src_next = forward_with_guidance(src.x, src.t, ctx.y_src, sched, backend,
                                             cfg, target_terminal=target_terminal,
                                             y_null=ctx.y_null, report=fwd_report)
        except NumericGuardError as exc:
            raise NumericGuardError(f"source chain failed at level {src.t}: {exc}") from exc
        src = LatentState(x=src_next, t=src.t + 1, role="source", y=ctx.y_src)

        # backward step on the target chain, consuming the updated source latent
        clean_fwd = None
        if cfg.lambda4 != 0.0:
            with torch.no_grad():
                est_terminal = one_step_terminal_estimate(
                    src.x, src.t, ctx.y_src, sched, backend,
                    y_null=ctx.y_null, w=cfg.inversion_cfg_scale)
                clean_fwd = run_reverse(est_terminal, ctx.y_tgt, sched, backend,
                                        y_null=ctx.y_null, w=cfg.cfg_scale)
        report: dict = {}
        try:
            tgt_next = backward_with_guidance(tgt_x, level, ctx, cfg,
                                              clean_fwd=clean_fwd, report=report)
        except NumericGuardError as exc:
            raise NumericGuardError(f"target chain failed at level {level}: {exc}") from exc
        ctx.set_prev_target(tgt_x, level)
        if trace is not None:
            ms = (time.perf_counter() - started) * 1000.0 if timings else 0.0
            trace.append({"t": level,
                          "l_dist": report.get("l_dist", report.get("value", 0.0)),
                          "l_cycle": report.get("l_cycle", 0.0),
                          "grad_norm": report.get("grad_norm", 0.0),
                          "ms": ms})
        tgt_x = tgt_next

    return tgt_x


def run_oig_plus(task, schedule: DiffusionSchedule, backend, cfg: GuidanceConfig,
                 **io_kwargs):
    """Interleaved guided translation of an edit task; see pipeline.run_edit."""
    from . import pipeline

    return pipeline.run_edit(task, schedule, backend, cfg, interleaved=True,
                             **io_kwargs)
