"""End-to-end edit orchestration: prompt handling, runners, I/O, tracing.

run_edit drives one task: encode the source image, invert it under the
source prompt while caching per-level latents and features, seed the
target chain with the terminal latent, run the guided reverse process
(plain or interleaved with the guided forward chain), then decode and
write every output at the end so aborted runs leave nothing partial.
"""

from __future__ import annotations

import resource
import time

import torch

from . import imgio
from .backends import JointEncoder, cosine_sim, embed_prompt, tokenize
from .coherence import interleaved_translation
from .ddim import run_inversion
from .errors import GuidEditError, NumericGuardError
from .guidance import (GuidanceConfig, GuidanceContext, build_distance_objective,
                       guided_reverse_step)
from .schedule import DiffusionSchedule
from .task import EditTask, RunTrace

Tensor = torch.Tensor


def replace_token(p_src: str, source_concept: str, target_concept: str,
                  encoder: JointEncoder) -> str:
    """Swap the prompt token nearest to the source concept for the target one.

    Nearness is cosine similarity between token embeddings; ties break
    toward the earliest position.
    """
    tokens = tokenize(p_src)
    if not tokens:
        raise ValueError("prompt has no tokens")
    concept = encoder.encode_text(source_concept)
    best_i, best_sim = 0, float("-inf")
    for i, tok in enumerate(tokens):
        sim = float(cosine_sim(encoder.encode_text(tok), concept))
        if sim > best_sim:
            best_i, best_sim = i, sim
    out = list(tokens)
    out[best_i] = target_concept
    return " ".join(out)


def guided_translation(x_terminal: Tensor, ctx: GuidanceContext,
                       cfg: GuidanceConfig, *, trace: list | None = None,
                       timings: bool = True) -> Tensor:
    """Reverse-only guided sampling from the terminal latent to clean data."""
    sched = ctx.schedule
    x = x_terminal
    ctx.prev_target = None
    if cfg.first_step_policy == "use-current":
        ctx.set_prev_target(x, sched.T - 1)
    for level in range(sched.T - 1, -1, -1):
        started = time.perf_counter() if timings else None
        report: dict = {}
        objective = build_distance_objective(level, ctx, cfg)
        try:
            x_next = guided_reverse_step(x, level, ctx, cfg, objective, report=report)
        except NumericGuardError as exc:
            raise NumericGuardError(f"target chain failed at level {level}: {exc}") from exc
        ctx.set_prev_target(x, level)
        if trace is not None:
            ms = (time.perf_counter() - started) * 1000.0 if timings else 0.0
            trace.append({"t": level, "l_dist": report.get("value", 0.0),
                          "l_cycle": 0.0, "grad_norm": report.get("grad_norm", 0.0),
                          "ms": ms})
        x = x_next
    return x


def run_edit(task: EditTask, schedule: DiffusionSchedule, backend,
             cfg: GuidanceConfig, *, interleaved: bool = False,
             timings: bool = True, figures: bool = True,
             store_features: bool = True) -> tuple[Tensor, RunTrace]:
    """Run one edit task end to end; returns the output image and trace.

    Output files (image, cache, trace CSV and figure) are written only
    after the whole run succeeds.
    """
    torch.manual_seed(task.seed)
    started = time.perf_counter() if timings else None
    trace = RunTrace(seed=task.seed, timings=timings)

    def stage(name):
        return _Stage(name)

    with stage("load"):
        x_pixels = imgio.load_image(task.source_image)
    with stage("encode"):
        x0 = backend.encode(x_pixels)
        y_src = embed_prompt(backend, task.p_src)
        y_tgt = embed_prompt(backend, task.p_tgt)
        y_null = embed_prompt(backend, "")
    with stage("invert"):
        x_terminal, cache = run_inversion(x0, y_src, schedule, backend,
                                          y_null=y_null, w=cfg.inversion_cfg_scale,
                                          store_features=store_features)
    ctx = GuidanceContext(schedule=schedule, backend=backend, cache=cache,
                          p_src=task.p_src, p_tgt=task.p_tgt,
                          y_src=y_src, y_tgt=y_tgt, y_null=y_null)
    rows: list = []
    with stage("translate"):
        if interleaved:
            x_out = interleaved_translation(x0, x_terminal, ctx, cfg,
                                            trace=rows, timings=timings)
        else:
            x_out = guided_translation(x_terminal, ctx, cfg,
                                       trace=rows, timings=timings)
    with stage("decode"):
        image = backend.decode(x_out)
        if image.shape != x_pixels.shape:
            raise GuidEditError("decoded image shape differs from the input")

    for r in rows:
        trace.add(r["t"], r["l_dist"], r["l_cycle"], r["grad_norm"], r["ms"])
    if timings:
        trace.total_ms = (time.perf_counter() - started) * 1000.0
        trace.peak_mem_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss

    with stage("write"):
        if task.output_image:
            imgio.save_image(image, task.output_image)
        if task.cache_path:
            cache.save(task.cache_path)
        if task.trace_path:
            trace.write_csv(task.trace_path)
            if figures:
                from .plotting import save_trace_figure

                save_trace_figure(trace, _figure_path(task.trace_path))
    return image, trace


def run_oig(task: EditTask, schedule: DiffusionSchedule, backend,
            cfg: GuidanceConfig, **io_kwargs) -> tuple[Tensor, RunTrace]:
    """Guided reverse-only editing (the main sampler)."""
    return run_edit(task, schedule, backend, cfg, interleaved=False, **io_kwargs)


def _figure_path(trace_path) -> str:
    p = str(trace_path)
    return (p[:-4] if p.endswith(".csv") else p) + ".png"


class _Stage:
    """Context manager that prefixes errors with the failing stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, Exception):
            exc.args = (f"[stage {self.name}] {exc.args[0] if exc.args else exc}",
                        *exc.args[1:])
        return False
