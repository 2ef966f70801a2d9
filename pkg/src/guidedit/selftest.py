"""Self-contained property checks on the analytic backends.

Each check returns (name, passed, detail); the CLI prints one line per
check and exits nonzero if any fails. The checks are a fast subset of the
full acceptance suite and need no external files.
"""

from __future__ import annotations

import math

import torch

from .backends import (AnalyticGMMBackend, ConstantEpsilonBackend, GaussianMixture,
                       VocabEncoder, embed_prompt, gradient_of)
from .coherence import one_step_terminal_estimate
from .ddim import LatentState, invert_step, reverse_step, run_inversion, run_reverse
from .guidance import GuidanceConfig, GuidanceContext, guided_reverse_step, \
    representation_guidance
from .schedule import DATA_LEVEL, build_schedule


def _toy_gmm(T: int = 10, total: int = 400, seed: int = 0):
    schedule = build_schedule(total, T)
    vocab = {"a cat": torch.tensor([1.0, 0.0]), "a dog": torch.tensor([0.0, 1.0]),
             "cat": torch.tensor([1.0, 0.0]), "dog": torch.tensor([0.0, 1.0])}
    encoder = VocabEncoder(vocab=vocab, embed_dim=2,
                           image_proj=torch.eye(2, dtype=torch.float64))
    mix = GaussianMixture(weights=torch.tensor([0.5, 0.5]),
                          means=torch.tensor([[2.2, 0.3], [0.3, 2.2]]),
                          variances=torch.tensor([0.45, 0.45]))
    cat = GaussianMixture(weights=torch.tensor([1.0]),
                          means=torch.tensor([[2.2, 0.3]]),
                          variances=torch.tensor([0.45]))
    dog = GaussianMixture(weights=torch.tensor([1.0]),
                          means=torch.tensor([[0.3, 2.2]]),
                          variances=torch.tensor([0.45]))
    backend = AnalyticGMMBackend(schedule, mix,
                                 prompt_mixtures={"a cat": cat, "a dog": dog},
                                 encoder=encoder)
    return schedule, backend


def _context(schedule, backend, x0, seed=0):
    y_src = embed_prompt(backend, "a cat")
    y_tgt = embed_prompt(backend, "a dog")
    _, cache = run_inversion(x0, y_src, schedule, backend)
    return GuidanceContext(schedule=schedule, backend=backend, cache=cache,
                           p_src="a cat", p_tgt="a dog", y_src=y_src, y_tgt=y_tgt)


def check_zero_guidance_identity(trials: int = 200):
    schedule, backend = _toy_gmm()
    y = embed_prompt(backend, "a dog")
    ctx_template = None
    g = torch.Generator().manual_seed(42)
    worst = 0.0
    for i in range(trials):
        x = torch.randn(2, dtype=torch.float64, generator=g) * 2.0
        t = int(torch.randint(0, schedule.T, (1,), generator=g))
        if ctx_template is None:
            _, cache = run_inversion(x, y, schedule, backend)
            ctx_template = GuidanceContext(schedule=schedule, backend=backend,
                                           cache=cache, p_src="a cat", p_tgt="a dog",
                                           y_src=embed_prompt(backend, "a cat"),
                                           y_tgt=y)
        guided = guided_reverse_step(x, t, ctx_template, GuidanceConfig(), None)
        plain = reverse_step(LatentState(x=x, t=t, role="target", y=y),
                             schedule, backend).x
        rel = float(torch.linalg.vector_norm(guided - plain)
                    / torch.linalg.vector_norm(plain).clamp(min=1e-30))
        worst = max(worst, rel)
    return "zero-guidance identity", worst <= 1e-9, f"worst rel err {worst:.3e}"


def check_constant_round_trip():
    schedule = build_schedule(400, 12)
    backend = ConstantEpsilonBackend(torch.tensor([0.7, -0.4]))
    y = embed_prompt(backend, "anything")
    x0 = torch.tensor([1.3, -2.1], dtype=torch.float64)
    x_T, _ = run_inversion(x0, y, schedule, backend)
    back = run_reverse(x_T, y, schedule, backend)
    err = float(torch.linalg.vector_norm(back - x0))
    return "constant-eps exact round trip", err <= 1e-12, f"err {err:.3e}"


def check_gmm_round_trip_refinement():
    errs = []
    for T in (8, 16, 32):
        schedule, backend = _toy_gmm(T=T)
        y = embed_prompt(backend, "a cat")
        x0 = torch.tensor([2.0, 0.5], dtype=torch.float64)
        x_T, _ = run_inversion(x0, y, schedule, backend)
        back = run_reverse(x_T, y, schedule, backend)
        errs.append(float(torch.linalg.vector_norm(back - x0)))
    ok = errs[0] > errs[1] > errs[2]
    return "gmm round-trip error shrinks with refinement", ok, f"errors {errs}"


def check_one_step_terminal_estimate():
    schedule = build_schedule(400, 12)
    backend = ConstantEpsilonBackend(torch.tensor([0.25, 0.5]))
    y = embed_prompt(backend, "p")
    x0 = torch.tensor([0.4, -0.8], dtype=torch.float64)
    worst = 0.0
    state = LatentState(x=x0, t=DATA_LEVEL, role="source", y=y)
    for _ in range(schedule.T):
        state = invert_step(state, schedule, backend)
    terminal = state.x
    state = LatentState(x=x0, t=DATA_LEVEL, role="source", y=y)
    for _ in range(schedule.T):
        est = one_step_terminal_estimate(state.x, state.t, y, schedule, backend)
        worst = max(worst, float(torch.linalg.vector_norm(est - terminal)))
        state = invert_step(state, schedule, backend)
    return "one-step terminal estimate exact for constant eps", worst <= 1e-10, \
        f"worst err {worst:.3e}"


def check_gradient_against_finite_differences(states: int = 10):
    schedule, backend = _toy_gmm()
    g = torch.Generator().manual_seed(7)
    x0 = torch.tensor([2.1, 0.4], dtype=torch.float64)
    ctx = _context(schedule, backend, x0)
    cfg = GuidanceConfig(beta_p=-0.5)
    ctx.set_prev_target(torch.randn(2, generator=g, dtype=torch.float64), schedule.T - 1)
    worst = 0.0
    for _ in range(states):
        t = int(torch.randint(1, schedule.T - 1, (1,), generator=g))
        x = torch.randn(2, dtype=torch.float64, generator=g) * 1.5

        def objective(z):
            return representation_guidance(z, t, ctx, cfg)

        ga = gradient_of(objective, x, mode="autograd")
        gf = gradient_of(objective, x, mode="finite-diff", fd_step=1e-6)
        denom = max(float(torch.linalg.vector_norm(ga)),
                    float(torch.linalg.vector_norm(gf)), 1e-12)
        rel = float(torch.linalg.vector_norm(ga - gf)) / denom
        worst = max(worst, rel)
    return "analytic gradient matches finite differences", worst <= 1e-4, \
        f"worst rel err {worst:.3e}"


def check_hinge_inactivity():
    schedule, backend = _toy_gmm()
    x0 = torch.tensor([2.1, 0.4], dtype=torch.float64)
    ctx = _context(schedule, backend, x0)
    t = schedule.T - 2
    x = ctx.cache.latent(t).clone()
    # margins strictly satisfied: similarity gap far above beta_p, feature
    # constraint slack via a distant previous target
    cfg = GuidanceConfig(beta_p=-10.0, beta_f=1e-6)
    ctx.set_prev_target(x + 50.0, t + 1)
    grad = gradient_of(lambda z: representation_guidance(z, t, ctx, cfg), x)
    norm = float(torch.linalg.vector_norm(grad))
    return "inactive hinges give exactly zero gradient", norm <= 1e-12, \
        f"grad norm {norm:.3e}"


def check_encoder_self_similarity():
    _, backend = _toy_gmm()
    ok = True
    detail = []
    for prompt in ("a cat", "a dog", "anything else"):
        v = backend.encode_text(prompt)
        sim = float(v @ v / (torch.linalg.vector_norm(v) ** 2))
        ok &= abs(sim - 1.0) <= 1e-12
        detail.append(f"{prompt!r}:{sim:.12f}")
    return "encoder self-similarity is 1", ok, "; ".join(detail)


def check_constant_trajectory_form():
    schedule = build_schedule(400, 16)
    c = torch.tensor([0.3, -0.2])
    backend = ConstantEpsilonBackend(c)
    y = embed_prompt(backend, "p")
    u = torch.tensor([1.0, 2.0], dtype=torch.float64)
    state = LatentState(x=u, t=DATA_LEVEL, role="source", y=y)
    worst = 0.0
    for _ in range(schedule.T):
        state = invert_step(state, schedule, backend)
        a = schedule.alpha(state.t)
        expect = math.sqrt(a) * u + math.sqrt(1 - a) * c.to(torch.float64)
        worst = max(worst, float(torch.linalg.vector_norm(state.x - expect)))
    return "constant-eps closed-form trajectory", worst <= 1e-12, f"worst err {worst:.3e}"


ALL_CHECKS = (
    check_zero_guidance_identity,
    check_constant_round_trip,
    check_gmm_round_trip_refinement,
    check_one_step_terminal_estimate,
    check_gradient_against_finite_differences,
    check_hinge_inactivity,
    check_encoder_self_similarity,
    check_constant_trajectory_form,
)


def run_selftests(verbose_print=print) -> bool:
    all_ok = True
    for check in ALL_CHECKS:
        name, ok, detail = check()
        all_ok &= ok
        verbose_print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
    return all_ok
