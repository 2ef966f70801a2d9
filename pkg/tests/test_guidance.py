import math

import pytest
import torch

from guidedit.backends import (PromptEmbedding, as_latent, cosine_sim,
                               gradient_of)
from guidedit.ddim import LatentState, TrajectoryCache, reverse_step
from guidedit.errors import NumericGuardError
from guidedit.guidance import (GuidanceConfig, GuidanceContext, PrevTarget,
                               guided_reverse_step, naive_distance,
                               representation_guidance)
from guidedit.schedule import build_schedule

from conftest import CAT, make_context, make_gmm_backend


class StubBundle:
    """Fully hand-controlled backend: zero noise, identity features/codec."""

    supports_differentiation = True

    def __init__(self, vocab):
        self.vocab = {k: as_latent(v) for k, v in vocab.items()}

    def epsilon(self, x, t, y):
        return torch.zeros_like(as_latent(x))

    def features(self, x, t, y):
        return as_latent(x)

    def encode_image(self, image):
        return as_latent(image)

    def encode_text(self, prompt):
        return self.vocab[prompt]

    def encode(self, image):
        return as_latent(image)

    def decode(self, latent):
        return latent


def _stub_context(vocab, source_latent, p_src="s", p_tgt="t"):
    sched = build_schedule(schedule_family="explicit-list", alphas=[0.9, 0.8, 0.7])
    backend = StubBundle(vocab)
    cache = TrajectoryCache("fp", "fp", store_features=True)
    s = as_latent(source_latent)
    for t in range(3):
        cache.record(t, s, s)
    cache.complete()
    y_src = PromptEmbedding(vector=backend.encode_text(p_src), prompt_text=p_src,
                            token_embeddings=[])
    y_tgt = PromptEmbedding(vector=backend.encode_text(p_tgt), prompt_text=p_tgt,
                            token_embeddings=[])
    return GuidanceContext(schedule=sched, backend=backend, cache=cache,
                           p_src=p_src, p_tgt=p_tgt, y_src=y_src, y_tgt=y_tgt), sched


# ---------------------------------------------------------------------------
# naive distance


def test_naive_distance_feature_term_vanishes_on_identical_inputs(gmm_world):
    sched, backend = gmm_world
    x0 = torch.tensor([2.1, 0.4], dtype=torch.float64)
    ctx, _ = make_context(sched, backend, x0, p_src=CAT, p_tgt=CAT)
    t = sched.T // 2
    x = ctx.cache.latent(t)
    cfg = GuidanceConfig()
    value = naive_distance(x, t, ctx, cfg)
    sim = cosine_sim(ctx.image_embedding(x, t), ctx.text_tgt)
    assert float(value) == pytest.approx(float(-sim), abs=1e-12)


def test_naive_distance_beta_f_zero_is_pure_similarity(gmm_world):
    sched, backend = gmm_world
    x0 = torch.tensor([2.1, 0.4], dtype=torch.float64)
    ctx, _ = make_context(sched, backend, x0)
    t = 3
    x = torch.tensor([0.9, 1.4], dtype=torch.float64)
    value = naive_distance(x, t, ctx, GuidanceConfig(beta_f=0.0))
    sim = cosine_sim(ctx.image_embedding(x, t), ctx.text_tgt)
    assert float(value) == pytest.approx(float(-sim), abs=1e-12)


def test_naive_distance_orthogonal_prompt_oracle():
    # e_img along (1,0) orthogonal to target text (0,1): similarity term 0;
    # feature gap 2 with beta_f = 1 gives exactly 2
    vocab = {"t": torch.tensor([0.0, 1.0]), "s": torch.tensor([1.0, 0.0])}
    ctx, _ = _stub_context(vocab, source_latent=[3.0, 0.0])
    value = naive_distance(torch.tensor([1.0, 0.0]), 1, ctx, GuidanceConfig(beta_f=1.0))
    assert float(value) == pytest.approx(2.0, abs=1e-12)


# ---------------------------------------------------------------------------
# representation guidance


def test_representation_guidance_prompt_hinge_oracle():
    # Sim_tgt = 0.30, Sim_src = 0.25, beta_p = 0.1 -> 0.30-0.25-0.10 = -0.05
    # inside min(0, .), scaled by lambda1 = 1 -> 0.05
    vocab = {"t": torch.tensor([0.3, math.sqrt(1 - 0.09)], dtype=torch.float64),
             "s": torch.tensor([0.25, math.sqrt(1 - 0.0625)], dtype=torch.float64)}
    ctx, _ = _stub_context(vocab, source_latent=[1.0, 0.0])
    ctx.prev_target = PrevTarget(x=torch.tensor([5.0, 5.0]), t=2,
                                 features=torch.tensor([5.0, 5.0], dtype=torch.float64))
    cfg = GuidanceConfig(lambda1=1.0, lambda2=1.0, beta_p=0.1, beta_f=1.0)
    value = representation_guidance(torch.tensor([1.0, 0.0]), 1, ctx, cfg)
    assert float(value) == pytest.approx(0.05, abs=1e-9)


def test_representation_guidance_feature_hinge_oracle():
    # d_src = 2, d_prev = 1, beta_f = 1 -> max(0, 2-1) = 1; first hinge
    # strictly inactive via a large negative margin
    vocab = {"t": torch.tensor([0.0, 1.0]), "s": torch.tensor([1.0, 0.0])}
    ctx, _ = _stub_context(vocab, source_latent=[3.0, 0.0])
    ctx.prev_target = PrevTarget(x=torch.tensor([2.0, 0.0]), t=2,
                                 features=torch.tensor([2.0, 0.0], dtype=torch.float64))
    cfg = GuidanceConfig(lambda1=1.0, lambda2=1.0, beta_p=-10.0, beta_f=1.0)
    value = representation_guidance(torch.tensor([1.0, 0.0]), 1, ctx, cfg)
    assert float(value) == pytest.approx(1.0, abs=1e-12)


def test_both_hinges_inactive_gives_zero_value_and_gradient():
    vocab = {"t": torch.tensor([0.0, 1.0]), "s": torch.tensor([1.0, 0.0])}
    ctx, _ = _stub_context(vocab, source_latent=[1.0, 1.0])
    # previous target far away -> d_prev large -> feature hinge inactive;
    # beta_p very negative -> prompt hinge inactive
    ctx.prev_target = PrevTarget(x=torch.tensor([40.0, 40.0]), t=2,
                                 features=torch.tensor([40.0, 40.0], dtype=torch.float64))
    cfg = GuidanceConfig(beta_p=-10.0)
    x = torch.tensor([1.0, 1.1])
    value = representation_guidance(x, 1, ctx, cfg)
    assert float(value) == 0.0
    grad = gradient_of(lambda z: representation_guidance(z, 1, ctx, cfg), x)
    assert float(torch.linalg.vector_norm(grad)) == 0.0


def test_inactive_hinge_gradient_insensitive_to_its_inputs():
    """Perturbing only quantities inside an inactive hinge leaves the
    gradient contribution at exactly zero."""
    vocab = {"t": torch.tensor([0.0, 1.0]), "s": torch.tensor([1.0, 0.0])}
    x = torch.tensor([1.0, 1.1])
    for prev_dist in (30.0, 60.0, 120.0):  # all keep the feature hinge inactive
        ctx, _ = _stub_context(vocab, source_latent=[1.0, 1.0])
        far = torch.full((2,), prev_dist, dtype=torch.float64)
        ctx.prev_target = PrevTarget(x=far, t=2, features=far)
        cfg = GuidanceConfig(lambda1=0.0, lambda2=1.0)
        grad = gradient_of(lambda z: representation_guidance(z, 1, ctx, cfg), x)
        assert float(torch.linalg.vector_norm(grad)) == 0.0


def test_first_step_policy_skip_drops_feature_hinge():
    vocab = {"t": torch.tensor([0.0, 1.0]), "s": torch.tensor([1.0, 0.0])}
    ctx, _ = _stub_context(vocab, source_latent=[3.0, 0.0])
    ctx.prev_target = None  # first reverse step with skip-prev-term
    cfg = GuidanceConfig(lambda1=0.0, lambda2=1.0, beta_f=1.0)
    value = representation_guidance(torch.tensor([1.0, 0.0]), 1, ctx, cfg)
    assert float(value) == 0.0


def test_first_step_policy_use_current_keeps_hinge_active():
    vocab = {"t": torch.tensor([0.0, 1.0]), "s": torch.tensor([1.0, 0.0])}
    ctx, sched = _stub_context(vocab, source_latent=[3.0, 0.0])
    x = torch.tensor([1.0, 0.0])
    ctx.set_prev_target(x, 1)  # the use-current policy seeds prev with the input
    cfg = GuidanceConfig(lambda1=0.0, lambda2=1.0, beta_f=1.0)
    # d_prev == 0 at the input, so the hinge reduces to beta_f * d_src = 2
    value = representation_guidance(x, 1, ctx, cfg)
    assert float(value) == pytest.approx(2.0, abs=1e-12)


def test_lambda2_doubling_doubles_active_hinge_gradient():
    sched, backend = make_gmm_backend()
    x0 = torch.tensor([2.1, 0.4], dtype=torch.float64)
    ctx, _ = make_context(sched, backend, x0)
    t = sched.T // 2
    # x away from the cached source (d_src large) with the previous target
    # right next to x (d_prev small) makes the feature hinge active
    x = ctx.cache.latent(t) + torch.tensor([0.8, -0.5], dtype=torch.float64)
    ctx.set_prev_target(x + 0.01, t + 1)

    def grad(lambda1, lambda2):
        cfg = GuidanceConfig(lambda1=lambda1, lambda2=lambda2)
        return gradient_of(lambda z: representation_guidance(z, t, ctx, cfg), x)

    g0 = grad(1.0, 0.0)
    g1 = grad(1.0, 1.0)
    g2 = grad(1.0, 2.0)
    hinge_term = representation_guidance(x, t, ctx, GuidanceConfig(lambda1=0.0,
                                                                   lambda2=1.0))
    assert float(hinge_term) > 0  # hinge really active
    assert torch.allclose(g2 - g0, 2 * (g1 - g0), atol=1e-12)


# ---------------------------------------------------------------------------
# guided reverse step


def test_guided_step_zero_objective_matches_reverse_step(gmm_world):
    sched, backend = gmm_world
    x0 = torch.tensor([2.0, 0.3], dtype=torch.float64)
    ctx, _ = make_context(sched, backend, x0)
    g = torch.Generator().manual_seed(0)
    cfg = GuidanceConfig()
    for _ in range(50):
        x = torch.randn(2, dtype=torch.float64, generator=g) * 2
        t = int(torch.randint(0, sched.T, (1,), generator=g))
        guided = guided_reverse_step(x, t, ctx, cfg, None)
        plain = reverse_step(LatentState(x=x, t=t, role="target", y=ctx.y_tgt),
                             sched, backend).x
        assert torch.allclose(guided, plain, rtol=1e-9, atol=1e-12)


def test_guided_step_quadratic_objective_subtracts_x(gmm_world):
    sched, backend = gmm_world
    x0 = torch.tensor([2.0, 0.3], dtype=torch.float64)
    ctx, _ = make_context(sched, backend, x0)
    x = torch.tensor([0.7, -1.2], dtype=torch.float64)
    t = 4
    cfg = GuidanceConfig()
    plain = guided_reverse_step(x, t, ctx, cfg, None)
    guided = guided_reverse_step(x, t, ctx, cfg, lambda z: 0.5 * (z ** 2).sum())
    assert torch.allclose(plain - guided, x, atol=1e-12)


def test_guided_step_difference_matches_finite_difference_gradient(gmm_world):
    sched, backend = gmm_world
    x0 = torch.tensor([2.1, 0.4], dtype=torch.float64)
    ctx, _ = make_context(sched, backend, x0)
    t = sched.T // 2
    ctx.set_prev_target(ctx.cache.latent(t) * 1.1, t + 1)
    cfg = GuidanceConfig(beta_p=0.5)
    x = ctx.cache.latent(t) + torch.tensor([0.4, -0.2], dtype=torch.float64)

    def objective(z):
        return representation_guidance(z, t, ctx, cfg)

    plain = guided_reverse_step(x, t, ctx, cfg, None)
    guided = guided_reverse_step(x, t, ctx, cfg, objective)
    step_diff = plain - guided
    fd = gradient_of(objective, x, mode="finite-diff", fd_step=1e-6)
    denom = max(float(torch.linalg.vector_norm(fd)), 1e-12)
    assert float(torch.linalg.vector_norm(step_diff - fd)) / denom <= 1e-4


def test_gradient_clip_bounds_the_update(gmm_world):
    sched, backend = gmm_world
    x0 = torch.tensor([2.0, 0.3], dtype=torch.float64)
    ctx, _ = make_context(sched, backend, x0)
    x = torch.tensor([0.7, -1.2], dtype=torch.float64)
    cfg = GuidanceConfig(gradient_clip=0.05)
    report = {}
    guided_reverse_step(x, 4, ctx, cfg, lambda z: 100.0 * (z ** 2).sum(),
                        report=report)
    assert report["grad_norm"] <= 0.05 + 1e-12


def test_nan_objective_aborts(gmm_world):
    sched, backend = gmm_world
    x0 = torch.tensor([2.0, 0.3], dtype=torch.float64)
    ctx, _ = make_context(sched, backend, x0)
    with pytest.raises(NumericGuardError):
        guided_reverse_step(torch.ones(2), 4, ctx, GuidanceConfig(),
                            lambda z: z.sum() * float("nan"))


def test_guidance_config_validation():
    with pytest.raises(ValueError):
        GuidanceConfig(lambda1=-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(beta_p=float("inf"))
    with pytest.raises(ValueError):
        GuidanceConfig(first_step_policy="nonsense")
    with pytest.raises(ValueError):
        GuidanceConfig(gradient_clip=0.0)
