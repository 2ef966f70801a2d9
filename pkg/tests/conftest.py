import torch
import pytest

from guidedit.backends import (AnalyticGMMBackend, ConstantEpsilonBackend,
                               GaussianMixture, VocabEncoder, embed_prompt)
from guidedit.ddim import run_inversion
from guidedit.guidance import GuidanceContext
from guidedit.schedule import build_schedule

CAT = "a cat"
DOG = "a dog"


def make_vocab_encoder():
    vocab = {CAT: torch.tensor([1.0, 0.0]), DOG: torch.tensor([0.0, 1.0]),
             "cat": torch.tensor([1.0, 0.0]), "dog": torch.tensor([0.0, 1.0]),
             "kitten": torch.tensor([0.9, 0.1])}
    return VocabEncoder(vocab=vocab, embed_dim=2,
                        image_proj=torch.eye(2, dtype=torch.float64))


def make_gmm_backend(T=12, total=400):
    """2-D editing world: 'cat' and 'dog' prompts bind single-Gaussian data
    distributions at orthogonal-ish means; the shared mixture covers both."""
    schedule = build_schedule(total, T)
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
                                 prompt_mixtures={CAT: cat, DOG: dog},
                                 encoder=make_vocab_encoder())
    return schedule, backend


def make_context(schedule, backend, x0, p_src=CAT, p_tgt=DOG):
    y_src = embed_prompt(backend, p_src)
    y_tgt = embed_prompt(backend, p_tgt)
    x_T, cache = run_inversion(x0, y_src, schedule, backend)
    ctx = GuidanceContext(schedule=schedule, backend=backend, cache=cache,
                          p_src=p_src, p_tgt=p_tgt, y_src=y_src, y_tgt=y_tgt,
                          y_null=embed_prompt(backend, ""))
    return ctx, x_T


@pytest.fixture
def gmm_world():
    schedule, backend = make_gmm_backend()
    return schedule, backend


@pytest.fixture
def constant_world():
    schedule = build_schedule(400, 12)
    backend = ConstantEpsilonBackend(torch.tensor([0.7, -0.4]))
    return schedule, backend
