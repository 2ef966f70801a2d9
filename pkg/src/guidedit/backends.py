"""Pluggable model interfaces and the exact desk-scale backends.

Four roles make up a backend bundle: a noise predictor, an intermediate
feature extractor, a joint text/image encoder, and a latent codec. Two
fully analytic bundles are shipped:

  * AnalyticGMMBackend   -- data distribution is a Gaussian mixture whose
                            optimal noise predictor is known in closed form;
                            every role is differentiable torch code.
  * ConstantEpsilonBackend -- the predictor returns a fixed array, which
                            makes whole trajectories exact in closed form.

Pretrained latent-diffusion models plug in through the adapter contract
(`PretrainedAdapterSpec`); no weights are bundled.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import torch

from .errors import NumericGuardError
from .schedule import DiffusionSchedule

Tensor = torch.Tensor


def as_latent(x) -> Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity between two vectors (flattened)."""
    u = u.flatten()
    v = v.flatten()
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    return (u @ v) / (nu * nv)


@dataclass
class PromptEmbedding:
    """Conditioning embedding of a prompt plus its per-token vectors."""

    vector: Tensor
    prompt_text: str
    token_embeddings: list[Tensor]


@runtime_checkable
class NoisePredictor(Protocol):
    supports_differentiation: bool

    def epsilon(self, x: Tensor, t: int, y: PromptEmbedding) -> Tensor: ...


@runtime_checkable
class FeatureExtractor(Protocol):
    layer_selector: str

    def features(self, x: Tensor, t: int, y: PromptEmbedding) -> Tensor: ...


@runtime_checkable
class JointEncoder(Protocol):
    def encode_image(self, image: Tensor) -> Tensor: ...

    def encode_text(self, prompt: str) -> Tensor: ...


@runtime_checkable
class LatentCodec(Protocol):
    def encode(self, image: Tensor) -> Tensor: ...

    def decode(self, latent: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class PretrainedAdapterSpec:
    """Contract for binding a pretrained latent diffusion model.

    An adapter must provide the four roles above with:
      * exact gradients of scalar objectives through epsilon, features,
        codec decode, and encode_image (supports_differentiation = True);
      * deterministic outputs for identical inputs;
      * mutation (weight loading, layer selection) at construction only.

    Sampling levels -1..T-1 map to the adapter's own timestep axis; the
    data boundary (level -1) should be served by the lowest-noise timestep
    the checkpoint supports.
    """

    checkpoint: str
    device: str = "cpu"
    layer_selector: str = "mid-decoder"
    latent_shape: tuple[int, ...] = ()


def tokenize(prompt: str) -> list[str]:
    return prompt.split()


def embed_prompt(encoder: JointEncoder, prompt: str) -> PromptEmbedding:
    """Build a PromptEmbedding with whole-prompt and per-token vectors."""
    tokens = tokenize(prompt)
    token_vecs = [encoder.encode_text(tok) for tok in tokens]
    return PromptEmbedding(vector=encoder.encode_text(prompt),
                           prompt_text=prompt, token_embeddings=token_vecs)


# ---------------------------------------------------------------------------
# gradients


def gradient_of(objective: Callable[[Tensor], Tensor], x: Tensor, *,
                mode: str = "auto", differentiable: bool = True,
                fd_step: float = 1e-4, fd_probes: int | None = None,
                generator: torch.Generator | None = None,
                report: dict | None = None) -> Tensor:
    """Gradient of a scalar objective at x.

    mode "auto" uses reverse-mode autodiff when the backend supports
    differentiation, otherwise central finite differences with relative
    step fd_step. fd_probes switches the fallback from coordinate-wise
    differences to random-probe batching with that many directions.
    Non-finite gradient entries raise NumericGuardError. When a report
    dict is passed, the objective value at x is stored under "value".
    """
    x = as_latent(x)
    if mode not in ("auto", "autograd", "finite-diff"):
        raise ValueError(f"unknown gradient mode {mode!r}")
    use_autograd = mode == "autograd" or (mode == "auto" and differentiable)

    if use_autograd:
        xg = x.detach().clone().requires_grad_(True)
        val = objective(xg)
        if not torch.isfinite(val):
            raise NumericGuardError("objective evaluated to a non-finite value")
        if report is not None:
            report["value"] = float(val.detach())
        (grad,) = torch.autograd.grad(val, xg, allow_unused=True)
        grad = torch.zeros_like(x) if grad is None else grad
    else:
        if report is not None:
            v = objective(x.detach())
            report["value"] = float(v.detach() if isinstance(v, Tensor) else v)
        grad = _finite_difference(objective, x, fd_step, fd_probes, generator)

    if not torch.isfinite(grad).all():
        raise NumericGuardError("gradient contains non-finite entries")
    if grad.shape != x.shape:
        raise NumericGuardError("gradient shape does not match input shape")
    return grad


def _finite_difference(objective, x, fd_step, fd_probes, generator):
    def value_at(z: Tensor) -> float:
        v = objective(z)
        v = float(v.detach() if isinstance(v, Tensor) else v)
        if not math.isfinite(v):
            raise NumericGuardError("objective evaluated to a non-finite value")
        return v

    flat = x.detach().flatten()
    n = flat.numel()
    if fd_probes is None:
        grad = torch.zeros_like(flat)
        for i in range(n):
            h = fd_step * (1.0 + abs(float(flat[i])))
            plus = flat.clone();  plus[i] += h
            minus = flat.clone(); minus[i] -= h
            grad[i] = (value_at(plus.view_as(x)) - value_at(minus.view_as(x))) / (2 * h)
        return grad.view_as(x)

    probes = torch.randn(fd_probes, n, dtype=torch.float64, generator=generator)
    probes, _ = torch.linalg.qr(probes.T)
    probes = probes.T  # orthonormal rows
    grad = torch.zeros_like(flat)
    scale = fd_step * (1.0 + float(torch.linalg.vector_norm(flat)) / max(n, 1) ** 0.5)
    for v in probes:
        d = (value_at((flat + scale * v).view_as(x))
             - value_at((flat - scale * v).view_as(x))) / (2 * scale)
        grad += d * v
    return grad.view_as(x)


def classifier_free_epsilon(backend: NoisePredictor, x: Tensor, t: int,
                            y_cond: PromptEmbedding, y_null: PromptEmbedding,
                            w: float) -> Tensor:
    """Unconditional prediction extrapolated toward the conditional one."""
    if w < 0:
        raise ValueError("classifier-free scale must be nonnegative")
    if w == 1.0:
        return backend.epsilon(x, t, y_cond)
    eps_null = backend.epsilon(x, t, y_null)
    if w == 0.0:
        return eps_null
    eps_cond = backend.epsilon(x, t, y_cond)
    if eps_cond.shape != eps_null.shape:
        raise NumericGuardError("conditional/unconditional prediction shapes differ")
    return eps_null + w * (eps_cond - eps_null)


# ---------------------------------------------------------------------------
# toy encoder / codec


class IdentityCodec:
    """Pixel space is latent space; exact round trip."""

    reconstruction_tolerance = 0.0

    def encode(self, image: Tensor) -> Tensor:
        return as_latent(image)

    def decode(self, latent: Tensor) -> Tensor:
        return latent


def _hashed_unit_vector(text: str, dim: int) -> Tensor:
    seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
    g = torch.Generator().manual_seed(seed % (2**63 - 1))
    v = torch.randn(dim, dtype=torch.float64, generator=g)
    return v / torch.linalg.vector_norm(v)


class VocabEncoder:
    """Joint text/image encoder over a finite prompt vocabulary.

    Known prompts/tokens map to fixed unit vectors; anything else gets a
    deterministic hash-seeded unit vector, so arbitrary prompts stay usable.
    Images embed through a fixed linear projection of their flattened
    pixels (seeded per input size unless an explicit matrix is supplied).
    """

    def __init__(self, vocab: dict[str, Tensor] | None = None, embed_dim: int = 8,
                 image_proj: Tensor | None = None, seed: int = 1234):
        self.embed_dim = embed_dim
        self.vocab: dict[str, Tensor] = {}
        for k, v in (vocab or {}).items():
            v = as_latent(v).flatten()
            if v.numel() != embed_dim:
                raise ValueError(f"vocab entry {k!r} has dim {v.numel()}, expected {embed_dim}")
            self.vocab[k] = v / torch.linalg.vector_norm(v)
        self.image_proj = None if image_proj is None else as_latent(image_proj)
        self._seed = seed
        self._proj_cache: dict[int, Tensor] = {}

    def encode_text(self, prompt: str) -> Tensor:
        if prompt in self.vocab:
            return self.vocab[prompt]
        tokens = tokenize(prompt)
        if not tokens:
            return _hashed_unit_vector("", self.embed_dim)
        vecs = [self.vocab.get(tok, _hashed_unit_vector(tok, self.embed_dim))
                for tok in tokens]
        v = torch.stack(vecs).mean(dim=0)
        n = torch.linalg.vector_norm(v)
        if float(n) == 0.0:
            return _hashed_unit_vector(prompt, self.embed_dim)
        return v / n

    def _projection(self, dim_in: int) -> Tensor:
        if self.image_proj is not None:
            if self.image_proj.shape[1] != dim_in:
                raise ValueError(f"image_proj expects input dim {self.image_proj.shape[1]}, "
                                 f"got {dim_in}")
            return self.image_proj
        if dim_in not in self._proj_cache:
            g = torch.Generator().manual_seed(self._seed + dim_in)
            self._proj_cache[dim_in] = torch.randn(
                self.embed_dim, dim_in, dtype=torch.float64, generator=g) / math.sqrt(dim_in)
        return self._proj_cache[dim_in]

    def encode_image(self, image: Tensor) -> Tensor:
        flat = as_latent(image).flatten()
        return self._projection(flat.numel()) @ flat


# ---------------------------------------------------------------------------
# analytic Gaussian-mixture backend


@dataclass
class GaussianMixture:
    """Mixture with isotropic per-component covariance."""

    weights: Tensor    # (K,)
    means: Tensor      # (K, *latent_shape)
    variances: Tensor  # (K,)

    def __post_init__(self):
        self.weights = as_latent(self.weights).flatten()
        self.means = as_latent(self.means)
        self.variances = as_latent(self.variances).flatten()
        if self.means.ndim < 2:
            self.means = self.means.view(self.weights.numel(), -1)
        k = self.weights.numel()
        if self.means.shape[0] != k or self.variances.numel() != k:
            raise ValueError("weights, means, variances must agree on component count")
        if torch.any(self.weights <= 0) or torch.any(self.variances <= 0):
            raise ValueError("weights and variances must be positive")
        self.weights = self.weights / self.weights.sum()

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return tuple(self.means.shape[1:])


def gmm_responsibilities(x: Tensor, alpha: float, mix: GaussianMixture) -> Tensor:
    """Posterior component weights given the noisy observation at level alpha."""
    a = float(alpha)
    var = a * mix.variances + (1.0 - a)                # (K,) marginal variance
    diff = x.unsqueeze(0) - math.sqrt(a) * mix.means   # (K, *shape)
    sq = diff.flatten(1).pow(2).sum(dim=1)             # (K,)
    d = diff.flatten(1).shape[1]
    log_dens = torch.log(mix.weights) - 0.5 * sq / var - 0.5 * d * torch.log(
        2 * math.pi * var)
    return torch.softmax(log_dens, dim=0)


def gmm_posterior_mean(x: Tensor, alpha: float, mix: GaussianMixture) -> Tensor:
    """Exact E[x0 | x_t] for the mixture at signal level alpha."""
    a = float(alpha)
    r = gmm_responsibilities(x, a, mix)
    var = a * mix.variances + (1.0 - a)
    shape_ones = (1,) * (mix.means.ndim - 1)
    var_b = var.view(-1, *shape_ones)
    mu_post = (mix.variances.view(-1, *shape_ones) * math.sqrt(a) * x.unsqueeze(0)
               + (1.0 - a) * mix.means) / var_b
    return (r.view(-1, *shape_ones) * mu_post).sum(dim=0)


def gmm_epsilon(x: Tensor, alpha: float, mix: GaussianMixture) -> Tensor:
    """Optimal noise prediction (x - sqrt(a) E[x0|x]) / sqrt(1-a).

    Uses the factored form sqrt(1-a) * sum_k r_k (x - sqrt(a) mu_k) / var_k,
    which is algebraically identical and stays finite (and exactly zero)
    at the alpha == 1 data boundary.
    """
    a = float(alpha)
    r = gmm_responsibilities(x, a, mix)
    var = a * mix.variances + (1.0 - a)
    diff = x.unsqueeze(0) - math.sqrt(a) * mix.means
    shape_ones = (1,) * (mix.means.ndim - 1)
    contrib = diff / var.view(-1, *shape_ones)
    return math.sqrt(1.0 - a) * (r.view(-1, *shape_ones) * contrib).sum(dim=0)


class AnalyticGMMBackend:
    """Exact desk-scale backend over Gaussian-mixture data.

    The noise predictor is the closed-form optimum for the mixture bound
    to each prompt (falling back to a default mixture), the feature map is
    a fixed linear function of the Tweedie estimate, the encoder is a
    VocabEncoder, and the codec is the identity. Every role is plain
    differentiable torch code.
    """

    supports_differentiation = True

    def __init__(self, schedule: DiffusionSchedule, mixture: GaussianMixture,
                 prompt_mixtures: dict[str, GaussianMixture] | None = None,
                 encoder: VocabEncoder | None = None,
                 layer_selector: str = "tweedie", feature_seed: int = 7):
        self._schedule = schedule
        self.mixture = mixture
        self.prompt_mixtures = dict(prompt_mixtures or {})
        for m in self.prompt_mixtures.values():
            if m.latent_shape != mixture.latent_shape:
                raise ValueError("all mixtures must share the latent shape")
        self.encoder = encoder or VocabEncoder()
        self.codec = IdentityCodec()
        self.layer_selector = layer_selector
        self._feature_matrix = self._build_feature_matrix(layer_selector, feature_seed)

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return self.mixture.latent_shape

    def _build_feature_matrix(self, selector: str, seed: int) -> Tensor | None:
        if selector == "tweedie":
            return None  # identity map on the Tweedie estimate
        if selector.startswith("proj:"):
            out_dim = int(selector.split(":", 1)[1])
            dim_in = int(torch.tensor(self.latent_shape).prod()) if self.latent_shape else 1
            g = torch.Generator().manual_seed(seed)
            return torch.randn(out_dim, dim_in, dtype=torch.float64,
                               generator=g) / math.sqrt(dim_in)
        raise ValueError(f"unknown layer selector {selector!r}")

    def _mixture_for(self, y: PromptEmbedding | None) -> GaussianMixture:
        if y is not None and y.prompt_text in self.prompt_mixtures:
            return self.prompt_mixtures[y.prompt_text]
        return self.mixture

    def epsilon(self, x: Tensor, t: int, y: PromptEmbedding) -> Tensor:
        x = as_latent(x)
        return gmm_epsilon(x, self._schedule.alpha(t), self._mixture_for(y))

    def posterior_mean(self, x: Tensor, t: int, y: PromptEmbedding | None = None) -> Tensor:
        x = as_latent(x)
        return gmm_posterior_mean(x, self._schedule.alpha(t), self._mixture_for(y))

    def features(self, x: Tensor, t: int, y: PromptEmbedding) -> Tensor:
        x = as_latent(x)
        a = self._schedule.alpha(t)
        x0_hat = (x - math.sqrt(1.0 - a) * self.epsilon(x, t, y)) / math.sqrt(a)
        if self._feature_matrix is None:
            return x0_hat
        return self._feature_matrix @ x0_hat.flatten()

    def encode_image(self, image: Tensor) -> Tensor:
        return self.encoder.encode_image(image)

    def encode_text(self, prompt: str) -> Tensor:
        return self.encoder.encode_text(prompt)

    def encode(self, image: Tensor) -> Tensor:
        return self.codec.encode(image)

    def decode(self, latent: Tensor) -> Tensor:
        return self.codec.decode(latent)


class ConstantEpsilonBackend:
    """Predictor that returns a fixed array for every input.

    Trajectories then keep the closed form x_t = sqrt(a_t) u + sqrt(1-a_t) c,
    which makes inversion and reverse exact mutual inverses; used as the
    machine-precision oracle for round-trip and one-step-estimate tests.
    """

    supports_differentiation = True
    layer_selector = "identity"

    def __init__(self, constant, encoder: VocabEncoder | None = None):
        self.constant = as_latent(constant)
        self.encoder = encoder or VocabEncoder()
        self.codec = IdentityCodec()

    def epsilon(self, x: Tensor, t: int, y: PromptEmbedding) -> Tensor:
        x = as_latent(x)
        return self.constant.expand_as(x).clone()

    def features(self, x: Tensor, t: int, y: PromptEmbedding) -> Tensor:
        return as_latent(x)

    def encode_image(self, image: Tensor) -> Tensor:
        return self.encoder.encode_image(image)

    def encode_text(self, prompt: str) -> Tensor:
        return self.encoder.encode_text(prompt)

    def encode(self, image: Tensor) -> Tensor:
        return self.codec.encode(image)

    def decode(self, latent: Tensor) -> Tensor:
        return self.codec.decode(latent)


class CountingPredictor:
    """Wraps a predictor and tallies epsilon calls.

    grad_calls counts evaluations whose input participates in an autograd
    graph, i.e. the calls sitting on a differentiated path.
    """

    def __init__(self, inner: NoisePredictor):
        self.inner = inner
        self.calls = 0
        self.grad_calls = 0

    @property
    def supports_differentiation(self) -> bool:
        return self.inner.supports_differentiation

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def epsilon(self, x: Tensor, t: int, y: PromptEmbedding) -> Tensor:
        self.calls += 1
        if isinstance(x, Tensor) and x.requires_grad:
            self.grad_calls += 1
        return self.inner.epsilon(x, t, y)

    def reset(self):
        self.calls = 0
        self.grad_calls = 0
