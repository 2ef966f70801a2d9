"""Plain-text configuration: flat key=value lines with section prefixes.

Sections: schedule.*, guidance.*, coherence.*, io.*, backend.*, metrics.*.
CLI flags override file values. Analytic backends serialize their mixture
parameters to the same format, so a run is reproducible from its config
block alone.
"""

from __future__ import annotations

import torch

from .backends import (AnalyticGMMBackend, ConstantEpsilonBackend, GaussianMixture,
                       VocabEncoder)
from .errors import ConfigError
from .guidance import GuidanceConfig
from .metrics import PatchProjectionEncoder
from .schedule import DiffusionSchedule, build_schedule

Tensor = torch.Tensor

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: expected key=value", line=lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}: empty key", line=lineno)
        out[key] = value.strip()
    return out


def parse_config_file(path) -> dict[str, str]:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read(), source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc


def _get_bool(cfg: dict, key: str, default: bool) -> bool:
    raw = cfg.get(key)
    if raw is None:
        return default
    low = raw.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ConfigError("expected a boolean", field=key)


def _get_float(cfg: dict, key: str, default):
    raw = cfg.get(key)
    if raw is None:
        return default
    if raw.lower() in ("none", ""):
        return None
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {raw!r}", field=key) from exc


def _get_int(cfg: dict, key: str, default):
    raw = cfg.get(key)
    if raw is None:
        return default
    if raw.lower() in ("none", ""):
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {raw!r}", field=key) from exc


def _get_floats(cfg: dict, key: str):
    raw = cfg.get(key)
    if raw is None:
        return None
    try:
        return [float(v) for v in raw.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {raw!r}",
                          field=key) from exc


def build_schedule_from_config(cfg: dict[str, str]) -> DiffusionSchedule:
    family = cfg.get("schedule.family", "linear-beta")
    total = _get_int(cfg, "schedule.total_steps", 1000)
    steps = _get_int(cfg, "schedule.grid_steps", 50)
    params = {}
    grid = cfg.get("schedule.grid")
    if grid:
        params["grid"] = [int(v) for v in grid.split(",")]
    if family == "linear-beta":
        params["beta_start"] = _get_float(cfg, "schedule.beta_start", 0.00085)
        params["beta_end"] = _get_float(cfg, "schedule.beta_end", 0.012)
        params["scaled"] = _get_bool(cfg, "schedule.scaled", True)
    elif family == "cosine":
        params["offset"] = _get_float(cfg, "schedule.offset", 0.008)
    elif family == "explicit-list":
        alphas = _get_floats(cfg, "schedule.alphas")
        if alphas is None:
            raise ConfigError("explicit-list schedule needs schedule.alphas",
                              field="schedule.alphas")
        params["alphas"] = alphas
        total = len(alphas)
        steps = len(params.get("grid") or alphas)
    return build_schedule(total, steps, family, **params)


def build_guidance_from_config(cfg: dict[str, str]) -> GuidanceConfig:
    enabled = _get_bool(cfg, "coherence.enabled", False)
    lambda3 = _get_float(cfg, "coherence.lambda3", 0.1)
    lambda4 = _get_float(cfg, "coherence.lambda4", 0.1)
    return GuidanceConfig(
        lambda1=_get_float(cfg, "guidance.lambda1", 1.0),
        lambda2=_get_float(cfg, "guidance.lambda2", 1.0),
        beta_f=_get_float(cfg, "guidance.beta_f", 1.0),
        beta_p=_get_float(cfg, "guidance.beta_p", 0.0),
        lambda3=lambda3 if enabled else 0.0,
        lambda4=lambda4 if enabled else 0.0,
        cfg_scale=_get_float(cfg, "guidance.cfg_scale", 1.0),
        inversion_cfg_scale=_get_float(cfg, "guidance.inversion_cfg_scale", 1.0),
        gradient_clip=_get_float(cfg, "guidance.gradient_clip", None),
        first_step_policy=cfg.get("guidance.first_step_policy", "skip-prev-term"),
        grad_mode=cfg.get("guidance.grad_mode", "auto"),
        fd_step=_get_float(cfg, "guidance.fd_step", 1e-4),
        fd_probes=_get_int(cfg, "guidance.fd_probes", None),
    )


def _mean_tensor(values: list[float], latent_shape: tuple[int, ...]) -> Tensor:
    numel = 1
    for d in latent_shape:
        numel *= d
    if len(values) == 1:
        return torch.full(latent_shape, values[0], dtype=torch.float64)
    if len(values) != numel:
        raise ConfigError(f"mean has {len(values)} values, latent shape "
                          f"{latent_shape} needs 1 or {numel}")
    return torch.tensor(values, dtype=torch.float64).reshape(latent_shape)


def _build_mixture(cfg: dict, prefix: str, latent_shape) -> GaussianMixture:
    weights = _get_floats(cfg, f"{prefix}.weights") or [1.0]
    k = len(weights)
    variances = _get_floats(cfg, f"{prefix}.variances") or [1.0]
    if len(variances) == 1:
        variances = variances * k
    means = []
    for i in range(k):
        vals = _get_floats(cfg, f"{prefix}.mean{i}")
        if vals is None:
            raise ConfigError(f"missing {prefix}.mean{i} for component {i}",
                              field=f"{prefix}.mean{i}")
        means.append(_mean_tensor(vals, latent_shape))
    return GaussianMixture(weights=torch.tensor(weights, dtype=torch.float64),
                           means=torch.stack(means),
                           variances=torch.tensor(variances, dtype=torch.float64))


def _build_vocab(cfg: dict, embed_dim: int) -> dict[str, Tensor]:
    vocab = {}
    i = 0
    while f"backend.vocab{i}.token" in cfg:
        token = cfg[f"backend.vocab{i}.token"]
        vec = _get_floats(cfg, f"backend.vocab{i}.vector")
        if vec is None or len(vec) != embed_dim:
            raise ConfigError(f"vocab vector must have {embed_dim} entries",
                              field=f"backend.vocab{i}.vector")
        vocab[token] = torch.tensor(vec, dtype=torch.float64)
        i += 1
    return vocab


def build_vocab_encoder(cfg: dict[str, str]) -> VocabEncoder:
    embed_dim = _get_int(cfg, "backend.embed_dim", 8)
    return VocabEncoder(vocab=_build_vocab(cfg, embed_dim), embed_dim=embed_dim,
                        seed=_get_int(cfg, "backend.seed", 1234))


def build_backend_from_config(cfg: dict[str, str], schedule: DiffusionSchedule,
                              latent_shape: tuple[int, ...]):
    """Construct an analytic backend; latent_shape comes from the input image
    unless backend.latent_shape overrides it."""
    raw_shape = cfg.get("backend.latent_shape")
    if raw_shape:
        latent_shape = tuple(int(v) for v in raw_shape.split(","))
    kind = cfg.get("backend.kind", "gmm")
    encoder = build_vocab_encoder(cfg)

    if kind == "constant":
        vals = _get_floats(cfg, "backend.constant") or [0.0]
        return ConstantEpsilonBackend(_mean_tensor(vals, latent_shape),
                                      encoder=encoder)
    if kind == "gmm":
        if "backend.mixture.weights" in cfg or "backend.mixture.mean0" in cfg:
            mixture = _build_mixture(cfg, "backend.mixture", latent_shape)
        else:
            # default two-component mixture usable with any latent shape
            mixture = GaussianMixture(
                weights=torch.tensor([0.5, 0.5], dtype=torch.float64),
                means=torch.stack([torch.full(latent_shape, 0.25, dtype=torch.float64),
                                   torch.full(latent_shape, 0.75, dtype=torch.float64)]),
                variances=torch.tensor([0.25, 0.25], dtype=torch.float64))
        prompt_mixtures = {}
        i = 0
        while f"backend.prompt{i}.text" in cfg:
            text = cfg[f"backend.prompt{i}.text"]
            prompt_mixtures[text] = _build_mixture(cfg, f"backend.prompt{i}",
                                                   latent_shape)
            i += 1
        return AnalyticGMMBackend(schedule, mixture,
                                  prompt_mixtures=prompt_mixtures, encoder=encoder,
                                  layer_selector=cfg.get("backend.feature", "tweedie"))
    if kind == "pretrained":
        raise ConfigError("pretrained adapters are a documented contract; no "
                          "implementation is bundled", field="backend.kind")
    raise ConfigError(f"unknown backend kind {kind!r}", field="backend.kind")


def serialize_mixture(mix: GaussianMixture, prefix: str) -> list[str]:
    lines = [f"{prefix}.weights=" + ",".join(repr(float(w)) for w in mix.weights)]
    lines.append(f"{prefix}.variances="
                 + ",".join(repr(float(v)) for v in mix.variances))
    for i, m in enumerate(mix.means):
        lines.append(f"{prefix}.mean{i}="
                     + ",".join(repr(float(v)) for v in m.flatten()))
    return lines


def serialize_backend(backend) -> str:
    """Mixture/constant parameters in the shared config format."""
    if isinstance(backend, ConstantEpsilonBackend):
        lines = ["backend.kind=constant",
                 "backend.constant="
                 + ",".join(repr(float(v)) for v in backend.constant.flatten())]
    elif isinstance(backend, AnalyticGMMBackend):
        lines = ["backend.kind=gmm",
                 "backend.latent_shape="
                 + ",".join(str(d) for d in backend.latent_shape),
                 f"backend.feature={backend.layer_selector}"]
        lines += serialize_mixture(backend.mixture, "backend.mixture")
        for i, (text, mix) in enumerate(sorted(backend.prompt_mixtures.items())):
            lines.append(f"backend.prompt{i}.text={text}")
            lines += serialize_mixture(mix, f"backend.prompt{i}")
    else:
        raise ConfigError(f"cannot serialize backend of type {type(backend).__name__}")
    return "\n".join(lines) + "\n"


def build_structure_encoder(cfg: dict[str, str]) -> PatchProjectionEncoder:
    return PatchProjectionEncoder(
        patch_size=_get_int(cfg, "metrics.patch_size", 4),
        feature_dim=_get_int(cfg, "metrics.feature_dim", 16),
        seed=_get_int(cfg, "metrics.seed", 99))


def io_options(cfg: dict[str, str]) -> dict:
    return {"figures": _get_bool(cfg, "io.figures", True),
            "timings": _get_bool(cfg, "io.trace_timings", True),
            "store_features": _get_bool(cfg, "io.store_features", True)}
