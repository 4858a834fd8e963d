"""
Distribution primitives shared by every stochastic head of the world model,
the agent and the tests: diagonal Gaussians, tanh-squashed Gaussians,
closed-form KL, reparameterized sampling and free-nats clipping.
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from errors import ConfigError, ContractViolation, NumericError

MIN_STDDEV = 0.01
LOG_2PI = math.log(2.0 * math.pi)


def _check_finite(name: str, *tensors: torch.Tensor) -> None:
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"{name}: non-finite distribution parameters")


def _check_same_dim(name: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ContractViolation(f"{name}: dimension mismatch ({a.shape[-1]} vs {b.shape[-1]})")


@dataclass
class DiagGaussian:
    """Independent Normal over the last axis; leading axes are batch/time."""

    mean: torch.Tensor
    stddev: torch.Tensor

    def __post_init__(self):
        if self.mean.shape[-1] != self.stddev.shape[-1]:
            raise ContractViolation(
                f"DiagGaussian: mean dim {self.mean.shape[-1]} != stddev dim {self.stddev.shape[-1]}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        """Log-density summed over the last axis."""
        _check_same_dim("log_prob", self.mean, x)
        z = (x - self.mean) / self.stddev
        return (-0.5 * z.pow(2) - torch.log(self.stddev) - 0.5 * LOG_2PI).sum(-1)

    def entropy(self) -> torch.Tensor:
        return (0.5 + 0.5 * LOG_2PI + torch.log(self.stddev)).sum(-1)

    def sample(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return reparam_sample(self, standard_noise(self.mean, generator))

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.stddev.detach())

    def __getitem__(self, index) -> "DiagGaussian":
        return DiagGaussian(self.mean[index], self.stddev[index])

    @staticmethod
    def stack(dists: Sequence["DiagGaussian"], dim: int = 1) -> "DiagGaussian":
        return DiagGaussian(
            torch.stack([d.mean for d in dists], dim=dim),
            torch.stack([d.stddev for d in dists], dim=dim),
        )


@dataclass
class TanhGaussian:
    """`scale * tanh(x)` with `x ~ base`; samples lie strictly inside (-scale, scale)."""

    base: DiagGaussian
    scale: torch.Tensor

    def rsample(self, generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (squashed sample, pre-squash sample)."""
        pre = self.base.sample(generator)
        return self.scale * torch.tanh(pre), pre

    def mode(self) -> torch.Tensor:
        return self.scale * torch.tanh(self.base.mean)

    def log_prob_pre(self, pre: torch.Tensor) -> torch.Tensor:
        """Log-density of `scale * tanh(pre)`, evaluated from the pre-squash value."""
        # log(1 - tanh(y)^2) = 2 * (log 2 - y - softplus(-2y))
        log_det = 2.0 * (math.log(2.0) - pre - F.softplus(-2.0 * pre))
        scale = torch.broadcast_to(self.scale, pre.shape)
        return self.base.log_prob(pre) - (log_det + torch.log(scale)).sum(-1)

    def log_prob(self, x: torch.Tensor) -> torch.Tensor:
        return tanh_gaussian_logprob(self, x)


def standard_noise(like: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    return torch.randn(like.shape, generator=generator, dtype=like.dtype, device=like.device)


def standard_normal(shape: Sequence[int], like: torch.Tensor) -> DiagGaussian:
    zeros = torch.zeros(*shape, dtype=like.dtype, device=like.device)
    return DiagGaussian(zeros, torch.ones_like(zeros))


def gaussian_from_raw(raw: torch.Tensor, min_std: float = MIN_STDDEV) -> DiagGaussian:
    """Split a head output into (mean, softplus(raw_std) + min_std)."""
    mean, raw_std = torch.chunk(raw, 2, dim=-1)
    return DiagGaussian(mean, F.softplus(raw_std) + min_std)


def kl_diag_gaussian(p: DiagGaussian, q: DiagGaussian) -> torch.Tensor:
    """Closed-form KL(p || q), summed over the last axis."""
    _check_same_dim("kl_diag_gaussian", p.mean, q.mean)
    _check_finite("kl_diag_gaussian", p.mean, p.stddev, q.mean, q.stddev)
    var_ratio = (p.stddev / q.stddev).pow(2)
    t1 = ((p.mean - q.mean) / q.stddev).pow(2)
    return 0.5 * (var_ratio + t1 - 1.0 - torch.log(var_ratio)).sum(-1)


def reparam_sample(dist: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    """`mean + stddev * noise`; differentiable in mean and stddev."""
    if noise.shape[-1] != dist.dim:
        raise ContractViolation(f"reparam_sample: noise dim {noise.shape[-1]} != {dist.dim}")
    return dist.mean + dist.stddev * noise


def tanh_gaussian_logprob(dist: TanhGaussian, x: torch.Tensor) -> torch.Tensor:
    """Log-density of a squashed value; raises if any coordinate sits on or past the bound."""
    scale = torch.broadcast_to(dist.scale, x.shape)
    if not torch.isfinite(x).all() or (x.abs() >= scale).any():
        raise NumericError("tanh_gaussian_logprob: value outside the open interval (-scale, scale)")
    pre = torch.atanh(x / scale)
    return dist.log_prob_pre(pre)


def free_nats_clip(kl: torch.Tensor, free_nats: Union[float, torch.Tensor]) -> torch.Tensor:
    """max(kl, free_nats) with zero gradient below the threshold."""
    if float(free_nats) < 0:
        raise ConfigError(f"free_nats must be >= 0, got {free_nats}")
    if float(free_nats) == 0:
        return kl
    return torch.clamp(kl, min=float(free_nats))
