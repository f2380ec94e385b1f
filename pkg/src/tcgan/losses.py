"""Loss terms for the dual generator objective.

Every expectation is a mean, so the loss weights do not depend on image
resolution. The adversarial terms use the least-squares form.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch


class NonFiniteLossError(FloatingPointError):
    """A loss term became NaN or infinite; ``term`` names the culprit."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r} = {value}")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0   # adversarial
    lambda2: float = 40.0  # target consistency
    lambda3: float = 5.0   # identity

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be a finite non-negative number, got {v}")


@dataclass(frozen=True)
class LossBundle:
    gan1: float
    gan2: float
    tc: float
    idt1: float
    idt2: float
    total: float

    CSV_HEADER = ("iter", "gan1", "gan2", "tc", "idt1", "idt2", "total")

    def csv_row(self, iteration: int) -> list:
        return [iteration, self.gan1, self.gan2, self.tc, self.idt1, self.idt2, self.total]


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def target_consistency(x: torch.Tensor, r1: torch.Tensor, r2: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance between the two composed targets ``x + r1`` and ``x + r2``.

    The input cancels, so this is evaluated as ``mean|r1 - r2|``; that keeps
    the value exactly independent of ``x`` instead of up to rounding.
    The composed targets here are unclamped.
    """
    _same_shape(x, r1, "target_consistency")
    _same_shape(r1, r2, "target_consistency")
    return (r1 - r2).abs().mean()


def identity_loss(residual: torch.Tensor) -> torch.Tensor:
    """Mean absolute residual a generator produces on a real shadow-free image."""
    return residual.abs().mean()


def lsgan_generator_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return ((fake_scores - 1.0) ** 2).mean()


def lsgan_discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((real_scores - 1.0) ** 2).mean() + 0.5 * (fake_scores ** 2).mean()


def weighted_total(w: LossWeights, gan1, gan2, tc, idt1, idt2):
    """Full generator objective; works on floats and on tensors alike."""
    return w.lambda1 * (gan1 + gan2) + w.lambda2 * tc + w.lambda3 * (idt1 + idt2)


def combine(w: LossWeights, gan1, gan2, tc, idt1, idt2) -> LossBundle:
    """Assemble a :class:`LossBundle` from scalar loss components."""
    parts = {"gan1": gan1, "gan2": gan2, "tc": tc, "idt1": idt1, "idt2": idt2}
    values = {}
    for name, v in parts.items():
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        values[name] = v
    total = weighted_total(w, **values)
    if not math.isfinite(total):
        raise NonFiniteLossError("total", total)
    return LossBundle(total=total, **values)
