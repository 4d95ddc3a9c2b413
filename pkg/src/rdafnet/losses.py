"""Training objective: L1 content loss plus an L1 distance between spectra."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    # "parts": |Re| + |Im| per bin; "modulus": complex magnitude per bin
    complex_l1: str = "parts"

    def __post_init__(self):
        if not (self.lam >= 0 and self.lam < float("inf")):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        if self.complex_l1 not in ("parts", "modulus"):
            raise ValueError(f"complex_l1 must be 'parts' or 'modulus', got {self.complex_l1!r}")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: pred {pred.shape} vs target {target.shape}")
    return T.mean(T.abs_(T.sub(pred, target)))


def frequency_loss(pred: Tensor, target: Tensor, complex_l1: str = "parts") -> Tensor:
    """Mean over DFT bins of the L1 distance between the two spectra."""
    if pred.shape != target.shape:
        raise ShapeError(f"frequency_loss: pred {pred.shape} vs target {target.shape}")
    # the DFT is linear, so transform the difference once
    diff = T.fft2(T.sub(pred, target))
    if complex_l1 == "parts":
        return T.add(T.mean(T.abs_(diff.real)), T.mean(T.abs_(diff.imag)))
    if complex_l1 == "modulus":
        mag2 = T.add(T.square(diff.real), T.square(diff.imag))
        eps = Tensor(mag2.data * 0 + 1e-12, dtype=mag2.dtype)
        return T.mean(T.sqrt(T.add(mag2, eps)))
    raise ValueError(f"unknown complex_l1 {complex_l1!r}")


def total_loss(stage_outputs: Sequence, target: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum over stages of content loss plus ``lam`` times frequency loss."""
    if not stage_outputs:
        raise ValueError("total_loss needs at least one stage output")
    total = None
    for out in stage_outputs:
        pred = getattr(out, "restored", out)
        term = l1_loss(pred, target)
        if cfg.lam:
            term = T.add(term, T.scale(frequency_loss(pred, target, cfg.complex_l1), cfg.lam))
        total = term if total is None else T.add(total, term)
    return total
