"""Loss terms for both branches and the semantic-consistency coupling.

All functions are pure and batch-averaged. Cross-entropy style losses clamp
probabilities to ``[EPS, 1 - EPS]`` before taking logs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import torch

EPS = 1e-7


class TrainingDivergence(RuntimeError):
    """A loss term became NaN or infinite."""

    def __init__(self, message: str, step: int | None = None, snapshot: str | None = None):
        super().__init__(message)
        self.step = step
        self.snapshot = snapshot


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_rec: float = 10.0
    lambda_gp: float = 10.0
    lambda_sc: float = 0.01

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_rec", "lambda_gp", "lambda_sc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def adv_loss_d(d_real_adv, d_fake_adv, gp=0.0, lambda_gp: float = 10.0):
    """Critic loss: E[D(fake)] - E[D(real)] + lambda_gp * gp."""
    return d_fake_adv.mean() - d_real_adv.mean() + lambda_gp * gp


def adv_loss_g(d_fake_adv):
    return -d_fake_adv.mean()


def _adv_scores(out):
    return out[0] if isinstance(out, tuple) else out


def interpolate(x_in: torch.Tensor, x_out: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Points ``u * x_in + (1 - u) * x_out`` with one ``u`` per example."""
    u = u.view(-1, *([1] * (x_in.ndim - 1))).to(x_in.dtype)
    return u * x_in + (1.0 - u) * x_out


def critic_input_gradient(critic: Callable, x: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Gradient of the summed adversarial scores with respect to the critic input.

    Patch critics emit several scores per example; summing them keeps the
    per-example gradient equal to the gradient of that example's scores.
    """
    x = x.detach().requires_grad_(True)
    scores = _adv_scores(critic(x))
    (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=create_graph)
    return grad


def gradient_penalty(critic: Callable, x_in: torch.Tensor, x_out: torch.Tensor,
                     u: torch.Tensor | None = None, generator: torch.Generator | None = None):
    """Mean over the batch of ``(||grad_x D(x_tilde)||_2 - 1) ** 2``.

    ``x_tilde`` lies on the segment between each real/fake pair. Pass ``u``
    to fix the mixing coefficients, or a ``generator`` to draw them.
    """
    _check_same_shape(x_in, x_out, "gradient_penalty")
    if u is None:
        u = torch.rand(x_in.size(0), generator=generator, dtype=x_in.dtype)
    x_tilde = interpolate(x_in.detach(), x_out.detach(), u)
    grad = critic_input_gradient(critic, x_tilde)
    norm = grad.flatten(1).norm(2, dim=1)
    return ((norm - 1.0) ** 2).mean()


def cls_loss(pred: torch.Tensor, target: torch.Tensor, form: str = "bce"):
    """Attribute classification loss, summed over attributes and averaged over the batch.

    ``form="bce"`` is binary cross-entropy. ``form="literal"`` evaluates
    ``-[y log p + (1 - y)(1 - log p)]`` exactly as typeset; it is unbounded
    below and exists only for auditing.
    """
    _check_same_shape(pred, target, "cls_loss")
    p = pred.clamp(EPS, 1.0 - EPS)
    target = target.to(p.dtype)
    if form == "bce":
        per = target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)
    elif form == "literal":
        per = target * torch.log(p) + (1.0 - target) * (1.0 - torch.log(p))
    else:
        raise ValueError(f"unknown classification loss form {form!r}")
    return -per.flatten(1).sum(dim=1).mean()


def rec_loss_rgb(x_in: torch.Tensor, x_rec: torch.Tensor):
    """Mean absolute reconstruction error over all elements."""
    _check_same_shape(x_in, x_rec, "rec_loss_rgb")
    return (x_in - x_rec).abs().mean()


def mask_cross_entropy(target: torch.Tensor, prob: torch.Tensor):
    """``-(1/HW) sum_ij target_ij . log prob_ij``, averaged over the batch."""
    _check_same_shape(target, prob, "mask_cross_entropy")
    logp = torch.log(prob.clamp(EPS, 1.0))
    per_image = -(target.to(logp.dtype) * logp).sum(dim=1).flatten(1).mean(dim=1)
    return per_image.mean()


def rec_loss_seg(s_in: torch.Tensor, s_rec: torch.Tensor):
    return mask_cross_entropy(s_in, s_rec)


def sc_loss_rgb(s_out_onehot: torch.Tensor, parsed: torch.Tensor):
    """Consistency term for the RGB generator.

    The target is the one-hot translated mask from the semantic generator and
    is detached here so no gradient reaches that generator.
    """
    return mask_cross_entropy(s_out_onehot.detach(), parsed)


def sc_loss_seg(parsed_onehot: torch.Tensor, s_out_soft: torch.Tensor):
    """Consistency term for the semantic generator; the parsed one-hot target is detached."""
    return mask_cross_entropy(parsed_onehot.detach(), s_out_soft)


def check_finite(parts: Mapping[str, torch.Tensor | float], step: int | None = None) -> None:
    for name, value in parts.items():
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise TrainingDivergence(f"loss term {name} is {v}", step=step)


def discriminator_total(adv, cls, w: LossWeights):
    return adv + w.lambda_cls * cls


def generator_total(adv, cls, rec, sc, w: LossWeights):
    return adv + w.lambda_cls * cls + w.lambda_rec * rec + w.lambda_sc * sc


def total_losses(parts: Mapping[str, torch.Tensor | float], w: LossWeights) -> dict:
    """Combine per-term losses into the four branch objectives.

    ``parts`` maps ``"{net}/{term}"`` keys (``d_rgb/adv``, ``d_rgb/cls``,
    ``g_rgb/adv``, ``g_rgb/cls``, ``g_rgb/rec``, ``g_rgb/sc`` and the ``seg``
    counterparts) to scalars. Missing branches are skipped.
    """
    check_finite(parts)
    totals = {}
    for branch in ("rgb", "seg"):
        if f"d_{branch}/adv" in parts:
            totals[f"d_{branch}"] = discriminator_total(parts[f"d_{branch}/adv"], parts[f"d_{branch}/cls"], w)
        if f"g_{branch}/adv" in parts:
            totals[f"g_{branch}"] = generator_total(
                parts[f"g_{branch}/adv"], parts[f"g_{branch}/cls"], parts[f"g_{branch}/rec"],
                parts.get(f"g_{branch}/sc", 0.0), w,
            )
    check_finite(totals)
    return totals
