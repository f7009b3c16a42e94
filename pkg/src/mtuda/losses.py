"""Segmentation, adversarial and distillation objectives.

All functions return scalar tensors wired into the autodiff graph. Inputs
that must not receive gradients (discriminator inputs during the
discriminator step, teacher maps in distillation) are detached here, so a
caller cannot leak gradients across the min-max partition by accident.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from mtuda import tensor as tc
from mtuda.nets import DiscriminatorBank, DiscriminatorParams, discriminator_forward
from mtuda.tensor import IGNORE, Tensor


class Representation(enum.Enum):
    SOFT_MAP = "SoftMap"
    SELF_INFORMATION = "SelfInformation"

    @classmethod
    def parse(cls, text):
        for r in cls:
            if text in (r.value, r.name):
                return r
        raise ValueError(f"unknown representation {text!r}")


@dataclass(frozen=True)
class AdvWeights:
    lambda_adv: float = 0.001
    lambda_s: float = 0.001
    lambda_t: float = 0.001

    def __post_init__(self):
        if min(self.lambda_adv, self.lambda_s, self.lambda_t) < 0:
            raise ValueError("adversarial weights must be non-negative")


class EmptySelectionWarning(UserWarning):
    pass


def self_information_map(probs) -> Tensor:
    return tc.neg_xlogx(probs)


def represent(probs: Tensor, kind: Representation) -> Tensor:
    if kind is Representation.SELF_INFORMATION:
        return self_information_map(probs)
    return probs


def seg_loss(probs, labels, warn=True) -> Tensor:
    """Mean cross-entropy over non-IGNORE pixels; 0 (with a warning) if none remain.

    The zero returned for an empty selection is a constant outside the graph,
    so adding it to a loss leaves values and gradients bit-identical.
    """
    labels = np.asarray(labels)
    count = int(np.count_nonzero(labels != IGNORE))
    if count == 0:
        if warn:
            warnings.warn("seg_loss: every pixel is IGNORE", EmptySelectionWarning, stacklevel=2)
        return Tensor(0.0)
    picked = tc.pick_channel(probs, labels, fill=1.0)
    return tc.log(picked).sum() * (-1.0 / count)


def bce_logits(logit_map, target_label: int) -> Tensor:
    """Mean binary cross-entropy of a logit map against a constant 0/1 label."""
    if target_label == 1:
        return tc.softplus(-tc.as_tensor(logit_map)).mean()
    if target_label == 0:
        return tc.softplus(logit_map).mean()
    raise ValueError(f"target label must be 0 or 1, got {target_label!r}")


def disc_loss_single(d: DiscriminatorParams, q_source, q_target) -> Tensor:
    """Discriminator objective: source maps labelled 1, target maps labelled 0."""
    return bce_logits(discriminator_forward(d, tc.as_tensor(q_source).detach()), 1) + bce_logits(
        discriminator_forward(d, tc.as_tensor(q_target).detach()), 0
    )


def adv_fool_loss(d: DiscriminatorParams, q_target) -> Tensor:
    """Segmenter's adversarial term: push target maps toward the source label.

    ``d`` must be frozen by the caller (see :func:`frozen`); its parameters
    then receive no gradient.
    """
    return bce_logits(discriminator_forward(d, q_target), 1)


class frozen:
    """Context manager clearing ``requires_grad`` on a set of parameters."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self.saved):
            p.requires_grad = flag
        return False


def _others(q_targets, n):
    return [q for k, q in enumerate(q_targets) if k != n]


def multidis_disc_losses(bank: DiscriminatorBank, q_source, q_targets, hook=None):
    """``{"L_Dst": ..., "L_Dt": ...}`` for the source-target and 1-vs-all banks.

    ``q_targets[k]`` is the representation batch of target ``k + 1``. The
    class-0 batch of the 1-vs-all discriminator of domain ``n`` pools every
    other domain's batch, each sample weighted equally. ``hook`` (optional)
    is called with ``(kind, n, label, domains, batch)`` for every batch fed
    to a target-target discriminator.
    """
    T = len(q_targets)
    q_source = tc.as_tensor(q_source).detach()
    qs = [tc.as_tensor(q).detach() for q in q_targets]
    l_st = sum((disc_loss_single(bank.source_target[n + 1], q_source, qs[n]) for n in range(T)), Tensor(0.0)) * (
        1.0 / T
    )
    if T < 2:
        warnings.warn("target-target loss undefined for T=1", EmptySelectionWarning, stacklevel=2)
        return {"L_Dst": l_st, "L_Dt": Tensor(0.0)}
    terms = []
    for n in range(T):
        d = bank.target_target[n + 1]
        rest = tc.concat(_others(qs, n))
        if hook is not None:
            hook("tt", n + 1, 1, [n + 1], qs[n])
            hook("tt", n + 1, 0, [k + 1 for k in range(T) if k != n], rest)
        terms.append(bce_logits(discriminator_forward(d, qs[n]), 1) + bce_logits(discriminator_forward(d, rest), 0))
    l_t = sum(terms, Tensor(0.0)) * (1.0 / T)
    return {"L_Dst": l_st, "L_Dt": l_t}


def multidis_adv_terms(bank: DiscriminatorBank, q_targets):
    """``(L_adv_s, L_adv_t)`` fooling objectives for the segmenter (bank frozen by caller)."""
    T = len(q_targets)
    l_s = sum((adv_fool_loss(bank.source_target[n + 1], q_targets[n]) for n in range(T)), Tensor(0.0)) * (1.0 / T)
    if T < 2 or not bank.target_target:
        return l_s, Tensor(0.0)
    l_t = sum(
        (adv_fool_loss(bank.target_target[n + 1], tc.concat(_others(q_targets, n))) for n in range(T)), Tensor(0.0)
    ) * (1.0 / T)
    return l_s, l_t


def multidis_total_segmenter_loss(probs_source, labels_source, q_targets, bank, w: AdvWeights):
    """Segmentation loss plus both weighted adversarial terms; returns ``(total, parts)``."""
    l_seg = seg_loss(probs_source, labels_source)
    l_s, l_t = multidis_adv_terms(bank, q_targets)
    total = l_seg + l_s * w.lambda_s + l_t * w.lambda_t
    return total, {"seg": l_seg, "adv_s": l_s, "adv_t": l_t}


def single_target_segmenter_loss(probs_source, labels_source, q_target, d, lambda_adv):
    l_seg = seg_loss(probs_source, labels_source)
    l_adv = adv_fool_loss(d, q_target)
    return l_seg + l_adv * lambda_adv, {"seg": l_seg, "adv": l_adv}


def kl_distill_loss(teacher_probs, student_probs, pixel_mask=None) -> Tensor:
    """KL(teacher || student) summed over C x H x W, averaged over the batch.

    The teacher is treated as a constant. ``pixel_mask`` (N, H, W), when
    given, zeroes the per-pixel KL terms where it is False.
    """
    t = tc.as_tensor(teacher_probs).data
    if pixel_mask is not None:
        t = t * np.asarray(pixel_mask, dtype=np.float64)[:, None]
    n = t.shape[0]
    t_log_t = float(np.sum(t * np.log(np.maximum(t, tc.LOG_FLOOR))))
    cross = (tc.log(student_probs) * t).sum()
    return (Tensor(t_log_t) - cross) * (1.0 / n)


def mtkt_agnostic_loss(teacher_probs_per_domain, student_probs_per_domain, masks=None) -> Tensor:
    keys = list(teacher_probs_per_domain)
    total = Tensor(0.0)
    for k in keys:
        mask = None if masks is None else masks.get(k)
        total = total + kl_distill_loss(teacher_probs_per_domain[k], student_probs_per_domain[k], mask)
    return total * (1.0 / len(keys))
