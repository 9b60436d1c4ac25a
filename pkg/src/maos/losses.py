"""Adversarial, cycle and balanced objectives.

Discriminators emit raw logits; the sigmoid and the log guard live here.
Per thread ``i`` of a discriminator ``D`` the objective it maximises is::

    L_i = mean(log s(D_i(real))) + mean(log(1 - s(D_i(fake))))

and the stored discriminator loss is ``-L_i`` so every optimiser minimises.
A discriminator's bundle averages its threads; the generator sees the
average of the non-saturating terms ``-mean(log s(D_i(fake)))``.

Probabilities are clamped to ``LOG_FLOOR`` before the log, so every term is
finite for finite logits. ``1 - s(z)`` is evaluated as ``s(-z)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

from . import tensor as T
from .models import DiscriminatorNet
from .tensor import Tensor

LOG_FLOOR = 1e-12
LOSS_FORMS = ("nonsaturating_log", "least_squares")


@dataclass
class AdvLossBundle:
    d_loss: Tensor | None
    g_loss: Tensor | None
    per_thread_d_losses: list[Tensor]
    per_thread_g_losses: list[Tensor]


@dataclass(frozen=True)
class BalanceConfig:
    alpha: float = 0.1
    cycle_weight: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.cycle_weight < 0:
            raise ValueError(f"cycle_weight must be >= 0, got {self.cycle_weight}")


def _log_prob(logits: Tensor, positive: bool) -> Tensor:
    z = logits if positive else T.neg(logits)
    return T.log(T.clamp_min(T.sigmoid(z), LOG_FLOOR))


def _mean_of(terms: Sequence[Tensor]) -> Tensor:
    if len(terms) == 1:
        return terms[0]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def _sum_of(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def thread_d_loss(real_logits: Tensor, fake_logits: Tensor,
                  form: str = "nonsaturating_log") -> Tensor:
    """Negated per-thread discriminator objective."""
    if form == "least_squares":
        r = T.add(real_logits, -1.0)
        return T.scale(T.add(T.mean(T.mul(r, r)), T.mean(T.mul(fake_logits, fake_logits))), 0.5)
    _check_form(form)
    return T.neg(T.add(T.mean(_log_prob(real_logits, True)),
                       T.mean(_log_prob(fake_logits, False))))


def thread_g_loss(fake_logits: Tensor, form: str = "nonsaturating_log") -> Tensor:
    if form == "least_squares":
        f = T.add(fake_logits, -1.0)
        return T.mean(T.mul(f, f))
    _check_form(form)
    return T.neg(T.mean(_log_prob(fake_logits, True)))


def _check_form(form: str) -> None:
    if form not in LOSS_FORMS:
        raise ValueError(f"unknown loss form {form!r}; expected one of {LOSS_FORMS}")


def bundle_from_logits(real: Sequence[Tensor] | None, fake: Sequence[Tensor],
                       form: str = "nonsaturating_log") -> AdvLossBundle:
    """Average per-thread terms. ``real=None`` builds the generator side only."""
    per_d = [] if real is None else [thread_d_loss(r, f, form) for r, f in zip(real, fake)]
    per_g = [thread_g_loss(f, form) for f in fake]
    return AdvLossBundle(
        d_loss=_mean_of(per_d) if per_d else None,
        g_loss=_mean_of(per_g),
        per_thread_d_losses=per_d,
        per_thread_g_losses=per_g,
    )


def adv_loss_global(d_g: DiscriminatorNet, real_batch: Tensor | None, fake_batch: Tensor,
                    form: str = "nonsaturating_log") -> AdvLossBundle:
    """Whole-image adversarial terms for every thread of ``d_g``.

    Pass ``real_batch=None`` for a generator step; ``d_loss`` is then None.
    """
    if real_batch is not None and real_batch.shape[1:] != fake_batch.shape[1:]:
        raise T.ShapeError(f"real {real_batch.shape} and fake {fake_batch.shape} differ")
    real = None if real_batch is None else d_g.forward_threads(real_batch)
    return bundle_from_logits(real, d_g.forward_threads(fake_batch), form)


def adv_loss_part(d_p: DiscriminatorNet, real_crops: Tensor | None, fake_crops: Tensor,
                  form: str = "nonsaturating_log", part_size: int | None = None) -> AdvLossBundle:
    """Same objective as :func:`adv_loss_global`, scored on crops.

    Crops come from :func:`maos.data.random_part_crop`, which keeps the
    gradient path to the full generated image.
    """
    for name, c in (("real", real_crops), ("fake", fake_crops)):
        if c is None:
            continue
        if c.shape[2] != c.shape[3] or (part_size is not None and c.shape[2] != part_size):
            raise T.ShapeError(f"{name} crops have shape {c.shape}, expected part size {part_size}")
    return adv_loss_global(d_p, real_crops, fake_crops, form)


def cycle_loss(x: Tensor, reconstructed: Tensor) -> Tensor:
    """Mean absolute reconstruction error."""
    if x.shape != reconstructed.shape:
        raise T.ShapeError(f"cycle_loss: {x.shape} vs {reconstructed.shape}")
    return T.mean(T.absolute(T.sub(reconstructed, x)))


def balanced_total(target_side: Mapping[str, AdvLossBundle], source_side: AdvLossBundle | None,
                   cfg: BalanceConfig,
                   cycle_terms: Sequence[Tensor] = ()) -> tuple[Tensor | None, dict[str, list[Tensor]]]:
    """Combine bundles into the generator objective and per-thread D losses.

    Target-side bundles (global and part, summed with equal weight) are
    scaled by ``alpha`` on both the generator and discriminator side; the
    source side is unscaled. Returns ``(total_g, d_updates)`` where
    ``d_updates[name]`` lists the scaled loss of each thread of that
    discriminator (the key ``"source"`` holds the source side).

    ``cfg`` may be any object with ``alpha`` and ``cycle_weight``
    attributes; the trainer passes its own config.
    """
    alpha, cycle_weight = float(cfg.alpha), float(cfg.cycle_weight)

    g_terms: list[Tensor] = []
    target_g = [b.g_loss for b in target_side.values() if b.g_loss is not None]
    if target_g:
        g_terms.append(T.scale(_sum_of(target_g), alpha))
    if source_side is not None and source_side.g_loss is not None:
        g_terms.append(source_side.g_loss)
    if cycle_terms:
        g_terms.append(T.scale(_sum_of(list(cycle_terms)), cycle_weight))
    total_g = _sum_of(g_terms) if g_terms else None

    d_updates: dict[str, list[Tensor]] = {}
    for name, b in target_side.items():
        if b.per_thread_d_losses:
            d_updates[name] = [T.scale(t, alpha) for t in b.per_thread_d_losses]
    if source_side is not None and source_side.per_thread_d_losses:
        d_updates["source"] = list(source_side.per_thread_d_losses)
    return total_g, d_updates
