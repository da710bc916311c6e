"""
Scalar objectives: the masked attack loss and its unmasked / weighted-mask
variants, cGAN and ACGAN losses, the targeted CW logit margin, and the
combined generator objective ``L_gan + alpha * L_attack``.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from adaptive_gan.errors import ArgumentError
from adaptive_gan.models import discriminate

BASE_LOSSES = ("cross_entropy", "cw_logit")


@dataclass(frozen=True)
class AttackObjectiveConfig:
    """Knobs of the attack objective.

    ``mask_weight`` is the weight given to samples the target classifier
    already assigns to ``target``: 0 keeps only unsuccessful samples (the pure
    indicator mask), 1 weights every sample equally (plain expected loss).
    """

    target: int
    alpha: float = 1.0
    mask_weight: float = 0.0
    base_loss: str = "cross_entropy"

    def __post_init__(self):
        if not 0.0 <= self.mask_weight <= 1.0:
            raise ArgumentError(f"mask_weight must lie in [0, 1], got {self.mask_weight}")
        if self.alpha < 0 or not math.isfinite(self.alpha):
            raise ArgumentError(f"alpha must be a finite non-negative number, got {self.alpha}")
        if self.target < 0:
            raise ArgumentError(f"target must be a class index, got {self.target}")
        if self.base_loss not in BASE_LOSSES:
            raise ArgumentError(f"base_loss must be one of {BASE_LOSSES}")

    def with_target(self, target):
        return AttackObjectiveConfig(target, self.alpha, self.mask_weight, self.base_loss)


def _target_vector(t, batch, n, device):
    t = torch.as_tensor(t, device=device).long()
    if t.ndim == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise ArgumentError(f"targets must be a scalar or [{batch}]")
    if t.min() < 0 or t.max() >= n:
        raise ArgumentError(f"target outside [0, {n})")
    return t


def cw_logit_loss(logits, t):
    """Targeted margin ``max(0, max_{j != t} z_j - z_t)`` per sample."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ArgumentError("cw_logit_loss needs logits [B, n] with n >= 2")
    t = _target_vector(t, logits.shape[0], logits.shape[1], logits.device)
    target_logit = logits.gather(1, t[:, None]).squeeze(1)
    others = logits.masked_fill(F.one_hot(t, logits.shape[1]).bool(), float("-inf"))
    return (others.max(dim=1).values - target_logit).clamp(min=0)


def per_sample_loss(logits, t, base_loss="cross_entropy"):
    if base_loss == "cross_entropy":
        t = _target_vector(t, logits.shape[0], logits.shape[1], logits.device)
        return F.cross_entropy(logits, t, reduction="none")
    if base_loss == "cw_logit":
        return cw_logit_loss(logits, t)
    raise ArgumentError(f"unknown base loss {base_loss!r}")


def attack_weights(logits, target, mask_weight):
    """1 where the prediction misses ``target``, ``mask_weight`` where it hits.

    Argmax ties go to the lowest class index. The result carries no gradient.
    """
    with torch.no_grad():
        hit = logits.argmax(dim=1) == target
        return torch.where(hit, torch.full_like(logits[:, 0], mask_weight), torch.ones_like(logits[:, 0]))


def attack_loss(logits, cfg, targets=None):
    """Batch mean of ``w_i * J(logits_i, t)``; the divisor is always B.

    ``targets`` optionally replaces ``cfg.target`` with one target per row
    (target-conditioned generators).
    """
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ArgumentError("attack_loss needs a non-empty [B, n] logit batch")
    t = _target_vector(cfg.target if targets is None else targets, logits.shape[0], logits.shape[1], logits.device)
    w = attack_weights(logits, t, cfg.mask_weight)
    return (w * per_sample_loss(logits, t, cfg.base_loss)).mean()


def combined_generator_loss(g_gan_loss, attack, alpha):
    if alpha < 0:
        raise ArgumentError(f"alpha must be non-negative, got {alpha}")
    if alpha == 0:
        return g_gan_loss
    return g_gan_loss + alpha * attack


def discriminator_source_loss(real_logits, fake_logits, label_smoothing=0.0):
    """Mean of the real-side and fake-side binary cross-entropies.

    Real samples aim at ``1 - label_smoothing``, fakes at 0.
    """
    real = F.binary_cross_entropy_with_logits(
        real_logits, torch.full_like(real_logits, 1.0 - label_smoothing)
    )
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return 0.5 * (real + fake)


def generator_source_loss(fake_logits):
    # non-saturating form
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def auxiliary_class_loss(class_logits, labels):
    return F.cross_entropy(class_logits, labels)


def _check_gan_inputs(real, fake_c, fake_images):
    if len(real) == 0 or fake_images.shape[0] == 0:
        raise ArgumentError("real and fake batches must be non-empty")
    if fake_c.ndim != 1 or fake_c.shape[0] != fake_images.shape[0]:
        raise ArgumentError("fake_c must be [B] matching fake_images")
    if tuple(fake_images.shape[1:]) != tuple(real.images.shape[1:]):
        raise ArgumentError("real and fake images differ in shape")


def discriminator_loss(D, real, fake_c, fake_images, label_smoothing=0.1, aux_weight=1.0):
    """Discriminator-side loss; fakes are detached."""
    _check_gan_inputs(real, fake_c, fake_images)
    fake_images = fake_images.detach()
    if D.mode == "cgan":
        real_logit, _ = discriminate(D, real.images, real.labels)
        fake_logit, _ = discriminate(D, fake_images, fake_c)
        return discriminator_source_loss(real_logit, fake_logit, label_smoothing)
    real_logit, real_cls = discriminate(D, real.images)
    fake_logit, fake_cls = discriminate(D, fake_images)
    return (
        discriminator_source_loss(real_logit, fake_logit, label_smoothing)
        + aux_weight * auxiliary_class_loss(real_cls, real.labels)
        + aux_weight * auxiliary_class_loss(fake_cls, fake_c)
    )


def generator_gan_loss(D, fake_c, fake_images, aux_weight=1.0):
    """Generator-side GAN loss; gradients flow into ``fake_images``."""
    if D.mode == "cgan":
        fake_logit, _ = discriminate(D, fake_images, fake_c)
        return generator_source_loss(fake_logit)
    fake_logit, fake_cls = discriminate(D, fake_images)
    return generator_source_loss(fake_logit) + aux_weight * auxiliary_class_loss(fake_cls, fake_c)


def cgan_losses(D, real, fake_c, fake_images, label_smoothing=0.1):
    """``(d_loss, g_loss)`` for a class-conditioned discriminator.

    Real samples aim at ``1 - label_smoothing``, fakes at 0; the generator
    side uses the non-saturating target 1.
    """
    if D.mode != "cgan":
        raise ArgumentError("cgan_losses needs a cgan-mode discriminator")
    d_loss = discriminator_loss(D, real, fake_c, fake_images, label_smoothing)
    return d_loss, generator_gan_loss(D, fake_c, fake_images)


def acgan_losses(D, real, fake_c, fake_images, label_smoothing=0.1, aux_weight=1.0):
    """``(d_loss, g_loss)`` with the auxiliary class terms.

    d_loss = source + aux_weight * (CE(real -> true label) + CE(fake -> fake_c));
    g_loss = non-saturating source + aux_weight * CE(fake -> fake_c).
    """
    if D.mode != "acgan":
        raise ArgumentError("acgan_losses needs an acgan-mode discriminator")
    d_loss = discriminator_loss(D, real, fake_c, fake_images, label_smoothing, aux_weight)
    return d_loss, generator_gan_loss(D, fake_c, fake_images, aux_weight)
