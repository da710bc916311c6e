"""
Perturbation-based reference attacks under an L-infinity budget on [0, 1]
pixels: FGSM and multi-restart PGD, each on cross-entropy or the CW logit
margin, targeted or untargeted.

Internally every attack *ascends* a per-sample objective:

=========== ============================== ===============================
            cross_entropy                  cw_logit
=========== ============================== ===============================
untargeted  CE(logits, y)                  max_{j != y} z_j - z_y
targeted    -CE(logits, t)                 -max(0, max_{j != t} z_j - z_t)
=========== ============================== ===============================

so targeted attacks descend the loss toward ``t`` and untargeted attacks
ascend the true-label loss. BIM is PGD with ``restarts=0`` started at ``x``.
"""

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from adaptive_gan.data import ImageBatch
from adaptive_gan.errors import ArgumentError
from adaptive_gan.losses import BASE_LOSSES, cw_logit_loss
from adaptive_gan.models import classify


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float = 0.3
    step_size: float = None
    steps: int = 1
    restarts: int = 0
    targeted: bool = False
    loss: str = "cross_entropy"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ArgumentError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.restarts < 0:
            raise ArgumentError(f"restarts must be >= 0, got {self.restarts}")
        if self.step_size is not None and self.step_size <= 0:
            raise ArgumentError(f"step_size must be positive, got {self.step_size}")
        if self.loss not in BASE_LOSSES:
            raise ArgumentError(f"loss must be one of {BASE_LOSSES}")

    @property
    def resolved_step_size(self):
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps


def objective(logits, labels, targeted, loss):
    """Per-sample value the attack ascends (see module docstring)."""
    if loss == "cross_entropy":
        ce = F.cross_entropy(logits, labels, reduction="none")
        return -ce if targeted else ce
    if targeted:
        return -cw_logit_loss(logits, labels)
    true_logit = logits.gather(1, labels[:, None]).squeeze(1)
    others = logits.masked_fill(F.one_hot(labels, logits.shape[1]).bool(), float("-inf"))
    return others.max(dim=1).values - true_logit


def is_success(logits, labels, targeted):
    pred = logits.argmax(dim=1)
    return pred == labels if targeted else pred != labels


def _unpack(x, labels):
    if isinstance(x, ImageBatch):
        images = x.images
        labels = x.labels if labels is None else labels
    else:
        images = x
    if labels is None:
        raise ArgumentError("labels (untargeted) or targets (targeted) are required")
    labels = torch.as_tensor(labels).long()
    if labels.ndim == 0:
        labels = labels.expand(images.shape[0])
    if labels.shape != (images.shape[0],):
        raise ArgumentError("one label or target per image is required")
    return images.detach(), labels


def project(x_adv, x, epsilon):
    """Projection onto the epsilon-ball around ``x`` intersected with [0, 1]."""
    return torch.min(torch.max(x_adv, x - epsilon), x + epsilon).clamp(0.0, 1.0)


def sign_ascent(objective_fn, x, epsilon, step_size, steps, start=None):
    """Projected sign-gradient ascent of ``objective_fn`` (per-sample values).

    ``start`` defaults to ``x``. Every iterate stays in the epsilon-ball and [0, 1].
    """
    x_adv = (x if start is None else project(start, x, epsilon)).clone()
    for _ in range(steps):
        x_adv.requires_grad_(True)
        grad, = torch.autograd.grad(objective_fn(x_adv).sum(), x_adv)
        x_adv = project(x_adv.detach() + step_size * grad.sign(), x, epsilon)
    return x_adv.detach()


def fgsm(TC, x, labels=None, budget=None):
    """One signed-gradient step of size epsilon, clipped to [0, 1]."""
    budget = budget or PerturbationBudget()
    images, labels = _unpack(x, labels)
    if budget.steps != 1:
        warnings.warn("fgsm ignores budget.steps; it always takes one step", stacklevel=2)
    fn = lambda xa: objective(classify(TC, xa), labels, budget.targeted, budget.loss)
    return sign_ascent(fn, images, budget.epsilon, budget.epsilon, 1)


def pgd(TC, x, labels=None, budget=None, seed=0, start_at_x=False, batch_size=1000):
    """Multi-restart PGD.

    Runs ``1 + budget.restarts`` attempts. Attempt ``r`` starts from a uniform
    point in the epsilon-ball drawn from ``(seed, r)``, except attempt 0 when
    ``start_at_x`` is set. Per sample the first successful attempt is kept;
    samples never successful keep the attempt with the best objective.
    """
    budget = budget or PerturbationBudget(steps=40)
    images, labels = _unpack(x, labels)
    step = budget.resolved_step_size
    if step > budget.epsilon:
        warnings.warn(f"PGD step size {step} exceeds epsilon {budget.epsilon}", stacklevel=2)
    out = []
    for lo in range(0, images.shape[0], batch_size):
        out.append(_pgd_batch(TC, images[lo : lo + batch_size], labels[lo : lo + batch_size],
                              budget, step, seed, start_at_x, lo))
    return torch.cat(out)


def _restart_noise(shape, seed, restart, offset):
    gen = torch.Generator().manual_seed(seed * 1_000_003 + restart)
    noise = torch.rand(offset + shape[0], *shape[1:], generator=gen)
    return noise[offset:] * 2 - 1


def _pgd_batch(TC, images, labels, budget, step, seed, start_at_x, offset):
    fn = lambda xa: objective(classify(TC, xa), labels, budget.targeted, budget.loss)
    best = None
    for r in range(budget.restarts + 1):
        if r == 0 and start_at_x:
            start = images
        else:
            noise = _restart_noise(images.shape, seed, r, offset).to(images.dtype)
            start = images + budget.epsilon * noise
        x_adv = sign_ascent(fn, images, budget.epsilon, step, budget.steps, start)
        with torch.no_grad():
            logits = classify(TC, x_adv)
            ok = is_success(logits, labels, budget.targeted)
            score = objective(logits, labels, budget.targeted, budget.loss)
        if best is None:
            best, best_ok, best_score = x_adv, ok, score
            continue
        take = ~best_ok & (ok | (score > best_score))
        best = torch.where(take[:, None, None, None], x_adv, best)
        best_score = torch.where(take, score, best_score)
        best_ok = best_ok | ok
        if best_ok.all():
            break
    return best
