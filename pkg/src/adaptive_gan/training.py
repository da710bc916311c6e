"""
Training drivers: classifier training, plain conditional-GAN training,
adaptive training from scratch, and adaptive retraining of a pre-trained
generator.

All four share one loop per model family. The GAN loop alternates
``d_steps_per_g_step`` discriminator updates with one generator update; the
generator update adds ``alpha * attack_loss`` through the frozen target
classifier when an attack objective is configured.
"""

import contextlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from adaptive_gan.data import make_batches
from adaptive_gan.errors import ArgumentError, TrainingError
from adaptive_gan.losses import (
    AttackObjectiveConfig,
    attack_loss,
    combined_generator_loss,
    discriminator_loss,
    generator_gan_loss,
)
from adaptive_gan.models import ClassifierSpec, classify, generate, instantiate_model

log = logging.getLogger(__name__)

PROBE_SEED_OFFSET = 7919
EVAL_BATCH = 1000


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    d_steps_per_g_step: int = 1
    attack: AttackObjectiveConfig = None
    label_smoothing: float = 0.1
    max_steps: int = None
    probe_size: int = 1000
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ArgumentError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ArgumentError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.d_steps_per_g_step < 1:
            raise ArgumentError("d_steps_per_g_step must be >= 1")
        if not 0 <= self.label_smoothing < 0.5:
            raise ArgumentError(f"label_smoothing must lie in [0, 0.5), got {self.label_smoothing}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ArgumentError("max_steps must be positive when set")
        if self.probe_size < 1:
            raise ArgumentError("probe_size must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainHistory:
    step_losses: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    probe_success: list = field(default_factory=list)
    probe_success_initial: float = None
    d_steps: int = 0
    g_steps: int = 0
    epochs_completed: int = 0

    def to_dict(self):
        return asdict(self)


@contextlib.contextmanager
def determinism(enabled):
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def epoch_seed(seed, epoch):
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def _adam(module, cfg):
    return torch.optim.Adam(module.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))


def _check_finite(value, what, step):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {what} loss {value}", step=step)


@torch.no_grad()
def accuracy(M, data, batch_size=EVAL_BATCH):
    correct = 0
    for i in range(0, len(data), batch_size):
        logits = classify(M, data.images[i : i + batch_size])
        correct += (logits.argmax(1) == data.labels[i : i + batch_size]).sum().item()
    return correct / len(data)


@torch.no_grad()
def predict(M, images, batch_size=EVAL_BATCH):
    return torch.cat([classify(M, images[i : i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)])


def train_classifier(train, test, cfg, spec=None):
    """Train a classifier with Adam on cross-entropy.

    Returns ``(handle, report)``; ``report`` holds the held-out accuracy and
    the loss trajectory. Freeze the handle before using it as attack target.
    """
    if spec is None:
        spec = ClassifierSpec(num_classes=int(train.labels.max()) + 1, input_shape=tuple(train.images.shape[1:]))
    if tuple(train.images.shape[1:]) != spec.input_shape:
        raise ArgumentError("training images do not match the classifier input shape")
    M = instantiate_model(spec, cfg.seed)
    opt = _adam(M.module, cfg)
    history = TrainHistory()
    step = 0
    with determinism(cfg.deterministic):
        M.module.train()
        for epoch in range(cfg.epochs):
            total = 0.0
            batches = make_batches(train, cfg.batch_size, seed=epoch_seed(cfg.seed, epoch))
            for batch in batches:
                loss = F.cross_entropy(classify(M, batch.images), batch.labels)
                value = loss.item()
                _check_finite(value, "classifier", step)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                M.bump()
                history.step_losses.append(value)
                total += value
                step += 1
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            history.epoch_losses.append(total / len(batches))
            history.epochs_completed = epoch + 1
            if cfg.max_steps and step >= cfg.max_steps:
                break
        M.module.eval()
        acc = accuracy(M, test) if test is not None else None
    log.info("classifier trained: %d steps, held-out accuracy %s", step, acc)
    return M, {"test_accuracy": acc, "steps": step, "history": history.to_dict()}


def make_probe(G_spec, size, seed):
    """Fixed ``(c, z, t)`` probe drawn from ``seed``; ``t`` is None unless target-conditioned."""
    gen = torch.Generator().manual_seed(seed + PROBE_SEED_OFFSET)
    c = torch.arange(size) % G_spec.num_classes
    z = torch.randn(size, G_spec.z_dim, generator=gen)
    t = torch.randint(G_spec.num_classes, (size,), generator=gen) if G_spec.target_conditioned else None
    return c, z, t


@torch.no_grad()
def probe_success(G, TC, probe, target):
    """Fraction of probe samples with ``c != t`` that TC assigns to ``t``."""
    c, z, t = probe
    was_training = G.module.training
    G.module.eval()
    images = torch.cat([generate(G, c[i : i + EVAL_BATCH], z[i : i + EVAL_BATCH],
                                 None if t is None else t[i : i + EVAL_BATCH])
                        for i in range(0, len(c), EVAL_BATCH)])
    G.module.train(was_training)
    tt = torch.full_like(c, target) if t is None else t
    keep = c != tt
    pred = predict(TC, images[keep])
    return (pred == tt[keep]).float().mean().item()


def _sample_conditions(G_spec, batch, gen, target):
    c = torch.randint(G_spec.num_classes, (batch,), generator=gen)
    z = torch.randn(batch, G_spec.z_dim, generator=gen)
    t = None
    if G_spec.target_conditioned:
        t = torch.randint(G_spec.num_classes, (batch,), generator=gen)
    return c, z, t


def _check_pair(G, D, data):
    if tuple(data.images.shape[1:]) != G.spec.output_shape:
        raise ArgumentError(f"data shape {tuple(data.images.shape[1:])} != generator output {G.spec.output_shape}")
    if D.spec.input_shape != G.spec.output_shape or D.spec.num_classes != G.spec.num_classes:
        raise ArgumentError("generator and discriminator specs disagree")


def _check_target_classifier(TC, G_spec):
    if not TC.frozen:
        raise ArgumentError("target classifier must be frozen")
    if TC.spec.input_shape != G_spec.output_shape:
        raise ArgumentError(f"target classifier input {TC.spec.input_shape} != generator output {G_spec.output_shape}")
    if TC.spec.num_classes != G_spec.num_classes:
        raise ArgumentError("target classifier and generator disagree on class count")


def _gan_loop(data, G, D, cfg, TC=None, history=None):
    """Run the alternating GAN updates in place on ``G`` and ``D``."""
    history = history or TrainHistory()
    attack = cfg.attack if TC is not None else None
    probe = make_probe(G.spec, cfg.probe_size, cfg.seed) if attack is not None else None
    opt_g, opt_d = _adam(G.module, cfg), _adam(D.module, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)
    k = cfg.d_steps_per_g_step
    d_params = list(D.module.parameters())

    with determinism(cfg.deterministic):
        if probe is not None and history.probe_success_initial is None:
            history.probe_success_initial = probe_success(G, TC, probe, attack.target)
        G.module.train()
        D.module.train()
        done = False
        for epoch in range(cfg.epochs):
            sums = {"d": 0.0, "g": 0.0, "attack": 0.0}
            n_g = 0
            for real in make_batches(data, cfg.batch_size, seed=epoch_seed(cfg.seed, epoch)):
                c, z, t = _sample_conditions(G.spec, len(real), gen, attack.target if attack else None)
                fake = generate(G, c, z, t)

                d_loss = discriminator_loss(D, real, c, fake, cfg.label_smoothing)
                d_value = d_loss.item()
                _check_finite(d_value, "discriminator", history.d_steps)
                opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                opt_d.step()
                D.bump()
                history.d_steps += 1
                sums["d"] += d_value
                if history.d_steps % k:
                    continue

                for p in d_params:
                    p.requires_grad_(False)
                g_gan = generator_gan_loss(D, c, fake)
                a_value = 0.0
                if attack is not None:
                    a_loss = attack_loss(classify(TC, fake), attack, targets=t)
                    a_value = a_loss.item()
                    g_loss = combined_generator_loss(g_gan, a_loss, attack.alpha)
                else:
                    g_loss = g_gan
                for p in d_params:
                    p.requires_grad_(True)
                g_value = g_loss.item()
                _check_finite(g_value, "generator", history.g_steps)
                opt_g.zero_grad(set_to_none=True)
                g_loss.backward()
                opt_g.step()
                G.bump()
                history.g_steps += 1
                history.step_losses.append({"d": d_value, "g": g_value, "attack": a_value})
                sums["g"] += g_value
                sums["attack"] += a_value
                n_g += 1
                if cfg.max_steps and history.g_steps >= cfg.max_steps:
                    done = True
                    break
            history.epoch_losses.append({key: v / max(n_g, 1) for key, v in sums.items()})
            history.epochs_completed += 1
            if probe is not None:
                rate = probe_success(G, TC, probe, attack.target)
                history.probe_success.append(rate)
                log.info("epoch %d: probe success %.3f", history.epochs_completed, rate)
            else:
                log.info("epoch %d: %s", history.epochs_completed, history.epoch_losses[-1])
            if done:
                break
        G.module.eval()
        D.module.eval()
    return history


def train_gan(data, G_spec, D_spec, cfg):
    """Plain conditional-GAN training. Returns ``(G, D, history)``.

    G is initialized from ``cfg.seed`` and D from ``cfg.seed + 1``.
    """
    if cfg.attack is not None and cfg.attack.alpha != 0:
        raise ArgumentError("train_gan takes no attack objective; use train_adaptive")
    G, D = instantiate_model(G_spec, cfg.seed), instantiate_model(D_spec, cfg.seed + 1)
    _check_pair(G, D, data)
    history = _gan_loop(data, G, D, replace(cfg, attack=None))
    return G, D, history


def train_adaptive(data, G_spec, D_spec, TC, cfg):
    """Adaptive training from scratch: the generator minimizes
    ``L_gan + alpha * L_attack`` against the frozen ``TC``; D sees the GAN loss only.
    """
    if cfg.attack is None:
        raise ArgumentError("train_adaptive needs cfg.attack")
    _check_target_classifier(TC, G_spec)
    if not G_spec.target_conditioned and cfg.attack.target >= G_spec.num_classes:
        raise ArgumentError("attack target outside the class range")
    G, D = instantiate_model(G_spec, cfg.seed), instantiate_model(D_spec, cfg.seed + 1)
    _check_pair(G, D, data)
    history = _gan_loop(data, G, D, cfg, TC=TC)
    return G, D, history


def adapt_retrain(data, G, D, TC, cfg, epochs=None):
    """Adaptive retraining of pre-trained handles.

    Works on copies, so the inputs (and the checkpoint they came from) stay
    intact for before/after comparison. ``epochs`` overrides ``cfg.epochs``
    and may be 0, which returns unmodified copies.
    """
    if cfg.attack is None:
        raise ArgumentError("adapt_retrain needs cfg.attack")
    _check_target_classifier(TC, G.spec)
    G2, D2 = G.clone(), D.clone()
    _check_pair(G2, D2, data)
    epochs = cfg.epochs if epochs is None else epochs
    if epochs < 0:
        raise ArgumentError("epochs must be non-negative")
    history = TrainHistory()
    if epochs == 0:
        return G2, D2, history
    history = _gan_loop(data, G2, D2, replace(cfg, epochs=epochs), TC=TC, history=history)
    return G2, D2, history


def training_metadata(cfg, history=None, **extra):
    """JSON-able provenance block stored with every checkpoint."""
    meta = {"train_config": cfg.to_dict(), "optimizer": {"name": "adam", "lr": cfg.learning_rate,
                                                          "betas": [cfg.beta1, cfg.beta2]}}
    if history is not None:
        meta["epochs_completed"] = history.epochs_completed
        meta["g_steps"] = history.g_steps
        meta["d_steps"] = history.d_steps
        meta["probe_success"] = list(history.probe_success)
        meta["probe_success_initial"] = history.probe_success_initial
    meta.update(extra)
    return meta
