"""
The three model roles: conditional generator, discriminator (cGAN or ACGAN
form) and classifier (attack target or fidelity oracle).

Each role is a frozen spec dataclass plus a handle wrapping the torch module.
Images cross every public boundary channel-last, ``[B, H, W, C]`` in [0, 1];
modules work channel-first internally.
"""

import copy
import hashlib
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from adaptive_gan.errors import ArgumentError

CONDITIONINGS = ("onehot_concat", "embed")
GENERATOR_ARCHS = ("mlp", "dcgan_conv")
DISCRIMINATOR_MODES = ("cgan", "acgan")
LEAK = 0.2
INIT_STD = 0.02


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ArgumentError(f"image shape must be (H, W, C) with positive entries, got {shape}")
    return shape


def _check_conv_shape(shape):
    h, w, _ = shape
    if h != w or h % 4:
        raise ArgumentError(f"dcgan_conv needs square images with side divisible by 4, got {shape}")


@dataclass(frozen=True)
class GeneratorSpec:
    z_dim: int = 100
    num_classes: int = 10
    output_shape: tuple = (28, 28, 1)
    conditioning: str = "onehot_concat"
    target_conditioned: bool = False
    architecture: str = "mlp"
    width: int = 256

    def __post_init__(self):
        object.__setattr__(self, "output_shape", _check_shape(self.output_shape))
        if self.z_dim < 1 or self.num_classes < 1 or self.width < 1:
            raise ArgumentError(f"z_dim, num_classes and width must be positive: {self}")
        if self.conditioning not in CONDITIONINGS:
            raise ArgumentError(f"conditioning must be one of {CONDITIONINGS}")
        if self.architecture not in GENERATOR_ARCHS:
            raise ArgumentError(f"architecture must be one of {GENERATOR_ARCHS}")
        if self.architecture == "dcgan_conv":
            _check_conv_shape(self.output_shape)


@dataclass(frozen=True)
class DiscriminatorSpec:
    mode: str = "cgan"
    num_classes: int = 10
    input_shape: tuple = (28, 28, 1)
    architecture: str = "mlp"
    width: int = 256

    def __post_init__(self):
        object.__setattr__(self, "input_shape", _check_shape(self.input_shape))
        if self.mode not in DISCRIMINATOR_MODES:
            raise ArgumentError(f"mode must be one of {DISCRIMINATOR_MODES}")
        if self.architecture not in GENERATOR_ARCHS:
            raise ArgumentError(f"architecture must be one of {GENERATOR_ARCHS}")
        if self.num_classes < 1 or self.width < 1:
            raise ArgumentError("num_classes and width must be positive")
        if self.architecture == "dcgan_conv":
            _check_conv_shape(self.input_shape)


@dataclass(frozen=True)
class ClassifierSpec:
    num_classes: int = 10
    input_shape: tuple = (28, 28, 1)
    architecture: str = "conv"
    width: int = 32

    def __post_init__(self):
        object.__setattr__(self, "input_shape", _check_shape(self.input_shape))
        if self.architecture not in ("conv", "mlp"):
            raise ArgumentError("classifier architecture must be conv or mlp")
        if self.num_classes < 1 or self.width < 1:
            raise ArgumentError("num_classes and width must be positive")
        if self.architecture == "conv":
            _check_conv_shape(self.input_shape)


SPEC_TYPES = {cls.__name__: cls for cls in (GeneratorSpec, DiscriminatorSpec, ClassifierSpec)}


def spec_to_dict(spec):
    return {"type": type(spec).__name__, **asdict(spec)}


def spec_from_dict(d):
    d = dict(d)
    cls = SPEC_TYPES[d.pop("type")]
    for key in ("output_shape", "input_shape"):
        if key in d:
            d[key] = tuple(d[key])
    return cls(**d)


class _Conditioner(nn.Module):
    def __init__(self, num_classes, conditioning):
        super().__init__()
        self.num_classes = num_classes
        self.embed = nn.Embedding(num_classes, num_classes) if conditioning == "embed" else None

    def forward(self, labels, dtype):
        if self.embed is not None:
            return self.embed(labels).to(dtype)
        return F.one_hot(labels, self.num_classes).to(dtype)


class GeneratorNet(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        h, w, c = spec.output_shape
        self.class_cond = _Conditioner(spec.num_classes, spec.conditioning)
        self.target_cond = (
            _Conditioner(spec.num_classes, spec.conditioning) if spec.target_conditioned else None
        )
        in_dim = spec.z_dim + spec.num_classes * (2 if spec.target_conditioned else 1)
        k = spec.width
        if spec.architecture == "mlp":
            self.body = nn.Sequential(
                nn.Linear(in_dim, k),
                nn.LeakyReLU(LEAK),
                nn.Linear(k, 2 * k),
                nn.LeakyReLU(LEAK),
                nn.Linear(2 * k, 4 * k),
                nn.LeakyReLU(LEAK),
                nn.Linear(4 * k, h * w * c),
            )
        else:
            s = h // 4
            self.body = nn.Sequential(
                nn.Linear(in_dim, 2 * k * s * s),
                nn.Unflatten(1, (2 * k, s, s)),
                nn.BatchNorm2d(2 * k),
                nn.LeakyReLU(LEAK),
                nn.ConvTranspose2d(2 * k, k, 4, 2, 1),
                nn.BatchNorm2d(k),
                nn.LeakyReLU(LEAK),
                nn.ConvTranspose2d(k, c, 4, 2, 1),
            )

    def forward(self, labels, z, targets=None):
        parts = [z, self.class_cond(labels, z.dtype)]
        if self.target_cond is not None:
            parts.append(self.target_cond(targets, z.dtype))
        out = torch.tanh(self.body(torch.cat(parts, dim=1)))
        h, w, c = self.spec.output_shape
        if out.ndim == 2:
            out = out.view(-1, h, w, c)
        else:
            out = out.permute(0, 2, 3, 1)
        return (out + 1) / 2


class DiscriminatorNet(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        h, w, c = spec.input_shape
        n = spec.num_classes
        cond = n if spec.mode == "cgan" else 0
        k = spec.width
        if spec.architecture == "mlp":
            self.trunk = nn.Sequential(
                nn.Linear(h * w * c + cond, 2 * k),
                nn.LeakyReLU(LEAK),
                nn.Linear(2 * k, k),
                nn.LeakyReLU(LEAK),
            )
            feat = k
        else:
            self.trunk = nn.Sequential(
                nn.Conv2d(c + cond, k, 4, 2, 1),
                nn.LeakyReLU(LEAK),
                nn.Conv2d(k, 2 * k, 4, 2, 1),
                nn.BatchNorm2d(2 * k),
                nn.LeakyReLU(LEAK),
                nn.Flatten(),
            )
            feat = 2 * k * (h // 4) * (w // 4)
        self.source = nn.Linear(feat, 1)
        self.aux = nn.Linear(feat, n) if spec.mode == "acgan" else None

    def forward(self, x, labels=None):
        n = self.spec.num_classes
        if self.spec.architecture == "mlp":
            inp = x.flatten(1)
            if labels is not None:
                inp = torch.cat([inp, F.one_hot(labels, n).to(x.dtype)], dim=1)
        else:
            inp = x.permute(0, 3, 1, 2)
            if labels is not None:
                maps = F.one_hot(labels, n).to(x.dtype)[:, :, None, None]
                inp = torch.cat([inp, maps.expand(-1, -1, inp.shape[2], inp.shape[3])], dim=1)
        feat = self.trunk(inp)
        realness = self.source(feat).squeeze(1)
        return realness, (self.aux(feat) if self.aux is not None else None)


class ClassifierNet(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        h, w, c = spec.input_shape
        k = spec.width
        if spec.architecture == "conv":
            self.body = nn.Sequential(
                nn.Conv2d(c, k, 5, padding=2),
                nn.ReLU(),
                nn.MaxPool2d(2),
                nn.Conv2d(k, 2 * k, 5, padding=2),
                nn.ReLU(),
                nn.MaxPool2d(2),
                nn.Flatten(),
                nn.Linear(2 * k * (h // 4) * (w // 4), 8 * k),
                nn.ReLU(),
                nn.Linear(8 * k, spec.num_classes),
            )
        else:
            self.body = nn.Sequential(
                nn.Flatten(),
                nn.Linear(h * w * c, 8 * k),
                nn.ReLU(),
                nn.Linear(8 * k, 4 * k),
                nn.ReLU(),
                nn.Linear(4 * k, spec.num_classes),
            )

    def forward(self, x):
        if self.spec.architecture == "conv":
            x = x.permute(0, 3, 1, 2)
        return self.body(x)


def _init_weights(module):
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d, nn.ConvTranspose2d, nn.Embedding)):
            nn.init.normal_(m.weight, 0.0, INIT_STD)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, INIT_STD)
            nn.init.zeros_(m.bias)


def state_checksum(module):
    """SHA-256 over every parameter and buffer, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class _Handle:
    spec: object
    module: nn.Module
    param_version: int = 0

    @property
    def parameters(self):
        return self.module.state_dict()

    def checksum(self):
        return state_checksum(self.module)

    def bump(self):
        self.param_version += 1

    def clone(self):
        return copy.deepcopy(self)


@dataclass
class GeneratorHandle(_Handle):
    pass


@dataclass
class DiscriminatorHandle(_Handle):
    @property
    def mode(self):
        return self.spec.mode


@dataclass
class ClassifierHandle(_Handle):
    frozen: bool = field(default=False)

    @property
    def num_classes(self):
        return self.spec.num_classes

    def freeze(self):
        """Mark as attack target: parameters stop tracking gradients for good."""
        self.frozen = True
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        return self


def instantiate_model(spec, seed=0):
    """Build a handle for ``spec`` with parameters drawn deterministically from ``seed``."""
    builders = {
        GeneratorSpec: (GeneratorNet, GeneratorHandle),
        DiscriminatorSpec: (DiscriminatorNet, DiscriminatorHandle),
        ClassifierSpec: (ClassifierNet, ClassifierHandle),
    }
    if type(spec) not in builders:
        raise ArgumentError(f"cannot instantiate {type(spec).__name__}")
    net_cls, handle_cls = builders[type(spec)]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = net_cls(spec)
        _init_weights(net)
    return handle_cls(spec=spec, module=net)


def _check_labels(labels, n, what):
    labels = torch.as_tensor(labels)
    if labels.ndim != 1:
        raise ArgumentError(f"{what} must be a 1-d label tensor")
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ArgumentError(f"{what} outside [0, {n})")
    return labels.long()


def _check_images(x, shape):
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(shape):
        raise ArgumentError(f"expected images [B, {', '.join(map(str, shape))}], got {tuple(x.shape)}")


def generate(G, c, z, t=None):
    """Images ``G(c, z)`` (or ``G(c, z, t)`` for target-conditioned specs)."""
    spec = G.spec
    c = _check_labels(c, spec.num_classes, "class labels")
    if z.ndim != 2 or z.shape != (c.shape[0], spec.z_dim):
        raise ArgumentError(f"z must be [{c.shape[0]}, {spec.z_dim}], got {tuple(z.shape)}")
    if spec.target_conditioned:
        if t is None:
            raise ArgumentError("target-conditioned generator needs t")
        t = _check_labels(t, spec.num_classes, "target labels")
        if t.shape != c.shape:
            raise ArgumentError("t and c disagree on batch size")
    elif t is not None:
        raise ArgumentError("t given to a generator that is not target-conditioned")
    return G.module(c, z, t)


def classify(M, x):
    """Raw logits ``[B, n]``."""
    _check_images(x, M.spec.input_shape)
    return M.module(x)


def discriminate(D, x, c=None):
    """Return ``(realness [B], class_logits [B, n] or None)``."""
    _check_images(x, D.spec.input_shape)
    if D.spec.mode == "cgan":
        if c is None:
            raise ArgumentError("cgan discriminator needs class labels")
        c = _check_labels(c, D.spec.num_classes, "class labels")
        if c.shape[0] != x.shape[0]:
            raise ArgumentError("labels and images disagree on batch size")
    elif c is not None:
        raise ArgumentError("acgan discriminator takes images only")
    return D.module(x, c)
