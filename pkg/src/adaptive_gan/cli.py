"""
Command-line front end.

Every subcommand resolves one flat configuration (defaults, then an optional
YAML file given with ``--config``, then command-line flags), validates it in
full, and only then creates a fresh run directory under the output root::

    <out_dir>/<subcommand>-<UTC timestamp>-<config hash>/

The directory holds the run's checkpoints, reports, CSV cell tables, PNG
figures and a ``manifest.yaml`` echoing the resolved config. Passing that
manifest back with ``--config`` reproduces the run.

Exit status: 0 on success, 2 on usage errors (unknown subcommand or flag),
1 on validation or runtime errors.
"""

import argparse
import datetime
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field, replace

import torch
import yaml

from adaptive_gan import __version__
from adaptive_gan.baselines import PerturbationBudget, fgsm, pgd
from adaptive_gan.checkpoint import file_checksum, load_checkpoint, save_checkpoint
from adaptive_gan.data import CIFAR_FILES, DatasetSpec, load_dataset
from adaptive_gan.errors import AdaptiveGanError, ArgumentError, ValidationError
from adaptive_gan.evaluation import (
    attack_success_rate,
    perturbation_report,
    write_cells_csv,
    write_report,
)
from adaptive_gan.figures import (
    delta_probe,
    plot_annotated_grid,
    plot_probe_curve,
    plot_success_matrix,
    retrain_delta_grid,
    sample_grid,
    tile,
    to_uint8,
    write_png,
)
from adaptive_gan.losses import AttackObjectiveConfig
from adaptive_gan.models import ClassifierSpec, DiscriminatorSpec, GeneratorSpec
from adaptive_gan.training import (
    TrainConfig,
    adapt_retrain,
    train_adaptive,
    train_classifier,
    train_gan,
    training_metadata,
)

log = logging.getLogger("adaptive_gan")

OUT_ENV = "ADAPTIVE_GAN_OUT"
DATA_ENV = "ADAPTIVE_GAN_DATA"
MANIFEST_VERSION = 1
DATA_SUBDIRS = {"mnist": "mnist", "cifar10": "cifar-10-batches-bin"}


@dataclass(frozen=True)
class Option:
    kind: str  # int | float | str | bool | ints | strs
    default: object = None
    help: str = ""
    choices: tuple = None
    nullable: bool = False
    flag: str = None


OPTIONS = {
    # run plumbing
    "seed": Option("int", 0, "run seed"),
    "deterministic": Option("bool", True, "use deterministic kernels"),
    "out_dir": Option("str", None, f"output root (default ${OUT_ENV} or ./runs)", nullable=True),
    "data_dir": Option("str", None, f"dataset directory (default ${DATA_ENV}/<dataset>)", nullable=True),
    "dataset": Option("str", "mnist", "dataset name", choices=("mnist", "cifar10")),
    "cifar_batches": Option("int", 5, "number of CIFAR-10 training batch files to load (1-5)"),
    # models
    "z_dim": Option("int", 100, "generator noise dimension"),
    "gen_arch": Option("str", "mlp", "generator architecture", choices=("mlp", "dcgan_conv")),
    "gen_width": Option("int", 256, "generator base width"),
    "conditioning": Option("str", "onehot_concat", "label conditioning", choices=("onehot_concat", "embed")),
    "target_conditioned": Option("bool", False, "one generator conditioned on the attack target too"),
    "disc_mode": Option("str", "cgan", "discriminator family", choices=("cgan", "acgan")),
    "disc_arch": Option("str", "mlp", "discriminator architecture", choices=("mlp", "dcgan_conv")),
    "disc_width": Option("int", 256, "discriminator base width"),
    "classifier_arch": Option("str", "conv", "classifier architecture", choices=("conv", "mlp")),
    "classifier_width": Option("int", 32, "classifier base width"),
    # training
    "epochs": Option("int", 10, "training epochs"),
    "batch_size": Option("int", 64, "minibatch size"),
    "learning_rate": Option("float", 2e-4, "Adam learning rate"),
    "beta1": Option("float", 0.5, "Adam first-moment decay"),
    "beta2": Option("float", 0.999, "Adam second-moment decay"),
    "d_steps_per_g_step": Option("int", 1, "discriminator updates per generator update"),
    "label_smoothing": Option("float", 0.1, "one-sided label smoothing for real samples"),
    "max_steps": Option("int", None, "stop after this many generator (or classifier) steps", nullable=True),
    "probe_size": Option("int", 1000, "fixed probe-set size for per-epoch success"),
    # attack objective
    "target": Option("int", None, "attack target class t", nullable=True),
    "targets": Option("ints", None, "attack targets (default: all classes)", nullable=True),
    "alpha": Option("float", 1.0, "attack-loss weight"),
    "mask_weight": Option("float", 0.0, "loss weight of already-successful samples (beta)"),
    "base_loss": Option("str", "cross_entropy", "per-sample attack loss", choices=("cross_entropy", "cw_logit")),
    # perturbation baselines
    "epsilon": Option("float", 0.3, "L-infinity budget"),
    "step_size": Option("float", None, "PGD step size (default 2.5 * epsilon / steps)", nullable=True),
    "steps": Option("int", 40, "PGD steps"),
    "restarts": Option("int", 0, "PGD random restarts beyond the first attempt"),
    "targeted": Option("bool", False, "targeted attack (random t != y unless --target is given)"),
    "limit": Option("int", None, "only attack the first N test images", nullable=True),
    # artifacts
    "classifier": Option("str", None, "target classifier checkpoint", nullable=True),
    "oracle": Option("str", None, "fidelity oracle checkpoint", nullable=True),
    "from_checkpoint": Option("str", None, "pre-trained GAN checkpoint", nullable=True, flag="--from"),
    "generators": Option("strs", None, "generator checkpoints (one per target, or one target-conditioned)",
                         nullable=True),
    "before": Option("str", None, "checkpoint before retraining", nullable=True),
    "after": Option("str", None, "checkpoint after retraining", nullable=True),
    # evaluation and figures
    "samples_per_cell": Option("int", 100, "generated samples per (c, t) cell"),
    "eval_seed": Option("int", 12345, "noise seed for evaluation and grids"),
    "success_only": Option("bool", False, "redraw grid cells until the attack succeeds"),
    "max_tries": Option("int", 20, "redraws per cell with --success-only"),
    "z_variants": Option("int", None, "grid columns are noise draws instead of targets", nullable=True),
    "classes": Option("ints", None, "grid rows (default: all classes)", nullable=True),
    "probe_rows": Option("int", 10, "delta-grid rows"),
    "probe_columns": Option("int", 10, "delta-grid columns"),
}

COMMON = ("seed", "deterministic", "out_dir", "data_dir", "dataset", "cifar_batches")
GEN_MODEL = ("z_dim", "gen_arch", "gen_width", "conditioning", "target_conditioned",
             "disc_mode", "disc_arch", "disc_width")
GAN_TRAIN = ("epochs", "batch_size", "learning_rate", "beta1", "beta2", "d_steps_per_g_step",
             "label_smoothing", "max_steps", "probe_size")
ATTACK = ("target", "alpha", "mask_weight", "base_loss")
PERTURB = ("classifier", "oracle", "epsilon", "step_size", "steps", "restarts", "targeted", "target",
           "base_loss", "limit")
EVAL = ("samples_per_cell", "eval_seed")

COMMANDS = {
    "train-classifier": ("train the target (or oracle) classifier",
                         COMMON + ("classifier_arch", "classifier_width", "epochs", "batch_size",
                                   "learning_rate", "beta1", "beta2", "max_steps"),
                         {"epochs": 3, "batch_size": 128, "learning_rate": 1e-3, "beta1": 0.9}),
    "train-gan": ("train a plain conditional GAN", COMMON + GEN_MODEL + GAN_TRAIN + ("eval_seed",), {}),
    "train-adaptive": ("train an adaptive GAN from scratch against a frozen classifier",
                       COMMON + GEN_MODEL + GAN_TRAIN + ATTACK + ("classifier", "oracle") + EVAL, {}),
    "adapt-retrain": ("adaptively retrain a pre-trained GAN checkpoint",
                      COMMON + GAN_TRAIN + ATTACK + ("from_checkpoint", "classifier", "oracle",
                                                     "probe_rows", "probe_columns") + EVAL,
                      {"epochs": 5}),
    "attack-fgsm": ("fast gradient sign baseline", COMMON + PERTURB, {}),
    "attack-pgd": ("projected gradient descent baseline", COMMON + PERTURB, {}),
    "evaluate": ("success / fidelity report for generator checkpoints",
                 COMMON + ("classifier", "oracle", "generators", "targets") + EVAL, {}),
    "sample-grid": ("class-by-target image grid",
                    COMMON + ("generators", "targets", "classes", "classifier", "success_only", "max_tries",
                              "z_variants", "eval_seed"), {}),
    "retrain-delta": ("before/after grid pair and mean pixel delta",
                      COMMON + ("before", "after", "probe_rows", "probe_columns", "eval_seed"), {}),
    "sweep-targets": ("run train-adaptive (or adapt-retrain with --from) for every target, then evaluate",
                      COMMON + GEN_MODEL + GAN_TRAIN + ("targets", "alpha", "mask_weight", "base_loss",
                                                        "from_checkpoint", "classifier", "oracle") + EVAL, {}),
}

REQUIRED = {
    "train-adaptive": ("target", "classifier"),
    "adapt-retrain": ("target", "classifier", "from_checkpoint"),
    "attack-fgsm": ("classifier",),
    "attack-pgd": ("classifier",),
    "evaluate": ("classifier", "generators"),
    "sample-grid": ("generators",),
    "retrain-delta": ("before", "after"),
    "sweep-targets": ("classifier",),
}


# ---------------------------------------------------------------- config layer


def _check_type(key, value, opt):
    if value is None:
        if opt.nullable:
            return None
        raise ValidationError(f"{key}: null is not allowed")
    kind = opt.kind
    ok = {
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "str": isinstance(value, str),
        "bool": isinstance(value, bool),
        "ints": isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value),
        "strs": isinstance(value, list) and all(isinstance(v, str) for v in value),
    }[kind]
    if not ok:
        raise ValidationError(f"{key}: expected {kind}, got {type(value).__name__} {value!r}")
    if kind == "float":
        value = float(value)
    if opt.choices and value not in opt.choices:
        raise ValidationError(f"{key}: {value!r} is not one of {', '.join(opt.choices)}")
    return value


def read_config_file(path):
    """Flat mapping from a YAML file; a run manifest yields its ``config`` block."""
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path} is not valid YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(f"config {path} must be a mapping of keys to values")
    if "manifest_version" in data:
        data = dict(data.get("config") or {})
    return data


@dataclass
class RunConfig:
    command: str
    values: dict
    dataset: DatasetSpec = None
    train: TrainConfig = None
    attack: AttackObjectiveConfig = None
    budget: PerturbationBudget = None
    generator_spec: GeneratorSpec = None
    discriminator_spec: DiscriminatorSpec = None
    classifier_spec: ClassifierSpec = None
    extras: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def config_hash(self):
        blob = json.dumps({"command": self.command, "config": self.values}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def load_config(command, path=None, overrides=None):
    """Resolve defaults < file < ``overrides`` for ``command`` and validate everything."""
    if command not in COMMANDS:
        raise ValidationError(f"unknown command {command!r}")
    _, keys, defaults = COMMANDS[command]
    values = {k: defaults.get(k, OPTIONS[k].default) for k in keys}
    layers = [read_config_file(path) if path else {}, overrides or {}]
    for layer in layers:
        unknown = sorted(set(layer) - set(keys))
        if unknown:
            raise ValidationError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        for key, value in layer.items():
            values[key] = _check_type(key, value, OPTIONS[key])
    for key in REQUIRED.get(command, ()):
        if values.get(key) is None:
            raise ValidationError(f"{command} needs {OPTIONS[key].flag or '--' + key.replace('_', '-')}")
    return _build(RunConfig(command, values))


def _build(rc):
    """Construct and validate every domain object the command will use."""
    v = rc.values
    try:
        rc.dataset = DatasetSpec.named(v["dataset"])
        if not 1 <= v["cifar_batches"] <= len(CIFAR_FILES["train"]):
            raise ValidationError("cifar_batches must lie in 1..5")
        shape, n = rc.dataset.image_shape, rc.dataset.num_classes
        if "gen_arch" in v:
            rc.generator_spec = GeneratorSpec(
                z_dim=v["z_dim"], num_classes=n, output_shape=shape, conditioning=v["conditioning"],
                target_conditioned=v["target_conditioned"], architecture=v["gen_arch"], width=v["gen_width"])
            rc.discriminator_spec = DiscriminatorSpec(
                mode=v["disc_mode"], num_classes=n, input_shape=shape, architecture=v["disc_arch"],
                width=v["disc_width"])
        if "classifier_arch" in v:
            rc.classifier_spec = ClassifierSpec(num_classes=n, input_shape=shape, architecture=v["classifier_arch"],
                                                width=v["classifier_width"])
        if "epochs" in v:
            rc.train = TrainConfig(
                epochs=v["epochs"], batch_size=v["batch_size"], seed=v["seed"], learning_rate=v["learning_rate"],
                beta1=v["beta1"], beta2=v["beta2"], d_steps_per_g_step=v.get("d_steps_per_g_step", 1),
                label_smoothing=v.get("label_smoothing", 0.1), max_steps=v["max_steps"],
                probe_size=v.get("probe_size", 1000), deterministic=v["deterministic"])
        if "alpha" in v:
            for t in ([v["target"]] if v.get("target") is not None else []) + list(v.get("targets") or []):
                if not 0 <= t < n:
                    raise ValidationError(f"target {t} outside 0..{n - 1}")
            rc.attack = AttackObjectiveConfig(target=v.get("target") if v.get("target") is not None else 0,
                                              alpha=v["alpha"], mask_weight=v["mask_weight"],
                                              base_loss=v["base_loss"])
        if "epsilon" in v:
            rc.budget = PerturbationBudget(
                epsilon=v["epsilon"], step_size=v["step_size"], steps=v["steps"] if rc.command == "attack-pgd" else 1,
                restarts=v["restarts"] if rc.command == "attack-pgd" else 0, targeted=v["targeted"],
                loss=v["base_loss"])
            if v["target"] is not None and not v["targeted"]:
                raise ValidationError("--target needs --targeted for perturbation attacks")
            if v["target"] is not None and not 0 <= v["target"] < n:
                raise ValidationError(f"target {v['target']} outside 0..{n - 1}")
        for key in ("samples_per_cell", "max_tries", "probe_rows", "probe_columns", "limit", "z_variants"):
            if v.get(key) is not None and v[key] < 1:
                raise ValidationError(f"{key} must be positive")
    except ArgumentError as exc:
        raise ValidationError(str(exc)) from exc
    return rc


# ---------------------------------------------------------------- argparse


def _flag(key):
    return OPTIONS[key].flag or "--" + key.replace("_", "-")


def build_parser():
    parser = argparse.ArgumentParser(prog="adaptive-gan", description="Adaptive GAN toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (help_text, keys, defaults) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="YAML file of flat key: value pairs (or a run manifest)")
        for key in keys:
            opt = OPTIONS[key]
            default = defaults.get(key, opt.default)
            kw = {"dest": key, "default": argparse.SUPPRESS, "help": f"{opt.help} [default: {default}]"}
            if opt.kind == "bool":
                p.add_argument(_flag(key), action=argparse.BooleanOptionalAction, **kw)
            elif opt.kind in ("ints", "strs"):
                p.add_argument(_flag(key), nargs="+", type=int if opt.kind == "ints" else str, **kw)
            else:
                p.add_argument(_flag(key), type={"int": int, "float": float, "str": str}[opt.kind],
                               choices=opt.choices, **kw)
    return parser


# ---------------------------------------------------------------- run plumbing


class Run:
    """One invocation's output directory plus its manifest."""

    def __init__(self, rc):
        self.rc = rc
        root = rc["out_dir"] or os.environ.get(OUT_ENV) or "runs"
        stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
        base = os.path.join(root, f"{rc.command}-{stamp}-{rc.config_hash}")
        path, i = base, 1
        while True:
            try:
                os.makedirs(path)
                break
            except FileExistsError:
                path, i = f"{base}-{i}", i + 1
        self.dir = path
        self.outputs = {}
        self.summary = {}
        self.inputs = {}
        self._write_manifest("running")

    def path(self, name):
        p = os.path.join(self.dir, name)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def record(self, name):
        self.outputs[name] = None
        return self.path(name)

    def input(self, key, path):
        self.inputs[key] = {"path": os.path.abspath(path), "sha256": file_checksum(path)}

    def _write_manifest(self, status):
        files = {}
        for name in sorted(self.outputs):
            p = os.path.join(self.dir, name)
            if os.path.exists(p):
                with open(p, "rb") as f:
                    files[name] = hashlib.sha256(f.read()).hexdigest()
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "command": self.rc.command,
            "status": status,
            "config": self.rc.values,
            "config_hash": self.rc.config_hash,
            "inputs": self.inputs,
            "outputs": files,
            "summary": self.summary,
            "package_version": __version__,
            "torch_version": str(torch.__version__),
            "python_version": platform.python_version(),
            "created": datetime.datetime.now(datetime.timezone.utc).replace(microsecond=0).isoformat(),
        }
        with open(os.path.join(self.dir, "manifest.yaml"), "w") as f:
            yaml.safe_dump(manifest, f, sort_keys=True)

    def finish(self, status="ok"):
        self._write_manifest(status)


def _data_dir(rc):
    if rc["data_dir"]:
        return rc["data_dir"]
    root = os.environ.get(DATA_ENV)
    if not root:
        raise ValidationError(f"no dataset directory: pass --data-dir or set ${DATA_ENV}")
    return os.path.join(root, DATA_SUBDIRS[rc["dataset"]])


def _load_split(rc, split):
    files = None
    if rc["dataset"] == "cifar10" and split == "train":
        files = CIFAR_FILES["train"][: rc["cifar_batches"]]
    return load_dataset(rc["dataset"], _data_dir(rc), split, cifar_files=files)


def _load_role(run, key, path, role):
    handles, meta = load_checkpoint(path)
    run.input(key, path)
    if role not in handles:
        raise ValidationError(f"{path} holds no {role} (found: {', '.join(sorted(handles))})")
    return handles[role], handles, meta


def _target_classifier(run, rc):
    TC, _, _ = _load_role(run, "classifier", rc["classifier"], "classifier")
    return TC.freeze()


def _oracle(run, rc):
    if not rc.values.get("oracle"):
        return None
    return _load_role(run, "oracle", rc["oracle"], "classifier")[0]


def _report_outputs(run, report, name="report"):
    write_report(report, run.record(f"{name}.yaml"))
    write_cells_csv(report, run.record(f"{name}_cells.csv"))
    if report.kind != "untargeted":
        plot_success_matrix(report, run.record(f"{name}_success_matrix.png"))
    run.summary.update({f"{name}_success_rate": report.overall_success_rate,
                        f"{name}_fidelity_rate": report.fidelity_rate, f"{name}_joint_rate": report.joint_rate})


def _eval_metadata(run, rc):
    return {"config_hash": rc.config_hash, "inputs": run.inputs, "eval_seed": rc["eval_seed"]}


def _save_history(run, history, name="history.yaml"):
    with open(run.record(name), "w") as f:
        yaml.safe_dump(history.to_dict(), f, sort_keys=True)


# ---------------------------------------------------------------- commands


def cmd_train_classifier(run, rc):
    train, test = _load_split(rc, "train"), _load_split(rc, "test")
    M, report = train_classifier(train, test, rc.train, rc.classifier_spec)
    M.freeze()
    meta = training_metadata(rc.train, None, test_accuracy=report["test_accuracy"], config_hash=rc.config_hash)
    save_checkpoint({"classifier": M}, meta, run.record("classifier.ckpt"))
    with open(run.record("training.yaml"), "w") as f:
        yaml.safe_dump({"test_accuracy": report["test_accuracy"], "steps": report["steps"],
                        "epoch_losses": report["history"]["epoch_losses"]}, f, sort_keys=True)
    run.summary["test_accuracy"] = report["test_accuracy"]


def _gan_samples(run, G, rc, name="samples.png"):
    grid = sample_grid(G, run.record(name), z_variants=10, seed=rc["eval_seed"])
    n = G.spec.num_classes
    plot_annotated_grid(grid, run.record(name.replace(".png", "_annotated.png")), list(range(n)),
                        list(range(10)), xlabel="noise sample", title="generated samples")


def cmd_train_gan(run, rc):
    train = _load_split(rc, "train")
    G, D, history = train_gan(train, rc.generator_spec, rc.discriminator_spec, rc.train)
    meta = training_metadata(rc.train, history, config_hash=rc.config_hash)
    save_checkpoint({"generator": G, "discriminator": D}, meta, run.record("gan.ckpt"))
    _save_history(run, history)
    _gan_samples(run, G, rc)
    run.summary["g_steps"] = history.g_steps


def _adaptive_outputs(run, rc, G, TC, oracle, history, target, prefix=""):
    plot_probe_curve(history.to_dict(), run.record(f"{prefix}probe_curve.png"),
                     title=f"probe-set attack success, t={target}")
    _save_history(run, history, f"{prefix}history.yaml")
    report = attack_success_rate(TC, {target: G} if not G.spec.target_conditioned else G, oracle, [target],
                                 rc["samples_per_cell"], seed=rc["eval_seed"], metadata=_eval_metadata(run, rc))
    _report_outputs(run, report, f"{prefix}report")
    sample_grid({target: G} if not G.spec.target_conditioned else G, run.record(f"{prefix}grid.png"),
                targets=[target], seed=rc["eval_seed"])
    return report


def cmd_train_adaptive(run, rc):
    train = _load_split(rc, "train")
    TC, oracle = _target_classifier(run, rc), _oracle(run, rc)
    cfg = replace(rc.train, attack=rc.attack.with_target(rc["target"]))
    G, D, history = train_adaptive(train, rc.generator_spec, rc.discriminator_spec, TC, cfg)
    meta = training_metadata(cfg, history, config_hash=rc.config_hash, target=rc["target"], inputs=run.inputs)
    save_checkpoint({"generator": G, "discriminator": D}, meta, run.record("adaptive.ckpt"))
    _adaptive_outputs(run, rc, G, TC, oracle, history, rc["target"])
    run.summary["probe_success"] = history.probe_success


def _retrain(run, rc, train, TC, oracle, target, prefix=""):
    G, handles, _ = _load_role(run, "from_checkpoint", rc["from_checkpoint"], "generator")
    if "discriminator" not in handles:
        raise ValidationError(f"{rc['from_checkpoint']} holds no discriminator")
    D = handles["discriminator"]
    cfg = replace(rc.train, attack=rc.attack.with_target(target))
    G2, D2, history = adapt_retrain(train, G, D, TC, cfg)
    meta = training_metadata(cfg, history, config_hash=rc.config_hash, target=target, inputs=run.inputs)
    save_checkpoint({"generator": G2, "discriminator": D2}, meta, run.record(f"{prefix}retrained.ckpt"))
    probe = delta_probe(G.spec, rc["probe_rows"], rc["probe_columns"], seed=rc["eval_seed"])
    _, delta = retrain_delta_grid(G, G2, probe, run.record(f"{prefix}delta.png"), columns=rc["probe_columns"])
    before = attack_success_rate(TC, {target: G}, oracle, [target], rc["samples_per_cell"], seed=rc["eval_seed"],
                                 metadata=_eval_metadata(run, rc))
    _report_outputs(run, before, f"{prefix}before")
    after = _adaptive_outputs(run, rc, G2, TC, oracle, history, target, prefix)
    with open(run.record(f"{prefix}delta.yaml"), "w") as f:
        yaml.safe_dump({"mean_abs_pixel_delta": delta, "epochs": history.epochs_completed, "target": target,
                        "success_before": before.overall_success_rate, "success_after": after.overall_success_rate,
                        "fidelity_before": before.fidelity_rate, "fidelity_after": after.fidelity_rate},
                       f, sort_keys=True)
    run.summary[f"{prefix}mean_abs_pixel_delta"] = delta
    return G2


def cmd_adapt_retrain(run, rc):
    train = _load_split(rc, "train")
    TC, oracle = _target_classifier(run, rc), _oracle(run, rc)
    _retrain(run, rc, train, TC, oracle, rc["target"])


def _attack(run, rc, method):
    test = _load_split(rc, "test")
    if rc["limit"]:
        test = test.subset(slice(0, rc["limit"]))
    TC, oracle = _target_classifier(run, rc), _oracle(run, rc)
    x, y = test.images, test.labels
    n = TC.spec.num_classes
    targets = None
    if rc["targeted"]:
        if rc["target"] is not None:
            targets = torch.full_like(y, rc["target"])
        else:
            gen = torch.Generator().manual_seed(rc["seed"])
            targets = (y + 1 + torch.randint(n - 1, y.shape, generator=gen)) % n
    goal = targets if rc["targeted"] else y
    if method == "fgsm":
        x_adv = fgsm(TC, x, goal, rc.budget)
    else:
        x_adv = pgd(TC, x, goal, rc.budget, seed=rc["seed"])
    report = perturbation_report(TC, x, x_adv, y, targets=targets, epsilon=rc["epsilon"], oracle=oracle,
                                 metadata={"method": method, "config_hash": rc.config_hash, "inputs": run.inputs,
                                           "seed": rc["seed"], "samples": len(y)})
    _report_outputs(run, report)
    run.summary.update({"adversarial_accuracy": report.extra["accuracy"],
                        "budget_violated": report.extra["budget_violated"]})
    k = min(10, len(y))
    write_png(tile([list(to_uint8(x[:k])), list(to_uint8(x_adv[:k]))]), run.record("examples.png"))


def cmd_attack_fgsm(run, rc):
    _attack(run, rc, "fgsm")


def cmd_attack_pgd(run, rc):
    _attack(run, rc, "pgd")


def _generators(run, rc):
    """Map target -> generator, or one target-conditioned generator."""
    out = {}
    for i, path in enumerate(rc["generators"]):
        G, _, meta = _load_role(run, f"generator_{i}", path, "generator")
        if G.spec.target_conditioned:
            if len(rc["generators"]) != 1:
                raise ValidationError("a target-conditioned generator must be passed alone")
            return G
        target = meta.get("target")
        if target is None:
            target = (meta.get("train_config") or {}).get("attack", {}) or {}
            target = target.get("target") if isinstance(target, dict) else None
        if target is None:
            raise ValidationError(f"{path} records no attack target")
        out[int(target)] = G
    return out


def cmd_evaluate(run, rc):
    TC, oracle = _target_classifier(run, rc), _oracle(run, rc)
    gens = _generators(run, rc)
    targets = rc["targets"] or (sorted(gens) if isinstance(gens, dict) else list(range(TC.spec.num_classes)))
    report = attack_success_rate(TC, gens, oracle, targets, rc["samples_per_cell"], seed=rc["eval_seed"],
                                 metadata=_eval_metadata(run, rc))
    _report_outputs(run, report)
    grid = sample_grid(gens, run.record("grid.png"), targets=targets, seed=rc["eval_seed"])
    plot_annotated_grid(grid, run.record("grid_annotated.png"), list(range(TC.spec.num_classes)), targets)


def cmd_sample_grid(run, rc):
    gens = _generators(run, rc) if rc["z_variants"] is None else _load_role(
        run, "generator_0", rc["generators"][0], "generator")[0]
    TC = _target_classifier(run, rc) if rc["classifier"] else None
    grid = sample_grid(gens, run.record("grid.png"), classes=rc["classes"], targets=rc["targets"],
                       seed=rc["eval_seed"], TC=TC, success_only=rc["success_only"], max_tries=rc["max_tries"],
                       z_variants=rc["z_variants"])
    first = gens if hasattr(gens, "spec") else next(iter(gens.values()))
    n = first.spec.num_classes
    rows = rc["classes"] or list(range(n))
    if rc["z_variants"] is not None:
        cols, xlabel = list(range(rc["z_variants"])), "noise sample"
    else:
        cols = rc["targets"] or (sorted(gens) if isinstance(gens, dict) else list(range(n)))
        xlabel = "attack target t"
    plot_annotated_grid(grid, run.record("grid_annotated.png"), rows, cols, xlabel=xlabel)


def cmd_retrain_delta(run, rc):
    G_pre = _load_role(run, "before", rc["before"], "generator")[0]
    G_post = _load_role(run, "after", rc["after"], "generator")[0]
    probe = delta_probe(G_pre.spec, rc["probe_rows"], rc["probe_columns"], seed=rc["eval_seed"])
    _, delta = retrain_delta_grid(G_pre, G_post, probe, run.record("delta.png"), columns=rc["probe_columns"])
    with open(run.record("delta.yaml"), "w") as f:
        yaml.safe_dump({"mean_abs_pixel_delta": delta}, f)
    run.summary["mean_abs_pixel_delta"] = delta


def cmd_sweep_targets(run, rc):
    train = _load_split(rc, "train")
    TC, oracle = _target_classifier(run, rc), _oracle(run, rc)
    targets = rc["targets"] or list(range(TC.spec.num_classes))
    gens = {}
    for t in targets:
        prefix = f"t{t}/"
        if rc["from_checkpoint"]:
            gens[t] = _retrain(run, rc, train, TC, oracle, t, prefix)
        else:
            cfg = replace(rc.train, attack=rc.attack.with_target(t))
            G, D, history = train_adaptive(train, rc.generator_spec, rc.discriminator_spec, TC, cfg)
            meta = training_metadata(cfg, history, config_hash=rc.config_hash, target=t, inputs=run.inputs)
            save_checkpoint({"generator": G, "discriminator": D}, meta, run.record(f"{prefix}adaptive.ckpt"))
            _adaptive_outputs(run, rc, G, TC, oracle, history, t, prefix)
            gens[t] = G
        run.finish("running")
    report = attack_success_rate(TC, gens, oracle, targets, rc["samples_per_cell"], seed=rc["eval_seed"],
                                 metadata=_eval_metadata(run, rc))
    _report_outputs(run, report)
    grid = sample_grid(gens, run.record("grid.png"), targets=targets, seed=rc["eval_seed"])
    plot_annotated_grid(grid, run.record("grid_annotated.png"), list(range(TC.spec.num_classes)), targets)


HANDLERS = {
    "train-classifier": cmd_train_classifier,
    "train-gan": cmd_train_gan,
    "train-adaptive": cmd_train_adaptive,
    "adapt-retrain": cmd_adapt_retrain,
    "attack-fgsm": cmd_attack_fgsm,
    "attack-pgd": cmd_attack_pgd,
    "evaluate": cmd_evaluate,
    "sample-grid": cmd_sample_grid,
    "retrain-delta": cmd_retrain_delta,
    "sweep-targets": cmd_sweep_targets,
}


def dispatch(argv):
    """Parse ``argv``, run one subcommand, and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k in OPTIONS}
    try:
        rc = load_config(args.command, args.config, overrides)
    except AdaptiveGanError as exc:
        print(f"adaptive-gan {args.command}: validation error: {exc}", file=sys.stderr)
        return 1
    run = Run(rc)
    try:
        HANDLERS[args.command](run, rc)
    except Exception as exc:  # noqa: BLE001 - reported, recorded in the manifest, exit 1
        run.finish("failed")
        print(f"adaptive-gan {args.command}: error: {exc}", file=sys.stderr)
        print(run.dir, file=sys.stderr)
        return 1
    run.finish("ok")
    print(run.dir)
    for key, value in sorted(run.summary.items()):
        print(f"{key}\t{value}")
    return 0


def main(argv=None):
    sys.exit(dispatch(sys.argv[1:] if argv is None else argv))
