"""
Attack accounting: success / fidelity / joint rates per (class c, target t)
cell, for native generator samples and for perturbation baselines.

Success means the target classifier outputs ``t`` (targeted) or anything but
the true label (untargeted). Fidelity means an independently trained oracle
classifier still outputs the conditioned class ``c``; it stands in for a
human judging whether the sample looks like its class, and inherits the
oracle's own errors.
"""

import csv
import datetime
import os
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
import torch
import yaml

from adaptive_gan.errors import ArgumentError, IoError
from adaptive_gan.models import generate
from adaptive_gan.training import EVAL_BATCH, predict

SCHEMA_VERSION = 1
FIDELITY_NOTE = (
    "fidelity = agreement of an independently seeded oracle classifier with the "
    "conditioned class; a proxy for human recognizability, limited by the oracle's accuracy"
)
REPORT_HEADER = (
    "# adaptive-gan evaluation report\n"
    f"# schema_version: {SCHEMA_VERSION}\n"
    "# matrices are row-major: row = conditioned (or true) class c, column = attack target t\n"
    "# *_count matrices hold integer sample counts; success_matrix = success_count / cell_count\n"
    "# headline rates exclude diagonal (c == t) cells\n"
)


def _zeros(n):
    return np.zeros((n, n), dtype=np.int64)


@dataclass
class EvalReport:
    num_classes: int
    kind: str = "generative"
    cell_count: np.ndarray = None
    success_count: np.ndarray = None
    fidelity_count: np.ndarray = None
    joint_count: np.ndarray = None
    overall_success_rate: float = None
    fidelity_rate: float = None
    joint_rate: float = None
    metadata: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, num_classes, c, t, success, fidelity=None, kind="generative", **kw):
        """Count per-sample outcomes into cells and derive the headline rates."""
        n = num_classes
        c, t = np.asarray(c, dtype=np.int64), np.asarray(t, dtype=np.int64)
        success = np.asarray(success, dtype=bool)
        flat = c * n + t
        count = np.bincount(flat, minlength=n * n).reshape(n, n)
        succ = np.bincount(flat, weights=success, minlength=n * n).astype(np.int64).reshape(n, n)
        fid = joint = None
        if fidelity is not None:
            fidelity = np.asarray(fidelity, dtype=bool)
            fid = np.bincount(flat, weights=fidelity, minlength=n * n).astype(np.int64).reshape(n, n)
            joint = np.bincount(flat, weights=success & fidelity, minlength=n * n).astype(np.int64).reshape(n, n)
        report = cls(n, kind, count, succ, fid, joint, **kw)
        report.refresh_rates()
        return report

    def refresh_rates(self):
        off = ~np.eye(self.num_classes, dtype=bool)
        total = self.cell_count[off].sum()
        if total == 0:
            self.overall_success_rate = self.fidelity_rate = self.joint_rate = None
            return
        self.overall_success_rate = float(self.success_count[off].sum() / total)
        if self.fidelity_count is not None:
            self.fidelity_rate = float(self.fidelity_count[off].sum() / total)
            self.joint_rate = float(self.joint_count[off].sum() / total)

    @staticmethod
    def _rates(num, den):
        if num is None:
            return None
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.maximum(den, 1), np.nan)

    @property
    def success_matrix(self):
        return self._rates(self.success_count, self.cell_count)

    @property
    def fidelity_matrix(self):
        return self._rates(self.fidelity_count, self.cell_count)

    @property
    def joint_matrix(self):
        return self._rates(self.joint_count, self.cell_count)

    def cell(self, c, t):
        count = int(self.cell_count[c, t])
        out = {"count": count, "success": int(self.success_count[c, t])}
        if self.fidelity_count is not None:
            out["fidelity"] = int(self.fidelity_count[c, t])
            out["joint"] = int(self.joint_count[c, t])
        for key in ("success", "fidelity", "joint"):
            if key in out:
                out[f"{key}_rate"] = out[key] / count if count else None
        return out

    def rates_over(self, cells):
        """Pooled (success, fidelity, joint) rates over an explicit cell list."""
        cells = list(cells)
        total = sum(int(self.cell_count[c, t]) for c, t in cells)
        if total == 0:
            raise ArgumentError("no samples in the requested cells")

        def pooled(m):
            return None if m is None else sum(int(m[c, t]) for c, t in cells) / total

        return pooled(self.success_count), pooled(self.fidelity_count), pooled(self.joint_count)


def _generator_for(generators, t):
    if isinstance(generators, Mapping):
        if t not in generators:
            raise ArgumentError(f"no generator for target {t}")
        return generators[t]
    return generators


def cell_noise(z_dim, count, seed, c, t):
    gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, c, t]).generate_state(1)[0]))
    return torch.randn(count, z_dim, generator=gen)


@torch.no_grad()
def generate_cell(G, c, t, count, seed):
    """``count`` samples for cell (c, t) with noise drawn from ``(seed, c, t)``."""
    z = cell_noise(G.spec.z_dim, count, seed, c, t)
    cs = torch.full((count,), c, dtype=torch.long)
    ts = torch.full((count,), t, dtype=torch.long) if G.spec.target_conditioned else None
    G.module.eval()
    return torch.cat([generate(G, cs[i : i + EVAL_BATCH], z[i : i + EVAL_BATCH],
                               None if ts is None else ts[i : i + EVAL_BATCH])
                      for i in range(0, count, EVAL_BATCH)])


def attack_success_rate(TC, generators, oracle, targets, samples_per_cell, seed=0, classes=None, metadata=None):
    """Evaluate native adversarial examples over every (c, t) cell.

    ``generators`` is either one target-conditioned handle or a mapping from
    target to a per-target handle. ``oracle`` may be None (no fidelity).
    """
    if samples_per_cell < 1:
        raise ArgumentError("samples_per_cell must be >= 1")
    n = TC.spec.num_classes
    classes = list(range(n)) if classes is None else list(classes)
    targets = sorted(set(int(t) for t in targets))
    if not targets or min(targets) < 0 or max(targets) >= n:
        raise ArgumentError(f"targets must be non-empty and within [0, {n})")
    cs, ts, succ, fid = [], [], [], []
    for t in targets:
        G = _generator_for(generators, t)
        for c in classes:
            x = generate_cell(G, c, t, samples_per_cell, seed)
            cs.append(np.full(samples_per_cell, c))
            ts.append(np.full(samples_per_cell, t))
            succ.append((predict(TC, x) == t).numpy())
            if oracle is not None:
                fid.append((predict(oracle, x) == c).numpy())
    meta = {"seed": seed, "samples_per_cell": samples_per_cell, "targets": targets, "classes": classes,
            "fidelity_note": FIDELITY_NOTE, "timestamp": _now()}
    meta.update(metadata or {})
    return EvalReport.from_samples(
        n, np.concatenate(cs), np.concatenate(ts), np.concatenate(succ),
        np.concatenate(fid) if oracle is not None else None, metadata=meta,
    )


@torch.no_grad()
def perturbation_report(TC, x, x_adv, labels, targets=None, epsilon=None, oracle=None, metadata=None):
    """Success accounting for perturbed inputs plus L-infinity statistics.

    With ``targets`` the report is targeted and indexed by (true class, target);
    without, success means misclassification and ``extra['accuracy']`` holds
    the adversarial accuracy.
    """
    if x.shape != x_adv.shape:
        raise ArgumentError(f"x {tuple(x.shape)} and x_adv {tuple(x_adv.shape)} are not aligned")
    labels = torch.as_tensor(labels).long()
    if labels.shape != (x.shape[0],):
        raise ArgumentError("one label per image is required")
    n = TC.spec.num_classes
    pred = predict(TC, x_adv)
    linf = (x_adv - x).abs().flatten(1).max(dim=1).values
    out_of_range = int(((x_adv < 0) | (x_adv > 1)).flatten(1).any(dim=1).sum())
    extra = {
        "linf_max": float(linf.max()),
        "linf_mean": float(linf.mean()),
        "out_of_range_samples": out_of_range,
        "accuracy": float((pred == labels).float().mean()),
        "epsilon": epsilon,
    }
    if epsilon is not None:
        violations = int((linf > epsilon + 1e-6).sum())
        extra["budget_violations"] = violations
        extra["budget_violated"] = bool(violations or out_of_range)
    fidelity = (predict(oracle, x_adv) == labels).numpy() if oracle is not None else None
    meta = {"timestamp": _now()}
    meta.update(metadata or {})
    if targets is None:
        success = (pred != labels).numpy()
        report = EvalReport.from_samples(n, labels.numpy(), labels.numpy(), success, fidelity,
                                         kind="untargeted", metadata=meta, extra=extra)
        # every untargeted sample sits on the diagonal; headline rates are over all samples
        report.overall_success_rate = float(success.mean())
        if fidelity is not None:
            report.fidelity_rate = float(fidelity.mean())
            report.joint_rate = float((success & fidelity).mean())
        return report
    targets = torch.as_tensor(targets).long()
    if targets.ndim == 0:
        targets = targets.expand(x.shape[0])
    success = (pred == targets).numpy()
    return EvalReport.from_samples(n, labels.numpy(), targets.numpy(), success, fidelity,
                                   kind="targeted", metadata=meta, extra=extra)


def _now():
    return datetime.datetime.now(datetime.timezone.utc).replace(microsecond=0).isoformat()


def _matrix(m):
    return None if m is None else [[int(v) for v in row] for row in m]


def _rate_matrix(m):
    return None if m is None else [[None if np.isnan(v) else float(v) for v in row] for row in m]


def report_to_dict(report):
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": report.kind,
        "num_classes": report.num_classes,
        "overall_success_rate": report.overall_success_rate,
        "fidelity_rate": report.fidelity_rate,
        "joint_rate": report.joint_rate,
        "cell_count": _matrix(report.cell_count),
        "success_count": _matrix(report.success_count),
        "fidelity_count": _matrix(report.fidelity_count),
        "joint_count": _matrix(report.joint_count),
        "success_matrix": _rate_matrix(report.success_matrix),
        "metadata": report.metadata,
        "extra": report.extra,
    }


def write_report(report, path):
    """Write the report as commented YAML; :func:`read_report` inverts it exactly."""
    text = REPORT_HEADER + yaml.safe_dump(report_to_dict(report), sort_keys=True, default_flow_style=None, width=4096)
    try:
        with open(path, "w") as f:
            f.write(text)
    except OSError as exc:
        raise IoError(f"cannot write report {path}: {exc}") from exc
    return path


def read_report(path):
    try:
        with open(path) as f:
            d = yaml.safe_load(f)
    except OSError as exc:
        raise IoError(f"cannot read report {path}: {exc}") from exc
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ArgumentError(f"{path}: unsupported report schema {d.get('schema_version')}")

    def arr(key):
        return None if d.get(key) is None else np.asarray(d[key], dtype=np.int64)

    return EvalReport(
        num_classes=d["num_classes"], kind=d["kind"],
        cell_count=arr("cell_count"), success_count=arr("success_count"),
        fidelity_count=arr("fidelity_count"), joint_count=arr("joint_count"),
        overall_success_rate=d["overall_success_rate"], fidelity_rate=d["fidelity_rate"],
        joint_rate=d["joint_rate"], metadata=d.get("metadata") or {}, extra=d.get("extra") or {},
    )


def write_cells_csv(report, path):
    """One delimited row per evaluated (c, t) cell."""
    n = report.num_classes
    fields = ["c", "t", "count", "success", "fidelity", "joint", "success_rate", "fidelity_rate", "joint_rate"]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for c in range(n):
            for t in range(n):
                if report.cell_count[c, t]:
                    writer.writerow({"c": c, "t": t, **report.cell(c, t)})
    return path
