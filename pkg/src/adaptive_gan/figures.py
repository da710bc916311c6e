"""
Figure output. Raw sample grids are written pixel-exact as lossless PNG
(one cell per sample, no padding); annotated matplotlib renderings and
summary plots go next to them for human inspection.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
from PIL import Image  # noqa: E402

from adaptive_gan.errors import ArgumentError, IoError  # noqa: E402
from adaptive_gan.evaluation import _generator_for, cell_noise  # noqa: E402
from adaptive_gan.models import generate  # noqa: E402
from adaptive_gan.training import predict  # noqa: E402

_PNG_META = {"Software": None}


def to_uint8(images):
    return (images.detach().cpu().clamp(0, 1) * 255).round().to(torch.uint8).numpy()


def tile(cells):
    """Assemble ``cells[row][col]`` (each ``[H, W, C]``) into one ``[R*H, K*W, C]`` array."""
    return np.concatenate([np.concatenate(list(row), axis=1) for row in cells], axis=0)


def write_png(array, path):
    array = np.asarray(array, dtype=np.uint8)
    image = Image.fromarray(array[..., 0] if array.shape[-1] == 1 else array)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        image.save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


@torch.no_grad()
def _cell_sample(G, c, t, seed, TC=None, max_tries=1):
    """One sample for (c, t). With ``TC`` and ``max_tries > 1``, redraw until TC says ``t``."""
    z = cell_noise(G.spec.z_dim, max_tries, seed, c, t)
    cs = torch.full((max_tries,), c, dtype=torch.long)
    ts = torch.full((max_tries,), t, dtype=torch.long) if G.spec.target_conditioned else None
    G.module.eval()
    x = generate(G, cs, z, ts)
    if TC is not None and max_tries > 1:
        hits = (predict(TC, x) == t).nonzero()
        if len(hits):
            return x[hits[0, 0]]
    return x[0]


def sample_grid(generators, path, classes=None, targets=None, seed=0, TC=None, success_only=False,
                max_tries=20, z_variants=None):
    """Sample grid with one row per class ``c``.

    Columns are attack targets (one generator each, or one target-conditioned
    generator), or ``z_variants`` noise draws of a single generator. With
    ``success_only`` each target cell is redrawn up to ``max_tries`` times
    until ``TC`` assigns it to the target. Returns the uint8 grid array.
    """
    if success_only and TC is None:
        raise ArgumentError("success_only needs the target classifier")
    if z_variants is not None:
        G = generators if hasattr(generators, "spec") else next(iter(generators.values()))
        classes = range(G.spec.num_classes) if classes is None else classes
        cells = []
        for c in classes:
            z = cell_noise(G.spec.z_dim, z_variants, seed, c, G.spec.num_classes)
            with torch.no_grad():
                G.module.eval()
                x = generate(G, torch.full((z_variants,), c, dtype=torch.long), z)
            cells.append(list(to_uint8(x)))
        grid = tile(cells)
    else:
        first = generators if hasattr(generators, "spec") else next(iter(generators.values()))
        n = first.spec.num_classes
        classes = range(n) if classes is None else classes
        targets = sorted(generators) if targets is None and not hasattr(generators, "spec") else targets
        targets = range(n) if targets is None else targets
        tries = max_tries if success_only else 1
        cells = [[to_uint8(_cell_sample(_generator_for(generators, t), c, t, seed, TC, tries)[None])[0]
                  for t in targets] for c in classes]
        grid = tile(cells)
    write_png(grid, path)
    return grid


@torch.no_grad()
def retrain_delta_grid(G_pre, G_post, probe, path, columns=10):
    """Side-by-side grids (before | after) from identical ``(c, z)`` probes.

    ``probe`` is ``(c, z)`` with ``len(c)`` divisible by ``columns``; rows
    follow probe order. Returns ``(grid, mean_abs_pixel_delta)`` where the
    delta is averaged over the whole probe.
    """
    if G_pre.spec != G_post.spec:
        raise ArgumentError("before/after generators have different specs")
    c, z = probe[0], probe[1]
    if len(c) % columns:
        raise ArgumentError(f"probe size {len(c)} is not divisible by {columns} columns")
    G_pre.module.eval()
    G_post.module.eval()
    before, after = generate(G_pre, c, z), generate(G_post, c, z)
    delta = float((after - before).abs().mean())

    def layout(x):
        cells = to_uint8(x)
        return tile([list(cells[i : i + columns]) for i in range(0, len(cells), columns)])

    grid = np.concatenate([layout(before), layout(after)], axis=1)
    write_png(grid, path)
    return grid, delta


def delta_probe(G_spec, rows=10, columns=10, seed=0):
    """Fixed ``(c, z)`` probe laid out as ``rows`` classes by ``columns`` noise draws."""
    gen = torch.Generator().manual_seed(seed)
    c = torch.arange(rows).repeat_interleave(columns) % G_spec.num_classes
    return c, torch.randn(rows * columns, G_spec.z_dim, generator=gen)


def _save(fig, path):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_PNG_META)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def plot_annotated_grid(grid, path, row_labels, col_labels, xlabel="attack target t", ylabel="class c", title=None):
    rows, cols = len(row_labels), len(col_labels)
    h, w = grid.shape[0] // rows, grid.shape[1] // cols
    fig, ax = plt.subplots(figsize=(0.5 * cols + 1, 0.5 * rows + 1))
    ax.imshow(grid.squeeze(), cmap="gray" if grid.shape[-1] == 1 else None, vmin=0, vmax=255,
              interpolation="nearest")
    ax.set_xticks([w * (j + 0.5) for j in range(cols)], [str(v) for v in col_labels])
    ax.set_yticks([h * (i + 0.5) for i in range(rows)], [str(v) for v in row_labels])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.tick_params(length=0)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_success_matrix(report, path, title="targeted success rate"):
    m = report.success_matrix
    n = report.num_classes
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(np.ma.masked_invalid(m), vmin=0, vmax=1, cmap="viridis")
    for c in range(n):
        for t in range(n):
            if not np.isnan(m[c, t]):
                ax.text(t, c, f"{m[c, t]:.2f}", ha="center", va="center", fontsize=6,
                        color="white" if m[c, t] < 0.5 else "black")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xlabel("attack target t")
    ax.set_ylabel("class c")
    rate = report.overall_success_rate
    ax.set_title(title if rate is None else f"{title} (off-diagonal {rate:.3f})")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_probe_curve(history, path, title="probe-set attack success"):
    values = list(history.get("probe_success") or [])
    initial = history.get("probe_success_initial")
    xs = list(range(1, len(values) + 1))
    if initial is not None:
        xs, values = [0] + xs, [initial] + values
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(xs, values, marker="o")
    ax.set_ylim(0, 1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("success rate (c != t)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)
