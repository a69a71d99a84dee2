"""Figures written next to the CSV/JSON outputs of runs, sweeps and evaluations."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402

from .data import denormalize  # noqa: E402

GENERATOR_TERMS = ("g_adv", "f_adv", "feature", "semantic", "identity", "total")


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_loss_curves(rows, path):
    """Per-epoch generator terms (left) and discriminator losses (right)."""
    epochs = [r["epoch"] for r in rows]
    fig, (ax_g, ax_d) = plt.subplots(1, 2, figsize=(10, 4))
    for term in GENERATOR_TERMS:
        ax_g.plot(epochs, [r[term] for r in rows], marker="o", ms=3, label=term)
    for term in ("d_x", "d_y"):
        ax_d.plot(epochs, [r[term] for r in rows], marker="o", ms=3, label=term)
    ax_g.set_title("generator objective")
    ax_d.set_title("discriminators")
    for ax in (ax_g, ax_d):
        ax.set_xlabel("epoch")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    return _finish(fig, path)


@torch.no_grad()
def save_sample_grid(nets, sources_x, sources_y, path):
    """Rows of source | translated | reconstructed for both directions."""
    G, F = nets["G"], nets["F"]
    was_training = G.training
    G.eval()
    F.eval()
    dtype = next(G.parameters()).dtype
    rows = []
    if sources_x is not None:
        x = sources_x.to(dtype)
        g_x = G(x)
        rows += [("x", "G(x)", "F(G(x))", a, b, c) for a, b, c in zip(x, g_x, F(g_x))]
    if sources_y is not None:
        y = sources_y.to(dtype)
        f_y = F(y)
        rows += [("y", "F(y)", "G(F(y))", a, b, c) for a, b, c in zip(y, f_y, G(f_y))]
    G.train(was_training)
    F.train(was_training)

    fig, axes = plt.subplots(len(rows), 3, figsize=(6, 2 * len(rows)), squeeze=False)
    for r, (*titles, a, b, c) in enumerate(rows):
        for col, (title, img) in enumerate(zip(titles, (a, b, c))):
            ax = axes[r, col]
            ax.imshow(denormalize(img.clamp(-1, 1)))
            ax.set_title(title, fontsize=8)
            ax.axis("off")
    return _finish(fig, path)


def plot_sweep_summary(rows, key, path):
    """Final-epoch loss terms against the swept value (categorical axis)."""
    labels = [str(r["value"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for term in ("feature", "semantic", "dual", "total"):
        ax.plot(labels, [r[term] for r in rows], marker="s", label=term)
    ax.set_xlabel(key)
    ax.set_ylabel("final-epoch mean")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_metric_report(report, path):
    fig, axes = plt.subplots(1, 4, figsize=(10, 3))
    values = (("FID", report.fid), ("KID", report.kid), ("PSNR", report.psnr_mean), ("SSIM", report.ssim_mean))
    for ax, (name, value) in zip(axes, values):
        shown = value if value == value and abs(value) != float("inf") else 0.0
        ax.bar([name], [shown], color="tab:blue")
        ax.set_title(f"{name} = {value:.4g}", fontsize=9)
    return _finish(fig, path)
