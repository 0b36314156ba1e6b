"""Static PNG output: loss curves and variance heatmaps."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .exceptions import InvalidInputError  # noqa: E402
from .training import read_loss_log  # noqa: E402
from .validation import check_gray  # noqa: E402

HEATMAP_CMAP = "inferno"

# no timestamps or version strings, so identical logs give identical bytes
_PNG_META = {"Software": None}


def _chart(path, steps, series, title):
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for label, values in series:
        ax.plot(steps, values, marker="o" if len(steps) < 20 else None, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curves(loss_log, out):
    """Write the two convergence charts for a loss-log CSV.

    ``out`` receives loss_D and loss_G_total; a sibling ``<stem>_terms.png``
    receives the loss_G_gan and loss_G_l1 components. Returns both paths.
    """
    records = read_loss_log(loss_log)
    if not records:
        raise InvalidInputError(f"{loss_log}: loss log has no rows")
    out = Path(out)
    terms = out.with_name(out.stem + "_terms.png")
    steps = [r.step for r in records]
    _chart(out, steps, [("loss_D", [r.loss_D for r in records]),
                        ("loss_G_total", [r.loss_G_total for r in records])],
           "discriminator and generator objective")
    _chart(terms, steps, [("loss_G_gan", [r.loss_G_gan for r in records]),
                          ("loss_G_l1", [r.loss_G_l1 for r in records])],
           "generator loss terms")
    return out, terms


def _palette(name=HEATMAP_CMAP):
    rgb = (matplotlib.colormaps[name](np.linspace(0, 1, 256))[:, :3] * 255).round()
    return rgb.astype(np.uint8).ravel().tolist()


def heatmap_indices(values, scale="auto"):
    """Map values to palette indices 0..255. ``scale`` is "auto" or a positive max."""
    values = check_gray(values, "map")
    if scale == "auto":
        top = float(values.max())
    else:
        top = float(scale)
        if not top > 0:
            raise InvalidInputError(f"fixed scale must be positive, got {scale}")
    if top == 0:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(np.clip(values / top, 0, 1) * 255).astype(np.uint8)


def render_heatmap(values, out, scale="auto"):
    """Palette PNG, one image pixel per map pixel; index 0 is the background."""
    img = Image.fromarray(heatmap_indices(values, scale), mode="P")
    img.putpalette(_palette())
    img.save(out, format="PNG")
    return Path(out)
