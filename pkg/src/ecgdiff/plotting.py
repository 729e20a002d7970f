"""Static figure rendering (matplotlib, Agg backend).

Figures are written straight to files. PNG metadata is stripped of the
software tag so identical data gives identical bytes.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import signal as sps  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.linewidth": 0.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 0.9,
    "legend.frameon": False,
    "legend.fontsize": 7,
    "savefig.dpi": 120,
    "path.simplify": False,
}
COLORS = {"clean": "k", "noisy": "0.6"}
_CYCLE = ("tab:blue", "tab:red", "tab:green", "tab:purple", "tab:orange", "tab:brown")


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = path.suffix.lstrip(".") or "png"
    meta = {"Software": None} if fmt == "png" else {"Date": None} if fmt == "svg" else None
    fig.savefig(path, format=fmt, metadata=meta)
    plt.close(fig)
    return path


def _time(n, rate):
    return np.arange(n) / rate


def plot_overlay(clean, noisy, estimates, rate, path, title=None):
    """Time-domain overlay plus Welch PSD of clean, noisy and each estimate."""
    with plt.rc_context(STYLE):
        fig, (ax_t, ax_f) = plt.subplots(2, 1, figsize=(7, 5), constrained_layout=True)
        t = _time(len(clean), rate)
        series = [("clean", clean, COLORS["clean"]), ("noisy", noisy, COLORS["noisy"])]
        series += [(k, v, _CYCLE[i % len(_CYCLE)]) for i, (k, v) in enumerate(estimates.items())]
        nper = min(256, len(clean))
        for name, x, color in series:
            ax_t.plot(t, x, color=color, label=name)
            f, p = sps.welch(np.asarray(x, dtype=np.float64), fs=rate, nperseg=nper)
            ax_f.semilogy(f, p + 1e-20, color=color, label=name)
        ax_t.set_xlabel("time [s]")
        ax_t.set_ylabel("amplitude [au]")
        ax_t.legend(ncol=len(series), loc="upper right")
        ax_f.set_xlabel("frequency [Hz]")
        ax_f.set_ylabel("PSD")
        ax_f.set_xlim(0, rate / 2)
        if title:
            ax_t.set_title(title)
        return _save(fig, path)


def plot_segments(examples, rate, path, label="model"):
    """One row per noise segment: clean, noisy and reconstruction."""
    with plt.rc_context(STYLE):
        n = len(examples)
        fig, axes = plt.subplots(n, 1, figsize=(7, 1.6 * n + 0.4), squeeze=False,
                                 constrained_layout=True)
        for ax, (seg, (clean, noisy, recon)) in zip(axes[:, 0], examples.items()):
            t = _time(len(clean), rate)
            ax.plot(t, noisy, color=COLORS["noisy"], label="noisy")
            ax.plot(t, clean, color=COLORS["clean"], label="clean")
            ax.plot(t, recon, color=_CYCLE[0], label=label)
            ax.set_ylabel(f"factor {seg}")
        axes[0, 0].legend(ncol=3, loc="upper right")
        axes[-1, 0].set_xlabel("time [s]")
        return _save(fig, path)


def plot_trace(snapshots, clean, noisy, rate, path):
    """Reverse-process states side by side, from pure noise to the estimate."""
    with plt.rc_context(STYLE):
        k = len(snapshots)
        fig, axes = plt.subplots(1, k + 1, figsize=(2.0 * (k + 1), 2.2), sharey=False,
                                 constrained_layout=True)
        t = _time(len(clean), rate)
        for ax, (step, x) in zip(axes, snapshots.items()):
            ax.plot(t, x, color=_CYCLE[0])
            ax.set_title(f"t = {step}")
            ax.set_xlabel("time [s]")
        axes[-1].plot(t, noisy, color=COLORS["noisy"], label="noisy")
        axes[-1].plot(t, clean, color=COLORS["clean"], label="clean")
        axes[-1].set_title("reference")
        axes[-1].legend(loc="upper right")
        return _save(fig, path)
