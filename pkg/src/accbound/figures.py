"""Figure rendering for the report path; every figure goes straight to file."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_boundary(path, curves, title=""):
    fig, ax = plt.subplots(figsize=(6, 4))
    for curve in curves:
        ax.plot(curve.x1, curve.xn, label=f"{curve.case}, A_T={curve.A_T:.4g}")
    ax.axhline(0.0, color="k", lw=0.5)
    ax.set_xlabel("adapted x1")
    ax.set_ylabel("adapted xn")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_cloud(path, adapted, T, curve=None, envelope=None, title=""):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(adapted[:, 0], adapted[:, 1], ".", ms=1, alpha=0.3, label="end-points")
    if curve is not None:
        ax.plot(curve.x1, curve.xn, "r-", lw=1.2, label="predicted boundary")
    if envelope is not None:
        xs, vals, _ = envelope
        ax.plot(xs, vals, "g^", ms=4, label="envelope minima")
    ax.axvline(T, color="k", lw=0.5)
    ax.axhline(0.0, color="k", lw=0.5)
    ax.set_xlabel("adapted x1")
    ax.set_ylabel("adapted xn")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_spectrum(path, ts, columns, title=""):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(columns):
        ax.plot(ts, columns[name], marker=".", label=name)
    ax.axhline(0.0, color="k", lw=0.5)
    ax.set_xlabel("horizon T")
    ax.set_ylabel("smallest eigenvalue")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sector(path, sweep, title=""):
    eps = np.array([p.eps for p in sweep.points])
    depth = np.array([-p.xn for p in sweep.points])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(eps, depth, "o", label="|xn| at the sector end-point")
    ax.loglog(eps, np.exp(sweep.intercept) * eps ** sweep.slope, "-",
              label=f"fit slope {sweep.slope:.3f}")
    ax.set_xlabel("perturbation width eps")
    ax.set_ylabel("|adapted xn|")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
