"""Render decay-curve, contour and bias figures from experiment CSVs.

Usage: ``python render.py --spec fig.toml``

The tool consumes only the CSV files the experiment harness writes (decay
curves: ``t,mean_dist,stderr,frac_coalesced``; curve indexes:
``path,gamma,mode``; contour grids: ``x,y,energy``; bias tables: ``h,bias``)
plus a small TOML figure spec:

    [figure]
    kind = "decay"            # decay | contour | bias
    index = "curves_banana.csv"
    out = "banana.png"

Decay figures draw reflection-coupling curves solid and bold, synchronous
curves dashed, with colors and legend entries keyed to the friction values
found in the index; a log-scale companion (same stem, ``_log`` suffix) is
written alongside.  Rendering is deterministic: fixed figure geometry, the
Agg backend and no embedded timestamps, so the same inputs give
byte-identical images.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import tomli  # noqa: E402

FIGSIZE = (6.4, 4.2)
DPI = 130
PNG_METADATA = {"Software": "kc-plots"}  # fixed string, no version or date


class SchemaError(ValueError):
    """An input CSV does not carry the expected columns."""


def read_csv_columns(path: Path, expected: list[str]) -> dict[str, list[str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        names = reader.fieldnames or []
        missing = [c for c in expected if c not in names]
        if missing:
            raise SchemaError(
                f"{path}: missing columns {missing}; expected header with {expected}"
            )
        rows = list(reader)
    return {c: [r[c] for r in rows] for c in names}


def load_decay_curve(path: Path):
    cols = read_csv_columns(path, ["t", "mean_dist", "stderr", "frac_coalesced"])
    return np.asarray(cols["t"], float), np.asarray(cols["mean_dist"], float)


def load_curve_index(path: Path):
    cols = read_csv_columns(path, ["path", "gamma", "mode"])
    base = path.parent
    return [
        {"path": base / p, "gamma": float(g), "mode": m}
        for p, g, m in zip(cols["path"], cols["gamma"], cols["mode"])
    ]


MODE_STYLE = {
    "reflection": {"linestyle": "-", "linewidth": 2.4},
    "synchronous": {"linestyle": "--", "linewidth": 1.4},
}


def render_decay(spec: dict, base: Path):
    """Build the linear- and log-scale decay figures; returns both."""
    curves = load_curve_index(base / spec["index"])
    gammas = sorted({c["gamma"] for c in curves})
    cmap = plt.get_cmap("tab10")
    colors = {g: cmap(i % 10) for i, g in enumerate(gammas)}
    figures = []
    for logscale in (False, True):
        fig, ax = plt.subplots(figsize=FIGSIZE, dpi=DPI)
        labeled = set()
        for curve in sorted(curves, key=lambda c: (c["gamma"], c["mode"])):
            t, dist = load_decay_curve(curve["path"])
            style = MODE_STYLE.get(curve["mode"], {"linestyle": ":", "linewidth": 1.0})
            label = f"gamma = {curve['gamma']:g}"
            if curve["gamma"] in labeled:
                label = None
            else:
                labeled.add(curve["gamma"])
            ax.plot(t, dist, color=colors[curve["gamma"]], label=label, **style)
        ax.set_xlabel("time")
        ax.set_ylabel("mean distance")
        title = spec.get("title", "coupled-chain distance")
        ax.set_title(f"{title}\nsolid: reflection coupling, dashed: synchronous")
        if logscale:
            ax.set_yscale("log")  # nonpositive values are clipped by the axis
        ax.legend(loc="best")
        fig.tight_layout()
        figures.append(fig)
    return figures


def render_contour(spec: dict, base: Path):
    cols = read_csv_columns(base / spec["csv"], ["x", "y", "energy"])
    x = np.asarray(cols["x"], float)
    y = np.asarray(cols["y"], float)
    e = np.asarray(cols["energy"], float)
    xs, ys = np.unique(x), np.unique(y)
    E = e.reshape(len(xs), len(ys))
    fig, ax = plt.subplots(figsize=FIGSIZE, dpi=DPI)
    vmax = spec.get("max_energy")
    levels = int(spec.get("levels", 30))
    if vmax is not None:
        grid_levels = np.linspace(float(E.min()), float(vmax), levels)
    else:
        grid_levels = levels
    # regions above the level range stay unfilled (white)
    cf = ax.contourf(xs, ys, E.T, levels=grid_levels, cmap="viridis", extend="neither")
    fig.colorbar(cf, ax=ax, label="energy")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.set_title(spec.get("title", "potential energy"))
    fig.tight_layout()
    return [fig]


def render_bias(spec: dict, base: Path):
    if "index" in spec:
        idx = read_csv_columns(base / spec["index"], ["path", "scheme"])
        entries = [(base / p, s) for p, s in zip(idx["path"], idx["scheme"])]
    else:
        entries = [(base / spec["csv"], spec.get("label", "bias"))]
    fig, ax = plt.subplots(figsize=FIGSIZE, dpi=DPI)
    cmap = plt.get_cmap("tab10")
    for i, (path, label) in enumerate(entries):
        cols = read_csv_columns(path, ["h", "bias"])
        h = np.asarray(cols["h"], float)
        b = np.asarray(cols["bias"], float)
        slope, intercept = np.polyfit(np.log(h), np.log(b), 1)
        color = cmap(i % 10)
        ax.loglog(h, b, "o", color=color)
        hh = np.geomspace(h.min(), h.max(), 50)
        ax.loglog(hh, np.exp(intercept) * hh**slope, "-", color=color,
                  label=f"{label}: slope ≈ {slope:.2f}")
    ax.set_xlabel("step size h")
    ax.set_ylabel("stationary bias")
    ax.set_title(spec.get("title", "bias order"))
    ax.legend(loc="best")
    fig.tight_layout()
    return [fig]


RENDERERS = {"decay": render_decay, "contour": render_contour, "bias": render_bias}


def render(spec_path) -> list[Path]:
    """Render the figure a spec file describes; returns the written paths."""
    spec_path = Path(spec_path)
    with open(spec_path, "rb") as fh:
        doc = tomli.load(fh)
    spec = doc.get("figure", {})
    kind = spec.get("kind")
    if kind not in RENDERERS:
        raise SchemaError(f"unknown figure kind {kind!r}; expected one of {sorted(RENDERERS)}")
    base = spec_path.parent
    figures = RENDERERS[kind](spec, base)
    out = base / spec.get("out", f"{kind}.png")
    paths = [out]
    if len(figures) == 2:
        paths.append(out.with_name(out.stem + "_log" + out.suffix))
    for fig, path in zip(figures, paths):
        fig.savefig(path, metadata=PNG_METADATA)
        plt.close(fig)
    return paths


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Render experiment CSVs into figures.")
    parser.add_argument("--spec", required=True, help="TOML figure spec")
    args = parser.parse_args(argv)
    try:
        for path in render(args.spec):
            print(f"wrote {path}")
    except (SchemaError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
