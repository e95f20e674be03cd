#!/usr/bin/env python3
"""Plot the CSV outputs of bilevel_tune.

Usage:
    plot_results.py bounds <dir>     bounds_compare.csv  -> bounds_compare.png
    plot_results.py tune <dir>       runlog_*.csv        -> tune.png
    plot_results.py sweep <dir>      sweep_finals.csv    -> sweep.png
    plot_results.py validate <dir>   validation_matrix.csv -> validation.png
"""

import argparse
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def plot_bounds(d: pathlib.Path) -> pathlib.Path:
    df = pd.read_csv(d / "bounds_compare.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(df["iter"], df["true_err_sq"], label="true error")
    ax.semilogy(df["iter"], df["aposteriori_bound"], label="a posteriori bound")
    ax.semilogy(df["iter"], df["apriori_bound"], label="a priori bound")
    ax.set_xlabel("FISTA iteration")
    ax.set_ylabel(r"$\|w^k - \hat w\|^2$")
    ax.legend()
    return save(fig, d / "bounds_compare.png")


def plot_tune(d: pathlib.Path) -> pathlib.Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in sorted(d.glob("runlog_*.csv")):
        df = pd.read_csv(path)
        best = df["F"].cummin()
        ax.semilogx(df["cum_fista_iters"].clip(lower=1), best,
                    label=path.stem.removeprefix("runlog_"))
    ax.set_xlabel("cumulative FISTA iterations")
    ax.set_ylabel("best upper-level objective")
    ax.legend()
    return save(fig, d / "tune.png")


def plot_sweep(d: pathlib.Path) -> pathlib.Path:
    df = pd.read_csv(d / "sweep_finals.csv")
    fig, ax = plt.subplots(figsize=(6, 5))
    for variant, group in df.groupby("variant", sort=False):
        ax.scatter(group["theta1"], group["theta2"], label=variant, alpha=0.7)
    ax.set_xlabel(r"$\theta_1$")
    ax.set_ylabel(r"$\theta_2$")
    ax.legend()
    return save(fig, d / "sweep.png")


def plot_validate(d: pathlib.Path) -> pathlib.Path:
    df = pd.read_csv(d / "validation_matrix.csv")
    labels = [c for c in df.columns if c not in ("digit", "majority_rate")]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(labels), 1)
    for i, label in enumerate(labels):
        ax.bar(df["digit"] + (i - (len(labels) - 1) / 2) * width, df[label], width, label=label)
    ax.plot(df["digit"], df["majority_rate"], "k_", markersize=20, label="majority rate")
    ax.set_xlabel("digit")
    ax.set_ylabel("validation accuracy")
    ax.set_ylim(min(0.8, df[labels + ["majority_rate"]].min().min() - 0.02), 1.0)
    ax.legend(fontsize="small")
    return save(fig, d / "validation.png")


def save(fig, path: pathlib.Path) -> pathlib.Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("kind", choices=["bounds", "tune", "sweep", "validate"])
    ap.add_argument("dir", type=pathlib.Path, help="output directory of bilevel_tune")
    args = ap.parse_args()
    plot = {"bounds": plot_bounds, "tune": plot_tune, "sweep": plot_sweep,
            "validate": plot_validate}[args.kind]
    print(plot(args.dir))


if __name__ == "__main__":
    main()
