"""Embedding-space probes: distance profiles, Gram dispersion, exports.

Distance means cosine distance (1 - similarity) throughout: the model's
geometry is angular, both in how entities are embedded and in how the
prototype penalty acts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, popularity_deciles
from .model import VARIANT_PROTOMF, ModelParams, cosine_similarities
from .train import regularizer_penalty


@dataclass
class DistanceProfile:
    """Mean item-to-prototype distance per popularity bin and probe size.

    mean_distance[b, j] is the mean over bin-b items of the average cosine
    distance to their k_values[j] nearest prototypes. For a fixed bin the
    values are non-decreasing in k.
    """

    k_values: list[int]
    bin_labels: list[int]
    mean_distance: np.ndarray  # (n_bins, n_k)
    bin_sizes: list[int]


@dataclass
class GramStats:
    """Dispersion of the normalized prototype Gram matrix."""

    mean_abs_offdiag: float
    max_abs_offdiag: float
    penalty_value: float


def distance_profile(
    params: ModelParams,
    dataset: Dataset,
    k_values: list[int] | None = None,
) -> DistanceProfile:
    """Average distance of items to their k nearest prototypes, by bin.

    For every item, distances to all item prototypes are sorted ascending
    and the first k averaged; items are then grouped by popularity decile.
    """
    if params.variant != VARIANT_PROTOMF:
        raise ValueError("distance profiles need a model with prototypes")
    l_t = params.l_t
    if k_values is None:
        k_values = list(range(1, l_t + 1))
    if any(k < 1 or k > l_t for k in k_values):
        raise ValueError(f"k values must lie in [1, {l_t}]")

    distances = 1.0 - cosine_similarities(params.item_factors, params.item_prototypes)
    distances.sort(axis=1)
    prefix_mean = np.cumsum(distances, axis=1) / np.arange(1, l_t + 1)

    bins = popularity_deciles(dataset)
    labels = sorted(set(bins.tolist()))
    mean_distance = np.empty((len(labels), len(k_values)))
    sizes: list[int] = []
    for row, b in enumerate(labels):
        members = bins == b
        sizes.append(int(members.sum()))
        for col, k in enumerate(k_values):
            mean_distance[row, col] = prefix_mean[members, k - 1].mean()
    return DistanceProfile(
        k_values=list(k_values),
        bin_labels=labels,
        mean_distance=mean_distance,
        bin_sizes=sizes,
    )


def gram_stats(prototypes: np.ndarray) -> GramStats:
    """Off-diagonal dispersion of the normalized prototype Gram matrix."""
    p = np.asarray(prototypes, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ValueError("need at least 2 prototypes")
    sims = cosine_similarities(p, p)
    off = np.abs(sims[~np.eye(p.shape[0], dtype=bool)])
    off = np.minimum(off, 1.0)  # guard 1+ulp roundoff
    return GramStats(
        mean_abs_offdiag=float(off.mean()),
        max_abs_offdiag=float(off.max()),
        penalty_value=regularizer_penalty(p),
    )


def write_distance_profile_csv(profile: DistanceProfile, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["popularity_bin", "n_items"] + [f"k={k}" for k in profile.k_values]
        )
        for row, b in enumerate(profile.bin_labels):
            writer.writerow(
                [b, profile.bin_sizes[row]]
                + [repr(v) for v in profile.mean_distance[row].tolist()]
            )


def export_embeddings(
    params: ModelParams,
    dataset: Dataset,
    path: str | Path,
) -> None:
    """Flat CSV of item vectors and item prototypes for external plotting.

    One row per item (kind=item, with key, group and popularity) and one
    per prototype (kind=prototype). Vector components are printed at full
    round-trip precision (17 significant digits).
    """
    if params.variant != VARIANT_PROTOMF:
        raise ValueError("embedding export needs a model with prototypes")
    item_keys = dataset.item_keys()
    d = params.d
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["kind", "index", "key", "group", "popularity"]
            + [f"v{j}" for j in range(d)]
        )
        for i in range(dataset.n_items):
            writer.writerow(
                [
                    "item",
                    i,
                    item_keys[i],
                    dataset.item_group[i],
                    int(dataset.item_popularity[i]),
                ]
                + [f"{v:.17g}" for v in params.item_factors[i].tolist()]
            )
        for l in range(params.l_t):
            writer.writerow(
                ["prototype", l, "", "", ""]
                + [f"{v:.17g}" for v in params.item_prototypes[l].tolist()]
            )
