"""Interaction ingestion, item grouping, popularity statistics, and splits.

Interactions are implicit feedback: any rating in the source file counts as
one interaction. Duplicated (user, item) pairs are collapsed, keeping the
earliest timestamp. Index maps assign dense indices in order of first
appearance, which makes the canonical TSV round-trip exact.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derived_rng

logger = logging.getLogger(__name__)

GROUP_OVER = "over"
GROUP_UNDER = "under"
GROUP_NEUTRAL = "neutral"
GROUPS = (GROUP_OVER, GROUP_UNDER, GROUP_NEUTRAL)

EVAL_STAGES = ("validation", "test")
N_EVAL_NEGATIVES = 99
N_DECILES = 10


class DataError(Exception):
    """Unreadable, malformed, or inconsistent input data."""


@dataclass(frozen=True)
class Interaction:
    """One raw user-item event, keyed by the source file's identifiers."""

    user_id: str
    item_id: str
    timestamp: int = 0


@dataclass
class Dataset:
    """Dense-indexed interaction data with popularity and group labels.

    interactions is an (n, 3) int64 array of [user_index, item_index,
    timestamp] rows, ordered by first appearance in the source file.
    """

    n_users: int
    n_items: int
    interactions: np.ndarray
    item_popularity: np.ndarray
    item_group: list[str]
    user_index_map: dict[str, int]
    item_index_map: dict[str, int]

    def user_keys(self) -> list[str]:
        return list(self.user_index_map)

    def item_keys(self) -> list[str]:
        return list(self.item_index_map)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_users == other.n_users
            and self.n_items == other.n_items
            and np.array_equal(self.interactions, other.interactions)
            and np.array_equal(self.item_popularity, other.item_popularity)
            and self.item_group == other.item_group
            and self.user_index_map == other.user_index_map
            and self.item_index_map == other.item_index_map
        )


@dataclass
class Split:
    """Leave-one-out split with fixed per-user evaluation candidates.

    eval_negatives[stage][user] holds the sampled non-interacted items for
    that user; shortfall[stage] lists users with fewer than 99 available.
    """

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    eval_negatives: dict[str, dict[int, np.ndarray]]
    shortfall: dict[str, list[int]] = field(default_factory=dict)

    def eligible_users(self, stage: str) -> np.ndarray:
        arr = self.validation if stage == "validation" else self.test
        return arr[:, 0]


def _parse_tsv_line(line: str) -> Interaction:
    parts = line.split("\t")
    if len(parts) not in (2, 3) or not parts[0] or not parts[1]:
        raise ValueError("expected user<TAB>item[<TAB>timestamp]")
    ts = 0
    if len(parts) == 3:
        ts = int(parts[2])
    return Interaction(parts[0], parts[1], ts)


def _parse_movielens_line(line: str) -> Interaction:
    parts = line.split("::")
    if len(parts) != 4:
        raise ValueError("expected user::item::rating::timestamp")
    float(parts[2])  # rating must be numeric; value itself is discarded
    return Interaction(parts[0], parts[1], int(parts[3]))


_PARSERS = {"tsv": _parse_tsv_line, "movielens_dat": _parse_movielens_line}


def load_interactions(path: str | Path, format: str = "tsv") -> Dataset:
    """Load an interaction file into a dense-indexed Dataset.

    Formats:
      tsv            one interaction per line, user<TAB>item[<TAB>timestamp];
                     lines starting with '#' and blank lines are ignored.
      movielens_dat  user::item::rating::timestamp; ratings are binarized.

    Raises DataError on an unreadable file, a malformed line (reported with
    its line number), or a file with no interactions.
    """
    if format not in _PARSERS:
        raise DataError(f"unknown interaction format: {format!r}")
    parse = _PARSERS[format]
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    # (user_index, item_index) -> [timestamp, insertion_position]
    seen: dict[tuple[int, int], int] = {}
    order: list[tuple[int, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            inter = parse(line)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed line: {exc}") from exc
        u = user_map.setdefault(inter.user_id, len(user_map))
        i = item_map.setdefault(inter.item_id, len(item_map))
        key = (u, i)
        if key in seen:
            seen[key] = min(seen[key], inter.timestamp)
        else:
            seen[key] = inter.timestamp
            order.append(key)

    if not order:
        raise DataError(f"{path}: no interactions found")

    interactions = np.array(
        [(u, i, seen[(u, i)]) for u, i in order], dtype=np.int64
    )
    n_items = len(item_map)
    popularity = np.bincount(interactions[:, 1], minlength=n_items).astype(np.int64)
    return Dataset(
        n_users=len(user_map),
        n_items=n_items,
        interactions=interactions,
        item_popularity=popularity,
        item_group=[GROUP_NEUTRAL] * n_items,
        user_index_map=user_map,
        item_index_map=item_map,
    )


def save_interactions(dataset: Dataset, path: str | Path) -> None:
    """Write the canonical internal TSV; reloading it reproduces `dataset`."""
    users = dataset.user_keys()
    items = dataset.item_keys()
    lines = [
        f"{users[u]}\t{items[i]}\t{ts}"
        for u, i, ts in dataset.interactions.tolist()
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_item_groups(
    path: str | Path,
    dataset: Dataset,
    mapping: dict[str, str],
) -> Dataset:
    """Populate item groups from an `item<TAB>raw_attribute` file.

    `mapping` sends raw attribute values (countries, genres, ...) to group
    labels; attributes and items it does not cover stay neutral. When an
    item carries several attribute lines, the first one that maps to a
    non-neutral group wins. Unknown item keys are counted and logged.
    """
    for attr, group in mapping.items():
        if group not in GROUPS:
            raise DataError(f"group mapping for {attr!r} must be one of {GROUPS}")
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    groups = [GROUP_NEUTRAL] * dataset.n_items
    unknown = 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected item<TAB>attribute")
        key, attr = parts
        idx = dataset.item_index_map.get(key)
        if idx is None:
            unknown += 1
            continue
        label = mapping.get(attr, GROUP_NEUTRAL)
        if label != GROUP_NEUTRAL and groups[idx] == GROUP_NEUTRAL:
            groups[idx] = label
    if unknown:
        logger.warning("%d attribute lines referenced unknown items", unknown)
    return dataclasses.replace(dataset, item_group=groups)


def save_item_groups(dataset: Dataset, path: str | Path) -> None:
    """Write item group labels as an `item<TAB>group` file."""
    items = dataset.item_keys()
    lines = [f"{items[i]}\t{g}" for i, g in enumerate(dataset.item_group)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def make_split(dataset: Dataset, seed: int) -> Split:
    """Leave-one-out split by recency with fixed evaluation negatives.

    Users with >= 3 interactions hold out their most recent interaction for
    test and the second most recent for validation; everything else trains.
    Users with fewer interactions are train-only. Per eligible user and
    evaluation stage, 99 non-interacted items are sampled uniformly without
    replacement; users with fewer than 99 candidates get all of them and a
    shortfall flag.
    """
    if dataset.interactions.shape[0] == 0:
        raise DataError("cannot split an empty dataset")

    per_user: dict[int, list[tuple[int, int, int]]] = {}
    for pos, (u, i, ts) in enumerate(dataset.interactions.tolist()):
        per_user.setdefault(u, []).append((ts, pos, i))

    train_rows: list[tuple[int, int, int]] = []
    val_rows: list[tuple[int, int, int]] = []
    test_rows: list[tuple[int, int, int]] = []
    for u in sorted(per_user):
        events = sorted(per_user[u], key=lambda e: (e[0], e[1]))
        if len(events) < 3:
            train_rows.extend((u, i, ts) for ts, _, i in events)
            continue
        *rest, second_last, last = events
        train_rows.extend((u, i, ts) for ts, _, i in rest)
        val_rows.append((u, second_last[2], second_last[0]))
        test_rows.append((u, last[2], last[0]))

    interacted: dict[int, np.ndarray] = {}
    all_items = np.arange(dataset.n_items, dtype=np.int64)
    for u, events in per_user.items():
        interacted[u] = np.unique(np.array([i for _, _, i in events], dtype=np.int64))

    eligible = [row[0] for row in val_rows]
    eval_negatives: dict[str, dict[int, np.ndarray]] = {}
    shortfall: dict[str, list[int]] = {}
    for stage in EVAL_STAGES:
        rng = derived_rng(seed, f"eval-negatives/{stage}")
        negatives: dict[int, np.ndarray] = {}
        short: list[int] = []
        for u in eligible:
            candidates = np.setdiff1d(all_items, interacted[u], assume_unique=True)
            if candidates.size < N_EVAL_NEGATIVES:
                negatives[u] = rng.permutation(candidates)
                short.append(u)
            else:
                negatives[u] = rng.choice(
                    candidates, size=N_EVAL_NEGATIVES, replace=False
                )
        eval_negatives[stage] = negatives
        shortfall[stage] = short

    def to_array(rows: list[tuple[int, int, int]]) -> np.ndarray:
        return np.array(rows, dtype=np.int64).reshape(len(rows), 3)

    return Split(
        train=to_array(train_rows),
        validation=to_array(val_rows),
        test=to_array(test_rows),
        eval_negatives=eval_negatives,
        shortfall=shortfall,
    )


def popularity_deciles(dataset: Dataset) -> np.ndarray:
    """Per-item decile label by ascending log(1 + interaction count).

    Items are ranked by log popularity (ties broken by item index) and cut
    into 10 near-equal bins; label 0 is the least popular tenth. Datasets
    with fewer than 10 items get one bin per item.
    """
    m = dataset.n_items
    scores = np.log1p(dataset.item_popularity.astype(np.float64))
    order = np.argsort(scores, kind="stable")
    n_bins = min(N_DECILES, m)
    labels = np.empty(m, dtype=np.int64)
    for b in range(n_bins):
        lo = b * m // n_bins
        hi = (b + 1) * m // n_bins
        labels[order[lo:hi]] = b
    return labels


def long_tail_items(dataset: Dataset) -> np.ndarray:
    """Boolean mask of long-tail items: the bottom log-popularity decile."""
    return popularity_deciles(dataset) == 0


# --- split persistence -------------------------------------------------

SPLIT_FILES = {
    "train": "train.tsv",
    "validation": "validation.tsv",
    "test": "test.tsv",
}


def _write_rows(path: Path, rows: np.ndarray) -> None:
    lines = [f"{u}\t{i}\t{ts}" for u, i, ts in rows.tolist()]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def _read_rows(path: Path) -> np.ndarray:
    rows = [
        tuple(int(x) for x in line.split("\t"))
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    return np.array(rows, dtype=np.int64).reshape(len(rows), 3)


def save_split(split: Split, out_dir: str | Path) -> None:
    """Write train/validation/test rows and per-stage negatives as TSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stage, fname in SPLIT_FILES.items():
        _write_rows(out / fname, getattr(split, stage))
    for stage in EVAL_STAGES:
        lines = [
            f"{u}\t{'|'.join(str(i) for i in items.tolist())}"
            for u, items in split.eval_negatives[stage].items()
        ]
        (out / f"negatives_{stage}.tsv").write_text(
            "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8"
        )


def save_prepared(dataset: Dataset, split: Split, out_dir: str | Path) -> list[str]:
    """Write the canonical dataset, groups, and split files into a directory.

    Returns the file names written (relative to out_dir).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_interactions(dataset, out / "dataset.tsv")
    save_item_groups(dataset, out / "groups.tsv")
    save_split(split, out)
    return ["dataset.tsv", "groups.tsv"] + list(SPLIT_FILES.values()) + [
        f"negatives_{stage}.tsv" for stage in EVAL_STAGES
    ]


def load_prepared(out_dir: str | Path) -> tuple[Dataset, Split]:
    """Reload a directory written by save_prepared."""
    out = Path(out_dir)
    dataset = load_interactions(out / "dataset.tsv", "tsv")
    groups_path = out / "groups.tsv"
    if groups_path.exists():
        identity = {GROUP_OVER: GROUP_OVER, GROUP_UNDER: GROUP_UNDER}
        dataset = load_item_groups(groups_path, dataset, identity)
    return dataset, load_split(out)


def load_split(out_dir: str | Path) -> Split:
    """Reload a split written by save_split."""
    out = Path(out_dir)
    try:
        parts = {
            stage: _read_rows(out / fname) for stage, fname in SPLIT_FILES.items()
        }
        eval_negatives: dict[str, dict[int, np.ndarray]] = {}
        shortfall: dict[str, list[int]] = {}
        for stage in EVAL_STAGES:
            negatives: dict[int, np.ndarray] = {}
            short: list[int] = []
            text = (out / f"negatives_{stage}.tsv").read_text(encoding="utf-8")
            for line in text.splitlines():
                if not line.strip():
                    continue
                u_str, items_str = line.split("\t")
                items = np.array(
                    [int(x) for x in items_str.split("|")] if items_str else [],
                    dtype=np.int64,
                )
                negatives[int(u_str)] = items
                if items.size < N_EVAL_NEGATIVES:
                    short.append(int(u_str))
            eval_negatives[stage] = negatives
            shortfall[stage] = short
    except OSError as exc:
        raise DataError(f"cannot read split from {out}: {exc}") from exc
    return Split(
        train=parts["train"],
        validation=parts["validation"],
        test=parts["test"],
        eval_negatives=eval_negatives,
        shortfall=shortfall,
    )
