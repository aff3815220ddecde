"""Model parameters and forward pass for MF and prototype-based variants.

The prototype variant represents a user (item) by its cosine similarities
to a bank of learned prototype vectors, optionally keeping only the k
largest similarities per entity (the rest are zeroed, dimension is kept).
Scores are computed with non-optimized einsum throughout: einsum reduces
each output element in a shape-independent order, so batched scoring is
bit-identical to scoring pairs one at a time (BLAS matmul is not).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

VARIANT_MF = "mf"
VARIANT_PROTOMF = "protomf"
VARIANTS = (VARIANT_MF, VARIANT_PROTOMF)

ALL_PROTOTYPES = -1  # FilterSpec sentinel; serialized as -1 in configs/files
NORM_EPS = 1e-12
INIT_STD = 0.1

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FilterSpec:
    """How many of the largest prototype similarities each entity keeps.

    -1 (ALL_PROTOTYPES) keeps every prototype; otherwise 1 <= k <= L.
    """

    k_u: int = ALL_PROTOTYPES
    k_t: int = ALL_PROTOTYPES

    def validate(self, l_u: int, l_t: int) -> None:
        for name, k, l in (("k_u", self.k_u, l_u), ("k_t", self.k_t, l_t)):
            if k != ALL_PROTOTYPES and not 1 <= k <= l:
                raise ValueError(f"{name}={k} must be -1 or in [1, {l}]")

    @property
    def is_identity(self) -> bool:
        return self.k_u == ALL_PROTOTYPES and self.k_t == ALL_PROTOTYPES


@dataclass
class SimilarityVector:
    """Cosine similarities to each prototype plus the retained index set.

    After filtering, positions outside `mask` are exactly zero.
    """

    values: np.ndarray
    mask: frozenset[int]


@dataclass
class ModelParams:
    """Learned parameters for one model variant.

    For the mf variant only the factor matrices are present. For the
    prototype variant, user_map sends a user's similarity vector into the
    item-prototype space and item_map the reverse, so both terms of the
    score are dot products in a shared space.
    """

    variant: str
    user_factors: np.ndarray  # (N, d)
    item_factors: np.ndarray  # (M, d)
    user_prototypes: np.ndarray | None = None  # (L_u, d)
    item_prototypes: np.ndarray | None = None  # (L_t, d)
    user_map: np.ndarray | None = None  # (L_u, L_t)
    item_map: np.ndarray | None = None  # (L_t, L_u)

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    @property
    def d(self) -> int:
        return self.user_factors.shape[1]

    @property
    def l_u(self) -> int:
        return 0 if self.user_prototypes is None else self.user_prototypes.shape[0]

    @property
    def l_t(self) -> int:
        return 0 if self.item_prototypes is None else self.item_prototypes.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by field name (mf: factors only)."""
        out = {
            "user_factors": self.user_factors,
            "item_factors": self.item_factors,
        }
        if self.variant == VARIANT_PROTOMF:
            out.update(
                user_prototypes=self.user_prototypes,
                item_prototypes=self.item_prototypes,
                user_map=self.user_map,
                item_map=self.item_map,
            )
        return out

    def copy(self) -> "ModelParams":
        def dup(a: np.ndarray | None) -> np.ndarray | None:
            return None if a is None else a.copy()

        return ModelParams(
            variant=self.variant,
            user_factors=self.user_factors.copy(),
            item_factors=self.item_factors.copy(),
            user_prototypes=dup(self.user_prototypes),
            item_prototypes=dup(self.item_prototypes),
            user_map=dup(self.user_map),
            item_map=dup(self.item_map),
        )


def init_params(
    variant: str,
    n_users: int,
    n_items: int,
    d: int,
    l_u: int = 0,
    l_t: int = 0,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Draw fresh parameters from a seeded normal with std 0.1.

    Draw order is fixed (factors, prototypes, maps) so a given generator
    state always produces the same model.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    rng = rng or np.random.default_rng(0)
    user_factors = rng.normal(0.0, INIT_STD, size=(n_users, d))
    item_factors = rng.normal(0.0, INIT_STD, size=(n_items, d))
    if variant == VARIANT_MF:
        return ModelParams(variant, user_factors, item_factors)
    if l_u < 1 or l_t < 1:
        raise ValueError("prototype variant needs l_u >= 1 and l_t >= 1")
    return ModelParams(
        variant=variant,
        user_factors=user_factors,
        item_factors=item_factors,
        user_prototypes=rng.normal(0.0, INIT_STD, size=(l_u, d)),
        item_prototypes=rng.normal(0.0, INIT_STD, size=(l_t, d)),
        user_map=rng.normal(0.0, INIT_STD, size=(l_u, l_t)),
        item_map=rng.normal(0.0, INIT_STD, size=(l_t, l_u)),
    )


def row_norms(x: np.ndarray) -> np.ndarray:
    """Euclidean norms along the last axis, einsum-reduced (shape-stable)."""
    return np.sqrt(np.einsum("...j,...j->...", x, x))


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize rows; rows with norm < NORM_EPS become zero rows.

    Returns (normalized, inverse_norms) where inverse_norms is 0 for
    degenerate rows.
    """
    norms = row_norms(x)
    ok = norms >= NORM_EPS
    inv = np.where(ok, 1.0 / np.where(ok, norms, 1.0), 0.0)
    return x * inv[..., None], inv


def cosine_similarities(x: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Cosine similarity of each row of x against each prototype row.

    Degenerate vectors (norm < 1e-12) yield similarity 0 instead of NaN.
    """
    xh, _ = normalize_rows(x)
    ph, _ = normalize_rows(prototypes)
    return np.einsum("...j,lj->...l", xh, ph)


def cosine_embed(x: np.ndarray, prototypes: np.ndarray) -> SimilarityVector:
    """Embed one d-vector as its similarity vector over a prototype bank."""
    x = np.asarray(x, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if x.ndim != 1 or prototypes.ndim != 2 or prototypes.shape[1] != x.shape[0]:
        raise ValueError("expected a d-vector and an (L, d) prototype matrix")
    values = cosine_similarities(x[None, :], prototypes)[0]
    return SimilarityVector(values=values, mask=frozenset(range(len(values))))


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties keep the smaller index.

    Works on the last axis for any leading batch shape.
    """
    order = np.argsort(-values, axis=-1, kind="stable")
    return order[..., :k]


def topk_filter(sim: SimilarityVector, k: int) -> SimilarityVector:
    """Keep the k largest similarities, zeroing the rest. -1 keeps all."""
    length = len(sim.values)
    if k == ALL_PROTOTYPES or k >= length:
        return sim
    if k < 1:
        raise ValueError(f"k must be -1 or >= 1, got {k}")
    idx = topk_indices(sim.values, k)
    filtered = np.zeros_like(sim.values)
    filtered[idx] = sim.values[idx]
    return SimilarityVector(values=filtered, mask=frozenset(int(i) for i in idx))


def topk_mask(values: np.ndarray, k: int) -> np.ndarray | None:
    """0/1 mask of retained positions per row, or None when k keeps all."""
    length = values.shape[-1]
    if k == ALL_PROTOTYPES or k >= length:
        return None
    idx = topk_indices(values, k)
    mask = np.zeros_like(values)
    np.put_along_axis(mask, idx, 1.0, axis=-1)
    return mask


def apply_mask(values: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return values if mask is None else values * mask


def _check_index(idx: int, bound: int, what: str) -> None:
    if not 0 <= idx < bound:
        raise IndexError(f"{what} index {idx} out of range [0, {bound})")


def batch_scores(
    u_index: int,
    item_indices,
    params: ModelParams,
    filter: FilterSpec = FilterSpec(),
) -> np.ndarray:
    """Scores of one user against a list of items.

    Element i is bit-identical to affinity(u_index, item_indices[i], ...):
    both run the same einsum pipeline, whose per-row results do not depend
    on how many rows are scored together.
    """
    items = np.asarray(item_indices, dtype=np.int64).reshape(-1)
    _check_index(u_index, params.n_users, "user")
    if items.size and (items.min() < 0 or items.max() >= params.n_items):
        bad = items[(items < 0) | (items >= params.n_items)][0]
        raise IndexError(f"item index {bad} out of range [0, {params.n_items})")
    if items.size == 0:
        return np.zeros(0, dtype=np.float64)

    if params.variant == VARIANT_MF:
        return np.einsum(
            "j,cj->c", params.user_factors[u_index], params.item_factors[items]
        )

    filter.validate(params.l_u, params.l_t)
    u_sim = cosine_similarities(
        params.user_factors[u_index][None, :], params.user_prototypes
    )[0]
    u_star = apply_mask(u_sim, topk_mask(u_sim, filter.k_u))
    t_sim = cosine_similarities(params.item_factors[items], params.item_prototypes)
    t_star = apply_mask(t_sim, topk_mask(t_sim, filter.k_t))
    u_hat = np.einsum("l,lm->m", u_star, params.user_map)  # (L_t,)
    t_hat = np.einsum("cl,lm->cm", t_star, params.item_map)  # (C, L_u)
    return np.einsum("l,cl->c", u_star, t_hat) + np.einsum("cl,l->c", t_star, u_hat)


def affinity(
    u_index: int,
    t_index: int,
    params: ModelParams,
    filter: FilterSpec = FilterSpec(),
) -> float:
    """Recommendation score for one user-item pair."""
    _check_index(t_index, params.n_items, "item")
    return float(batch_scores(u_index, [t_index], params, filter)[0])


# --- checkpoint I/O -----------------------------------------------------
#
# Checkpoints are .npz archives: one float64 C-order array per parameter
# field, plus a `meta` JSON string holding {version, variant, k_u, k_t}
# and any extra entries (e.g. config_hash). float64 bits survive the
# round trip, so a reloaded model scores identically.


def save_checkpoint(
    params: ModelParams,
    filter: FilterSpec,
    path: str | Path,
    extra_meta: dict | None = None,
) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "variant": params.variant,
        "k_u": filter.k_u,
        "k_t": filter.k_t,
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {k: v for k, v in params.arrays().items()}
    np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, FilterSpec, dict]:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {meta.get('version')!r}"
            )
        variant = meta["variant"]
        params = ModelParams(
            variant=variant,
            user_factors=archive["user_factors"],
            item_factors=archive["item_factors"],
            user_prototypes=archive["user_prototypes"]
            if variant == VARIANT_PROTOMF
            else None,
            item_prototypes=archive["item_prototypes"]
            if variant == VARIANT_PROTOMF
            else None,
            user_map=archive["user_map"] if variant == VARIANT_PROTOMF else None,
            item_map=archive["item_map"] if variant == VARIANT_PROTOMF else None,
        )
    return params, FilterSpec(k_u=meta["k_u"], k_t=meta["k_t"]), meta
