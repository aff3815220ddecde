"""Training: sampled-softmax ranking loss, analytic gradients, regularizer.

All gradients are derived by hand and checked against central finite
differences in the test suite. The top-k filter contributes an exact
subgradient: masked similarity entries pass zero gradient, and the mask is
recomputed on every forward pass. The prototype-spreading penalty is the
squared Frobenius norm of the row-normalized prototype Gram matrix; its
gradient includes the row-normalization Jacobian.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Split
from .evaluation import hit_ratio, ndcg, rank_all
from .model import (
    VARIANT_MF,
    VARIANT_PROTOMF,
    VARIANTS,
    FilterSpec,
    ModelParams,
    apply_mask,
    batch_scores,
    init_params,
    normalize_rows,
    topk_mask,
)
from .seeding import derived_int_seed, derived_rng

logger = logging.getLogger(__name__)


class NumericalError(Exception):
    """Non-finite values encountered where finite ones are required."""


class TrainingDiverged(NumericalError):
    """Loss became NaN/Inf during training."""

    def __init__(self, epoch: int, batch_index: int):
        super().__init__(f"loss diverged at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the data itself."""

    variant: str = VARIANT_PROTOMF
    d: int = 32
    l_u: int = 16
    l_t: int = 16
    filter: FilterSpec = field(default_factory=FilterSpec)
    lambda_u: float = 0.0
    lambda_t: float = 0.0
    n_negatives_train: int = 10
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 128
    weight_decay: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.lambda_u < 0 or self.lambda_t < 0:
            raise ValueError("lambda_u and lambda_t must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.n_negatives_train < 1:
            raise ValueError("batch_size and n_negatives_train must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.variant == VARIANT_PROTOMF:
            if self.l_u < 1 or self.l_t < 1:
                raise ValueError("prototype counts must be >= 1")
            self.filter.validate(self.l_u, self.l_t)


@dataclass(frozen=True)
class LossBreakdown:
    """Loss split into the ranking term and the two prototype penalties.

    total is always l_original + lambda_u * penalty_u + lambda_t * penalty_t,
    computed literally in that form.
    """

    l_original: float
    penalty_u: float
    penalty_t: float
    total: float

    @classmethod
    def build(
        cls, l_original: float, penalty_u: float, penalty_t: float,
        lambda_u: float, lambda_t: float,
    ) -> "LossBreakdown":
        total = l_original + lambda_u * penalty_u + lambda_t * penalty_t
        return cls(l_original, penalty_u, penalty_t, total)


@dataclass
class EpochStats:
    epoch: int
    loss: LossBreakdown  # batch-size-weighted means over the epoch
    val_hit_ratio_10: float
    val_ndcg_10: float
    # penalties of the parameters as they stand after the epoch's updates;
    # diagnostics on a checkpoint reproduce these exactly
    end_penalty_u: float = 0.0
    end_penalty_t: float = 0.0


@dataclass
class TrainResult:
    params: ModelParams
    filter: FilterSpec
    history: list[EpochStats]
    best_epoch: int


# --- prototype-spreading penalty ----------------------------------------


def _normalized_gram(prototypes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gram matrix of row-normalized prototypes.

    Degenerate rows (norm < 1e-12) contribute a unit diagonal entry and
    zero off-diagonals. The diagonal is pinned to exactly 1 for every row:
    cos(p, p) = 1 by definition, and the pinned entries carry no gradient.
    """
    p = np.asarray(prototypes, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValueError("expected an (L, d) matrix with L >= 1")
    ph, inv = normalize_rows(p)
    gram = np.einsum("id,jd->ij", ph, ph)
    degenerate = inv == 0.0
    if degenerate.any():
        gram[degenerate, :] = 0.0
        gram[:, degenerate] = 0.0
    np.fill_diagonal(gram, 1.0)
    return gram, ph, inv


def regularizer_penalty(prototypes: np.ndarray) -> float:
    """Squared Frobenius norm of the normalized prototype Gram matrix.

    Equals the sum of squared cosines over all prototype pairs, so it is
    at least L, with equality exactly when the rows are orthogonal.
    """
    gram, _, _ = _normalized_gram(prototypes)
    return float(np.einsum("ij,ij->", gram, gram))


def regularizer_gradient(prototypes: np.ndarray) -> np.ndarray:
    """Gradient of regularizer_penalty with respect to the raw prototypes.

    d/dPh of ||G||_F^2 is 4 G Ph; the component along each normalized row
    is then projected out and the result scaled by 1/||p_i|| (the Jacobian
    of row normalization). Degenerate rows get zero gradient.
    """
    gram, ph, inv = _normalized_gram(prototypes)
    r = 4.0 * np.einsum("ij,jd->id", gram, ph)
    along = np.einsum("id,id->i", r, ph)
    return (r - along[:, None] * ph) * inv[:, None]


# --- losses and gradients ------------------------------------------------


def sampled_softmax_loss(
    u_index: int,
    pos_item: int,
    neg_items,
    params: ModelParams,
    filter: FilterSpec = FilterSpec(),
) -> float:
    """Softmax cross-entropy of the positive against sampled negatives.

    Computed with max-subtraction so large scores cannot overflow.
    """
    neg_items = list(neg_items)
    if not neg_items:
        raise ValueError("neg_items must be non-empty")
    scores = batch_scores(u_index, [pos_item] + neg_items, params, filter)
    shifted = scores - scores.max()
    return float(np.log(np.sum(np.exp(shifted))) - shifted[0])


def _as_batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    """Batch of (user, pos, negs) triples -> (users, candidate matrix).

    Column 0 of the candidate matrix is the positive item. Every example
    must carry the same number of negatives (training always does).
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    n_neg = len(batch[0][2])
    if n_neg == 0 or any(len(negs) != n_neg for _, _, negs in batch):
        raise ValueError("every example needs the same non-zero negative count")
    users = np.array([u for u, _, _ in batch], dtype=np.int64)
    items = np.array(
        [[pos, *negs] for _, pos, negs in batch], dtype=np.int64
    )
    return users, items


def _softmax_loss_and_dscores(scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (positive in column 0) and gradient wrt scores."""
    b = scores.shape[0]
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = np.sum(exp, axis=1)
    losses = np.log(denom) - shifted[:, 0]
    l_original = float(np.sum(losses) / b)
    dscores = exp / denom[:, None]
    dscores[:, 0] -= 1.0
    dscores /= b
    return l_original, dscores


# The training kernel uses BLAS matmul for the heavy contractions: batch
# shapes are fixed given (config, data, seed), so runs stay bit-reproducible
# even though matmul results depend on operand shape. The scoring path in
# model.py keeps shape-stable einsum instead.


def _cosine_forward(x: np.ndarray, prototypes: np.ndarray):
    xh, inv_x = normalize_rows(x)
    ph, inv_p = normalize_rows(prototypes)
    sims = xh @ ph.T
    return sims, (xh, ph, inv_x, inv_p)


def _cosine_backward(dsims: np.ndarray, sims: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through cosine similarity to the inputs and prototypes."""
    xh, ph, inv_x, inv_p = cache
    row_mix = np.einsum("bl,bl->b", dsims, sims)
    dx = (dsims @ ph - row_mix[:, None] * xh) * inv_x[:, None]
    col_mix = np.einsum("bl,bl->l", dsims, sims)
    dp = (dsims.T @ xh - col_mix[:, None] * ph) * inv_p[:, None]
    return dx, dp


def gradients(
    batch,
    params: ModelParams,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], LossBreakdown]:
    """Analytic gradients of the total loss over a batch.

    batch is a list of (user_index, positive_item, negative_items). Returns
    one gradient array per trainable parameter plus the loss breakdown.
    Raises NumericalError naming the parameter block if any gradient is
    non-finite.
    """
    users, items = _as_batch_arrays(batch)
    b, c = items.shape
    flat_items = items.reshape(-1)

    if params.variant == VARIANT_MF:
        xu = params.user_factors[users]
        xt = params.item_factors[flat_items].reshape(b, c, -1)
        scores = np.einsum("bj,bcj->bc", xu, xt)
        l_original, g = _softmax_loss_and_dscores(scores)
        grads = {
            "user_factors": np.zeros_like(params.user_factors),
            "item_factors": np.zeros_like(params.item_factors),
        }
        np.add.at(grads["user_factors"], users, np.einsum("bc,bcj->bj", g, xt))
        dxt = g[:, :, None] * xu[:, None, :]
        np.add.at(grads["item_factors"], flat_items, dxt.reshape(b * c, -1))
        breakdown = LossBreakdown.build(l_original, 0.0, 0.0, 0.0, 0.0)
        _check_finite(grads)
        return grads, breakdown

    filt = config.filter
    filt.validate(params.l_u, params.l_t)

    xu = params.user_factors[users]
    xt = params.item_factors[flat_items]
    u_sims, u_cache = _cosine_forward(xu, params.user_prototypes)
    t_sims, t_cache = _cosine_forward(xt, params.item_prototypes)
    u_mask = topk_mask(u_sims, filt.k_u)
    t_mask = topk_mask(t_sims, filt.k_t)
    u_star = apply_mask(u_sims, u_mask)  # (B, L_u)
    t_star = apply_mask(t_sims, t_mask)  # (B*C, L_t)

    u_hat = u_star @ params.user_map  # (B, L_t)
    t_hat = t_star @ params.item_map  # (B*C, L_u)
    t_star3 = t_star.reshape(b, c, -1)
    t_hat3 = t_hat.reshape(b, c, -1)
    scores = np.einsum("bl,bcl->bc", u_star, t_hat3) + np.einsum(
        "bcl,bl->bc", t_star3, u_hat
    )
    l_original, g = _softmax_loss_and_dscores(scores)

    # score = <u*, t_hat> + <t*, u_hat>
    du_star = np.einsum("bc,bcl->bl", g, t_hat3)
    dt_hat = (g[:, :, None] * u_star[:, None, :]).reshape(b * c, -1)
    du_hat = np.einsum("bc,bcl->bl", g, t_star3)
    dt_star = (g[:, :, None] * u_hat[:, None, :]).reshape(b * c, -1)

    # through the cross-space maps
    d_user_map = u_star.T @ du_hat
    du_star += du_hat @ params.user_map.T
    d_item_map = t_star.T @ dt_hat
    dt_star += dt_hat @ params.item_map.T

    # through the top-k mask (exact subgradient: zeros where masked)
    du_sims = apply_mask(du_star, u_mask)
    dt_sims = apply_mask(dt_star, t_mask)

    dxu, d_user_protos = _cosine_backward(du_sims, u_sims, u_cache)
    dxt, d_item_protos = _cosine_backward(dt_sims, t_sims, t_cache)

    grads = {
        "user_factors": np.zeros_like(params.user_factors),
        "item_factors": np.zeros_like(params.item_factors),
        "user_prototypes": d_user_protos,
        "item_prototypes": d_item_protos,
        "user_map": d_user_map,
        "item_map": d_item_map,
    }
    np.add.at(grads["user_factors"], users, dxu)
    np.add.at(grads["item_factors"], flat_items, dxt)

    penalty_u = regularizer_penalty(params.user_prototypes)
    penalty_t = regularizer_penalty(params.item_prototypes)
    if config.lambda_u > 0.0:
        grads["user_prototypes"] = grads["user_prototypes"] + (
            config.lambda_u * regularizer_gradient(params.user_prototypes)
        )
    if config.lambda_t > 0.0:
        grads["item_prototypes"] = grads["item_prototypes"] + (
            config.lambda_t * regularizer_gradient(params.item_prototypes)
        )
    breakdown = LossBreakdown.build(
        l_original, penalty_u, penalty_t, config.lambda_u, config.lambda_t
    )
    _check_finite(grads)
    return grads, breakdown


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {name!r}")


# --- optimizer ------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# weight decay is decoupled from the loss gradient and applied to the
# factor matrices only; the prototype penalty already constrains the rest
DECAYED_BLOCKS = ("user_factors", "item_factors")


class Adam:
    """Per-parameter adaptive first-order optimizer with bias correction."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], learning_rate: float,
                 weight_decay: float = 0.0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros(s) for k, s in shapes.items()}
        self._v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - ADAM_BETA1**t
        bc2 = 1.0 - ADAM_BETA2**t
        for name, value in arrays.items():
            g = grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            if self.weight_decay > 0.0 and name in DECAYED_BLOCKS:
                update = update + self.weight_decay * value
            value -= self.learning_rate * update


# --- negative sampling ----------------------------------------------------


def _train_item_sets(split: Split, n_users: int) -> list[set[int]]:
    sets: list[set[int]] = [set() for _ in range(n_users)]
    for u, i, _ in split.train.tolist():
        sets[u].add(i)
    return sets

_MAX_RESAMPLE_ROUNDS = 10_000


def _sample_negatives(
    rng: np.random.Generator,
    users: np.ndarray,
    n_items: int,
    n_neg: int,
    train_sets: list[set[int]],
) -> np.ndarray:
    """Uniform negatives excluding each user's train items (with redraws)."""
    draws = rng.integers(0, n_items, size=(users.size, n_neg), dtype=np.int64)
    flat = draws.reshape(-1)
    rep_users = np.repeat(users, n_neg)
    bad = np.fromiter(
        (item in train_sets[u] for u, item in zip(rep_users, flat)),
        dtype=bool,
        count=flat.size,
    )
    rounds = 0
    while bad.any():
        rounds += 1
        if rounds > _MAX_RESAMPLE_ROUNDS:
            raise NumericalError("negative sampling failed to converge")
        idx = np.nonzero(bad)[0]
        flat[idx] = rng.integers(0, n_items, size=idx.size, dtype=np.int64)
        bad[idx] = [flat[j] in train_sets[rep_users[j]] for j in idx]
    return flat.reshape(users.size, n_neg)


# --- training loop --------------------------------------------------------


def train(dataset: Dataset, split: Split, config: TrainConfig) -> TrainResult:
    """Optimize model parameters on the train split.

    Fully deterministic given (config, data): initialization, shuffling and
    negative sampling each use their own stream derived from config.seed.
    The checkpoint with the best validation HitRatio@10 (evaluated every
    epoch, earlier epoch wins ties) is returned.
    """
    config.validate()
    if config.variant == VARIANT_PROTOMF and (
        (config.l_u > config.d and config.lambda_u > 0.0)
        or (config.l_t > config.d and config.lambda_t > 0.0)
    ):
        logger.warning(
            "more prototypes than dimensions: orthogonality penalty "
            "cannot reach its minimum"
        )

    rng_init = derived_rng(config.seed, "init")
    params = init_params(
        config.variant,
        dataset.n_users,
        dataset.n_items,
        config.d,
        config.l_u,
        config.l_t,
        rng=rng_init,
    )
    arrays = params.arrays()
    optimizer = Adam(
        {k: v.shape for k, v in arrays.items()},
        learning_rate=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    train_sets = _train_item_sets(split, dataset.n_users)
    if any(len(s) >= dataset.n_items for s in train_sets if s):
        raise NumericalError("a user interacted with every item; cannot sample negatives")

    rng_shuffle = derived_rng(config.seed, "shuffle")
    rng_negatives = derived_rng(config.seed, "negatives")
    positives = split.train
    n_train = positives.shape[0]

    history: list[EpochStats] = []
    best_params = params.copy()
    best_hit = -1.0
    best_epoch = 0

    for epoch in range(1, config.epochs + 1):
        order = rng_shuffle.permutation(n_train)
        epoch_loss_sum = np.zeros(3)  # l_original, penalty_u, penalty_t
        epoch_examples = 0
        for batch_index, start in enumerate(range(0, n_train, config.batch_size)):
            rows = positives[order[start : start + config.batch_size]]
            users = rows[:, 0]
            negs = _sample_negatives(
                rng_negatives,
                users,
                dataset.n_items,
                config.n_negatives_train,
                train_sets,
            )
            batch = [
                (int(u), int(i), negs[j].tolist())
                for j, (u, i, _) in enumerate(rows.tolist())
            ]
            try:
                grads, breakdown = gradients(batch, params, config)
            except NumericalError as exc:
                raise TrainingDiverged(epoch, batch_index) from exc
            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(epoch, batch_index)
            optimizer.step(arrays, grads)
            epoch_loss_sum += len(batch) * np.array(
                [breakdown.l_original, breakdown.penalty_u, breakdown.penalty_t]
            )
            epoch_examples += len(batch)

        mean_l, mean_pu, mean_pt = (epoch_loss_sum / epoch_examples).tolist()
        epoch_loss = LossBreakdown.build(
            mean_l, mean_pu, mean_pt, config.lambda_u, config.lambda_t
        )
        records = rank_all(params, config.filter, split, "validation")
        val_hit = hit_ratio(records)
        val_ndcg = ndcg(records)
        end_pu = end_pt = 0.0
        if config.variant == VARIANT_PROTOMF:
            end_pu = regularizer_penalty(params.user_prototypes)
            end_pt = regularizer_penalty(params.item_prototypes)
        history.append(
            EpochStats(epoch, epoch_loss, val_hit, val_ndcg, end_pu, end_pt)
        )
        logger.info(
            "epoch %d: loss %.5f (rank %.5f, pen_u %.3f, pen_t %.3f), "
            "val hit@10 %.4f ndcg@10 %.4f",
            epoch, epoch_loss.total, epoch_loss.l_original,
            epoch_loss.penalty_u, epoch_loss.penalty_t, val_hit, val_ndcg,
        )
        if val_hit > best_hit:
            best_hit = val_hit
            best_epoch = epoch
            best_params = params.copy()

    return TrainResult(
        params=best_params,
        filter=config.filter,
        history=history,
        best_epoch=best_epoch,
    )


# --- hyperparameter sweep --------------------------------------------------


@dataclass
class SweepRow:
    config: TrainConfig
    val_hit_ratio_10: float
    val_ndcg_10: float
    best_epoch: int
    error: str | None = None


def sweep(
    configs: list[TrainConfig],
    dataset: Dataset,
    split: Split,
    master_seed: int = 0,
) -> list[SweepRow]:
    """Train each config on shared data; rows sorted by NDCG@10 descending.

    Each cell gets its own derived seed. A failed cell is recorded with its
    error and sorts last; the sweep continues.
    """
    if not configs:
        raise ValueError("sweep needs at least one config")
    rows: list[SweepRow] = []
    for idx, cfg in enumerate(configs):
        run_cfg = dataclasses.replace(
            cfg, seed=derived_int_seed(master_seed, f"sweep/{idx}")
        )
        try:
            result = train(dataset, split, run_cfg)
            best = result.history[result.best_epoch - 1]
            rows.append(
                SweepRow(run_cfg, best.val_hit_ratio_10, best.val_ndcg_10,
                         result.best_epoch)
            )
        except Exception as exc:  # noqa: BLE001 - isolate cell failures
            logger.error("sweep cell %d failed: %s", idx, exc)
            rows.append(SweepRow(run_cfg, float("nan"), float("nan"), 0, str(exc)))
    rows.sort(
        key=lambda r: (r.error is not None, -(r.val_ndcg_10 if r.error is None else 0.0))
    )
    return rows
