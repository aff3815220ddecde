"""Acceptance suite: one test per criterion, printing one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -s` to see the per-criterion lines.
The synthetic directional experiment (criteria 5 and 6) trains 19 small
models and takes a few minutes; everything else is fast.
"""

import dataclasses
import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from protofair.cli import main as cli_main
from protofair.data import load_interactions, make_split, popularity_deciles
from protofair.diagnostics import distance_profile, gram_stats
from protofair.evaluation import (
    RankRecord,
    evaluate,
    group_mean_ranks,
    hit_ratio,
    long_tail_metrics,
    ndcg,
)
from protofair.model import FilterSpec, batch_scores, init_params
from protofair.train import (
    Adam,
    TrainConfig,
    gradients,
    regularizer_gradient,
    regularizer_penalty,
    sampled_softmax_loss,
    train,
)
from synth import zipf_dataset, zipf_interactions_tsv


def report(criterion: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"[acceptance] criterion {criterion}: {status}  {detail}")


# --- criterion 1: gradient oracle ------------------------------------------


def scalar_total_loss(params, batch, config):
    value = sum(
        sampled_softmax_loss(u, pos, negs, params, config.filter)
        for u, pos, negs in batch
    ) / len(batch)
    if params.variant == "protomf":
        value += config.lambda_u * regularizer_penalty(params.user_prototypes)
        value += config.lambda_t * regularizer_penalty(params.item_prototypes)
    return value


def test_criterion_1_gradients_match_finite_differences():
    """Analytic gradients vs central differences, rel err < 1e-4, < 10 s.

    Instances have 90 trainable coordinates each; three instances per
    (k, lambda) configuration give 270 checked coordinates, all of them.
    Near-zero coordinates use a 1e-3 denominator floor, which holds them
    to a 1e-7 absolute tolerance (pure relative error is undefined at 0).
    """
    start = time.monotonic()
    step = 1e-5
    n, m, d, l = 6, 6, 4, 3
    worst = 0.0
    checked = {}
    for k in (-1, 2):
        for lam in (0.0, 0.1):
            count = 0
            for seed in (11, 12, 13):
                rng = np.random.default_rng(seed)
                params = init_params("protomf", n, m, d, l, l, rng)
                config = TrainConfig(
                    variant="protomf", d=d, l_u=l, l_t=l,
                    filter=FilterSpec(k_u=k, k_t=k),
                    lambda_u=lam, lambda_t=lam, seed=0,
                )
                batch = []
                for _ in range(5):
                    u = int(rng.integers(0, n))
                    pos = int(rng.integers(0, m))
                    negs = [int(x) for x in rng.choice(m, size=3, replace=False)]
                    batch.append((u, pos, negs))
                grads, _ = gradients(batch, params, config)
                for name, arr in params.arrays().items():
                    analytic = grads[name]
                    for idx in np.ndindex(*arr.shape):
                        orig = arr[idx]
                        arr[idx] = orig + step
                        plus = scalar_total_loss(params, batch, config)
                        arr[idx] = orig - step
                        minus = scalar_total_loss(params, batch, config)
                        arr[idx] = orig
                        fd = (plus - minus) / (2 * step)
                        err = abs(analytic[idx] - fd) / max(
                            abs(analytic[idx]), abs(fd), 1e-3
                        )
                        worst = max(worst, err)
                        count += 1
            checked[(k, lam)] = count
    elapsed = time.monotonic() - start
    ok = worst < 1e-4 and elapsed < 10.0 and all(c >= 200 for c in checked.values())
    report("1 (gradient oracle)", ok,
           f"worst rel err {worst:.2e}, {min(checked.values())} coords/config, "
           f"{elapsed:.1f}s")
    assert all(c >= 200 for c in checked.values())
    assert worst < 1e-4
    assert elapsed < 10.0


# --- criterion 2: regularizer geometry --------------------------------------


def test_criterion_2_regularizer_geometry():
    start = time.monotonic()
    ok_a = all(
        regularizer_penalty(np.eye(l, d)) == float(l)
        for l, d in [(2, 2), (3, 5), (8, 16)]
    )
    ok_b = all(
        regularizer_penalty(np.tile(np.array([2.0, 0.0, 0.0]), (l, 1)))
        == float(l * l)
        for l in (2, 4, 8)
    )

    rng = np.random.default_rng(7)
    protos = rng.normal(0, 0.1, size=(8, 16))
    optimizer = Adam({"p": protos.shape}, learning_rate=0.01)
    for _ in range(2000):
        optimizer.step({"p": protos}, {"p": regularizer_gradient(protos)})
    max_off = gram_stats(protos).max_abs_offdiag
    elapsed = time.monotonic() - start
    ok_c = max_off < 1e-3 and elapsed < 5.0
    ok = ok_a and ok_b and ok_c
    report("2 (regularizer geometry)", ok,
           f"orthonormal exact: {ok_a}, duplicated exact: {ok_b}, "
           f"max offdiag {max_off:.1e} in {elapsed:.1f}s")
    assert ok_a and ok_b
    assert max_off < 1e-3
    assert elapsed < 5.0


# --- criterion 3: baseline equivalence ---------------------------------------


def test_criterion_3_baseline_equivalence(small_zipf):
    dataset, split = small_zipf
    base = TrainConfig(
        variant="protomf", d=8, l_u=5, l_t=5, epochs=3, batch_size=32,
        learning_rate=3e-3, n_negatives_train=4, seed=321,
        lambda_u=0.0, lambda_t=0.0,
    )
    neutral = dataclasses.replace(base, filter=FilterSpec(k_u=5, k_t=5))
    plain = train(dataset, split, base)
    masked = train(dataset, split, neutral)
    params_equal = all(
        np.array_equal(arr, masked.params.arrays()[name])
        for name, arr in plain.params.arrays().items()
    )
    items = list(range(dataset.n_items))
    scores_equal = all(
        np.array_equal(
            batch_scores(u, items, plain.params, base.filter),
            batch_scores(u, items, masked.params, neutral.filter),
        )
        for u in range(dataset.n_users)
    )
    ok = params_equal and scores_equal
    report("3 (baseline equivalence)", ok,
           f"params bit-identical: {params_equal}, scores bit-identical: "
           f"{scores_equal}")
    assert params_equal
    assert scores_equal


# --- criterion 4: metric oracles ---------------------------------------------


def brute_hit_ratio(ranks, cutoff=10):
    hits = 0
    for r in ranks:
        if r <= cutoff:
            hits += 1
    return hits / len(ranks)


def brute_ndcg(ranks, cutoff=10):
    total = 0.0
    for r in ranks:
        gain = 0.0
        if r <= cutoff:
            dcg = 1.0 / math.log2(r + 1)
            idcg = 1.0  # one relevant item
            gain = dcg / idcg
        total += gain
    return total / len(ranks)


def brute_group_means(records, groups):
    sums = {"under": 0, "over": 0}
    counts = {"under": 0, "over": 0}
    for rec in records:
        g = groups[rec.positive_item]
        if g in sums:
            sums[g] += rec.rank
            counts[g] += 1
    out = {}
    for g in sums:
        out[g] = sums[g] / counts[g] if counts[g] else None
    return out["under"], out["over"]


def brute_decile_means(records, deciles):
    sums = [0] * 10
    counts = [0] * 10
    for rec in records:
        b = int(deciles[rec.positive_item])
        sums[b] += rec.rank
        counts[b] += 1
    return [s / c if c else None for s, c in zip(sums, counts)]


def brute_long_tail(records, tail_mask):
    slots = 0
    tail_rank_sum = 0
    tail_positives = 0
    for rec in records:
        for item in rec.top10:
            if tail_mask[item]:
                slots += 1
        if tail_mask[rec.positive_item]:
            tail_rank_sum += rec.rank
            tail_positives += 1
    visibility = slots / (10 * len(records))
    mean_rank = tail_rank_sum / tail_positives if tail_positives else None
    return visibility, mean_rank


def test_criterion_4_metric_oracles(tmp_path):
    """Exact agreement with brute force over all rank permutations.

    The instance has 12 candidates; every permutation of 1..5 record ranks
    drawn from {1..12} is checked (108,384 cases), plus repeated-rank
    tuples up to length 3 for tie coverage.
    """
    # 12 items with distinct popularity; bottom decile = 1 long-tail item
    lines = []
    for item in range(12):
        for k in range(item + 1):
            lines.append(f"u{k}\ti{item}\t0")
    data_file = tmp_path / "oracle.tsv"
    data_file.write_text("\n".join(lines) + "\n", encoding="utf-8")
    dataset = load_interactions(data_file, "tsv")
    groups = ["neutral"] * 12
    under_items = [dataset.item_index_map["i0"], dataset.item_index_map["i1"]]
    over_items = [dataset.item_index_map["i10"], dataset.item_index_map["i11"]]
    for i in under_items:
        groups[i] = "under"
    for i in over_items:
        groups[i] = "over"
    dataset = dataclasses.replace(dataset, item_group=groups)
    deciles = popularity_deciles(dataset)
    tail_mask = deciles == 0

    positives = [under_items[0], over_items[0], 5, under_items[1], over_items[1]]
    top10s = [
        [int(i) for i in np.roll(np.arange(12), shift)[:10]]
        for shift in range(5)
    ]

    def records_for(ranks):
        return [
            RankRecord(i, positives[i], r, top10s[i])
            for i, r in enumerate(ranks)
        ]

    cases = 0
    rank_pool = range(1, 13)
    tuples = itertools.chain(
        *(itertools.permutations(rank_pool, n) for n in range(1, 6)),
        *(itertools.product(rank_pool, repeat=n) for n in range(1, 4)),
    )
    for ranks in tuples:
        records = records_for(ranks)
        assert hit_ratio(records) == brute_hit_ratio(ranks)
        assert ndcg(records) == brute_ndcg(ranks)
        mean_under, mean_over, per_decile = group_mean_ranks(records, dataset)
        b_under, b_over = brute_group_means(records, groups)
        assert mean_under == b_under
        assert mean_over == b_over
        assert per_decile == brute_decile_means(records, deciles)
        vis, lt_rank = long_tail_metrics(records, dataset)
        b_vis, b_rank = brute_long_tail(records, tail_mask)
        assert vis == b_vis
        assert lt_rank == b_rank
        cases += 1
    report("4 (metric oracles)", True, f"{cases} exhaustive cases, all exact")


# --- criteria 5 and 6: synthetic directional experiment ----------------------

GRID_SEED = 1000
COMPARISON_SEEDS = (2000, 2001, 2002, 2003, 2004)
STRUCTURAL_SEED = 2001  # criterion 6 checkpoint


@pytest.fixture(scope="module")
def synthetic_experiment(tmp_path_factory):
    """Grid-tuned combined model vs baseline across five seeds.

    The base configuration was fixed once (it is not tuned against the
    assertions): 500x300 Zipf data, 32-dim factors, 12 prototypes per
    side. The combined model tunes (k_t, lambda_t) over a 3x3 grid on a
    held-aside seed by validation NDCG@10, then both models train on five
    fresh seeds.
    """
    tmp = tmp_path_factory.mktemp("synthetic")
    dataset = zipf_dataset(tmp, n_users=500, n_items=300, seed=101,
                           exponent=0.6, min_per_user=15, max_per_user=30,
                           label_n=30)
    split = make_split(dataset, seed=7)
    base = TrainConfig(
        variant="protomf", d=32, l_u=12, l_t=12, epochs=20, batch_size=128,
        learning_rate=1e-3, n_negatives_train=10, seed=0,
    )

    def run(config, seed):
        config = dataclasses.replace(config, seed=seed)
        result = train(dataset, split, config)
        test_report, _ = evaluate(result.params, result.filter, split,
                                  dataset, "test")
        val_report, _ = evaluate(result.params, result.filter, split,
                                 dataset, "validation")
        profile = distance_profile(result.params, dataset, [1])
        return result, test_report, val_report, profile

    best_ndcg, best_config = -1.0, None
    for k_t in (3, 6, 9):
        for lambda_t in (0.01, 0.1, 1.0):
            config = dataclasses.replace(
                base, filter=FilterSpec(k_t=k_t), lambda_t=lambda_t
            )
            _, _, val_report, _ = run(config, GRID_SEED)
            if val_report.ndcg_10 > best_ndcg:
                best_ndcg, best_config = val_report.ndcg_10, config

    rows = []
    structural = {}
    for seed in COMPARISON_SEEDS:
        b_result, b_test, b_val, b_profile = run(base, seed)
        c_result, c_test, c_val, c_profile = run(best_config, seed)
        rows.append(
            dict(
                seed=seed,
                base_gap=b_test.rank_gap, comb_gap=c_test.rank_gap,
                base_vis=b_test.lt_visibility, comb_vis=c_test.lt_visibility,
                base_ndcg=b_val.ndcg_10, comb_ndcg=c_val.ndcg_10,
                base_profile=b_profile, comb_profile=c_profile,
            )
        )
        if seed == STRUCTURAL_SEED:
            structural = dict(base_profile=b_profile, comb_profile=c_profile)
    return dict(
        rows=rows, best_config=best_config, dataset=dataset, split=split,
        structural=structural,
    )


def test_criterion_5_directional_fairness(synthetic_experiment):
    rows = synthetic_experiment["rows"]
    best = synthetic_experiment["best_config"]
    med = lambda key: float(np.median([r[key] for r in rows]))

    gap_base, gap_comb = med("base_gap"), med("comb_gap")
    vis_base, vis_comb = med("base_vis"), med("comb_vis")
    ndcg_base, ndcg_comb = med("base_ndcg"), med("comb_ndcg")

    gap_ok = gap_comb < gap_base
    vis_ok = vis_comb >= vis_base
    ndcg_ok = ndcg_comb >= 0.95 * ndcg_base
    combined_is_real = best.filter.k_t != -1 and best.lambda_t > 0.0
    ok = gap_ok and vis_ok and ndcg_ok and combined_is_real
    report(
        "5 (directional fairness)", ok,
        f"median gap {gap_base:.2f} -> {gap_comb:.2f}, "
        f"median lt_visibility {vis_base:.4f} -> {vis_comb:.4f}, "
        f"median val NDCG@10 {ndcg_base:.4f} -> {ndcg_comb:.4f}, "
        f"tuned (k_t={best.filter.k_t}, lambda_t={best.lambda_t})",
    )
    assert combined_is_real
    assert gap_ok, f"median rank gap did not shrink: {gap_base} -> {gap_comb}"
    assert vis_ok, f"median lt_visibility decreased: {vis_base} -> {vis_comb}"
    assert ndcg_ok, f"combined NDCG {ndcg_comb} below 95% of {ndcg_base}"


def test_criterion_6_distance_profile_structure(synthetic_experiment):
    structural = synthetic_experiment["structural"]
    base_profile = structural["base_profile"]
    comb_profile = structural["comb_profile"]

    base_bottom = base_profile.mean_distance[0, 0]
    base_top = base_profile.mean_distance[-1, 0]
    comb_bottom = comb_profile.mean_distance[0, 0]
    comb_top = comb_profile.mean_distance[-1, 0]

    direction_ok = base_top <= base_bottom
    base_gap = base_bottom - base_top
    comb_gap = comb_bottom - comb_top
    shrink_ok = abs(comb_gap) < abs(base_gap)
    ok = direction_ok and shrink_ok
    report(
        "6 (distance profile structure)", ok,
        f"baseline k=1 distance top {base_top:.4f} <= bottom "
        f"{base_bottom:.4f}; decile gap {base_gap:.4f} -> {comb_gap:.4f}",
    )
    assert direction_ok, (
        f"popular items not closer to prototypes: top {base_top} vs "
        f"bottom {base_bottom}"
    )
    assert shrink_ok, f"decile gap did not shrink: {base_gap} -> {comb_gap}"


# --- criterion 7: end-to-end determinism -------------------------------------


def test_criterion_7_end_to_end_determinism(tmp_path):
    interactions = tmp_path / "interactions.tsv"
    interactions.write_text(
        zipf_interactions_tsv(60, 40, seed=19, exponent=0.8,
                              min_per_user=6, max_per_user=12),
        encoding="utf-8",
    )
    config = tmp_path / "run.yaml"
    config.write_text(
        yaml.safe_dump(
            {
                "seed": 31,
                "data": {"interactions": str(interactions), "format": "tsv"},
                "model": {
                    "variant": "protomf", "latent_dim": 8,
                    "user_prototypes": 4, "item_prototypes": 4,
                },
                "train": {
                    "epochs": 3, "batch_size": 32,
                    "learning_rate": 0.003, "negatives": 4,
                },
            }
        ),
        encoding="utf-8",
    )

    reports = []
    for tag in ("first", "second"):
        root = tmp_path / tag
        assert cli_main(["prepare", "--config", str(config),
                         "--out", str(root / "prep")]) == 0
        assert cli_main(["train", "--config", str(config),
                         "--split-dir", str(root / "prep"),
                         "--out", str(root / "run")]) == 0
        assert cli_main(["evaluate",
                         "--checkpoint", str(root / "run" / "checkpoint.npz"),
                         "--split-dir", str(root / "prep"),
                         "--out", str(root / "eval")]) == 0
        reports.append((root / "eval" / "report.json").read_bytes())

    ok = reports[0] == reports[1]
    report("7 (end-to-end determinism)", ok,
           f"report.json byte-identical: {ok}")
    assert ok
    payload = json.loads(reports[0])
    assert "hit_ratio_10" in payload


# --- criterion 8: optional MovieLens-1M run ----------------------------------

ML1M_PATH = os.environ.get("PROTOFAIR_ML1M", "")


@pytest.mark.skipif(
    not ML1M_PATH,
    reason="optional: set PROTOFAIR_ML1M to a MovieLens-1M ratings.dat",
)
def test_criterion_8_movielens_end_to_end():
    dataset = load_interactions(Path(ML1M_PATH), "movielens_dat")
    split = make_split(dataset, seed=7)
    config = TrainConfig(
        variant="protomf", d=64, l_u=48, l_t=48, epochs=15, batch_size=2048,
        learning_rate=1e-3, n_negatives_train=10, seed=1,
    )
    result = train(dataset, split, config)
    test_report, _ = evaluate(result.params, result.filter, split, dataset,
                              "test")
    ok = test_report.hit_ratio_10 >= 0.60 and test_report.ndcg_10 >= 0.34
    report("8 (MovieLens-1M end-to-end)", ok,
           f"hit@10 {test_report.hit_ratio_10:.3f} (>= 0.60), "
           f"ndcg@10 {test_report.ndcg_10:.3f} (>= 0.34)")
    assert test_report.hit_ratio_10 >= 0.60
    assert test_report.ndcg_10 >= 0.34
