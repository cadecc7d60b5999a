"""Acceptance suite: every binding criterion at its stated tolerance.

Each test prints one `ACCEPTANCE <name>: PASS/FAIL` line (visible with
`pytest -s tests/test_acceptance.py` or in failure output). The end-to-end
criteria run on a generated fixture: 5 classes on the unit sphere in R^32,
500 images per class, a 50-descriptor pool containing 2 planted concepts per
class within 15 degrees of the class mean and 40 background descriptors at
least 40 degrees from every mean.
"""

import json
from itertools import permutations
from pathlib import Path

import numpy as np
import pytest

from clearcbm import pipeline
from clearcbm.bottleneck import (
    ApproxTrainConfig,
    PoolStats,
    euclidean_regularizer,
    mahalanobis_regularizer,
    train_approximation,
)
from clearcbm.dataio import EmbeddingSet
from clearcbm.nn import init_mlp, make_rng
from clearcbm.sampling import langevin_step
from clearcbm.scorematch import (
    ScoreNet,
    SsmConfig,
    load_score_net,
    score,
    ssm_objective,
    train_score,
)
from clearcbm.selection import (
    SimilarityMatrix,
    assign,
    select_nn,
    select_random,
    similarity_matrix,
    top_m_filter,
)
from clearcbm.synth import SynthSpec, write_fixture

from test_scorematch import negid_scorenet


def report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {name}: {status}{suffix}")


# ----------------------------------------------------------------------
# fixture shared by the end-to-end criteria
# ----------------------------------------------------------------------

FIXTURE = SynthSpec(
    dim=32,
    n_classes=5,
    images_per_class=500,
    planted_per_class=2,
    background_descriptors=40,
    probe_images=True,
    seed=0,
)


def fixture_config(info, out_dir, seed=0, method="hungarian"):
    return {
        "paths": {
            "images": info["images"],
            "descriptors": info["descriptors"],
            "manifest": info["manifest"],
            "out_dir": str(out_dir),
        },
        "k": 10,
        "seed": seed,
        "score": {"epochs": 60, "learning_rate": 1e-3, "image_batch_size": 256,
                  "hidden_dim": 128},
        "approx": {"epsilon": 0.1, "steps": 5, "lambda": 2.0, "batch_size": 128,
                   "lr": 0.05, "epochs": 60, "regularizer": "sm"},
        "selection": {"m0": 5, "method": method},
        "head": {"epochs": 80, "lr": 0.05, "batch_size": 256},
    }


@pytest.fixture(scope="module")
def fixture_info(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_fixture")
    return write_fixture(FIXTURE, out)


@pytest.fixture(scope="module")
def pipeline_run(fixture_info, tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_run")
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(fixture_config(fixture_info, out / "artifacts")))
    cfg = pipeline.load_config(cfg_path)
    run_report = pipeline.cmd_pipeline(cfg)
    return cfg_path, out / "artifacts", run_report, fixture_info


# ----------------------------------------------------------------------
# criteria
# ----------------------------------------------------------------------


def test_ssm_analytic_oracle():
    """s(x) = -x on N(0, I_8): loss estimate within 3 SE of -d/2 = -4."""
    d, n = 8, 100_000
    net = negid_scorenet(d)
    x = make_rng(2024).standard_normal((n, d))
    loss, _ = ssm_objective(net, x, make_rng(7), n_slices=1)
    # per-sample estimator values for an empirical standard error:
    # v.Jv = -d exactly for sign slices, so values are -d + 0.5 ||x||^2
    values = -d + 0.5 * np.sum(x * x, axis=1)
    se = values.std(ddof=1) / np.sqrt(n)
    ok = abs(loss - (-4.0)) < 3 * se
    report("ssm-analytic-oracle", ok, f"loss={loss:.5f} target=-4 3se={3 * se:.5f}")
    assert ok


def test_second_order_gradient_check():
    """SSM parameter gradient vs central differences, 50 coordinates, 1e-4."""
    d, h = 3, 5
    rng = make_rng(11)
    net = ScoreNet(init_mlp(d, h, d, rng))
    x = rng.standard_normal((8, d))

    def loss_at(params):
        return ssm_objective(ScoreNet(params), x, make_rng(55))[0]

    _, grads = ssm_objective(net, x, make_rng(55))
    eps = 1e-5
    checked, worst = 0, 0.0
    all_coords = [
        (block, idx)
        for block in range(6)
        for idx in range(net.params.flatten()[block].size)
    ]
    picks = rng.choice(len(all_coords), size=50, replace=False)
    for block, idx in (all_coords[int(i)] for i in picks):
        p = net.params.copy()
        p.flatten()[block].flat[idx] += eps
        up = loss_at(p)
        p = net.params.copy()
        p.flatten()[block].flat[idx] -= eps
        dn = loss_at(p)
        fd = (up - dn) / (2 * eps)
        got = grads[block].flat[idx]
        rel = abs(got - fd) / max(abs(fd), 1e-12)
        worst = max(worst, rel)
        checked += 1
    ok = checked >= 50 and worst < 1e-4
    report("second-order-gradient", ok, f"coords={checked} worst_rel={worst:.2e}")
    assert ok


def test_score_recovery_two_dim_gaussian():
    """500-epoch SSM training recovers the N((1,-1), 0.25 I) score field."""
    mu, sigma = np.array([1.0, -1.0]), 0.5
    rng = make_rng(303)
    samples = mu + sigma * rng.standard_normal((5_000, 2))
    images = EmbeddingSet.from_array(samples.astype(np.float32))
    empty = EmbeddingSet.from_array(np.zeros((0, 2), dtype=np.float32))
    cfg = SsmConfig(epochs=500, learning_rate=1e-3, image_batch_size=256,
                    hidden_dim=64, seed=304)
    net, _ = train_score(images, empty, cfg)
    held = mu + sigma * make_rng(305).standard_normal((1_000, 2))
    pred = score(net, held)
    truth = (mu - held) / sigma**2
    cos = np.sum(pred * truth, axis=1) / (
        np.linalg.norm(pred, axis=1) * np.linalg.norm(truth, axis=1)
    )
    mean_cos = float(np.mean(cos))
    ok = mean_cos >= 0.95
    report("score-recovery", ok, f"mean_cosine={mean_cos:.4f}")
    assert ok


def test_langevin_chain_statistics():
    """AR(1) stationary variance of the s(x) = -x chain within 5%."""
    d, eps, n = 4, 0.1, 100_000
    net = negid_scorenet(d)
    rng = make_rng(99)
    x = np.zeros(d)
    tail = np.empty((n // 2, d))
    for i in range(n):
        x = langevin_step(x, net, eps, rng)
        if i >= n // 2:
            tail[i - n // 2] = x
    target = eps / (1.0 - (1.0 - eps / 2.0) ** 2)
    got = tail.var(axis=0)
    worst = float(np.max(np.abs(got - target) / target))
    ok = worst < 0.05
    report("langevin-chain-statistics", ok,
           f"target={target:.4f} worst_rel_dev={worst:.3f}")
    assert ok


def test_assignment_optimality_exhaustive():
    """assign equals the brute-force maximum on 1000 4x6 + 200 7x9 matrices."""
    rng = make_rng(505)

    def brute(values, perms):
        totals = values[np.arange(values.shape[0])[None, :], perms].sum(axis=1)
        return float(totals.max())

    perms_4x6 = np.array(list(permutations(range(6), 4)), dtype=np.int64)
    perms_7x9 = np.array(list(permutations(range(9), 7)), dtype=np.int64)
    failures = 0
    for _ in range(1000):
        values = rng.uniform(-1.0, 1.0, size=(4, 6))
        out = assign(SimilarityMatrix(values, np.arange(4), np.arange(6)))
        if abs(out.total_similarity - brute(values, perms_4x6)) > 1e-12 * 16:
            failures += 1
    for _ in range(200):
        values = rng.uniform(-1.0, 1.0, size=(7, 9))
        out = assign(SimilarityMatrix(values, np.arange(7), np.arange(9)))
        if abs(out.total_similarity - brute(values, perms_7x9)) > 1e-12 * 16:
            failures += 1
    ok = failures == 0
    report("assignment-optimality", ok, f"failures={failures}/1200")
    assert ok


def test_top_m_doubling_rule():
    """Instances with |TopDes| <= k at m0 double m exactly once, then pass."""
    # identical rankings across rows: TopDes has exactly m0 columns
    base = 1.0 - 0.01 * np.arange(40)
    values = np.tile(base, (6, 1))
    sim = SimilarityMatrix(values, np.arange(6), np.arange(40))
    res = top_m_filter(sim, k=8, m0=5)
    ok = (res.final_m == 10) and (res.top_des_size == 10) and not res.skipped
    # control: disjoint rows already exceed k on the first pass
    disjoint = np.zeros((4, 40))
    for i in range(4):
        disjoint[i, 10 * i:10 * i + 5] = 1.0
    res2 = top_m_filter(SimilarityMatrix(disjoint, np.arange(4), np.arange(40)), k=8, m0=5)
    ok = ok and res2.final_m == 5 and res2.top_des_size == 20
    report("top-m-doubling", ok,
           f"doubled_to={res.final_m} first_pass={res2.final_m}")
    assert ok


def test_regularizer_cross_checks():
    """L_MA with identity covariance vs Euclidean; L_EU vs brute force;
    no-regularizer training independent of the score net, bitwise."""
    rng = make_rng(606)
    S = rng.standard_normal((6, 4))

    mu = rng.standard_normal(6)
    ma_loss, _ = mahalanobis_regularizer(S, PoolStats(mu, np.eye(6)))
    eu_dist = float(np.mean(np.linalg.norm(S - mu[:, None], axis=0)))
    ok_ma = abs(ma_loss - eu_dist) < 1e-9

    pool = rng.standard_normal((15, 6))
    eu_loss, _ = euclidean_regularizer(S, pool)
    brute = sum(
        float(np.sum((S[:, j] - pool[h]) ** 2)) / pool.shape[0]
        for j in range(S.shape[1])
        for h in range(pool.shape[0])
    )
    ok_eu = abs(eu_loss - brute) < 1e-9

    from test_bottleneck import separable_data

    x, y, _ = separable_data(15, 8, 2, seed=607)
    cfg = ApproxTrainConfig(k=4, lam=0.5, regularizer="none", lr=0.05,
                            batch_size=16, epochs=6, seed=608)
    net_a = negid_scorenet(8)
    net_b = ScoreNet(init_mlp(8, 16, 8, make_rng(609)))
    ra = train_approximation(x, y, np.arange(24), np.arange(24, 30), net_a, cfg)
    rb = train_approximation(x, y, np.arange(24), np.arange(24, 30), net_b, cfg)
    ok_none = (
        ra.params.S.tobytes() == rb.params.S.tobytes()
        and ra.params.W.tobytes() == rb.params.W.tobytes()
        and ra.params.b.tobytes() == rb.params.b.tobytes()
    )

    ok = ok_ma and ok_eu and ok_none
    report("regularizer-cross-checks", ok,
           f"mahalanobis={ok_ma} euclidean={ok_eu} scorenet_independence={ok_none}")
    assert ok


def test_end_to_end_synthetic_pipeline(pipeline_run):
    """Full pipeline on the planted fixture: accuracy >= 0.95 and >= 8 of the
    10 planted per-class descriptors selected, summed over classes."""
    _, artifacts, run_report, info = pipeline_run
    acc = run_report["test_accuracy"]
    selection = json.loads((artifacts / "selection.json").read_text())
    chosen = {p["pool_index"] for p in selection["pairs"]}
    planted_per_class = info["truth"]["planted_ids"]
    hits = sum(len(chosen & set(ids)) for ids in planted_per_class)
    total_planted = sum(len(ids) for ids in planted_per_class)
    ok = acc >= 0.95 and hits >= 8
    report("end-to-end-pipeline", ok,
           f"accuracy={acc:.4f} planted_hits={hits}/{total_planted}")
    assert ok


def test_selection_method_ordering(pipeline_run, fixture_info, tmp_path):
    """Hungarian total similarity >= deduplicated NN >= random, averaged
    over 20 bottleneck seeds on the shared fixture score net."""
    _, artifacts, _, info = pipeline_run
    net = load_score_net(artifacts / "score.clnn")

    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(fixture_config(info, tmp_path / "o")))
    cfg = pipeline.load_config(cfg_path)
    data = pipeline.load_dataset(cfg)

    hungarian_totals, nn_totals, random_totals = [], [], []
    for seed in range(20):
        acfg = ApproxTrainConfig(
            k=10, lam=1.0, langevin=cfg.approx.langevin, regularizer="sm",
            lr=0.05, batch_size=256, epochs=30, seed=1000 + seed,
        )
        res = train_approximation(
            data.x, data.labels, data.splits["train"], data.splits["val"],
            net, acfg, pool=data.pool_x, n_classes=5,
        )
        sim = similarity_matrix(res.params.S, data.pool)
        filt = top_m_filter(sim, k=10, m0=5)
        hungarian_totals.append(assign(filt.matrix).total_similarity)

        nn_ids = select_nn(res.params.S, data.pool)
        dedup: dict[int, float] = {}
        for i, j in enumerate(nn_ids):
            dedup[j] = max(dedup.get(j, -np.inf), float(sim.values[i, j]))
        nn_totals.append(sum(dedup.values()))

        rand_ids = select_random(data.pool.rows, 10, seed=2000 + seed)
        random_totals.append(float(sum(sim.values[i, j] for i, j in enumerate(rand_ids))))

    h, n_, r = map(np.mean, (hungarian_totals, nn_totals, random_totals))
    ok = h >= n_ >= r
    report("selection-method-ordering", ok,
           f"hungarian={h:.3f} nn_dedup={n_:.3f} random={r:.3f}")
    assert ok


def test_stage_determinism(fixture_info, tmp_path):
    """Rerunning every stage with the same config and seed reproduces each
    artifact byte for byte (run_report.json is excluded: it carries wall-clock
    timings by design)."""
    mini = SynthSpec(dim=16, n_classes=3, images_per_class=40,
                     planted_per_class=2, background_descriptors=10,
                     image_spread=0.18, seed=77)
    info = write_fixture(mini, tmp_path / "data")
    artifacts = [
        "score.clnn", "score.json", "bottleneck.clbn", "bottleneck.json",
        "selection.json", "sprime.cleb", "model.clcm", "model.json",
        "metrics.json",
    ]

    def run(out):
        doc = fixture_config(info, out, seed=3)
        doc["k"] = 5
        doc["score"]["epochs"] = 8
        doc["approx"]["epochs"] = 8
        doc["head"]["epochs"] = 10
        cfg_path = tmp_path / f"{Path(out).name}.json"
        cfg_path.write_text(json.dumps(doc))
        pipeline.cmd_pipeline(pipeline.load_config(cfg_path))
        return {a: (Path(out) / a).read_bytes() for a in artifacts}

    first = run(tmp_path / "run1")
    second = run(tmp_path / "run2")
    mismatched = [a for a in artifacts if first[a] != second[a]]
    ok = not mismatched
    report("stage-determinism", ok,
           "all byte-identical" if ok else f"mismatched={mismatched}")
    assert ok
