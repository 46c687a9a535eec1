"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s``; the verdicts are also
repeated in the terminal summary.
"""

import time
from dataclasses import replace

import mpmath
import numpy as np
import pytest

from coadapt import numerics as nx
from coadapt.attention import attention, co_adapt, init_mab
from coadapt.cli import build_parser
from coadapt.encoder import encode
from coadapt.episodes import (
    Dataset,
    generate_blobs,
    generate_distractor,
    load_dataset,
    sample_episode,
    save_dataset,
    split_classes,
)
from coadapt.numerics import Tensor
from coadapt.protonet import classify, episode_loss, prototypes
from coadapt.trainer import (
    ABLATION_MODES,
    EvalReport,
    TrainConfig,
    ablation_sweep,
    build_model,
    episode_rng,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    sweep_table,
    train,
)

from .conftest import ACCEPTANCE_LINES, GRAD_TOL, gradient_error
from .test_numerics import GRAD_CASES

pytestmark = pytest.mark.slow

EVAL_EPISODES = 2000
EVAL_SEED = 0
SWEEP_CONFIG = TrainConfig(shot=1, epochs=30, tasks_per_epoch=100, val_episodes=100)


def verdict(number: int, title: str, ok: bool, detail: str):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def distractor_splits():
    return split_classes(generate_distractor(100, 4, 28, 100, 0.2, 1.0, seed=3), seed=0)


@pytest.fixture(scope="module")
def sweep(distractor_splits):
    train_ds, val_ds, test_ds = distractor_splits
    start = time.perf_counter()
    reports = ablation_sweep(SWEEP_CONFIG, train_ds, val_ds, test_ds, ABLATION_MODES, EVAL_EPISODES, EVAL_SEED)
    return reports, time.perf_counter() - start


def _fmt(r: EvalReport) -> str:
    return f"{100 * r.mean_accuracy:.2f}+-{100 * r.ci95:.2f}"


# ------------------------------------------------------------------------- 1


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = {}
    for name, (build, shapes) in sorted(GRAD_CASES.items()):
        arrays = {k: rng.standard_normal(s) for k, s in shapes.items()}
        worst[name] = max(gradient_error(build, arrays).values())

    x = rng.standard_normal((4, 5))
    x = np.where(np.abs(x) < 0.1, 0.5, x)
    worst["relu"] = max(gradient_error(
        lambda t: nx.sum(nx.mul(nx.relu(t["x"]), t["w"])), {"x": x, "w": rng.standard_normal((4, 5))}).values())
    worst["power"] = max(gradient_error(
        lambda t: nx.sum(nx.power(t["x"], 3)), {"x": rng.standard_normal((3, 4))}).values())

    # full loss, encoder through attention to cross-entropy, n=2 k=2 Q=6 m=4
    n, k, Q, m = 2, 2, 6, 4
    cfg = TrainConfig(way=n, shot=k, query=Q // n, hidden=(5,), embedding_dim=m, mode="full")
    model = build_model(cfg, (3,))
    support = rng.standard_normal((n * k, 3))
    query = rng.standard_normal((Q, 3))
    labels = np.repeat(np.arange(n), Q // n)
    for mode in ("full", "support_only", "query_only", "self_only", "nonparam"):

        def build(t, mode=mode):
            enc = replace(model.encoder, tensors={a[8:]: b for a, b in t.items() if a.startswith("encoder.")})
            mab = replace(model.mab, tensors={a[4:]: b for a, b in t.items() if a.startswith("mab.")})
            zs = nx.reshape(encode(enc, support), (n, k, m))
            res = co_adapt(zs, encode(enc, query), mab, mode)
            return episode_loss(classify(res.z_q_adapted, prototypes(res.z_s_adapted)), labels)

        # the non-parametric block has no weights on the loss path
        arrays = {a: b.copy() for a, b in model.arrays().items() if mode != "nonparam" or a.startswith("encoder.")}
        worst[f"cad_loss[{mode}]"] = max(gradient_error(build, arrays).values())
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] < GRAD_TOL and elapsed < 30
    verdict(1, "gradient suite", ok,
            f"{len(worst)} checks, worst {top}={worst[top]:.2e} (tol {GRAD_TOL:g}), {elapsed:.1f}s (limit 30s)")


# ------------------------------------------------------------------------- 2


def _oracle_attention(Q, K, V):
    mpmath.mp.dps = 40
    r, m = Q.shape
    s = K.shape[0]
    out = np.zeros((r, m))
    scores = np.zeros((r, s))
    for i in range(r):
        logits = []
        for j in range(s):
            acc = mpmath.mpf(0)
            for c in range(m):
                acc += mpmath.mpf(Q[i, c]) * mpmath.mpf(K[j, c])
            logits.append(acc / mpmath.sqrt(m))
        top = max(logits)
        weights = [mpmath.exp(v - top) for v in logits]
        total = mpmath.fsum(weights)
        for j in range(s):
            scores[i, j] = float(weights[j] / total)
        for c in range(m):
            out[i, c] = float(mpmath.fsum(weights[j] / total * mpmath.mpf(V[j, c]) for j in range(s)))
    return out, scores


def test_criterion_2_attention_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        r, s, m = rng.integers(1, 7, size=3)
        Q, K, V = (rng.standard_normal((a, m)) * 2 for a in (r, s, s))
        out, scores = attention(Tensor(Q), Tensor(K), Tensor(V))
        ref_out, ref_scores = _oracle_attention(Q, K, V)
        worst = max(worst, np.abs(out.data - ref_out).max(), np.abs(scores.data - ref_scores).max())
    verdict(2, "attention oracle", worst < 1e-10, f"200 shapes, max abs diff {worst:.2e} (tol 1e-10)")


# ------------------------------------------------------------------------- 3


def test_criterion_3_normalization():
    rng = np.random.default_rng(3)
    worst = 0.0
    for e in range(1000):
        n, k, q, m = rng.integers(2, 6), rng.integers(1, 6), rng.integers(1, 6), rng.integers(2, 9)
        params = init_mab(int(m), seed=e)
        zs = Tensor(rng.standard_normal((n, k, m)) * rng.uniform(0.1, 5))
        zq = Tensor(rng.standard_normal((n * q, m)) * rng.uniform(0.1, 5))
        res = co_adapt(zs, zq, params, "full")
        rows = [res.scores_support.data.sum(-1), res.scores_query.data.sum(-1),
                res.pooled_support.data.sum(-1), np.atleast_1d(res.pooled_query.data.sum())]
        worst = max(worst, *(np.abs(r - 1).max() for r in rows))
    verdict(3, "score normalization", worst < 1e-9, f"1000 episodes, max |row sum - 1| {worst:.2e} (tol 1e-9)")


# ------------------------------------------------------------------------- 4


def test_criterion_4_equivariance():
    rng = np.random.default_rng(4)
    worst = {"shot": 0.0, "query": 0.0, "class": 0.0}
    for e in range(100):
        n, k, Q, m = 5, 3, 15, 8
        params = init_mab(m, seed=e)
        zs_arr, zq_arr = rng.standard_normal((n, k, m)), rng.standard_normal((Q, m))
        base = co_adapt(Tensor(zs_arr), Tensor(zq_arr), params, "full")

        p = rng.permutation(k)
        r = co_adapt(Tensor(zs_arr[:, p]), Tensor(zq_arr), params, "full")
        worst["shot"] = max(worst["shot"],
                            np.abs(r.z_s_adapted.data - base.z_s_adapted.data[:, p]).max(),
                            np.abs(r.proto_support.data - base.proto_support.data).max(),
                            np.abs(r.z_q_adapted.data - base.z_q_adapted.data).max())

        p = rng.permutation(Q)
        r = co_adapt(Tensor(zs_arr), Tensor(zq_arr[p]), params, "full")
        worst["query"] = max(worst["query"],
                             np.abs(r.z_q_adapted.data - base.z_q_adapted.data[p]).max(),
                             np.abs(r.proto_query.data - base.proto_query.data).max(),
                             np.abs(r.z_s_adapted.data - base.z_s_adapted.data).max())

        p = rng.permutation(n)
        r = co_adapt(Tensor(zs_arr[p]), Tensor(zq_arr), params, "full")
        worst["class"] = max(worst["class"],
                             np.abs(r.z_s_adapted.data - base.z_s_adapted.data[p]).max(),
                             np.abs(r.scores_support.data - base.scores_support.data[p]).max(),
                             np.abs(r.scores_query.data - base.scores_query.data[p]).max(),
                             np.abs(r.z_q_adapted.data - base.z_q_adapted.data).max())
    ok = max(worst.values()) < 1e-9
    verdict(4, "equivariance suite", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (tol 1e-9)")


# ------------------------------------------------------------------------- 5


def _standalone_protonet_accuracies(arrays, ds, episodes, seed):
    """Independent ProtoNet: MLP embedding, mean prototypes, nearest squared distance."""
    layers = sorted({int(name[len("encoder.w"):]) for name in arrays if name.startswith("encoder.w")})
    accs = np.empty(episodes)
    for e in range(episodes):
        ep = sample_episode(ds, 5, 1, 15, episode_rng(seed, e))
        batch = np.concatenate([ep.support.reshape(5, -1), ep.query])
        for i in layers:
            batch = batch @ arrays[f"encoder.w{i}"] + arrays[f"encoder.b{i}"]
            if i != layers[-1]:
                batch = np.maximum(batch, 0.0)
        protos, zq = batch[:5], batch[5:]
        d = ((zq[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
        accs[e] = np.mean(np.argmin(d, axis=1) == ep.query_labels)
    return accs


def test_criterion_5_protonet_equivalence(blob_splits):
    train_ds, val_ds, test_ds = blob_splits
    ckpt = train(TrainConfig(mode="none", epochs=2, tasks_per_epoch=50, val_episodes=20), train_ds, val_ds)
    ours = evaluate(ckpt, test_ds, episodes=500, seed=5)
    ref = EvalReport.from_accuracies(_standalone_protonet_accuracies(ckpt.arrays, test_ds, 500, 5), mode="none")
    same = np.array_equal(np.array(ours.accuracies), np.array(ref.accuracies)) and ours == ref
    verdict(5, "ProtoNet equivalence", same,
            f"500 episodes, mean {ours.mean_accuracy:.4f} vs standalone {ref.mean_accuracy:.4f}, bit-identical={same}")


# ------------------------------------------------------------------------- 6


def test_criterion_6_baseline_sanity():
    train_ds, val_ds, test_ds = split_classes(generate_blobs(100, 16, 100, 0.1, seed=7), seed=0)
    cfg = TrainConfig(mode="none", epochs=50, tasks_per_epoch=100, val_episodes=100, seed=0)
    start = time.perf_counter()
    ckpt = train(cfg, train_ds, val_ds)
    report = evaluate(ckpt, test_ds, episodes=EVAL_EPISODES, seed=EVAL_SEED)
    elapsed = time.perf_counter() - start
    ok = report.mean_accuracy >= 0.95 and elapsed < 120 and cfg.total_tasks <= 5000
    verdict(6, "baseline sanity", ok,
            f"{cfg.total_tasks} tasks, test {_fmt(report)} (need >= 95), best val "
            f"{max(r['val_accuracy'] for r in ckpt.history):.3f}, {elapsed:.1f}s (limit 120s)")


# ------------------------------------------------------------------------- 7


def test_criterion_7_nonparam_over_baseline(sweep):
    reports, elapsed = sweep
    none, nonparam = reports["none"], reports["nonparam"]
    gain = nonparam.mean_accuracy - none.mean_accuracy
    separated = nonparam.mean_accuracy - nonparam.ci95 > none.mean_accuracy + none.ci95
    ok = gain >= 0.02 and separated
    verdict(7, "nonparam beats none", ok,
            f"nonparam {_fmt(nonparam)} vs none {_fmt(none)}, gain {100 * gain:+.2f} pts (need >= +2.00), "
            f"CIs disjoint={separated}, sweep {elapsed:.0f}s")


# ------------------------------------------------------------------------- 8


def test_criterion_8_full_ranking(sweep):
    reports, _ = sweep
    table = sweep_table(reports, SWEEP_CONFIG)
    rows = {r["mode"]: r for r in table["rows"]}
    attention_modes = ("support_only", "query_only", "self_only", "full")
    assert all(m in rows and rows[m]["episodes"] == EVAL_EPISODES for m in attention_modes)
    means = {m: reports[m].mean_accuracy for m in attention_modes}
    ranking = sorted(means, key=means.get, reverse=True)
    full_is_top = ranking[0] == "full"
    full_is_lowest = ranking[-1] == "full"
    listing = ", ".join(f"{m} {_fmt(reports[m])}" for m in ranking)
    verdict(8, "full vs single-direction modes", not full_is_lowest,
            f"{listing}; full highest={full_is_top}, fails only if full lowest")


# ------------------------------------------------------------------------- 9


def test_criterion_9_protocol_fidelity():
    one, five = TrainConfig.paper_scale(shot=1), TrainConfig.paper_scale(shot=5)
    ev = build_parser().parse_args(["eval", "--ckpt", "x", "--data", "y"])
    ci = EvalReport.from_accuracies(np.tile([-1.0, 1.0], 50) / np.tile([-1.0, 1.0], 50).std(ddof=1)).ci95
    checks = {
        "1-shot tasks": one.total_tasks == 60_000,
        "5-shot tasks": five.total_tasks == 40_000,
        "lr 0.003": one.learning_rate == five.learning_rate == 0.003,
        "eval way/query/episodes": (ev.way, ev.query, ev.episodes) == (5, 15, 2000),
        "ci closed form": abs(ci - 0.196) < 1e-12,
    }
    verdict(9, "protocol fidelity", all(checks.values()),
            f"tasks {one.total_tasks}/{five.total_tasks}, eval {ev.way}-way {ev.query}q {ev.episodes} episodes, "
            f"ci95(std 1, E 100) = {ci:.6f}" + ("" if all(checks.values()) else f", failed {checks}"))


# ------------------------------------------------------------------------ 10


def test_criterion_10_round_trips(tmp_path, blob_splits):
    train_ds, val_ds, test_ds = blob_splits
    results = {}
    for dtype in (np.float64, np.float32):
        ds = Dataset(train_ds.features.astype(dtype), train_ds.labels, "train")
        save_dataset(ds, tmp_path / "train.fsd")
        back = load_dataset(tmp_path / "train.fsd")
        results[f"fsd {np.dtype(dtype).name}"] = back == ds and back.features.tobytes() == ds.features.tobytes()

    cfg = TrainConfig(mode="full", epochs=2, tasks_per_epoch=20, val_episodes=20)
    ckpt = train(cfg, train_ds, val_ds)
    save_checkpoint(ckpt, tmp_path / "m.cadw")
    loaded = load_checkpoint(tmp_path / "m.cadw")
    results["cadw arrays"] = ckpt.arrays.keys() == loaded.arrays.keys() and all(
        ckpt.arrays[k].tobytes() == loaded.arrays[k].tobytes() for k in ckpt.arrays)
    results["cadw config+rng"] = loaded.config == ckpt.config and loaded.rng_state == ckpt.rng_state
    results["eval after reload"] = evaluate(loaded, test_ds, episodes=200) == evaluate(ckpt, test_ds, episodes=200)
    again = train(cfg, train_ds, val_ds)
    results["repeat run"] = evaluate(again, test_ds, episodes=200) == evaluate(ckpt, test_ds, episodes=200)
    verdict(10, "round trips", all(results.values()), ", ".join(f"{k}={v}" for k, v in results.items()))
