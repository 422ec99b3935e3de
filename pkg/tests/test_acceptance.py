"""End-to-end acceptance checks.

Ten numbered criteria covering gradients, the graph-normalization and AUC
oracles, attention invariants, metric reproduction, the full synthetic
pipeline with its ablations, determinism, the preprocessing contract, and
the plateau schedule. Each test prints one summary line

    criterion NN: pass - <measurements>

directly to the terminal (capture is disabled for this file), and fails
loudly with the same measurements otherwise. The pipeline criterion trains
the real models and dominates the runtime; everything else finishes in
seconds.
"""

import copy
import time

import numpy as np
import pytest

from nodulegcn.attention import cbam, channel_attention, init_cbam, spatial_attention
from nodulegcn.config import PipelineConfig
from nodulegcn.extractor import BackboneConfig, backbone_forward, init_backbone
from nodulegcn.gcn import gcn_forward, init_gcn
from nodulegcn.graphs import TOPOLOGIES, adjacency, block_diag, build_graph, normalize
from nodulegcn.metrics import ConfusionCounts, metric_suite, roc_auc
from nodulegcn.pipeline import (
    run_pipeline,
    stage_evaluate,
    stage_synth,
    stage_train_gcn,
)
from nodulegcn.preprocess import AUGMENT_OPS, augment, clip_normalize, select_slices
from nodulegcn.tensor import Tensor, backward, cross_entropy, finite_diff_grad
from nodulegcn.train import plateau_schedule


@pytest.fixture
def announce(capfd):
    """One pass/fail line per criterion, written to the real terminal so it
    shows up even when the suite runs without -s."""

    def _announce(number, passed, detail):
        marker = "pass" if passed else "FAIL"
        line = f"criterion {number:2d}: {marker} - {detail}"
        with capfd.disabled():
            print(line, flush=True)
        assert passed, line

    return _announce


# -- 1: full-stack gradient correctness ---------------------------------------

class TestCriterion01Gradients:
    def test_full_stack_reverse_mode_matches_finite_differences(self, announce):
        started = time.monotonic()
        rng = np.random.default_rng(11)
        config = BackboneConfig(input_size=12, widths=(8, 8, 8), feature_dim=16)
        bb = init_backbone(config, rng=rng, dtype=np.float64)
        gp = init_gcn(in_dim=16, hidden=8, rng=rng, dtype=np.float64)
        # fan-in-uniform init undershoots unit variance, and six stacked conv
        # layers shrink activations to ~1e-4, pushing true gradients below
        # what float64 finite differences of an O(1) loss can resolve; a
        # sqrt(6) rescale of the weight matrices restores unit gain per layer
        for t in bb.tensors():
            if t.data.ndim >= 2:
                t.data = t.data * np.sqrt(6.0)
        adj = normalize(build_graph(2, "full"))
        x = Tensor(rng.normal(0.0, 0.5, size=(2, 3, 12, 12)))
        y = np.array([1, 0])
        params = bb.tensors() + gp.tensors()

        def loss_value(_mutated_in_place):
            feats, _ = backbone_forward(x, bb)
            probs = gcn_forward(adj, feats, gp, train_mode=False)
            return cross_entropy(probs, y)

        analytic = backward(loss_value(params), params)
        numeric = finite_diff_grad(loss_value, params)

        worst = 0.0
        count = 0
        for p in params:
            scale = max(float(np.linalg.norm(numeric[p])), 1e-10)
            worst = max(worst, float(np.linalg.norm(analytic[p] - numeric[p])) / scale)
            count += p.data.size
        elapsed = time.monotonic() - started
        announce(1, worst < 1e-4 and elapsed < 120.0,
               f"{count} parameters, max rel err {worst:.2e}, {elapsed:.1f}s")


# -- 2: normalized adjacency against a naive oracle ---------------------------

def normalize_by_hand(a):
    """Triple-loop D^{-1/2} (A + I) D^{-1/2} with explicit matrix products."""
    n = a.shape[0]
    a_tilde = a + np.eye(n)
    d_inv_sqrt = np.zeros((n, n))
    for i in range(n):
        degree = 0.0
        for j in range(n):
            degree += a_tilde[i, j]
        d_inv_sqrt[i, i] = 1.0 / np.sqrt(degree)

    def matmul_loops(lhs, rhs):
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                for k in range(n):
                    out[i, j] += lhs[i, k] * rhs[k, j]
        return out

    return matmul_loops(matmul_loops(d_inv_sqrt, a_tilde), d_inv_sqrt)


class TestCriterion02NormalizeOracle:
    def test_triple_loop_and_closed_forms(self, announce):
        worst = 0.0
        closed_full = 0.0
        for n in range(1, 13):
            for topology in TOPOLOGIES:
                graph = build_graph(n, topology)
                ours = normalize(graph).matrix
                naive = normalize_by_hand(adjacency(graph))
                worst = max(worst, float(np.abs(ours - naive).max()))
            full_n = normalize(build_graph(n, "full")).matrix
            closed_full = max(closed_full, float(np.abs(full_n - 1.0 / n).max()))

        chain3 = normalize(build_graph(3, "chain")).matrix
        closed_chain = max(
            abs(chain3[0, 0] - 0.5),
            abs(chain3[1, 1] - 1.0 / 3.0),
            abs(chain3[0, 1] - 1.0 / np.sqrt(6.0)),
        )

        star5 = normalize(build_graph(5, "star")).matrix
        center, leaf = 2, 0  # hub is the middle slice
        closed_star = max(
            abs(star5[center, center] - 0.2),
            abs(star5[leaf, leaf] - 0.5),
            abs(star5[center, leaf] - 1.0 / np.sqrt(10.0)),
        )

        biggest = max(worst, closed_full, closed_chain, closed_star)
        announce(2, biggest < 1e-12,
               f"n 1..12 x {len(TOPOLOGIES)} topologies, max abs err {biggest:.2e}")


# -- 3: block-diagonal batching equals per-nodule inference -------------------

class TestCriterion03BlockDiagonal:
    def test_batched_equals_concatenated(self, announce):
        rng = np.random.default_rng(23)
        worst = 0.0
        for _ in range(100):
            params = init_gcn(in_dim=24, hidden=6, rng=rng, dtype=np.float64)
            sizes = [int(s) for s in rng.integers(1, 8, size=int(rng.integers(2, 7)))]
            tops = [str(t) for t in rng.choice(TOPOLOGIES, size=len(sizes))]
            blocks = [normalize(build_graph(n, t)) for n, t in zip(sizes, tops)]
            x = rng.normal(size=(sum(sizes), 24))

            batched = gcn_forward(block_diag(blocks), Tensor(x), params).numpy()
            pieces = []
            row = 0
            for block, n in zip(blocks, sizes):
                pieces.append(gcn_forward(block, Tensor(x[row:row + n]), params).numpy())
                row += n
            stitched = np.concatenate(pieces, axis=0)
            scale = np.maximum(np.abs(stitched), 1.0)
            worst = max(worst, float((np.abs(batched - stitched) / scale).max()))
        announce(3, worst < 1e-6,
               f"100 mixed-topology batches, max rel err {worst:.2e}")


# -- 4: AUC against the brute-force pairwise statistic ------------------------

def pairwise_auc(labels, scores):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestCriterion04AucOracle:
    def test_brute_force_and_worked_example(self, announce):
        rng = np.random.default_rng(31)
        worst = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            scores = rng.normal(size=n)
            if rng.random() < 0.5:
                scores = np.round(scores, 1)  # force ties
            worst = max(worst, abs(roc_auc(labels, scores) - pairwise_auc(labels, scores)))
        example = roc_auc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.2])
        announce(4, worst < 1e-12 and abs(example - 0.75) < 1e-12,
               f"1000 instances, max abs err {worst:.2e}, worked example {example}")


# -- 5: fixed confusion-row rates ------------------------------------------------

class TestCriterion05MetricRow:
    def test_confusion_counts_give_expected_rates(self, announce):
        rounded = metric_suite(ConfusionCounts(tp=22, fp=6, tn=61, fn=4)).to_json()["metrics"]
        expected = {"sen": 0.8462, "spe": 0.9104, "ppv": 0.7857,
                    "npv": 0.9385, "f1": 0.8148}
        mismatches = {k: rounded[k] for k in expected if rounded[k] != expected[k]}
        acc_ok = rounded["acc"] == 0.8925  # = (22 + 61) / 93
        announce(5, not mismatches and acc_ok,
               f"sen/spe/ppv/npv/f1 match at 4 decimals, acc {rounded['acc']}")


# -- 6: attention invariants ----------------------------------------------------

class TestCriterion06CbamInvariants:
    def test_gates_bounded_and_zero_init_quarter(self, announce):
        rng = np.random.default_rng(47)
        ok = True
        for _ in range(1000):
            channels = int(rng.choice([4, 8, 16]))
            h = int(rng.integers(2, 7))
            params = init_cbam(channels, reduction=channels // 2, kernel_size=3, rng=rng)
            for t in params.tensors():
                t.data = rng.normal(0.0, 0.5, size=t.shape).astype(np.float32)
            f = Tensor(rng.normal(0.0, 1.0, size=(channels, h, h)).astype(np.float32))

            cw, _ = channel_attention(f, params)
            sw, _ = spatial_attention(f, params)
            out = cbam(f, params).numpy()
            ok &= bool((cw.numpy() > 0).all() and (cw.numpy() < 1).all())
            ok &= bool((sw.numpy() > 0).all() and (sw.numpy() < 1).all())
            ok &= bool((np.abs(out) <= np.abs(f.numpy())).all())
            if not ok:
                break

        zero = init_cbam(8, reduction=4, kernel_size=7)
        for t in zero.tensors():
            t.data = np.zeros_like(t.data)
        f = Tensor(np.random.default_rng(0).normal(size=(2, 8, 5, 5)).astype(np.float32))
        quarter = np.array_equal(cbam(f, zero).numpy(), 0.25 * f.numpy())
        announce(6, ok and quarter,
               f"1000 random draws: gates in (0,1) and |out| <= |f| {ok}, "
               f"zero-init output == 0.25*f {quarter}")


# -- 7: synthetic end-to-end with ablations ------------------------------------

BUDGET_SECONDS = 1800.0

BASE = {
    "seed": 7,
    "variant": "full-all",
    "synth": {"n_nodules": 60, "positive_fraction": 0.3},
}


def timed_pipeline(workdir, overrides):
    data = copy.deepcopy(BASE)
    data.update(copy.deepcopy(overrides))
    data["paths"] = {"workdir": str(workdir)}
    config = PipelineConfig(data)
    started = time.monotonic()
    stage_synth(config)
    rep = run_pipeline(config)
    return config, rep, time.monotonic() - started


def side_config(config, **path_overrides):
    side = PipelineConfig(config.to_json())
    side.data["paths"].update(path_overrides)
    return side


class TestCriterion07SyntheticEndToEnd:
    def test_pipeline_and_ablations(self, tmp_path_factory, announce):
        config, rep, elapsed = timed_pipeline(tmp_path_factory.mktemp("main"), {})
        test_auc = rep["metrics"]["auc"]
        train_side = side_config(config, report="report_train.json",
                                 roc_csv="roc_train.csv")
        train_auc = stage_evaluate(train_side, split="train")["metrics"]["auc"]

        ablations = {}
        _, ab_report, ab_elapsed = timed_pipeline(
            tmp_path_factory.mktemp("nocbam"),
            {"variant": "no-cbam", "cbam": {"enabled": False}},
        )
        ablations["no-cbam"] = (ab_report, ab_elapsed)

        # graph-shape ablations reuse the trained extractor's features;
        # feature extraction does not depend on the topology
        for topology in ("star", "chain"):
            side = side_config(
                config,
                gcn_checkpoint=f"checkpoints/gcn_{topology}.nckp",
                gcn_log=f"logs/gcn_{topology}.jsonl",
                report=f"report_{topology}.json",
                roc_csv=f"roc_{topology}.csv",
            )
            side.variant = topology
            side.data["graph"]["topology"] = topology
            t0 = time.monotonic()
            stage_train_gcn(side)
            ablations[topology] = (stage_evaluate(side), time.monotonic() - t0)

        comparable = all(
            r["metrics"]["auc"] is not None
            and set(r["metrics"]) == set(rep["metrics"])
            and r["graph"]["topology"] in TOPOLOGIES
            and t < BUDGET_SECONDS
            for r, t in ablations.values()
        )
        summary = ", ".join(
            f"{name} auc {r['metrics']['auc']:.3f} ({t:.0f}s)"
            for name, (r, t) in ablations.items()
        )
        announce(7, test_auc >= 0.85 and train_auc >= 0.95
               and elapsed < BUDGET_SECONDS and comparable,
               f"test auc {test_auc:.4f}, train auc {train_auc:.4f}, "
               f"main run {elapsed:.0f}s (budget {BUDGET_SECONDS:.0f}s); {summary}")


# -- 8: determinism ---------------------------------------------------------------

class TestCriterion08Determinism:
    def test_identical_runs_are_byte_identical(self, tmp_path, announce):
        # a reduced-size run keeps this quick; nothing in the seeding or the
        # serialization depends on the problem size
        overrides = {
            "seed": 3,
            "synth": {"n_nodules": 16, "positive_fraction": 0.4},
            "backbone": {"widths": [8, 8, 8]},
            "train": {"extractor": {"epochs": 2, "batch_size": 16},
                      "gcn": {"epochs": 15}},
        }
        artifacts = ("extractor_checkpoint", "gcn_checkpoint", "report", "roc_csv")
        outputs = []
        for name in ("a", "b"):
            data = copy.deepcopy(overrides)
            data["paths"] = {"workdir": str(tmp_path / name)}
            config = PipelineConfig(data)
            stage_synth(config)
            run_pipeline(config)
            blobs = {}
            for key in artifacts:
                with open(config.path(key), "rb") as fh:
                    blobs[key] = fh.read()
            outputs.append(blobs)
        same = all(outputs[0][key] == outputs[1][key] for key in artifacts)
        sizes = {key: len(outputs[0][key]) for key in artifacts}
        announce(8, same, f"rerun artifacts byte-identical {same}, sizes {sizes}")


# -- 9: preprocessing contract ------------------------------------------------------

class TestCriterion09Preprocessing:
    def test_windowing_slices_and_augmentation(self, announce):
        mapped = clip_normalize(np.array([-1400.0, 400.0, -500.0]), 0.0)
        window_ok = np.array_equal(mapped, np.array([0.0, 1.0, 0.5], dtype=np.float32))

        picked = select_slices((10, 20), "fixed5")
        slices_ok = picked == [13, 14, 15, 16, 17]

        marker = np.arange(18, dtype=np.float32).reshape(2, 3, 3)
        involutions = all(
            np.array_equal(augment(augment(marker, op), op), marker)
            for op in ("flip_h", "flip_v", "rot180", "swap")
        )
        turned = marker
        for _ in range(4):
            turned = augment(turned, "rot90")
        period_ok = np.array_equal(turned, marker)
        inverse_ok = np.array_equal(augment(augment(marker, "rot90"), "rot270"), marker)
        composed_ok = np.array_equal(
            augment(augment(marker, "flip_h"), "flip_v"), augment(marker, "rot180")
        )
        distinct = len({augment(marker, op).tobytes() for op in AUGMENT_OPS}) == len(AUGMENT_OPS)

        announce(9, window_ok and slices_ok and involutions and period_ok
               and inverse_ok and composed_ok and distinct,
               f"window {mapped.tolist()}, fixed5 {picked}, involutions {involutions}, "
               f"rot90 period {period_ok}, flip compose {composed_ok}, "
               f"all ops distinct {distinct}")


# -- 10: plateau schedule --------------------------------------------------------------

class TestCriterion10PlateauSchedule:
    def test_flat_history_halves_twice(self, announce):
        history = [0.5] * 42
        lr = plateau_schedule(history, 0.001)
        halvings = 0
        seen = 0.001
        for t in range(1, len(history) + 1):
            step = plateau_schedule(history[:t], 0.001)
            if step < seen:
                halvings += 1
                seen = step
        announce(10, lr == 0.00025 and halvings == 2,
               f"flat 42-epoch history: lr 0.001 -> {lr}, {halvings} halvings")
