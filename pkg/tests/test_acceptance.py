"""Acceptance criteria, one test each.

Every test records a PASS or FAIL line that the terminal summary prints.
Criteria 6 to 8 evaluate checkpoints produced by ``scripts/run_experiments.py``
(stored under ``artifacts/``); the evaluation itself runs here on fresh
episodes and scenes.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from fdcheck import check_gradients

from baseseq import nn
from baseseq.bench import LearnedCheckpoints, cli_main, plan_scene, scene_corpus
from baseseq.policy_base import BasePosePolicy, eval_scenes, evaluate_base_policy, init_actor
from baseseq.policy_seq import (
    GraspSequencePolicy,
    SeqHyperparams,
    batch_rollout,
    encode,
    init_seq_params,
    reinforce_loss,
    scene_graph,
)
from baseseq.reach import DEFAULT_MODEL, build_irms
from baseseq.solvers import FeasibilityMode, brute_force, execute_plan, solve_dp, solve_mbp, solve_pbg
from baseseq.world import sample_scene

ARTIFACTS = Path(__file__).resolve().parents[1] / "artifacts"
GC, IK = FeasibilityMode.GRASP_CHECKED, FeasibilityMode.IK_ONLY
FRESH_EVAL_SEED = 1000


def record(number: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{number:>2}] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    assert ok, detail


def _artifact(rel: str) -> Path:
    path = ARTIFACTS / rel
    if not path.exists():
        pytest.fail(f"missing {path}; run scripts/run_experiments.py first")
    return path


def test_01_dp_exactness():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for i in range(100):
        scene = sample_scene(10_000 + i, 1 + i % 4)
        irms = build_irms(DEFAULT_MODEL, scene)
        dp = solve_dp(scene, irms, top_k=6, seed_heuristics=False).predicted_cost.total
        bf = brute_force(scene, irms, cap_candidates=6).predicted_cost.total
        worst = max(worst, abs(dp - bf))
        count += abs(dp - bf) <= 1e-9
    elapsed = time.perf_counter() - t0
    record(1, "DP exactness", count == 100 and elapsed < 30,
           f"{count}/100 instances equal brute force (max diff {worst:.2e}), {elapsed:.1f} s")


def test_02_dp_dominance():
    bad, full_bad = [], []
    for i in range(50):
        scene = sample_scene(20_000 + i, 5)
        irms = build_irms(DEFAULT_MODEL, scene)
        pbg = execute_plan(scene, solve_pbg(scene, irms, GC)).cost.total
        mbp = execute_plan(scene, solve_mbp(scene, irms, GC)).cost.total
        dp = execute_plan(scene, solve_dp(scene, irms, top_k=20)).cost.total
        if dp > min(pbg, mbp) + 1e-9:
            bad.append(i)
        full = execute_plan(scene, solve_dp(scene, irms, top_k=None)).cost.total
        if full > min(pbg, mbp) + 1e-9:
            full_bad.append(i)
    record(2, "DP dominance", not bad and not full_bad,
           f"scenes where DP executes slower than a GC planner: {len(bad)}/50 with top_k=20, "
           f"{len(full_bad)}/50 unpruned")


def test_03_gc_success_gap():
    parts, ok = [], True
    for n in (5, 10):
        scenes = scene_corpus(0, n, 50)
        grasped = {m: 0 for m in ("PBG", "MBP", "PBG-GC", "MBP-GC", "DP")}
        for scene in scenes:
            for m in grasped:
                plan = plan_scene(m, scene)
                grasped[m] += execute_plan(scene, plan).objects_grasped
        total = 50 * n
        pct = {m: 100.0 * g / total for m, g in grasped.items()}
        ok &= all(pct[m] >= 95.0 for m in ("PBG-GC", "MBP-GC", "DP"))
        ok &= grasped["PBG"] < min(grasped["PBG-GC"], grasped["MBP-GC"], grasped["DP"])
        ok &= grasped["MBP"] < min(grasped["PBG-GC"], grasped["MBP-GC"], grasped["DP"])
        parts.append(f"{n}-objs " + " ".join(f"{m} {p:.1f}%" for m, p in pct.items()))
    record(3, "GC success gap", ok, "; ".join(parts))


def test_04_gradient_integrity():
    t0 = time.perf_counter()
    actor = nn.ParamStore(11)
    init_actor(actor, (16, 16))
    actor["actor.2.b"].data[0, 1] = 3.0
    worst = {"mlp": 0.0, "gat": 0.0, "squashed_gaussian": 0.0, "reinforce": 0.0}
    for cfg in range(20):
        rng = np.random.default_rng(cfg)
        store = nn.ParamStore(cfg)
        sizes = [int(rng.integers(2, 6)) for _ in range(int(rng.integers(2, 4)))]
        nn.init_mlp(store, "m", sizes)
        x, w = rng.normal(size=(3, sizes[0])), rng.normal(size=(3, sizes[-1]))
        act = ("relu", "tanh", "leaky_relu")[cfg % 3]
        worst["mlp"] = max(worst["mlp"], check_gradients(
            lambda: nn.tsum(nn.mul(nn.mlp_forward(store, x, "m", act), w)), store.params))

        gat = nn.ParamStore(cfg)
        m, d_obj, d_r, width = int(rng.integers(1, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 5)), 4
        nn.init_gat_layer(gat, "g", d_obj, d_r, width)
        robot = nn.Tensor(rng.normal(size=(1, d_r)), requires_grad=True)
        objs = nn.Tensor(rng.normal(size=(m, d_obj)), requires_grad=True)
        adj = ~np.eye(m, dtype=bool)
        wg = rng.normal(size=(m, width))
        mode = ("learned", "uniform")[cfg % 2]

        def gat_loss():
            rr, h, _ = nn.gat_layer(gat, "g", robot, objs, adj, mode)
            return nn.add(nn.tsum(nn.mul(h, wg)), nn.tsum(rr))

        worst["gat"] = max(worst["gat"], check_gradients(gat_loss, {**gat.params, "robot": robot, "objs": objs}))

        mean = nn.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        log_std = nn.Tensor(rng.uniform(-1.5, 1.0, (2, 3)), requires_grad=True)

        def sg_loss():
            _, lp = nn.squashed_gaussian_sample(mean, log_std, np.random.default_rng(cfg))
            return nn.tsum(lp)

        worst["squashed_gaussian"] = max(worst["squashed_gaussian"],
                                         check_gradients(sg_loss, {"mean": mean, "log_std": log_std}))

        seq = init_seq_params(SeqHyperparams(n_layers=2, width=4, decoder_hidden=(4,)), cfg)
        scenes = [sample_scene(30_000 + 2 * cfg + j, 2 + (cfg + j) % 3) for j in range(2)]
        # unit-scale advantages: decoder biases get exactly zero gradient (softmax shift
        # invariance) and large advantages would magnify the finite-difference rounding noise
        adv = rng.normal(size=2)

        def rf_loss():
            return reinforce_loss(seq, actor, scenes, adv, np.random.default_rng(cfg))

        worst["reinforce"] = max(worst["reinforce"], check_gradients(rf_loss, seq.params, max_entries=6, rng=rng))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    record(4, "Gradient integrity", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" over 20 configs, {elapsed:.1f} s")


def test_05_encoder_invariants():
    params = init_seq_params(SeqHyperparams(), 5)
    rng = np.random.default_rng(5)
    worst_row, worst_perm = 0.0, 0.0
    for trial in range(100):
        scene = sample_scene(40_000 + trial, 2 + trial % 9)
        h, alphas = encode(params, scene_graph(scene), return_attention=True)
        for a in alphas:
            worst_row = max(worst_row, float(np.max(np.abs(a.sum(axis=1) - 1.0))))
        perm = rng.permutation(scene.n_objects)
        shuffled = scene.with_objects([scene.objects[i] for i in perm])
        hp = encode(params, scene_graph(shuffled)).data
        worst_perm = max(worst_perm, float(np.max(np.abs(hp - h.data[perm]))))
    record(5, "Encoder invariants", worst_row <= 1e-6 and worst_perm < 1e-9,
           f"max |row sum - 1| {worst_row:.1e}, max permutation discrepancy {worst_perm:.1e} over 100 permutations")


def _fresh_success(path: Path) -> float:
    est = BasePosePolicy.load(path)
    return evaluate_base_policy(est.actor_, eval_scenes(FRESH_EVAL_SEED, 1000), est.frame_mode)[0]


def test_06_layer2_learning():
    timing = json.loads(_artifact("timing.json").read_text())
    single = _fresh_success(_artifact("base_object_s0.json"))
    hp = json.loads(_artifact("base_object_s0.json").read_text())["hyperparams"]
    obj = [_fresh_success(_artifact(f"base_object_s{s}.json")) for s in range(5)]
    tab = [_fresh_success(_artifact(f"base_table_s{s}.json")) for s in range(5)]
    minutes = timing["base_object_s0"] / 60
    success_ok = single >= 0.90 and hp["total_steps"] <= 150_000 and minutes < 60
    ordering_ok = np.mean(obj) > np.mean(tab)
    record(6, "Layer-2 learning", success_ok and ordering_ok,
           f"seed 0 object frame {single:.3f} on 1000 fresh episodes ({hp['total_steps']} steps, {minutes:.1f} min) "
           f"[{'ok' if success_ok else 'not met'}]; 5-seed mean object {np.mean(obj):.3f} vs table {np.mean(tab):.3f} "
           f"[{'ok' if ordering_ok else 'ordering not met'}]")


def _held_out_return(seq_path: Path, base: BasePosePolicy) -> float:
    est = GraspSequencePolicy.load(seq_path, base)
    scenes = [sample_scene(50_000 + i, 5) for i in range(128)]
    eps, _ = batch_rollout(est.params_, base.actor_, scenes, "greedy", None, est.attention, base.frame_mode)
    return float(np.mean([e.total_reward for e in eps]))


def test_07_baseline_ablation():
    base = BasePosePolicy.load(_artifact("pipeline/base_object.json"))
    greedy = [_held_out_return(_artifact(f"ablation/seq_greedy_s{s}.json"), base) for s in range(5)]
    none = [_held_out_return(_artifact(f"ablation/seq_none_s{s}.json"), base) for s in range(5)]
    record(7, "Baseline ablation", np.mean(greedy) >= np.mean(none),
           f"held-out mean return with greedy rollout baseline {np.mean(greedy):.0f} "
           f"vs without {np.mean(none):.0f} (5 seeds)")


def test_08_end_to_end_pipeline():
    learned = LearnedCheckpoints(_artifact("pipeline/base_object.json"), _artifact("pipeline/seq.json"))
    scenes = scene_corpus(0, 5, 50)
    grasped, learned_times, dp_times = 0, [], []
    for scene in scenes:
        plan = plan_scene("LEARNED", scene, latency=0.05, learned=learned)
        grasped += execute_plan(scene, plan).objects_grasped
        learned_times.append(plan.planning_wall_time)
        dp_times.append(plan_scene("DP", scene, latency=0.05).planning_wall_time)
    pct = grasped / 250
    ratio = np.mean(dp_times) / np.mean(learned_times)
    ok = pct >= 0.90 and max(learned_times) < 0.05 and ratio >= 100
    record(8, "End-to-end pipeline", ok,
           f"LEARNED grasps {100 * pct:.1f}% of 250 objects, planning max {max(learned_times) * 1e3:.1f} ms; "
           f"DP/LEARNED planning time ratio at 50 ms latency {ratio:.0f}x")


def _run_twice(tmp_path, name, argv_of):
    outs = []
    for k in (0, 1):
        out = tmp_path / f"{name}_{k}"
        assert cli_main(argv_of(out)) == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
    return same, len(files), outs[0]


def test_09_determinism(tmp_path, capsys):
    results = {}
    same, n, corpus = _run_twice(tmp_path, "gen", lambda o: ["gen-scenes", "--seed", "1", "--n", "5",
                                                                "--count", "50", "--out", str(o)])
    results["gen-scenes"] = (same, n)
    scene = corpus / "scene_5obj_000.json"
    for method in ("dp", "mbp-gc"):
        results[f"plan {method}"] = _run_twice(tmp_path, f"plan_{method}", lambda o: [
            "plan", "--method", method, "--scene", str(scene), "--latency", "0.05", "--clock", "virtual",
            "--out", str(o)])[:2]
    same, n, base_dir = _run_twice(tmp_path, "base", lambda o: [
        "train-base", "--seed", "3", "--steps", "600", "--hidden", "16", "16", "--eval-every", "200",
        "--eval-episodes", "50", "--out", str(o / "base.json")])
    results["train-base"] = (same, n)
    base_ckpt = base_dir / "base.json"
    results["train-seq"] = _run_twice(tmp_path, "seq", lambda o: [
        "train-seq", "--seed", "3", "--base-ckpt", str(base_ckpt), "--epochs", "2", "--batches-per-epoch", "2",
        "--batch-episodes", "8", "--eval-scenes", "16", "--out", str(o / "seq.json")])[:2]
    seq_ckpt = tmp_path / "seq_0" / "seq.json"
    results["bench"] = _run_twice(tmp_path, "bench", lambda o: [
        "bench", "--seed", "2", "--tasks", "3", "--n-scenes", "3", "--methods", "pbg", "dp", "learned",
        "--base-ckpt", str(base_ckpt), "--seq-ckpt", str(seq_ckpt), "--latency", "0.05", "--clock", "virtual",
        "--out", str(o)])[:2]
    results["eval"] = _run_twice(tmp_path, "eval", lambda o: [
        "eval", "--seed", "4", "--base-ckpt", str(base_ckpt), "--episodes", "100", "--out", str(o)])[:2]
    capsys.readouterr()
    ok = all(same for same, _ in results.values())
    record(9, "Determinism", ok, ", ".join(f"{k} {'identical' if s else 'DIFFERENT'} ({n} files)"
                                           for k, (s, n) in results.items()))


def test_10_masking_safety():
    actor = nn.ParamStore(10)
    init_actor(actor, (32, 32))
    params = init_seq_params(SeqHyperparams(), 10)
    rng = np.random.default_rng(10)
    steps = reselected = 0
    worst = 0.0
    batch = 0
    while steps < 10_000:
        scenes = [sample_scene(60_000 + batch * 64 + i, 2 + (batch + i) % 9) for i in range(64)]
        batch += 1
        episodes, _ = batch_rollout(params, actor, scenes, "sample", rng)
        for scene, ep in zip(scenes, episodes):
            grasped = set()
            for st in ep.steps:
                steps += 1
                reselected += st.object_id in grasped
                probs = np.array(st.probs)
                worst = max(worst, abs(probs.sum() - 1.0))
                ids = [o.id for o in scene.objects]
                reselected += any(probs[ids.index(g)] != 0.0 for g in grasped)
                if st.grasped:
                    grasped.add(st.object_id)
    record(10, "Masking safety", reselected == 0 and worst <= 1e-9,
           f"{steps} rollout steps, {reselected} re-selections or nonzero masked entries, "
           f"max |sum p - 1| {worst:.1e}")
