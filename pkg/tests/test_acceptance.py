"""End-to-end acceptance gate: one test per criterion, one PASS/FAIL line each.

The training criteria (5-8) are slow: roughly 10 minutes for the reference
run plus the ablation sweep. Every tolerance below is fixed; do not loosen
them to make a run pass.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from cifnar import autodiff as ad
from cifnar.checkpoint import load_checkpoint, save_checkpoint
from cifnar.cif import alignment_loss, cif_scan, fire, quantity_loss, scale_weights
from cifnar.ctc import SpikeBoundaries, brute_force_ctc, ctc_loss, extract_spikes
from cifnar.harness.bench import bench_params
from cifnar.harness.config import TrainConfig
from cifnar.harness.evaluate import evaluate, evaluate_params
from cifnar.harness.train import dev_set, train
from cifnar.model import Batch, ModelConfig, combined_loss, init_params
from cifnar.synth import TaskSpec, generate_many, read_dataset, write_dataset

# criterion 1
CTC_INSTANCES, CTC_TOL, CTC_SECONDS = 200, 1e-9, 60.0
# criterion 2
GRAD_TOL, GRAD_EPS, GRAD_SECONDS = 1e-4, 1e-5, 300.0
# criterion 3
CIF_INSTANCES, CIF_TOL, CIF_SECONDS = 1000, 1e-9, 10.0
# criterion 5
CER_BAR, LEN_ACC_BAR, TRAIN_SECONDS, DEV_SIZE = 0.05, 0.95, 1800.0, 500
# criteria 6 and 7: every variant gets the same budget and seeds
ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_STEPS = 1000
ABLATION_VARIANTS = {
    "base": dict(disable_ctx=True, disable_ali=True),
    "+ctx": dict(disable_ali=True),
    "+ctx+ali": {},
}
# criterion 8
LATENCY_BUCKETS = ((2, 4), (5, 7), (8, 10))
LATENCY_PER_BUCKET = 20


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance] criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")


# ---------------------------------------------------------------------------
# shared expensive fixtures


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    cfg = TrainConfig(out_dir=str(tmp_path_factory.mktemp("reference")), dev_size=DEV_SIZE)
    t0 = time.perf_counter()
    res = train(cfg, quiet=True)
    dev = dev_set(cfg)
    cfg_m, params, _ = load_checkpoint(res.best_checkpoint)
    rep = evaluate_params(params, cfg_m, dev)
    return dict(cfg=cfg, result=res, report=rep, dev=dev, seconds=time.perf_counter() - t0)


@pytest.fixture(scope="module")
def ablation_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    dev = None
    out = {name: [] for name in ABLATION_VARIANTS}
    for seed in ABLATION_SEEDS:
        for name, flags in ABLATION_VARIANTS.items():
            cfg = TrainConfig(max_steps=ABLATION_STEPS, eval_every=ABLATION_STEPS, seed=seed, dev_size=DEV_SIZE,
                              out_dir=str(root / f"{name}_{seed}"), **flags)
            res = train(cfg, quiet=True)
            dev = dev or dev_set(cfg)
            out[name].append(evaluate_params(res.params, cfg.effective_model(), dev))
    return out


# ---------------------------------------------------------------------------


def test_criterion_1_ctc_oracle(capsys):
    rng = np.random.default_rng(20261016)
    t0 = time.perf_counter()
    worst, flag_mismatch = 0.0, 0
    for _ in range(CTC_INSTANCES):
        V = int(rng.integers(1, 4))
        U = int(rng.integers(1, 9))
        L = int(rng.integers(0, 5))
        z = rng.normal(scale=2.0, size=(U, V + 1))
        tgt = rng.integers(1, V + 1, size=L).tolist()
        tape = ad.Tape()
        got = ctc_loss(tape.input("z", z), tgt).nll[0]
        ref = brute_force_ctc(z, tgt)
        if math.isinf(ref) or math.isinf(got):
            flag_mismatch += math.isinf(ref) != math.isinf(got)
        else:
            worst = max(worst, abs(got - ref))
    secs = time.perf_counter() - t0
    ok = worst <= CTC_TOL and flag_mismatch == 0 and secs < CTC_SECONDS
    report(capsys, 1, ok, f"max |ctc - brute force| = {worst:.2e} over {CTC_INSTANCES} instances, "
                          f"{flag_mismatch} reachability mismatches, {secs:.1f}s")
    assert ok


def test_criterion_2_gradients(capsys):
    from test_autodiff import OPS, worst_grad_error  # noqa: E402  (tests/ is on sys.path under pytest)

    t0 = time.perf_counter()
    errs = {f"op:{name}": worst_grad_error(name) for name in sorted(OPS)}
    rng = np.random.default_rng(7)

    t = ad.Tape()
    errs["quantity_loss"] = ad.grad_check(t, quantity_loss(t.input("a", rng.random((3, 9))), [2, 4, 3]), GRAD_EPS)

    t = ad.Tape()
    sb = [SpikeBoundaries(0.5, np.zeros(1), [0, 2, 5, 7], 3), SpikeBoundaries(0.5, np.zeros(1), [0, 4], 1)]
    loss, _ = alignment_loss(t.input("a", rng.random((2, 9))), sb, [3, 1])
    errs["alignment_loss"] = ad.grad_check(t, loss, GRAD_EPS)

    t = ad.Tape()
    res = ctc_loss(t.input("z", rng.normal(size=(2, 6, 4))), [[1, 3, 3], [2]], [6, 4])
    errs["ctc_loss"] = ad.grad_check(t, res.loss, GRAD_EPS)

    t = ad.Tape()
    fe = fire(t.input("h", rng.normal(size=(2, 10, 3))), t.input("a", rng.uniform(0.1, 0.9, (2, 10))), [10, 7])
    errs["fire"] = ad.grad_check(t, ad.mean(ad.mul(fe.embeddings, fe.embeddings)), GRAD_EPS)

    tiny = ModelConfig(feature_dim=4, vocab_size=3, d_model=8, n_heads=2, d_ff=16, n_encoder_layers=1,
                       n_cif_decoder_layers=1, n_contextual_layers=1, conv_kernel_size=3, max_frames=10,
                       max_tokens=2)
    params = init_params(tiny, 0)
    batch = Batch(rng.normal(size=(1, 10, 4)), np.array([10]), [[1, 3]])
    # put theta between the 2nd and 3rd largest spike scores so the alignment term is active
    from test_model import theta_for_spikes  # noqa: E402

    cfg = replace(tiny, theta=theta_for_spikes(params, tiny, batch, 2))
    lb = combined_loss(params, cfg, batch)
    errs["combined_loss"] = ad.grad_check(lb.tape, lb.var, GRAD_EPS)
    secs = time.perf_counter() - t0
    worst_name = max(errs, key=errs.get)
    ok = max(errs.values()) <= GRAD_TOL and secs < GRAD_SECONDS and lb.ali_applied == 1.0
    report(capsys, 2, ok, f"{len(errs)} checks, worst {worst_name} = {errs[worst_name]:.2e} "
                          f"(combined_loss {errs['combined_loss']:.2e}, ali applied), {secs:.1f}s")
    assert ok


def test_criterion_3_cif_invariants(capsys):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst_part = worst_cons = 0.0
    count_fail = 0
    for _ in range(CIF_INSTANCES):
        U = int(rng.integers(1, 60))
        alpha = rng.random(U)
        scan = cif_scan(alpha, residual_threshold=None)
        per_tok = np.zeros(len(scan.fire_positions) + 1)
        for tok, _u, w, *_ in scan.pieces:
            per_tok[tok] += w
        if scan.fire_positions:
            worst_part = max(worst_part, float(np.abs(per_tok[: len(scan.fire_positions)] - 1.0).max()))
        worst_cons = max(worst_cons, abs(alpha.sum() - len(scan.fire_positions) - scan.residual_weight))
        target = int(rng.integers(1, U + 1))
        fe = fire(np.zeros((U, 1)), scale_weights(alpha + 1e-12, target).value)
        count_fail += int(fe.counts[0]) != target
    secs = time.perf_counter() - t0
    ok = worst_part <= CIF_TOL and worst_cons <= CIF_TOL and count_fail == 0 and secs < CIF_SECONDS
    report(capsys, 3, ok, f"partition err {worst_part:.1e}, conservation err {worst_cons:.1e}, "
                          f"{count_fail}/{CIF_INSTANCES} scaled fire-count misses, {secs:.2f}s")
    assert ok


def test_criterion_4_spike_example(capsys):
    from test_ctc import posteriors_for_spikes  # noqa: E402

    pattern = [0, 0, 1, 0, 0, 1, 0, 1, 0]
    sb = extract_spikes(posteriors_for_spikes(pattern), 0.5)
    ok = sb.spikes.tolist() == pattern and sb.boundaries == [0, 2, 5, 7]
    report(capsys, 4, ok, f"P_s = {sb.spikes.tolist()}, P_b = {sb.boundaries}")
    assert ok


def test_criterion_5_end_to_end(capsys, reference_run):
    rep, secs = reference_run["report"], reference_run["seconds"]
    ok_cer = rep.cer < CER_BAR
    ok_len = rep.length_accuracy > LEN_ACC_BAR
    ok = ok_cer and ok_len and secs < TRAIN_SECONDS
    # Two equal adjacent tokens whose durations sum to <= dur_max look exactly like one token.
    task = reference_run["cfg"].task
    ambiguous = sum(
        any(a == b and (e0 - s0) + (e1 - s1) <= task.dur_max
            for a, b, (s0, e0), (s1, e1) in zip(u.tokens, u.tokens[1:], u.boundaries, u.boundaries[1:]))
        for u in reference_run["dev"]
    )
    ceiling = 1 - ambiguous / len(reference_run["dev"])
    report(capsys, 5, ok, f"dev CER {rep.cer:.4f} (< {CER_BAR}: {ok_cer}), length_accuracy "
                          f"{rep.length_accuracy:.3f} (> {LEN_ACC_BAR}: {ok_len}; Bayes ceiling on this dev set "
                          f"{ceiling:.3f}), best step {reference_run['result'].best_step}, {secs:.0f}s")
    assert ok


def test_criterion_6_ablation_trend(capsys, ablation_runs):
    means = {k: float(np.mean([r.cer for r in v])) for k, v in ablation_runs.items()}
    names = list(ABLATION_VARIANTS)
    ok = all(means[a] > means[b] for a, b in zip(names, names[1:]))
    per_seed = {k: [round(r.cer, 4) for r in v] for k, v in ablation_runs.items()}
    report(capsys, 6, ok, "mean dev CER " + " -> ".join(f"{k} {means[k]:.4f}" for k in names)
           + f" over seeds {list(ABLATION_SEEDS)} at {ABLATION_STEPS} steps; per seed {per_seed}")
    assert ok


def test_criterion_7_boundaries(capsys, ablation_runs):
    def agg(name, field):
        vals = [getattr(r, field) for r in ablation_runs[name]]
        return float(np.mean([v for v in vals if v is not None]))

    s_no, s_ali = agg("+ctx", "boundary_signed"), agg("+ctx+ali", "boundary_signed")
    m_no, m_ali = agg("+ctx", "boundary_mae"), agg("+ctx+ali", "boundary_mae")
    s_base = agg("base", "boundary_signed")
    ok = s_no < 0 and abs(s_ali) < abs(s_no) and m_ali < m_no
    report(capsys, 7, ok, f"signed error without ali {s_no:+.3f} (base {s_base:+.3f}), with ali {s_ali:+.3f}; "
                          f"boundary_mae {m_no:.3f} -> {m_ali:.3f}")
    assert ok


def test_criterion_8_latency(capsys, reference_run):
    cfg, params, _ = load_checkpoint(reference_run["result"].best_checkpoint)
    bench = bench_params(params, cfg, reference_run["dev"], per_bucket=LATENCY_PER_BUCKET,
                         buckets=LATENCY_BUCKETS)
    passes_ok = all(p == 1 for p in bench.nar_passes) and bench.ar_passes == bench.output_lengths
    ratios = [r.ratio for r in bench.rows]
    grows = all(r is not None for r in ratios) and all(a < b for a, b in zip(ratios, ratios[1:]))
    ok = passes_ok and bench.nar_latency_ratio > 1 and grows
    shown = ", ".join(f"{r.lo}-{r.hi}: {r.ratio:.2f}" if r.ratio else f"{r.lo}-{r.hi}: n/a" for r in bench.rows)
    report(capsys, 8, ok, f"passes NAR=1/AR=L_hat on all {len(bench.nar_passes)} utterances: {passes_ok}; "
                          f"ratio per bucket {shown}; aggregate {bench.nar_latency_ratio:.2f}")
    assert ok


def test_criterion_9_persistence(capsys, tmp_path):
    cfg = ModelConfig()
    params = init_params(cfg, 11)
    task = TaskSpec()
    utts = generate_many(task, [(99, i) for i in range(40)])
    ck = save_checkpoint(tmp_path / "m.ckpt", cfg, params)
    direct = evaluate_params(params, cfg, utts)
    loaded = evaluate(ck, utts, task)
    _, back, _ = load_checkpoint(ck)
    params_ok = all(back[k].tobytes() == params[k].tobytes() for k in params)
    report_ok = loaded == direct and loaded.to_json() == direct.to_json()
    path = write_dataset(utts, tmp_path / "d.bin", task)
    spec2, utts2 = read_dataset(path)
    data_ok = spec2 == task and utts2 == utts and write_dataset(utts2, tmp_path / "e.bin", task).read_bytes() == \
        path.read_bytes()
    ok = params_ok and report_ok and data_ok
    report(capsys, 9, ok, f"checkpoint arrays bit-exact {params_ok}, EvalReport identical {report_ok}, "
                          f"dataset round trip bit-exact {data_ok}")
    assert ok
