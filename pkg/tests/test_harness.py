import itertools
import json
import math
import xml.etree.ElementTree as ET
from collections import deque
from dataclasses import replace

import numpy as np
import pytest

from cifnar.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from cifnar.harness import cli
from cifnar.harness import train as train_mod
from cifnar.harness.bench import bench_params
from cifnar.harness.config import ConfigError, TrainConfig, apply_overrides, load_config, save_config
from cifnar.harness.evaluate import evaluate, evaluate_params, fire_frames, read_curves
from cifnar.harness.metrics import boundary_errors, corpus_cer, edit_counts, edit_distance
from cifnar.harness.train import Adam, noam_lr, train, training_batches
from cifnar.harness.visualize import plot_curves, visualize_params
from cifnar.model import ModelConfig, init_params
from cifnar.synth import TaskSpec, generate_many, write_dataset

SMALL_MODEL = ModelConfig(d_model=16, d_ff=32, n_encoder_layers=1, n_cif_decoder_layers=1, n_contextual_layers=1)
SMALL_TASK = TaskSpec(len_max=4, dur_max=6)


def small_config(tmp_path, **kw):
    base = dict(model=SMALL_MODEL, task=SMALL_TASK, batch_size=4, max_steps=3, dev_size=6, eval_every=2,
                warmup_steps=2, out_dir=str(tmp_path / "run"))
    base.update(kw)
    return TrainConfig(**base)


def bfs_edit_distances(src, alphabet, max_len):
    """Shortest single-edit path lengths from ``src`` to every string of length <= max_len."""
    dist = {src: 0}
    q = deque([src])
    while q:
        s = q.popleft()
        nbrs = [s[:i] + s[i + 1:] for i in range(len(s))]
        nbrs += [s[:i] + (a,) + s[i + 1:] for i in range(len(s)) for a in alphabet if a != s[i]]
        if len(s) < max_len:
            nbrs += [s[:i] + (a,) + s[i:] for i in range(len(s) + 1) for a in alphabet]
        for n in nbrs:
            if n not in dist:
                dist[n] = dist[s] + 1
                q.append(n)
    return dist


class TestMetrics:
    def test_examples(self):
        assert corpus_cer([[1, 2, 3]], [[1, 2, 3]])[0] == 0.0
        cer, c = corpus_cer(["abc"], ["abd"])
        assert cer == pytest.approx(1 / 3) and (c.sub, c.ins, c.dele) == (1, 0, 0)
        assert edit_counts([1, 2], [1, 2, 3]).ins == 1
        assert edit_counts([1, 2, 3], [1, 3]).dele == 1
        assert edit_distance([], [1, 2]) == 2

    def test_against_exhaustive_oracle(self):
        alphabet = (1, 2)
        strings = [s for n in range(7) for s in itertools.product(alphabet, repeat=n)]
        for ref in strings:
            dist = bfs_edit_distances(ref, alphabet, 6)
            for hyp in strings:
                c = edit_counts(ref, hyp)
                assert c.errors == dist[hyp]
                assert c.ins - c.dele == len(hyp) - len(ref)

    def test_three_symbol_oracle(self):
        alphabet = (1, 2, 3)
        rng = np.random.default_rng(0)
        strings = [s for n in range(5) for s in itertools.product(alphabet, repeat=n)]
        for k in rng.choice(len(strings), 25, replace=False):
            dist = bfs_edit_distances(strings[k], alphabet, 4)
            for hyp in strings:
                assert edit_distance(strings[k], hyp) == dist[hyp]

    def test_boundary_errors(self):
        st = boundary_errors([[2, 5], [1], [3, 7]], [[3, 5], [1, 2], [3, 9]])
        assert st.n_utterances == 2 and st.n_tokens == 4
        assert st.signed == pytest.approx(-3 / 4) and st.mae == pytest.approx(3 / 4)
        assert math.isnan(boundary_errors([[1]], [[1, 2]]).mae)

    def test_fire_frames_places_residual_last(self):
        assert fire_frames([2, 5], 3, 9) == [2, 5, 8]
        assert fire_frames([2, 5], 2, 9) == [2, 5]


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = small_config(tmp_path, disable_ali=True)
        save_config(cfg, tmp_path / "c.json")
        assert load_config(tmp_path / "c.json") == cfg

    @pytest.mark.parametrize("raw", ['{"train": {"max_steps": 0}}', '{"train": {"batch_size": 0}}',
                                     '{"model": {"bogus": 1}}', '{"extra": {}}', "[1, 2]", "{not json",
                                     '{"model": {"vocab_size": 8}}'])
    def test_invalid(self, tmp_path, raw):
        (tmp_path / "c.json").write_text(raw)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")

    def test_overrides(self):
        cfg = apply_overrides(TrainConfig(), seed=4, steps=10, disable_ctx=True, decoder_mode="c_only", theta=0.4)
        assert (cfg.seed, cfg.max_steps, cfg.disable_ctx) == (4, 10, True)
        assert cfg.model.decoder_input_mode == "c_only" and cfg.model.theta == 0.4
        eff = cfg.effective_model()
        assert eff.contextual is False and eff.lambda1 == 1.0
        assert replace(cfg, disable_ali=True).effective_model().lambda1 == 0.0
        with pytest.raises(ConfigError):
            apply_overrides(TrainConfig(), theta=1.5)


class TestOptim:
    def test_noam(self):
        assert noam_lr(1, 1e-3, 500) == pytest.approx(2e-6)
        assert noam_lr(500, 1e-3, 500) == pytest.approx(1e-3)
        assert noam_lr(2000, 1e-3, 500) == pytest.approx(5e-4)

    def test_adam_minimises_quadratic(self):
        p = {"x": np.array([3.0, -2.0])}
        opt = Adam(p, (0.9, 0.98), 1e-9)
        for _ in range(500):
            opt.step(p, {"x": 2 * p["x"]}, 0.05)
        assert np.abs(p["x"]).max() < 1e-2

    def test_batches_deterministic_and_bucketed(self):
        a = training_batches(SMALL_TASK, 4, 0, pool=3)
        b = training_batches(SMALL_TASK, 4, 0, pool=3)
        for _ in range(6):
            (sa, ua), (sb, ub) = next(a), next(b)
            assert sa == sb and ua == ub
            assert len(ua) == 4


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params(SMALL_MODEL, 0)
        path = save_checkpoint(tmp_path / "m.ckpt", SMALL_MODEL, params, {"step": 3})
        cfg, back, extra = load_checkpoint(path)
        assert cfg == SMALL_MODEL and extra == {"step": 3}
        assert set(back) == set(params)
        for k in params:
            assert back[k].tobytes() == params[k].tobytes() and back[k].shape == params[k].shape
        save_checkpoint(tmp_path / "n.ckpt", cfg, back, extra)
        assert (tmp_path / "n.ckpt").read_bytes() == path.read_bytes()

    def test_corruption(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", SMALL_MODEL, init_params(SMALL_MODEL, 0))
        data = path.read_bytes()
        for bad in (data[:-5], b"XXXXXXXX" + data[8:], data + b"\0"):
            (tmp_path / "b.ckpt").write_bytes(bad)
            with pytest.raises(CheckpointError):
                load_checkpoint(tmp_path / "b.ckpt")


class TestTrain:
    def test_single_step(self, tmp_path):
        res = train(small_config(tmp_path, max_steps=1))
        lines = res.metrics_log.read_text().splitlines()
        assert len(lines) == 1
        rec = json.loads(lines[0])
        assert set(train_mod.LOG_FIELDS) <= set(rec)
        assert rec["step"] == 1
        assert res.best_checkpoint.exists() and res.final_checkpoint.exists()
        _, params, _ = load_checkpoint(res.final_checkpoint)
        init = init_params(SMALL_MODEL, 0)
        assert any(not np.array_equal(params[k], init[k]) for k in init)

    def test_deterministic(self, tmp_path):
        a = train(small_config(tmp_path, out_dir=str(tmp_path / "a")))
        b = train(small_config(tmp_path, out_dir=str(tmp_path / "b")))
        assert a.metrics_log.read_bytes() == b.metrics_log.read_bytes()
        assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()
        assert (tmp_path / "a" / "dev.jsonl").read_bytes() == (tmp_path / "b" / "dev.jsonl").read_bytes()

    def test_curves_replay_identically(self, tmp_path):
        res = train(small_config(tmp_path))
        s1 = plot_curves(res.metrics_log, tmp_path / "c1.svg").read_bytes()
        s2 = plot_curves(res.metrics_log, tmp_path / "c2.svg").read_bytes()
        assert s1 == s2
        ET.fromstring(s1)
        curves = read_curves(res.metrics_log)
        assert curves["step"] == [1, 2, 3]

    def test_divergence(self, tmp_path, monkeypatch):
        real = train_mod.loss_and_grads

        def poisoned(params, cfg, batch):
            lb, grads = real(params, cfg, batch)
            lb.total = float("nan")
            return lb, grads

        monkeypatch.setattr(train_mod, "loss_and_grads", poisoned)
        with pytest.raises(train_mod.DivergenceError) as info:
            train(small_config(tmp_path))
        assert info.value.step == 1
        rec = json.loads((tmp_path / "run" / "metrics.jsonl").read_text().splitlines()[-1])
        assert rec["event"] == "divergence" and rec["batch_seed"] == list(info.value.batch_seed)


class TestEvaluate:
    def setup_method(self):
        self.params = init_params(SMALL_MODEL, 0)
        self.utts = generate_many(SMALL_TASK, range(12))

    def test_report_fields(self):
        rep = evaluate_params(self.params, SMALL_MODEL, self.utts, latency=2)
        assert rep.cer >= 0 and 0 <= rep.length_accuracy <= 1
        assert rep.ref_len == sum(len(u.tokens) for u in self.utts)
        assert rep.nar_latency_ratio is not None and rep.nar_latency_ratio > 0

    def test_perfect_hypotheses(self, monkeypatch):
        from cifnar.harness import evaluate as ev

        real = ev.predict

        def oracle(params, cfg, utts, batch_size=32):
            p = real(params, cfg, utts, batch_size)
            p.hypotheses = [list(u.tokens) for u in utts]
            p.fire_frames = [u.end_frames() for u in utts]
            return p

        monkeypatch.setattr(ev, "predict", oracle)
        rep = ev.evaluate_params(self.params, SMALL_MODEL, self.utts)
        assert rep.cer == 0.0 and rep.length_accuracy == 1.0 and rep.boundary_mae == 0.0

    def test_checkpoint_reproduces_report(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", SMALL_MODEL, self.params)
        direct = evaluate_params(self.params, SMALL_MODEL, self.utts)
        assert evaluate(path, self.utts).to_json() == direct.to_json()

    def test_mismatched_task(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", SMALL_MODEL, self.params)
        with pytest.raises(ValueError):
            evaluate(path, self.utts, TaskSpec(vocab_size=8))


class TestVisualize:
    def test_outputs(self, tmp_path):
        params = init_params(SMALL_MODEL, 0)
        utt = generate_many(SMALL_TASK, [5])[0]
        files = visualize_params(params, SMALL_MODEL, utt, tmp_path)
        alpha_rows = files.alpha_csv.read_text().splitlines()[1:]
        spike_rows = files.spike_csv.read_text().splitlines()[1:]
        assert len(alpha_rows) == len(spike_rows) == utt.n_frames
        from cifnar.harness.evaluate import predict

        n_hat = len(predict(params, SMALL_MODEL, [utt]).hypotheses[0])
        assert sum(int(r.split(",")[-1]) for r in alpha_rows) == n_hat
        root = ET.fromstring(files.svg.read_text())
        marks = [e for e in root.iter() if e.get("class") == "true-boundary"]
        assert len(marks) == len(utt.tokens)


class TestBench:
    def test_contract(self):
        params = init_params(SMALL_MODEL, 0)
        utts = generate_many(SMALL_TASK, range(10))
        rep = bench_params(params, SMALL_MODEL, utts, per_bucket=2, repeats=1)
        assert all(p == 1 for p in rep.nar_passes)
        assert rep.ar_passes == rep.output_lengths
        assert "aggregate" in rep.table()


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        cfg = small_config(tmp_path, max_steps=2)
        save_config(cfg, tmp_path / "c.json")
        assert cli.main(["gen-data", "--config", str(tmp_path / "c.json"), "--n", "6", "--seed", "3",
                         "--out", str(tmp_path / "d.bin")]) == 0
        run = tmp_path / "cli_run"
        assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--steps", "2", "--seed", "1",
                         "--out", str(run), "--disable-ali", "--decoder-mode", "c_only"]) == 0
        saved = load_config(run / "config.json")
        assert saved.seed == 1 and saved.disable_ali and saved.model.decoder_input_mode == "c_only"
        ck = str(run / "best.ckpt")
        assert cli.main(["eval", "--checkpoint", ck, "--data", str(tmp_path / "d.bin"),
                         "--out", str(tmp_path / "r.json")]) == 0
        assert json.loads((tmp_path / "r.json").read_text())["n_utterances"] == 6
        assert cli.main(["visualize", "--checkpoint", ck, "--data", str(tmp_path / "d.bin"), "--index", "2",
                         "--out", str(tmp_path / "viz")]) == 0
        assert (tmp_path / "viz" / "utt2.svg").exists()
        assert cli.main(["bench", "--checkpoint", ck, "--data", str(tmp_path / "d.bin"), "--per-bucket", "1",
                         "--repeats", "1"]) == 0
        assert "nar_latency_ratio" in capsys.readouterr().out

    def test_config_error_exit_code(self, tmp_path):
        (tmp_path / "bad.json").write_text('{"train": {"max_steps": 0}}')
        assert cli.main(["train", "--config", str(tmp_path / "bad.json")]) == cli.EXIT_CONFIG
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == cli.EXIT_CONFIG

    def test_task_mismatch_exit_code(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", SMALL_MODEL, init_params(SMALL_MODEL, 0))
        write_dataset(generate_many(TaskSpec(vocab_size=8), range(2)), tmp_path / "d.bin", TaskSpec(vocab_size=8))
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--data", str(tmp_path / "d.bin")]) == 2

    def test_divergence_exit_code(self, tmp_path, monkeypatch):
        def poisoned(params, cfg, batch):
            raise train_mod.ad.NonFiniteError("forced")

        monkeypatch.setattr(train_mod, "loss_and_grads", poisoned)
        cfg = small_config(tmp_path)
        save_config(cfg, tmp_path / "c.json")
        assert cli.main(["train", "--config", str(tmp_path / "c.json")]) == cli.EXIT_DIVERGED
