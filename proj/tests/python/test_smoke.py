"""Smoke tests for the Python bindings: corpus generation, the theory suites,
metric identities, and a miniature end-to-end CLI run."""

import json
import math
import os
import subprocess
import sys
import tempfile

import pytest

latentjudge = pytest.importorskip("latentjudge")


def test_softmax_rows_matches_direct_evaluation():
    rows = latentjudge.softmax_rows([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    exps = [math.exp(x) for x in (1.0, 2.0, 3.0)]
    total = sum(exps)
    for got, want in zip(rows[0], exps):
        assert abs(got - want / total) < 1e-12
    assert all(abs(v - 1.0 / 3.0) < 1e-12 for v in rows[1])
    assert abs(sum(rows[0]) - 1.0) < 1e-12


def test_generate_corpus_labels_and_determinism():
    kwargs = dict(vocab_size=32, seq_len=48, n_risk_patterns=2, risk_pattern_len=3,
                  risk_density=0.15, distractor_rate=0.2, unsafe_ratio=0.5, seed=9)
    corpus = latentjudge.generate_corpus(100, **kwargs)
    assert len(corpus) == 100
    assert sum(ex["label"] for ex in corpus) == 50
    again = latentjudge.generate_corpus(100, **kwargs)
    assert [ex["tokens"] for ex in corpus] == [ex["tokens"] for ex in again]
    unsafe = next(ex for ex in corpus if ex["label"] == 1)
    assert unsafe["meta"]["risk_positions"]


def test_bayes_posterior_enumerated_sum():
    p = latentjudge.bayes_posterior([1.0], [[0.2, 0.3, 0.5]], [0.1, 0.5, 0.9], 0)
    assert abs(p - 0.62) < 1e-12


def test_verify_theory_small_run_passes():
    out = latentjudge.verify_theory(seed=5, prop1_worlds=15, prop2_triples=300)
    assert out["all_pass"]
    assert out["prop1_violations"] == 0
    assert out["prop2_violations"] == 0


def test_metrics_identities():
    m = latentjudge.metrics_from_confusion(88, 10, 90, 12)
    assert abs(m["accuracy"] - 0.89) < 1e-4
    assert abs(m["f1"] - 0.8889) < 1e-4


def test_cli_roundtrip_train_and_reproduce():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = os.path.join(tmp, "run.ini")
        out_dir = os.path.join(tmp, "out")
        with open(cfg, "w") as f:
            f.write(f"""
[run]
out_dir = {out_dir}
[data]
vocab_size = 32
seq_len = 24
n_risk_patterns = 2
risk_pattern_len = 3
risk_density = 0.25
noise_model = uniform
n_train = 32
n_val = 16
n_test = 8
[reasoner]
d_model = 16
n_layers = 1
n_heads = 2
[extractor]
d_model = 16
n_layers = 1
n_heads = 2
[pretrain]
steps = 5
[train]
steps = 5
batch_size = 4
latent_len = 2
eval_every = 0
""")
        assert latentjudge.run_cli(["train", "--config", cfg]) == 0
        assert os.path.exists(os.path.join(out_dir, "manifest.json"))
        with open(os.path.join(out_dir, "metrics", "train_result.json")) as f:
            result = json.load(f)
        assert "val_metrics" in result["cell"]
        assert latentjudge.run_cli(["reproduce", out_dir]) == 0


def test_cli_usage_errors():
    assert latentjudge.run_cli([]) != 0
    assert latentjudge.run_cli(["no-such-command"]) != 0


def test_native_binary_if_available():
    exe = os.environ.get("LATENTJUDGE_CLI")
    if not exe or not os.path.exists(exe):
        pytest.skip("native CLI not provided")
    proc = subprocess.run([exe, "verify-theory", "--prop1-worlds", "5", "--prop2-triples", "100"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "[PASS]" in proc.stdout
