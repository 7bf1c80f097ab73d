"""Acceptance suite: twelve checks, one printed PASS/FAIL line each.

Each criterion is verified at its stated tolerance and time budget; the
result line is written straight to the terminal (bypassing capture).
"""

import copy
import json
import time

import numpy as np
import pytest

from conftest import WORDS, fitted_model, tiny_config
from test_quantizers import oracle_token, oracle_weight

from kvq.analyzer import (
    LLAMA2_13B,
    DeployConfig,
    estimate_decode_time,
    table7_report,
    verify_runtime_accounting,
)
from kvq.calibration import (
    CalibConfig,
    calibrate_model,
    collect_activations,
    crr_loss,
    init_trainables,
    sample_segments,
)
from kvq.cli import main
from kvq.evaluate import logit_mae, perplexity
from kvq.model import (
    Model,
    ModelConfig,
    attach_kv_smoothing,
    block_forward,
    prefill,
    quantize_model_weights,
    spread_kv_channels,
)
from kvq.quantizers import (
    S_FLOOR,
    TokenQuantSpec,
    WeightQuantSpec,
    apply_kv_smoothing,
    dequantize,
    group_bounds,
    init_smoothing,
    quantize_token,
    quantize_weight,
)
from kvq.tensor import Tensor, rms_norm


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {n}: {detail}"


# -- shared fixtures ----------------------------------------------------------

CAL = dict(k=2, epochs=3, segments=8, seg_len=32)


@pytest.fixture(scope="module")
def seeds_suite():
    """Ten seeded desk models with calibrated and round-to-nearest W4KV4 variants."""
    suite = []
    for seed in range(10):
        fp, corpus = fitted_model(seed, steps=100, spread=3.0)
        mq = copy.deepcopy(fp)
        rep = calibrate_model(mq, corpus, CalibConfig(seed=seed, **CAL))
        mr = copy.deepcopy(fp)
        quantize_model_weights(mr)
        mr.config.quant_mode = "weight_kv"
        suite.append({"seed": seed, "fp": fp, "corpus": corpus, "mq": mq, "mr": mr,
                      "ratio": rep["mean_final_initial_ratio"]})
    return suite


@pytest.fixture(scope="module")
def cli_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("accept")
    rng = np.random.default_rng(0)
    (d / "corpus.txt").write_bytes(
        b"".join(WORDS[i] for i in rng.integers(0, 8, size=500))
    )
    return d


FIT_ARGS = [
    "--layers", "2", "--hidden", "32", "--heads", "2", "--intermediate", "48",
    "--max-seq-len", "64", "--group-size", "16", "--kv-group-size", "8",
    "--steps", "25", "--batch", "2", "--seq-len", "24", "--seed", "0",
]


# -- criteria -----------------------------------------------------------------


def test_criterion_01_poq_prefill_equivalence(capsys):
    t0 = time.time()
    rng = np.random.default_rng(0)
    identical = 0
    for trial in range(20):
        cfg = ModelConfig(max_seq_len=64, kv_group_size=32, weight_group_size=64)
        m = Model.random(cfg, seed=trial)
        quantize_model_weights(m)
        ids = rng.integers(0, cfg.vocab_size, size=int(rng.integers(8, 48)))
        a, _ = prefill(m, ids, mode="weight_only")
        b, _ = prefill(m, ids, mode="weight_kv")
        identical += int(np.array_equal(a.data, b.data))
    dt = time.time() - t0
    ok = identical == 20 and dt < 30
    report(capsys, 1, ok,
           f"W4KV4 prefill bit-identical to W4 on {identical}/20 models ({dt:.1f}s)")


def test_criterion_02_cacheless_eval_equivalence(capsys, cli_dir):
    t0 = time.time()
    base = cli_dir / "c2_base.kvq"
    assert main(["fit", "--corpus", str(cli_dir / "corpus.txt"),
                 "--out", str(base)] + FIT_ARGS) == 0
    ppls = {}
    for setting in ("w4", "w4kv4"):
        out = cli_dir / f"c2_{setting}.kvq"
        assert main(["quantize", "--model", str(base), "--out", str(out),
                     "--mode", setting, "--group-size", "16",
                     "--kv-group-size", "8"]) == 0
        capsys.readouterr()
        assert main(["eval", "--model", str(out),
                     "--corpus", str(cli_dir / "corpus.txt"),
                     "--max-tokens", "256"]) == 0
        ppls[setting] = json.loads(capsys.readouterr().out)["perplexity"]
    diff = abs(ppls["w4"] - ppls["w4kv4"])
    dt = time.time() - t0
    ok = diff < 1e-9 and dt < 30
    report(capsys, 2, ok,
           f"cache-free eval ppl diff w4 vs w4kv4 = {diff:.2e} ({dt:.1f}s)")


def test_criterion_03_memory_table_reproduction(capsys):
    t0 = time.time()
    worst = 0.0
    worst_pair = 0.0
    cells = 0
    for row in table7_report():
        for setting, ref in row["reference_gb"].items():
            worst = max(worst, abs(row[setting] - ref) / ref)
            cells += 1
        worst_pair = max(worst_pair, abs(row["w4kv4"] - row["w4a4"]) / row["w4a4"])
    dt = time.time() - t0
    ok = cells >= 18 and worst < 0.15 and worst_pair < 0.02 and dt < 1
    report(capsys, 3, ok,
           f"{cells} published memory cells, worst err {worst:.1%} (<15%), "
           f"w4kv4 vs w4a4 worst {worst_pair:.2%} (<2%) ({dt:.2f}s)")


def test_criterion_04_decode_roofline_direction(capsys):
    t0 = time.time()
    ratios = {}
    for setting in ("w4kv4", "w4a4"):
        dc = DeployConfig.for_setting(LLAMA2_13B, setting, prompt_len=2048, gen_len=64)
        ratios[setting] = estimate_decode_time(dc)["ratio_vs_fp16"]
    rel = abs(ratios["w4kv4"] - ratios["w4a4"]) / ratios["w4a4"]
    dt = time.time() - t0
    ok = rel < 0.05 and all(r < 0.5 for r in ratios.values()) and dt < 1
    report(capsys, 4, ok,
           f"13b decode ratios w4kv4={ratios['w4kv4']:.3f} w4a4={ratios['w4a4']:.3f} "
           f"(rel diff {rel:.2%} < 5%, both < 0.5x fp16) ({dt:.2f}s)")


def test_criterion_05_quantizer_oracles(capsys):
    t0 = time.time()
    rng = np.random.default_rng(0)
    token_ok = weight_ok = 0
    for trial in range(600):
        t = int(rng.integers(1, 4))
        c = int(rng.integers(1, 13))
        gs = int(rng.integers(1, c + 1))
        bits = int(rng.choice([2, 3, 4, 8]))
        y = (rng.normal(size=(t, c)) * rng.uniform(0.1, 10)).astype(np.float32)
        q = quantize_token(y, TokenQuantSpec(bits, gs))
        codes, _ = oracle_token(y, bits, gs)
        token_ok += int(np.array_equal(q.codes, codes))
        # roundtrip bound for unclipped codes
        deq = dequantize(q)
        spec = TokenQuantSpec(bits, gs)
        for g, (a, b) in enumerate(group_bounds(c, gs)):
            sel = (q.codes[:, a:b] > spec.code_lo) & (q.codes[:, a:b] < spec.code_hi)
            err = np.abs(deq[:, a:b] - y[:, a:b])
            bound = np.broadcast_to(q.n[:, g : g + 1] / 2 + 1e-6, err.shape)
            assert np.all(err[sel] <= bound[sel])
    for trial in range(400):
        r = int(rng.integers(1, 17))
        c = int(rng.integers(1, 9))
        gs = int(rng.integers(1, r + 1))
        bits = int(rng.choice([2, 4, 8]))
        w = (rng.normal(size=(r, c)) * rng.uniform(0.1, 5)).astype(np.float32)
        q = quantize_weight(w, WeightQuantSpec(bits, gs))
        weight_ok += int(np.array_equal(q.codes, oracle_weight(w, bits, gs)))
    const_tok = quantize_token(np.full((3, 8), -1.25, np.float32), TokenQuantSpec(4, 4))
    const_w = quantize_weight(np.full((8, 3), 0.75, np.float32), WeightQuantSpec(4, 4))
    lossless = np.array_equal(dequantize(const_tok), np.full((3, 8), -1.25)) and \
        np.array_equal(dequantize(const_w), np.full((8, 3), 0.75))
    dt = time.time() - t0
    ok = token_ok == 600 and weight_ok == 400 and lossless and dt < 10
    report(capsys, 5, ok,
           f"scalar-loop oracle match {token_ok}/600 token + {weight_ok}/400 weight, "
           f"roundtrip bound held, constants lossless ({dt:.1f}s)")


def test_criterion_06_smoothing_roundtrip(capsys):
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(2, 40))
        c = int(rng.integers(1, 64))
        scale = 10.0 ** rng.uniform(-2, 2, size=(1, c))
        y = (rng.normal(size=(t, c)) * scale + rng.normal(size=(1, c))).astype(np.float32)
        sp = init_smoothing(y)
        back = apply_kv_smoothing(apply_kv_smoothing(y, sp, "to_smoothed"), sp, "to_raw")
        worst = max(worst, np.abs(back - y).max() / max(np.abs(y).max(), 1e-12))
    dt = time.time() - t0
    ok = worst < 1e-4 and dt < 5
    report(capsys, 6, ok,
           f"smoothing round-trip on 100 layers, worst rel diff {worst:.2e} "
           f"(< 1e-4) ({dt:.1f}s)")


def test_criterion_07_gradient_validity(capsys):
    t0 = time.time()
    # part 1: smooth ops on a 2-block toy (no quantization in the graph)
    model, _ = fitted_model(0, steps=10)
    ids = np.arange(12) % 250
    x0 = model.embed[ids].astype(np.float32)

    def fp_loss(arr):
        x = Tensor(arr.astype(np.float32), requires_grad=True)
        h = x
        for j, blk in enumerate(model.blocks):
            h = block_forward(model.config, blk, h, 0, j, None, "fp")
        return (h * h).mean(), x

    loss, x = fp_loss(x0)
    loss.backward()
    grad = x.grad.copy()
    worst_smooth = 0.0
    rng = np.random.default_rng(0)
    for _ in range(12):
        i, j = int(rng.integers(0, x0.shape[0])), int(rng.integers(0, x0.shape[1]))
        eps = 1e-3
        xp, xm = x0.copy(), x0.copy()
        xp[i, j] += eps
        xm[i, j] -= eps
        fd = (fp_loss(xp)[0].item() - fp_loss(xm)[0].item()) / (2 * eps)
        worst_smooth = max(worst_smooth,
                           abs(grad[i, j] - fd) / max(abs(fd), abs(grad[i, j]), 1e-4))
    smooth_ok = worst_smooth < 1e-3

    # part 2: d(crr_loss)/ds, screening rounding kinks with code-change probes
    model2, corpus = fitted_model(0, steps=60, spread=1.5, kv_group_size=8)
    cfg = model2.config
    calib = CalibConfig(k=2, segments=4, seg_len=32, seed=0)
    acts = collect_activations(model2, sample_segments(corpus, calib))
    xs = [a[0] for a in acts]
    tp = init_trainables(model2, 0, xs)
    loss2 = crr_loss(model2, 0, acts[0][0], tp, calib, acts[0][2])
    loss2.backward()
    sgrad = tp.s_v.grad.copy()
    s_base = tp.s_v.data.copy()
    blk = model2.blocks[0]
    xn = rms_norm(Tensor(acts[0][0]), Tensor(blk.attn_norm.reshape(1, -1))).data
    gamma_v = 1.0 / (1.0 + np.exp(-tp.gamma_logit["v"].data))
    beta_v = 1.0 / (1.0 + np.exp(-tp.beta_logit["v"].data))

    def v_codes(s_row):
        s = np.maximum(s_row, S_FLOOR)
        wq = quantize_weight(
            blk.v.w / s,
            WeightQuantSpec(cfg.weight_bits, cfg.weight_group_size, gamma_v, beta_v),
        )
        v_s = xn @ dequantize(wq) + (blk.v.b - tp.d_v.data.reshape(-1)) / s
        tq = quantize_token(v_s, TokenQuantSpec(cfg.kv_bits, cfg.kv_group_size))
        return wq.codes, tq.codes

    def loss_at(j, v):
        tp2 = init_trainables(model2, 0, xs)
        tp2.s_v.data[:] = s_base
        tp2.s_v.data[0, j] = v
        return crr_loss(model2, 0, acts[0][0], tp2, calib, acts[0][2]).item()

    worst_s = 0.0
    kink_free = 0
    for j in range(cfg.hidden_size):
        s0 = float(s_base[0, j])
        eps = 1e-3 * s0
        probes = []
        for v in (s0 - eps, s0, s0 + eps):
            row = s_base.reshape(-1).copy()
            row[j] = v
            probes.append(v_codes(row))
        stable = all(
            np.array_equal(p[0], probes[1][0]) and np.array_equal(p[1], probes[1][1])
            for p in probes
        )
        if not stable:
            continue
        kink_free += 1
        fd = (loss_at(j, s0 + eps) - loss_at(j, s0 - eps)) / (2 * eps)
        worst_s = max(worst_s,
                      abs(sgrad[0, j] - fd) / max(abs(fd), abs(sgrad[0, j]), 1e-4))
    s_ok = kink_free >= 5 and worst_s < 1e-2
    dt = time.time() - t0
    ok = smooth_ok and s_ok and dt < 30
    report(capsys, 7, ok,
           f"smooth-op worst rel err {worst_smooth:.2e} (<1e-3); d(crr)/ds worst rel "
           f"err {worst_s:.2e} over {kink_free} code-stable channels (<1e-2) ({dt:.1f}s)")


def test_criterion_08_calibration_efficacy(capsys, seeds_suite):
    t0 = time.time()
    wins = 0
    ratios = []
    for entry in seeds_suite:
        ev = entry["corpus"][:1200]
        ppl_cal = perplexity(entry["mq"], ev, use_cache=True)["perplexity"]
        ppl_rtn = perplexity(entry["mr"], ev, use_cache=True)["perplexity"]
        wins += int(ppl_cal < ppl_rtn)
        ratios.append(entry["ratio"])
    mean_ratio = float(np.mean(ratios))
    dt = time.time() - t0
    ok = wins >= 9 and mean_ratio < 0.9 and dt < 600
    report(capsys, 8, ok,
           f"calibrated beats RTN on perplexity {wins}/10 seeds (>=9), mean "
           f"final/initial CRR ratio {mean_ratio:.3f} (<0.9) ({dt:.1f}s)")


def test_criterion_09_ablation_directions(capsys, seeds_suite):
    t0 = time.time()
    poq_worse = 0
    smooth_better = 0
    for entry in seeds_suite:
        fp, corpus, mr = entry["fp"], entry["corpus"], entry["mr"]
        ev = corpus[:300]
        # past-only quantization on the W4KV4 model whose KV error dominates
        mae_on = logit_mae(fp, mr, ev, use_cache=True, mode_b="weight_kv")
        m_off = copy.deepcopy(mr)
        m_off.config.poq = False
        mae_off = logit_mae(fp, m_off, ev, use_cache=True, mode_b="weight_kv")
        poq_worse += int(mae_off > mae_on)

        ms = copy.deepcopy(fp)
        acts = collect_activations(ms, [corpus[:128]])
        per_layer = []
        for i, blk in enumerate(ms.blocks):
            xn = rms_norm(Tensor(acts[0][i]), Tensor(blk.attn_norm.reshape(1, -1))).data
            per_layer.append((init_smoothing(xn @ blk.k.w + blk.k.b),
                              init_smoothing(xn @ blk.v.w + blk.v.b)))
        attach_kv_smoothing(ms, per_layer)
        quantize_model_weights(ms)
        ms.config.quant_mode = "weight_kv"
        mae_rtn = logit_mae(fp, mr, ev, use_cache=True, mode_b="weight_kv")
        mae_sm = logit_mae(fp, ms, ev, use_cache=True, mode_b="weight_kv")
        smooth_better += int(mae_sm < mae_rtn)
    dt = time.time() - t0
    ok = poq_worse >= 9 and smooth_better >= 8 and dt < 600
    report(capsys, 9, ok,
           f"dropping past-only quantization degrades logit MAE {poq_worse}/10 (>=9); "
           f"channel smoothing improves RTN {smooth_better}/10 (>=8) ({dt:.1f}s)")


def test_criterion_10_activation_vs_kv_sensitivity(capsys):
    t0 = time.time()
    act_worse = 0
    degs = {"kv4": [], "kv8": [], "act4": [], "act8": []}
    for seed in range(10):
        model, corpus = fitted_model(seed, steps=100, spread=1.0, weight_bits=16)
        ev = corpus[:400]
        ppl_fp = perplexity(model, ev, use_cache=True)["perplexity"]

        def degraded(mode, bits):
            m = copy.deepcopy(model)
            m.config.kv_bits = bits
            m.config.quant_mode = mode
            return perplexity(m, ev, use_cache=True, mode=mode)["perplexity"] - ppl_fp

        kv4 = degraded("weight_kv", 4)
        act4 = degraded("weight_activation", 4)
        degs["kv4"].append(kv4)
        degs["act4"].append(act4)
        degs["kv8"].append(degraded("weight_kv", 8))
        degs["act8"].append(degraded("weight_activation", 8))
        act_worse += int(act4 > kv4)
    means = {k: float(np.mean(v)) for k, v in degs.items()}
    bits_mono = means["kv8"] <= means["kv4"] and means["act8"] <= means["act4"]
    dt = time.time() - t0
    ok = act_worse >= 9 and bits_mono and dt < 300
    report(capsys, 10, ok,
           f"4-bit activation quant degrades ppl more than 4-bit KV {act_worse}/10 "
           f"(>=9); mean 8-bit degradations {means['kv8']:.4f}/{means['act8']:.4f} <= "
           f"4-bit {means['kv4']:.4f}/{means['act4']:.4f} ({dt:.1f}s)")


def test_criterion_11_accounting_agreement(capsys):
    t0 = time.time()
    rng = np.random.default_rng(0)
    exact = 0
    for trial in range(10):
        heads = int(rng.choice([2, 4]))
        head_dim = int(rng.choice([8, 16]))
        cfg = tiny_config(
            n_layers=int(rng.integers(1, 4)),
            n_heads=heads,
            head_dim=head_dim,
            hidden_size=heads * head_dim,
            kv_group_size=int(rng.choice([4, 8, 32])),
            kv_bits=int(rng.choice([4, 8, 16])),
            max_seq_len=48,
        )
        m = Model.random(cfg, seed=trial)
        quantize_model_weights(m)
        m.config.quant_mode = "weight_kv"
        _, cache = prefill(m, np.arange(int(rng.integers(2, 40))), mode="weight_kv")
        rep = verify_runtime_accounting(m, cache)
        exact += int(rep["analyzer_bytes"] == rep["runtime_bytes"])
    dt = time.time() - t0
    ok = exact == 10 and dt < 5
    report(capsys, 11, ok,
           f"analyzer KV byte formula == runtime cache bytes on {exact}/10 configs ({dt:.1f}s)")


def test_criterion_12_cli_determinism(capsys, cli_dir):
    t0 = time.time()
    corpus = str(cli_dir / "corpus.txt")
    model = str(cli_dir / "c12_model.kvq")
    quant = str(cli_dir / "c12_quant.kvq")
    cal = str(cli_dir / "c12_cal.kvq")
    small = ["--k", "1", "--epochs", "1", "--segments", "2", "--seg-len", "24"]
    commands = [
        ("fit", ["fit", "--corpus", corpus, "--out", model] + FIT_ARGS, [model]),
        ("quantize", ["quantize", "--model", model, "--out", quant, "--mode", "w4",
                      "--group-size", "16", "--kv-group-size", "8"], [quant]),
        ("calibrate", ["calibrate", "--model", model, "--corpus", corpus,
                       "--out", cal, "--group-size", "16", "--kv-group-size", "8"]
                      + small, [cal]),
        ("eval", ["eval", "--model", cal, "--corpus", corpus, "--use-cache",
                  "--max-tokens", "96"], []),
        ("analyze", ["analyze", "--preset", "decode-table"], []),
        ("ablate", ["ablate", "--model", model, "--corpus", corpus, "--drop", "poq",
                    "--max-tokens", "64"] + small, []),
        ("sweep-k", ["sweep-k", "--model", model, "--corpus", corpus,
                     "--k-values", "1,2", "--epochs", "1", "--segments", "2",
                     "--seg-len", "24", "--max-tokens", "64"], []),
        ("generate", ["generate", "--model", model, "--prompt", "the quick ",
                      "--n-new", "6"], []),
    ]
    stable = []
    for name, argv, files in commands:
        runs = []
        for _ in range(2):
            assert main(argv) == 0, name
            stdout = capsys.readouterr().out
            runs.append((stdout, [open(f, "rb").read() for f in files]))
        stable.append(runs[0] == runs[1])
    dt = time.time() - t0
    ok = all(stable)
    names = [c[0] for c in commands]
    bad = [n for n, s in zip(names, stable) if not s]
    report(capsys, 12, ok,
           f"{sum(stable)}/{len(commands)} commands byte-reproducible"
           + (f"; unstable: {bad}" if bad else "") + f" ({dt:.1f}s)")
