"""Block-by-block optimization of the learnable quantization parameters
(clipping factors, channel scale/shift) under cross-block reconstruction
regularization.

The quantized branch fake-quantizes block i's weights and its K/V projection
outputs in-graph (straight-through rounding); blocks i+1 .. i+k-1 run full
precision in both branches and receive no parameter gradients.  Both branches
are fed the raw full-precision inputs x_i by default.  Past-only quantization
is always off during training (the calibration forward has no cache).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, KvqError, NumericError
from .model import (
    Model,
    ModelConfig,
    PROJECTION_NAMES,
    _rope_heads,
    block_core,
    block_forward,
    block_tensors,
    quantize_model_weights,
)
from .quantizers import (
    S_FLOOR,
    SmoothingParams,
    absorb_smoothing,
    fake_quant_token,
    fake_quant_weight,
    group_bounds,
    init_smoothing,
)
from .tensor import Tensor, rms_norm

# sigmoid(9.2102) ~= 1 - 1e-4: effectively no clipping at initialization
CLIP_LOGIT_INIT = 9.2102


@dataclass
class CalibConfig:
    k: int = 5
    epochs: int = 5
    batch_size: int = 1
    lr_smoothing: float = 5e-4
    lr_clipping: float = 1e-2
    weight_decay: float = 0.0
    seed: int = 0
    loss: str = "mae"
    segments: int = 32
    seg_len: int = 256
    feed_quantized_inputs: bool = False
    poq_during_training: bool = False  # recorded; the training path has no cache
    use_smoothing: bool = True  # False: identity channel scale/shift, untrained
    use_clipping: bool = True  # False: clipping stays ~1 (plain rounding), untrained

    def __post_init__(self):
        if self.k < 1:
            raise KvqError(f"k must be >= 1, got {self.k}")
        if self.lr_smoothing <= 0 or self.lr_clipping <= 0:
            raise KvqError("learning rates must be positive")
        if self.loss not in ("mae", "mse"):
            raise KvqError(f"loss must be mae or mse, got {self.loss!r}")


class AdamW:
    """AdamW over parameter groups [(params, lr), ...]; defaults (0.9, 0.999, 1e-8)."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.groups = [(list(ps), lr) for ps, lr in groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.state = {}
        for ps, _ in self.groups:
            for p in ps:
                self.state[id(p)] = (
                    np.zeros_like(p.data),
                    np.zeros_like(p.data),
                )

    def zero_grad(self):
        for ps, _ in self.groups:
            for p in ps:
                p.grad = None

    def step(self):
        self.t += 1
        for ps, lr in self.groups:
            for p in ps:
                if p.grad is None:
                    continue
                m, v = self.state[id(p)]
                g = p.grad.astype(np.float32)
                m = self.b1 * m + (1 - self.b1) * g
                v = self.b2 * v + (1 - self.b2) * g * g
                self.state[id(p)] = (m, v)
                mhat = m / (1 - self.b1**self.t)
                vhat = v / (1 - self.b2**self.t)
                upd = mhat / (np.sqrt(vhat) + self.eps)
                if self.wd:
                    upd = upd + self.wd * p.data
                p.data = (p.data - lr * upd).astype(np.float32)


# -- loss construction --------------------------------------------------------


def reconstruction_loss(y_hat: Tensor, y_ref: Tensor, kind: str = "mae") -> Tensor:
    d = y_hat - y_ref
    return d.abs().mean() if kind == "mae" else (d * d).mean()


def cross_block_loss(quant_out: Tensor, fp_out, tail_blocks, kind: str = "mae") -> Tensor:
    """Push the quantized-branch output through the (frozen) tail and compare.

    tail_blocks is a list of callables Tensor -> Tensor run on both branches;
    fp_out may be a Tensor or a plain array (precomputed reference).
    """
    a = quant_out
    b = fp_out if isinstance(fp_out, Tensor) else Tensor(fp_out)
    for f in tail_blocks:
        a = f(a)
        b = f(b)
    return reconstruction_loss(a, b, kind)


@dataclass
class BlockTrainables:
    """Learnable parameters for one block: clipping logits and K/V smoothing."""

    gamma_logit: dict[str, Tensor]
    beta_logit: dict[str, Tensor]
    s_k: Tensor
    d_k: Tensor
    s_v: Tensor
    d_v: Tensor

    def clip_params(self) -> list[Tensor]:
        return list(self.gamma_logit.values()) + list(self.beta_logit.values())

    def smooth_params(self) -> list[Tensor]:
        return [self.s_k, self.d_k, self.s_v, self.d_v]


def _sigmoid(x: Tensor) -> Tensor:
    return Tensor(1.0) / ((-x).exp() + 1.0)


def _n_weight_groups(rows: int, group_size: int) -> int:
    return len(group_bounds(rows, group_size))


def init_trainables(model: Model, i: int, x_segs: list[np.ndarray],
                    use_smoothing: bool = True) -> BlockTrainables:
    """Clipping logits near 1.0 and smoothing stats from the calibration tokens."""
    cfg = model.config
    blk = model.blocks[i]
    gamma, beta = {}, {}
    for name, lin in blk.projections().items():
        g = _n_weight_groups(lin.w.shape[0], cfg.weight_group_size)
        shape = (g, lin.w.shape[1])
        gamma[name] = Tensor(np.full(shape, CLIP_LOGIT_INIT, np.float32), requires_grad=True)
        beta[name] = Tensor(np.full(shape, CLIP_LOGIT_INIT, np.float32), requires_grad=True)

    # K/V activations of this block over the calibration set, raw space
    if use_smoothing:
        ks, vs = [], []
        norm = Tensor(blk.attn_norm.reshape(1, -1))
        for x in x_segs:
            xn = rms_norm(Tensor(x), norm).data
            ks.append(xn @ blk.k.w + blk.k.b)
            vs.append(xn @ blk.v.w + blk.v.b)
        sp_k = init_smoothing(np.concatenate(ks, axis=0))
        sp_v = init_smoothing(np.concatenate(vs, axis=0))
    else:
        sp_k = SmoothingParams.identity(cfg.hidden_size)
        sp_v = SmoothingParams.identity(cfg.hidden_size)
    if cfg.cache_post_rotary:
        # K is cached post-rotary in raw space; no channel smoothing for K
        sp_k = SmoothingParams.identity(cfg.hidden_size)
    row = lambda a: a.reshape(1, -1).astype(np.float32)
    return BlockTrainables(
        gamma_logit=gamma,
        beta_logit=beta,
        s_k=Tensor(row(sp_k.s), requires_grad=True),
        d_k=Tensor(row(sp_k.delta), requires_grad=True),
        s_v=Tensor(row(sp_v.s), requires_grad=True),
        d_v=Tensor(row(sp_v.delta), requires_grad=True),
    )


def fake_block_weights(model: Model, i: int, tp: BlockTrainables) -> dict[str, Tensor]:
    """Block-i weight Tensors with in-graph smoothing absorption and fake quant."""
    cfg = model.config
    blk = model.blocks[i]
    w = {
        "attn_norm": Tensor(blk.attn_norm.reshape(1, -1)),
        "mlp_norm": Tensor(blk.mlp_norm.reshape(1, -1)),
    }
    smooth_k = not cfg.cache_post_rotary
    for name, lin in blk.projections().items():
        wt = Tensor(lin.w)
        bt = Tensor(lin.b)
        if name == "k" and smooth_k:
            s = tp.s_k.clamp(S_FLOOR, np.inf)
            wt = wt / s
            bt = (bt - tp.d_k) / s
        elif name == "v":
            s = tp.s_v.clamp(S_FLOOR, np.inf)
            wt = wt / s
            bt = (bt - tp.d_v) / s
        gamma = _sigmoid(tp.gamma_logit[name])
        beta = _sigmoid(tp.beta_logit[name])
        w[f"{name}_w"] = fake_quant_weight(
            wt, gamma, beta, cfg.weight_bits, cfg.weight_group_size
        ) if cfg.weight_bits < 16 else wt
        w[f"{name}_b"] = bt
    return w


def _calib_kv_fn(model: Model, tp: BlockTrainables):
    """KV handler for the quantized calibration branch (POQ off, no cache)."""
    cfg = model.config
    smooth_k = not cfg.cache_post_rotary

    def kv_fn(k_s: Tensor, v_s: Tensor, positions: np.ndarray):
        if cfg.kv_quantized:
            v_q = fake_quant_token(v_s, cfg.kv_bits, cfg.kv_group_size)
        else:
            v_q = v_s
        v_raw = v_q * tp.s_v.clamp(S_FLOOR, np.inf) + tp.d_v
        if smooth_k:
            k_q = fake_quant_token(k_s, cfg.kv_bits, cfg.kv_group_size) if cfg.kv_quantized else k_s
            k_raw = k_q * tp.s_k.clamp(S_FLOOR, np.inf) + tp.d_k
            k_rot = _rope_heads(k_raw, positions, cfg)
        else:
            k_rot = _rope_heads(k_s, positions, cfg)
            if cfg.kv_quantized:
                k_rot = fake_quant_token(k_rot, cfg.kv_bits, cfg.kv_group_size)
        return k_rot, v_raw, 0

    return kv_fn


def crr_loss(model: Model, i: int, x_i: np.ndarray, tp: BlockTrainables, calib: CalibConfig,
             y_ref: np.ndarray) -> Tensor:
    """Reconstruction loss for block i spanning up to k blocks (Qblock_i vs fp)."""
    cfg = model.config
    k_eff = min(calib.k, cfg.n_layers - i)
    positions = np.arange(x_i.shape[0])
    w = fake_block_weights(model, i, tp)
    y_hat = block_core(cfg, w, Tensor(x_i), positions, _calib_kv_fn(model, tp))
    for j in range(i + 1, i + k_eff):
        y_hat = block_forward(cfg, model.blocks[j], y_hat, 0, j, None, "fp")
    return reconstruction_loss(y_hat, Tensor(y_ref), calib.loss)


# -- calibration driver -------------------------------------------------------


def collect_activations(model: Model, segments: list[np.ndarray]) -> list[list[np.ndarray]]:
    """Full-precision inputs x_i to every block (index n_layers = final output)."""
    from .model import model_forward  # noqa: F401  (embedding path reused below)

    acts: list[list[np.ndarray]] = []
    for ids in segments:
        xs = [model.embed[np.asarray(ids, dtype=np.int64)].astype(np.float32)]
        x = Tensor(xs[0])
        for j, blk in enumerate(model.blocks):
            x = block_forward(model.config, blk, x, 0, j, None, "fp")
            xs.append(x.data)
        acts.append(xs)
    return acts


def _mapped_clipping(tp: BlockTrainables) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {
        name: (
            1.0 / (1.0 + np.exp(-tp.gamma_logit[name].data)),
            1.0 / (1.0 + np.exp(-tp.beta_logit[name].data)),
        )
        for name in tp.gamma_logit
    }


def freeze_block(model: Model, i: int, tp: BlockTrainables) -> None:
    """Absorb smoothing, fix the block's weight codes, and store its parameters."""
    cfg = model.config
    blk = model.blocks[i]
    s_k = np.maximum(tp.s_k.data.reshape(-1), S_FLOOR)
    s_v = np.maximum(tp.s_v.data.reshape(-1), S_FLOOR)
    sp_k = SmoothingParams(s_k, tp.d_k.data.reshape(-1))
    sp_v = SmoothingParams(s_v, tp.d_v.data.reshape(-1))
    if not cfg.cache_post_rotary and not sp_k.is_identity():
        blk.k.w, blk.k.b = absorb_smoothing(blk.k.w, blk.k.b, sp_k)
        blk.k.smoothing = sp_k
    if not sp_v.is_identity():
        blk.v.w, blk.v.b = absorb_smoothing(blk.v.w, blk.v.b, sp_v)
        blk.v.smoothing = sp_v
    clipping = _mapped_clipping(tp)
    if model.clipping is None:
        model.clipping = {}
    from .quantizers import WeightQuantSpec, dequantize, quantize_weight

    for name, lin in blk.projections().items():
        gamma, beta = clipping[name]
        model.clipping[(i, name)] = (gamma, beta)
        if cfg.weight_bits < 16:
            spec = WeightQuantSpec(
                bits=cfg.weight_bits,
                group_size=cfg.weight_group_size,
                gamma=gamma,
                beta=beta,
            )
            lin.wq = quantize_weight(lin.w, spec)
            lin.w = dequantize(lin.wq)


def calibrate_block(model: Model, i: int, calib: CalibConfig,
                    x_segs: list[np.ndarray], ref_segs: list[np.ndarray]) -> dict:
    """Optimize block i's parameters; returns the per-block trace (pre-freeze).

    initial_loss is the plain-rounding baseline (identity smoothing, no
    clipping); training starts from the activation-statistics smoothing
    init, so final/initial measures the whole calibration gain.
    """

    def mean_loss(tp):
        return float(
            np.mean([crr_loss(model, i, x, tp, calib, r).item() for x, r in zip(x_segs, ref_segs)])
        )

    baseline_tp = init_trainables(model, i, x_segs, use_smoothing=False)
    initial = mean_loss(baseline_tp)

    def run(lr_scale: float):
        tp = init_trainables(model, i, x_segs, use_smoothing=calib.use_smoothing)
        groups = []
        if calib.use_clipping:
            groups.append((tp.clip_params(), calib.lr_clipping * lr_scale))
        if calib.use_smoothing:
            groups.append((tp.smooth_params(), calib.lr_smoothing * lr_scale))
        opt = AdamW(groups=groups, weight_decay=calib.weight_decay)
        trajectory = [mean_loss(tp)]
        for _ in range(calib.epochs if opt.groups else 0):
            epoch_losses = []
            for x, r in zip(x_segs, ref_segs):
                loss = crr_loss(model, i, x, tp, calib, r)
                val = loss.item()
                if not np.isfinite(val):
                    raise NumericError(f"non-finite calibration loss at block {i}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_losses.append(val)
            trajectory.append(float(np.mean(epoch_losses)))
        return tp, mean_loss(tp), trajectory

    try:
        tp, final, trajectory = run(1.0)
        failed = False
        if final > initial:
            tp, final, trajectory = run(0.5)
            failed = final > initial
        if failed:
            tp = baseline_tp
            final = initial
    except NumericError:
        tp = baseline_tp
        initial = final = float("nan")
        trajectory = []
        failed = True

    clipping = _mapped_clipping(tp)
    trace = {
        "block": i,
        "initial_loss": initial,
        "final_loss": final,
        "trajectory": trajectory,
        "failed": failed,
        "params": {
            "s_k": [float(tp.s_k.data.min()), float(tp.s_k.data.max())],
            "d_k": [float(tp.d_k.data.min()), float(tp.d_k.data.max())],
            "s_v": [float(tp.s_v.data.min()), float(tp.s_v.data.max())],
            "d_v": [float(tp.d_v.data.min()), float(tp.d_v.data.max())],
            "gamma": [
                float(min(g.min() for g, _ in clipping.values())),
                float(max(g.max() for g, _ in clipping.values())),
            ],
            "beta": [
                float(min(b.min() for _, b in clipping.values())),
                float(max(b.max() for _, b in clipping.values())),
            ],
        },
    }
    freeze_block(model, i, tp)
    return trace


def sample_segments(corpus_ids: np.ndarray, calib: CalibConfig) -> list[np.ndarray]:
    corpus_ids = np.asarray(corpus_ids, dtype=np.int64)
    if len(corpus_ids) < calib.seg_len:
        raise DataFormatError(
            f"corpus has {len(corpus_ids)} tokens, shorter than one "
            f"calibration segment ({calib.seg_len})"
        )
    rng = np.random.default_rng(calib.seed)
    starts = rng.integers(0, len(corpus_ids) - calib.seg_len + 1, size=calib.segments)
    return [corpus_ids[s : s + calib.seg_len].copy() for s in sorted(starts)]


def calibrate_model(model: Model, corpus_ids: np.ndarray, calib: CalibConfig) -> dict:
    """Calibrate all blocks sequentially, in place; returns the report dict.

    The model must be in fp state; on return it carries absorbed smoothing,
    fixed weight codes, and quant_mode="weight_kv".
    """
    segments = sample_segments(corpus_ids, calib)
    acts = collect_activations(model, segments)
    cfg = model.config
    blocks_trace = []
    quant_acts = [list(xs) for xs in acts] if calib.feed_quantized_inputs else None
    for i in range(cfg.n_layers):
        k_eff = min(calib.k, cfg.n_layers - i)
        if quant_acts is None:
            x_segs = [xs[i] for xs in acts]
        else:
            x_segs = [xs[i] for xs in quant_acts]
        ref_segs = [xs[i + k_eff] for xs in acts]
        blocks_trace.append(calibrate_block(model, i, calib, x_segs, ref_segs))
        if quant_acts is not None:
            for xs in quant_acts:
                out = block_forward(cfg, model.blocks[i], Tensor(xs[i]), 0, i, None, "weight_kv")
                xs[i + 1] = out.data
    model.config.quant_mode = "weight_kv"
    finals = [b["final_loss"] for b in blocks_trace]
    inits = [b["initial_loss"] for b in blocks_trace]
    ratios = [f / ini for f, ini in zip(finals, inits) if ini and np.isfinite(ini) and ini > 0]
    return {
        "seed": calib.seed,
        "k": calib.k,
        "epochs": calib.epochs,
        "loss": calib.loss,
        "segments": calib.segments,
        "seg_len": calib.seg_len,
        "blocks": blocks_trace,
        "mean_final_initial_ratio": float(np.mean(ratios)) if ratios else 1.0,
    }


def sweep_k(model: Model, corpus_ids: np.ndarray, k_values: list[int], calib: CalibConfig,
            eval_fn=None) -> list[dict]:
    """Calibrate a fresh copy of the model per k; optional eval_fn(model) -> ppl."""
    cfg = model.config
    rows = []
    for k in k_values:
        if not 1 <= k <= cfg.n_layers:
            raise KvqError(f"k must be in 1..{cfg.n_layers}, got {k}")
        m = copy.deepcopy(model)
        c = copy.deepcopy(calib)
        c.k = k
        report = calibrate_model(m, corpus_ids, c)
        row = {
            "k": k,
            "mean_final_loss": float(
                np.mean([b["final_loss"] for b in report["blocks"]])
            ),
            "report": report,
        }
        if eval_fn is not None:
            row["perplexity"] = float(eval_fn(m))
        rows.append(row)
    return rows
