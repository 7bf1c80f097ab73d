"""Small decoder-only transformer (pre-norm attention + gated MLP) with
prefill/decode phases and a past-only-quantized KV cache.

Quantization modes:

* fp                 - raw weights, full-precision cache.
* weight_only        - (de)quantized weights, full-precision cache.
* weight_kv          - quantized weights, past KV stored as token codes of the
                       smoothed projection outputs; the current step's K/V stay
                       full precision in attention (past-only quantization).
* weight_activation  - quantized weights plus per-token RTN quantization of
                       every linear-layer input (sensitivity harness only).

The cache stores pre-rotary smoothed K (and V); a read dequantizes, maps to
raw space exactly once, then applies the rotary embedding for the stored
positions.  cache_post_rotary=True flips K storage to post-rotary raw space
(experimentation flag; channel smoothing is bypassed for K in that layout).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, KvqError
from .quantizers import (
    QuantizedTensor,
    SmoothingParams,
    TokenQuantSpec,
    WeightQuantSpec,
    absorb_smoothing,
    apply_kv_smoothing,
    dequantize,
    quantize_token,
    quantize_weight,
)
from .tensor import Tensor, concat_cols, concat_rows, rms_norm, rope, softmax_causal

MODES = ("fp", "weight_only", "weight_kv", "weight_activation")


@dataclass
class ModelConfig:
    n_layers: int = 4
    hidden_size: int = 128
    n_heads: int = 4
    head_dim: int = 32
    intermediate_size: int = 344
    vocab_size: int = 258
    max_seq_len: int = 512
    rope_base: float = 10000.0
    quant_mode: str = "fp"
    kv_bits: int = 4
    weight_bits: int = 4
    kv_group_size: int = 32
    weight_group_size: int = 128
    poq: bool = True
    cache_post_rotary: bool = False

    def __post_init__(self):
        if self.hidden_size != self.n_heads * self.head_dim:
            raise KvqError(
                f"hidden_size {self.hidden_size} != n_heads*head_dim "
                f"{self.n_heads}*{self.head_dim}"
            )
        if self.max_seq_len < 1 or self.vocab_size < 2:
            raise KvqError("max_seq_len must be >= 1 and vocab_size >= 2")
        if self.quant_mode not in MODES:
            raise KvqError(f"unknown quant_mode: {self.quant_mode!r}")

    @property
    def kv_quantized(self) -> bool:
        return self.kv_bits < 16

    def token_spec(self) -> TokenQuantSpec:
        return TokenQuantSpec(bits=self.kv_bits, group_size=self.kv_group_size)


@dataclass
class Linear:
    w: np.ndarray  # (C_in, C_out)
    b: np.ndarray  # (1, C_out)
    smoothing: SmoothingParams | None = None
    wq: QuantizedTensor | None = None


@dataclass
class DecoderBlockWeights:
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    gate: Linear
    up: Linear
    down: Linear
    attn_norm: np.ndarray
    mlp_norm: np.ndarray

    def projections(self) -> dict[str, Linear]:
        return {
            "q": self.q,
            "k": self.k,
            "v": self.v,
            "o": self.o,
            "gate": self.gate,
            "up": self.up,
            "down": self.down,
        }


class Model:
    def __init__(
        self,
        config: ModelConfig,
        embed: np.ndarray,
        blocks: list[DecoderBlockWeights],
        final_norm: np.ndarray,
        head: Linear,
    ):
        self.config = config
        self.embed = embed
        self.blocks = blocks
        self.final_norm = final_norm
        self.head = head
        # (layer, projection) -> mapped (gamma, beta) arrays, set by calibration
        self.clipping: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] | None = None

    @staticmethod
    def random(config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        c, inter, v = config.hidden_size, config.intermediate_size, config.vocab_size
        std = 0.02
        res_std = std / np.sqrt(2.0 * config.n_layers)

        def lin(cin, cout, scale):
            return Linear(
                w=rng.normal(0.0, scale, (cin, cout)).astype(np.float32),
                b=np.zeros((1, cout), dtype=np.float32),
            )

        blocks = []
        for _ in range(config.n_layers):
            blocks.append(
                DecoderBlockWeights(
                    q=lin(c, c, std),
                    k=lin(c, c, std),
                    v=lin(c, c, std),
                    o=lin(c, c, res_std),
                    gate=lin(c, inter, std),
                    up=lin(c, inter, std),
                    down=lin(inter, c, res_std),
                    attn_norm=np.ones(c, dtype=np.float32),
                    mlp_norm=np.ones(c, dtype=np.float32),
                )
            )
        return Model(
            config=config,
            embed=rng.normal(0.0, std, (v, c)).astype(np.float32),
            blocks=blocks,
            final_norm=np.ones(c, dtype=np.float32),
            head=lin(c, v, std),
        )


# -- KV cache -----------------------------------------------------------------


class LayerCache:
    def __init__(self, cfg: ModelConfig, mode: str):
        c = cfg.hidden_size
        t = cfg.max_seq_len
        self.quantized = mode == "weight_kv" and cfg.kv_quantized
        if self.quantized:
            spec = cfg.token_spec()
            g = (c + spec.group_size - 1) // spec.group_size
            self.k_codes = np.zeros((t, c), dtype=np.int8)
            self.v_codes = np.zeros((t, c), dtype=np.int8)
            self.k_m = np.zeros((t, g), dtype=np.float32)
            self.k_n = np.ones((t, g), dtype=np.float32)
            self.v_m = np.zeros((t, g), dtype=np.float32)
            self.v_n = np.ones((t, g), dtype=np.float32)
        else:
            self.k_fp = np.zeros((t, c), dtype=np.float32)
            self.v_fp = np.zeros((t, c), dtype=np.float32)
        self.write_counts = np.zeros(t, dtype=np.int32)


class PoqKvCache:
    """Per-layer paged store of past keys/values.

    Quantized layout holds token codes of the smoothed pre-rotary projections
    plus per-(token, group) parameters; the fp layout holds raw-space arrays
    (pre-rotary K).  Codes for a token position are written once and never
    rewritten.
    """

    def __init__(self, cfg: ModelConfig, blocks: list[DecoderBlockWeights],
                 mode: str | None = None):
        self.cfg = cfg
        self.blocks = blocks
        self.mode = cfg.quant_mode if mode is None else mode
        self.layers = [LayerCache(cfg, self.mode) for _ in range(cfg.n_layers)]
        self.length = 0
        self._staged = 0

    def append(self, li: int, k_s: np.ndarray, v_s: np.ndarray, k_raw: np.ndarray, v_raw: np.ndarray) -> None:
        """Store one step's KV for layer li (k_s/v_s smoothed, k_raw/v_raw raw)."""
        t = k_s.shape[0]
        start = self.length
        if start + t > self.cfg.max_seq_len:
            raise CapacityError(
                f"cache capacity exceeded: {start}+{t} > {self.cfg.max_seq_len}"
            )
        lc = self.layers[li]
        if lc.quantized:
            spec = self.cfg.token_spec()
            qk = quantize_token(k_s, spec)
            qv = quantize_token(v_s, spec)
            lc.k_codes[start : start + t] = qk.codes
            lc.k_m[start : start + t] = qk.m
            lc.k_n[start : start + t] = qk.n
            lc.v_codes[start : start + t] = qv.codes
            lc.v_m[start : start + t] = qv.m
            lc.v_n[start : start + t] = qv.n
        else:
            lc.k_fp[start : start + t] = k_raw
            lc.v_fp[start : start + t] = v_raw
        lc.write_counts[start : start + t] += 1
        self._staged += 1
        if self._staged == self.cfg.n_layers:
            self._staged = 0
            self.length += t

    def read_raw(self, li: int) -> tuple[np.ndarray, np.ndarray]:
        """Return raw-space (pre-rotary K) past KV for layer li."""
        lc = self.layers[li]
        t = self.length
        if not lc.quantized:
            return lc.k_fp[:t], lc.v_fp[:t]
        spec = self.cfg.token_spec()
        qk = QuantizedTensor(
            "token", lc.k_codes[:t], spec.bits, spec.group_size, m=lc.k_m[:t], n=lc.k_n[:t]
        )
        qv = QuantizedTensor(
            "token", lc.v_codes[:t], spec.bits, spec.group_size, m=lc.v_m[:t], n=lc.v_n[:t]
        )
        blk = self.blocks[li]
        k = dequantize(qk)
        v = dequantize(qv)
        # post-rotary K is stored in raw space, so smoothing only applies to V
        if blk.k.smoothing is not None and not self.cfg.cache_post_rotary:
            k = apply_kv_smoothing(k, blk.k.smoothing, "to_raw")
        if blk.v.smoothing is not None:
            v = apply_kv_smoothing(v, blk.v.smoothing, "to_raw")
        return k, v

    def kv_bytes(self) -> int:
        """Deployment-model byte count of the live cache (packed codes + 16-bit params)."""
        total = 0
        t = self.length
        for lc in self.layers:
            if lc.quantized:
                bits = self.cfg.kv_bits
                total += (lc.k_codes[:t].size + lc.v_codes[:t].size) * bits // 8
                total += (
                    lc.k_m[:t].size + lc.k_n[:t].size + lc.v_m[:t].size + lc.v_n[:t].size
                ) * 2
            else:
                # unquantized storage deploys as fp16 (or the stated wider bits)
                bits = max(self.cfg.kv_bits, 16)
                total += (lc.k_fp[:t].size + lc.v_fp[:t].size) * bits // 8
        return total


# -- forward pass -------------------------------------------------------------


def _rope_heads(x: Tensor, positions: np.ndarray, cfg: ModelConfig) -> Tensor:
    d = cfg.head_dim
    parts = [
        rope(x.slice_cols(h * d, (h + 1) * d), positions, cfg.rope_base)
        for h in range(cfg.n_heads)
    ]
    return concat_cols(parts)


def _act_quant_fn(cfg: ModelConfig):
    if cfg.kv_bits >= 16:
        return lambda x: x
    spec = cfg.token_spec()

    def f(x: Tensor) -> Tensor:
        return Tensor(dequantize(quantize_token(x.data, spec)))

    return f


def _current_kv(blk: DecoderBlockWeights, cfg: ModelConfig, mode: str, k_s: Tensor, v_s: Tensor):
    """Map the current step's smoothed projections to raw-space attention inputs.

    Returns (k_raw, v_raw, k_store, v_store): the attention inputs and the
    (smoothed-space) tensors that would enter the cache.  With POQ disabled the
    attention inputs themselves go through quantize -> dequantize first.
    """
    quantize_current = (
        mode == "weight_kv" and cfg.kv_quantized and not cfg.poq
    )
    spec = cfg.token_spec() if cfg.kv_quantized else None
    k_store, v_store = k_s.data, v_s.data
    if quantize_current:
        k_s = Tensor(dequantize(quantize_token(k_s.data, spec)))
        v_s = Tensor(dequantize(quantize_token(v_s.data, spec)))
    k_raw = (
        Tensor(apply_kv_smoothing(k_s.data, blk.k.smoothing, "to_raw"))
        if blk.k.smoothing is not None
        else k_s
    )
    v_raw = (
        Tensor(apply_kv_smoothing(v_s.data, blk.v.smoothing, "to_raw"))
        if blk.v.smoothing is not None
        else v_s
    )
    return k_raw, v_raw, k_store, v_store


def block_tensors(blk: DecoderBlockWeights) -> dict[str, Tensor]:
    """Wrap a block's weights as (non-differentiable) Tensors for block_core."""
    w = {"attn_norm": Tensor(blk.attn_norm.reshape(1, -1)),
         "mlp_norm": Tensor(blk.mlp_norm.reshape(1, -1))}
    for name, lin in blk.projections().items():
        w[f"{name}_w"] = Tensor(lin.w)
        w[f"{name}_b"] = Tensor(lin.b)
    return w


def block_core(cfg: ModelConfig, w: dict[str, Tensor], x: Tensor, positions: np.ndarray,
               kv_fn, act_fn=None) -> Tensor:
    """One decoder block given weight Tensors and a KV handler.

    kv_fn(k_s, v_s, q_positions) receives the k/v projection outputs and must
    return (k_all_rotated, v_all, offset): raw-space attention inputs covering
    past + current tokens and the causal-mask offset of the current chunk.
    Both the runtime cache path and the calibration fake-quant path plug in
    through kv_fn, so the surrounding arithmetic is shared bit-for-bit.
    """
    aq = act_fn if act_fn is not None else (lambda y: y)

    xn = rms_norm(x, w["attn_norm"])
    xq = aq(xn)
    q = xq @ w["q_w"] + w["q_b"]
    k_s = xq @ w["k_w"] + w["k_b"]
    v_s = xq @ w["v_w"] + w["v_b"]

    q_rot = _rope_heads(q, positions, cfg)
    k_all, v_all, offset = kv_fn(k_s, v_s, positions)

    d = cfg.head_dim
    inv_sqrt_d = np.float32(1.0 / np.sqrt(d))
    heads = []
    for h in range(cfg.n_heads):
        qh = q_rot.slice_cols(h * d, (h + 1) * d)
        kh = k_all.slice_cols(h * d, (h + 1) * d)
        vh = v_all.slice_cols(h * d, (h + 1) * d)
        scores = (qh @ kh.transpose()) * inv_sqrt_d
        attn = softmax_causal(scores, offset=offset)
        heads.append(attn @ vh)
    merged = concat_cols(heads)
    out = aq(merged) @ w["o_w"] + w["o_b"]
    x = x + out

    xn2 = rms_norm(x, w["mlp_norm"])
    xq2 = aq(xn2)
    g = xq2 @ w["gate_w"] + w["gate_b"]
    u = xq2 @ w["up_w"] + w["up_b"]
    mid = aq(g.silu() * u)
    return x + (mid @ w["down_w"] + w["down_b"])


def _runtime_kv_fn(cfg: ModelConfig, blk: DecoderBlockWeights, li: int,
                   cache: PoqKvCache | None, mode: str, pending: list):
    def kv_fn(k_s: Tensor, v_s: Tensor, positions: np.ndarray):
        k_raw, v_raw, k_store, v_store = _current_kv(blk, cfg, mode, k_s, v_s)
        k_rot_cur = _rope_heads(k_raw, positions, cfg)
        if cfg.cache_post_rotary:
            k_store = k_rot_cur.data
        if cache is not None and cache.length > 0:
            past_pos = np.arange(cache.length)
            k_past, v_past = cache.read_raw(li)
            if cfg.cache_post_rotary and cache.layers[li].quantized:
                k_past_rot = Tensor(k_past)  # stored post-rotary
            else:
                k_past_rot = _rope_heads(Tensor(k_past), past_pos, cfg)
            k_all = concat_rows([k_past_rot, k_rot_cur])
            v_all = concat_rows([Tensor(v_past), v_raw])
            offset = cache.length
        else:
            # columns cover only the current chunk, so the causal mask is local
            k_all, v_all, offset = k_rot_cur, v_raw, 0
        if cache is not None:
            pending.append((li, k_store, v_store, k_raw.data, v_raw.data))
        return k_all, v_all, offset

    return kv_fn


def block_forward(
    cfg: ModelConfig,
    blk: DecoderBlockWeights,
    x: Tensor,
    start_pos: int,
    li: int,
    cache: PoqKvCache | None,
    mode: str,
    act_fn=None,
) -> Tensor:
    t = x.shape[0]
    positions = np.arange(start_pos, start_pos + t)
    pending: list = []
    kv_fn = _runtime_kv_fn(cfg, blk, li, cache, mode, pending)
    out = block_core(cfg, block_tensors(blk), x, positions, kv_fn, act_fn=act_fn)
    for args in pending:
        cache.append(*args)
    return out


def model_forward(
    model: Model,
    token_ids: np.ndarray,
    cache: PoqKvCache | None = None,
    start_pos: int = 0,
    mode: str | None = None,
) -> Tensor:
    """Forward over a token chunk; returns (T, vocab) logits."""
    cfg = model.config
    mode = cfg.quant_mode if mode is None else mode
    if mode not in MODES:
        raise KvqError(f"unknown quant_mode: {mode!r}")
    token_ids = np.asarray(token_ids, dtype=np.int64)
    act_fn = _act_quant_fn(cfg) if mode == "weight_activation" else None
    x = Tensor(model.embed[token_ids])
    for li, blk in enumerate(model.blocks):
        x = block_forward(cfg, blk, x, start_pos, li, cache, mode, act_fn=act_fn)
    xn = rms_norm(x, Tensor(model.final_norm.reshape(1, -1)))
    if act_fn is not None:
        xn = act_fn(xn)
    return xn @ Tensor(model.head.w) + Tensor(model.head.b)


def prefill(model: Model, token_ids: np.ndarray, mode: str | None = None):
    """Single pass over the prompt; returns (logits, populated cache)."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if len(token_ids) > model.config.max_seq_len:
        raise CapacityError(
            f"prompt length {len(token_ids)} > max_seq_len {model.config.max_seq_len}"
        )
    cache = PoqKvCache(model.config, model.blocks, mode=mode)
    logits = model_forward(model, token_ids, cache=cache, start_pos=0, mode=mode)
    return logits, cache


def decode_step(model: Model, token_id: int, cache: PoqKvCache, mode: str | None = None) -> Tensor:
    """One generation step; past KV read from the cache, current KV full precision."""
    if cache.length < 1:
        raise KvqError("decode_step requires a non-empty cache (run prefill first)")
    if cache.length >= model.config.max_seq_len:
        raise CapacityError(
            f"cache full: length {cache.length} == max_seq_len {model.config.max_seq_len}"
        )
    return model_forward(
        model, np.asarray([token_id]), cache=cache, start_pos=cache.length, mode=mode
    )


def generate(model: Model, prompt_ids: np.ndarray, n_new: int, mode: str | None = None) -> np.ndarray:
    """Deterministic greedy continuation; returns prompt + generated ids."""
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64)
    if n_new < 0:
        raise KvqError(f"n_new must be >= 0, got {n_new}")
    out = list(prompt_ids)
    if n_new == 0:
        return np.asarray(out, dtype=np.int64)
    logits, cache = prefill(model, prompt_ids, mode=mode)
    nxt = int(np.argmax(logits.data[-1]))
    out.append(nxt)
    for _ in range(n_new - 1):
        logits = decode_step(model, nxt, cache, mode=mode)
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
    return np.asarray(out, dtype=np.int64)


def forward_activation_quant(model: Model, token_ids: np.ndarray) -> Tensor:
    """Full-sequence forward with per-token RTN quantization of linear inputs."""
    return model_forward(model, token_ids, mode="weight_activation")


def spread_kv_channels(model: Model, log_range: float = 2.0, seed: int = 0) -> None:
    """Rescale K/V channels without changing the model function.

    Real decoder KV activations concentrate their dynamic range in a few
    channels; tiny randomly-initialized models do not.  This injects that
    heterogeneity exactly: K columns are scaled per rotary pair with the
    inverse applied to Q (dot products unchanged), and V columns are scaled
    with the inverse applied to the o-projection rows.
    """
    cfg = model.config
    rng = np.random.default_rng(seed)
    d, half = cfg.head_dim, cfg.head_dim // 2
    for blk in model.blocks:
        pair = np.exp(rng.uniform(-log_range, log_range, (cfg.n_heads, half)))
        k_scale = np.concatenate([pair, pair], axis=1).reshape(-1).astype(np.float32)
        v_scale = np.exp(rng.uniform(-log_range, log_range, cfg.hidden_size)).astype(
            np.float32
        )
        blk.k.w = (blk.k.w * k_scale[None, :]).astype(np.float32)
        blk.k.b = (blk.k.b * k_scale[None, :]).astype(np.float32)
        blk.q.w = (blk.q.w / k_scale[None, :]).astype(np.float32)
        blk.q.b = (blk.q.b / k_scale[None, :]).astype(np.float32)
        blk.v.w = (blk.v.w * v_scale[None, :]).astype(np.float32)
        blk.v.b = (blk.v.b * v_scale[None, :]).astype(np.float32)
        blk.o.w = (blk.o.w / v_scale[:, None]).astype(np.float32)


# -- quantized-model construction ---------------------------------------------

PROJECTION_NAMES = ("q", "k", "v", "o", "gate", "up", "down")


def attach_kv_smoothing(model: Model, per_layer: list[tuple[SmoothingParams, SmoothingParams]]) -> None:
    """Absorb per-layer (K, V) smoothing params into the k/v projections."""
    for blk, (sp_k, sp_v) in zip(model.blocks, per_layer):
        if not sp_k.is_identity():
            blk.k.w, blk.k.b = absorb_smoothing(blk.k.w, blk.k.b, sp_k)
            blk.k.smoothing = sp_k
        if not sp_v.is_identity():
            blk.v.w, blk.v.b = absorb_smoothing(blk.v.w, blk.v.b, sp_v)
            blk.v.smoothing = sp_v


def quantize_model_weights(
    model: Model,
    clipping: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] | None = None,
    literal_range: bool = False,
) -> None:
    """Quantize every block projection in place; biases and embeddings stay fp.

    clipping maps (layer, projection) to mapped (gamma, beta) arrays; missing
    entries use gamma = beta = 1 (the RTN baseline).
    """
    cfg = model.config
    if cfg.weight_bits >= 16:
        return
    for li, blk in enumerate(model.blocks):
        for name, lin in blk.projections().items():
            gamma = beta = None
            if clipping is not None and (li, name) in clipping:
                gamma, beta = clipping[(li, name)]
            spec = WeightQuantSpec(
                bits=cfg.weight_bits,
                group_size=cfg.weight_group_size,
                gamma=gamma,
                beta=beta,
                literal_range=literal_range,
            )
            qt = quantize_weight(lin.w, spec)
            lin.wq = qt
            lin.w = dequantize(qt)
