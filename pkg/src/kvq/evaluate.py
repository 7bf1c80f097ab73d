"""Scoring and comparison harness: byte-level corpus handling, perplexity via
the prefill or decode pathway, logit MAE against an fp reference, greedy
divergence, and a small trainer so the desk model actually fits a corpus.

Sequences longer than max_seq_len are scored in independent non-overlapping
chunks (stride = max_seq_len); the first token of each chunk is a context
token and is not scored.
"""

from __future__ import annotations

import numpy as np

from .errors import DataFormatError, KvqError
from .model import (
    Model,
    block_core,
    decode_step,
    generate,
    model_forward,
    prefill,
)
from .tensor import Tensor, cross_entropy, embedding, rms_norm

BOS = 256


def encode_bytes(data: bytes, add_bos: bool = True) -> np.ndarray:
    ids = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    if add_bos:
        ids = np.concatenate([[BOS], ids])
    return ids


def load_corpus(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data:
        raise DataFormatError(f"corpus {path!r} is empty")
    return encode_bytes(data)


# -- scoring ------------------------------------------------------------------


def score_logits(model: Model, ids: np.ndarray, use_cache: bool = False,
                 mode: str | None = None) -> np.ndarray:
    """Next-token logits at every position of one chunk (len <= max_seq_len)."""
    ids = np.asarray(ids, dtype=np.int64)
    if not use_cache:
        return model_forward(model, ids, mode=mode).data
    logits, cache = prefill(model, ids[:1], mode=mode)
    rows = [logits.data[-1]]
    for t in range(1, len(ids)):
        rows.append(decode_step(model, int(ids[t]), cache, mode=mode).data[-1])
    return np.stack(rows)


def _chunks(ids: np.ndarray, max_len: int):
    for a in range(0, len(ids), max_len):
        chunk = ids[a : a + max_len]
        if len(chunk) >= 2:
            yield chunk


def sequence_nll(model: Model, ids: np.ndarray, use_cache: bool = False,
                 mode: str | None = None) -> np.ndarray:
    """Per-token negative log-likelihoods over all scored positions."""
    nlls = []
    for chunk in _chunks(np.asarray(ids, dtype=np.int64), model.config.max_seq_len):
        logits = score_logits(model, chunk, use_cache=use_cache, mode=mode)
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        targets = chunk[1:]
        nlls.append(-logp[np.arange(len(targets)), targets])
    if not nlls:
        raise KvqError("sequence too short to score (need >= 2 tokens)")
    return np.concatenate(nlls).astype(np.float64)


def perplexity(model: Model, ids: np.ndarray, use_cache: bool = False,
               mode: str | None = None) -> dict:
    nll = sequence_nll(model, ids, use_cache=use_cache, mode=mode)
    mean = float(nll.mean())
    return {"perplexity": float(np.exp(mean)), "mean_nll": mean, "tokens": int(len(nll))}


def logit_mae(model_a: Model, model_b: Model, ids: np.ndarray, use_cache: bool = False,
              mode_a: str | None = None, mode_b: str | None = None) -> float:
    """Mean absolute difference of next-token logits over all scored positions."""
    total, count = 0.0, 0
    ids = np.asarray(ids, dtype=np.int64)
    for chunk in _chunks(ids, model_a.config.max_seq_len):
        la = score_logits(model_a, chunk, use_cache=use_cache, mode=mode_a)
        lb = score_logits(model_b, chunk, use_cache=use_cache, mode=mode_b)
        total += float(np.abs(la - lb).sum())
        count += la.size
    return total / count


def first_divergence(a: np.ndarray, b: np.ndarray) -> int:
    """Index of the first differing token, or len if identical up to min length."""
    n = min(len(a), len(b))
    diff = np.nonzero(np.asarray(a[:n]) != np.asarray(b[:n]))[0]
    return int(diff[0]) if len(diff) else n


def eval_report(model: Model, ids: np.ndarray, setting: str, use_cache: bool = False,
                mode: str | None = None, fp_model: Model | None = None) -> dict:
    nll = sequence_nll(model, ids, use_cache=use_cache, mode=mode)
    mean = float(nll.mean())
    report = {
        "setting": setting,
        "use_cache": use_cache,
        "perplexity": float(np.exp(mean)),
        "mean_nll": mean,
        "tokens": int(len(nll)),
    }
    if fp_model is not None:
        report["logit_mae_vs_fp"] = logit_mae(
            fp_model, model, ids, use_cache=use_cache, mode_b=mode
        )
        n_new = min(32, model.config.max_seq_len - min(8, len(ids)))
        prompt = ids[: min(8, len(ids))]
        g_fp = generate(fp_model, prompt, n_new)
        g_q = generate(model, prompt, n_new, mode=mode)
        report["first_divergence_vs_fp"] = first_divergence(g_fp, g_q)
    return report


# -- toy trainer --------------------------------------------------------------


def train_model(model: Model, corpus_ids: np.ndarray, steps: int = 200, batch: int = 4,
                seq_len: int = 64, lr: float = 3e-3, seed: int = 0) -> dict:
    """Brief language-model fit on a byte corpus (dev utility, not calibration)."""
    from .calibration import AdamW

    cfg = model.config
    corpus_ids = np.asarray(corpus_ids, dtype=np.int64)
    if len(corpus_ids) < seq_len + 1:
        raise DataFormatError(
            f"corpus has {len(corpus_ids)} tokens; need at least {seq_len + 1} to train"
        )
    rng = np.random.default_rng(seed)

    embed = Tensor(model.embed, requires_grad=True)
    final_norm = Tensor(model.final_norm.reshape(1, -1), requires_grad=True)
    head_w = Tensor(model.head.w, requires_grad=True)
    head_b = Tensor(model.head.b, requires_grad=True)
    blocks = []
    for blk in model.blocks:
        w = {
            "attn_norm": Tensor(blk.attn_norm.reshape(1, -1), requires_grad=True),
            "mlp_norm": Tensor(blk.mlp_norm.reshape(1, -1), requires_grad=True),
        }
        for name, lin in blk.projections().items():
            w[f"{name}_w"] = Tensor(lin.w, requires_grad=True)
            w[f"{name}_b"] = Tensor(lin.b, requires_grad=True)
        blocks.append(w)
    params = [embed, final_norm, head_w, head_b]
    for w in blocks:
        params.extend(w.values())
    opt = AdamW([(params, lr)])

    from .model import _rope_heads

    def kv_fn_factory():
        def kv_fn(k_s, v_s, positions):
            return _rope_heads(k_s, positions, model.config), v_s, 0

        return kv_fn

    losses = []
    for _ in range(steps):
        total = None
        for _b in range(batch):
            start = int(rng.integers(0, len(corpus_ids) - seq_len - 1))
            seq = corpus_ids[start : start + seq_len + 1]
            x = embedding(embed, seq[:-1])
            positions = np.arange(seq_len)
            for w in blocks:
                x = block_core(cfg, w, x, positions, kv_fn_factory())
            xn = rms_norm(x, final_norm)
            logits = xn @ head_w + head_b
            loss = cross_entropy(logits, seq[1:])
            total = loss if total is None else total + loss
        total = total / batch
        losses.append(total.item())
        opt.zero_grad()
        total.backward()
        opt.step()

    model.embed = embed.data
    model.final_norm = final_norm.data.reshape(-1)
    model.head.w = head_w.data
    model.head.b = head_b.data
    for blk, w in zip(model.blocks, blocks):
        blk.attn_norm = w["attn_norm"].data.reshape(-1)
        blk.mlp_norm = w["mlp_norm"].data.reshape(-1)
        for name, lin in blk.projections().items():
            lin.w = w[f"{name}_w"].data
            lin.b = w[f"{name}_b"].data
    return {"steps": steps, "initial_loss": losses[0] if losses else None,
            "final_loss": losses[-1] if losses else None}
