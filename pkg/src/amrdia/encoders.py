"""Dual encoders: a sequence transformer and a relation-aware graph transformer.

The sequence side is a conventional post-norm transformer encoder over
token embeddings plus sinusoidal positions.  The graph side embeds node
concepts (no positions; node order carries no meaning) and uses
relation-aware attention: with per-node states h, relation ids r and a
head width d_h,

    score(i, j) = (W_q h_i) . (W_k h_j + R_k[r_ij]) / sqrt(d_h)
    out(i)      = sum_j softmax_j(score)(i, j) * (W_v h_j + R_v[r_ij])

where R_k and R_v are per-layer relation embedding tables shared across
heads (each head reads its own column block).  There is no output
projection after the heads are concatenated, so a single-head layer is
exactly the update written above.

Attention here never masks node pairs: "no edge" is itself a relation
id (NONE), so every node may attend to every other.  Padding in token
sequences is handled by masking padded keys to -inf before softmax.

Every softmax this module computes can be captured by passing a list as
``trace``; entries are (name, row-stochastic ndarray).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor

MASKED_SCORE = -1e30

ABLATIONS = ("none", "no_text", "no_amr")


class TokenOutOfVocab(ValueError):
    pass


class SequenceTooLong(ValueError):
    pass


class RelationIdOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Shared width/depth settings for both encoders and the decoder."""

    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 256
    max_seq_len: int = 256
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_model <= 0 or self.ffn_dim <= 0 or self.max_seq_len <= 0:
            raise ValueError("dimensions must be positive")
        if self.n_heads <= 0:
            raise ValueError("n_heads must be positive")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class SequenceEncoding:
    """Per-token states (S, d) and a boolean mask, True on real tokens."""

    states: Tensor
    mask: np.ndarray


@dataclass
class GraphEncoding:
    """Per-node states (M, d)."""

    states: Tensor


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    positions = np.arange(length, dtype=np.float64)[:, None]
    dims = np.arange(d_model, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, 2.0 * (dims // 2) / d_model)
    table = np.zeros((length, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table


def apply_dropout(
    x: Tensor, rate: float, rng: np.random.Generator | None
) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    *,
    key_mask: np.ndarray | None = None,
    causal: bool = False,
    trace: list | None = None,
    name: str = "attn",
) -> Tensor:
    """softmax(q k^T / sqrt(d_h)) v with optional key padding/causal masks."""
    d_h = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose_last_two(k)), 1.0 / np.sqrt(d_h))
    bias = np.zeros((q.shape[0], k.shape[0]), dtype=np.float64)
    if key_mask is not None:
        bias[:, ~np.asarray(key_mask, dtype=bool)] = MASKED_SCORE
    if causal:
        bias += np.triu(np.full_like(bias, MASKED_SCORE), k=1)
    if bias.any():
        scores = ad.add(scores, Tensor(bias))
    probs = ad.softmax(scores)
    if trace is not None:
        trace.append((name, probs.data.copy()))
    return ad.matmul(probs, v)


def multi_head_self_attention(
    x: Tensor,
    params: ParamStore,
    prefix: str,
    cfg: EncoderConfig,
    *,
    key_mask: np.ndarray | None = None,
    causal: bool = False,
    trace: list | None = None,
) -> Tensor:
    """Heads are column blocks of shared (d, d) projections, re-concatenated."""
    q = ad.matmul(x, params[f"{prefix}.wq"])
    k = ad.matmul(x, params[f"{prefix}.wk"])
    v = ad.matmul(x, params[f"{prefix}.wv"])
    heads = []
    for h in range(cfg.n_heads):
        lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
        heads.append(
            scaled_dot_attention(
                ad.slice_last_dim(q, lo, hi),
                ad.slice_last_dim(k, lo, hi),
                ad.slice_last_dim(v, lo, hi),
                key_mask=key_mask,
                causal=causal,
                trace=trace,
                name=f"{prefix}.h{h}",
            )
        )
    return heads[0] if len(heads) == 1 else ad.concat_last_dim(heads)


def feed_forward(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    hidden = ad.gelu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def residual_norm(
    x: Tensor, sublayer_out: Tensor, params: ParamStore, prefix: str
) -> Tensor:
    return ad.layer_norm(
        ad.add(x, sublayer_out), params[f"{prefix}.gain"], params[f"{prefix}.bias"]
    )


def _check_token_ids(ids: np.ndarray, params: ParamStore) -> None:
    vocab_rows = params["embed.token"].shape[0]
    if ids.size == 0:
        raise ValueError("empty token sequence")
    if ids.min() < 0 or ids.max() >= vocab_rows:
        raise TokenOutOfVocab(
            f"token ids must be in [0, {vocab_rows}), got range "
            f"[{ids.min()}, {ids.max()}]"
        )


def encode_sequence(
    token_ids,
    params: ParamStore,
    cfg: EncoderConfig,
    *,
    pad_id: int | None = 0,
    trace: list | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> SequenceEncoding:
    """Encode a token sequence to (S, d_model) states.

    With ``n_layers == 0`` the output is exactly embeddings plus
    sinusoidal positions.  Padded positions (id == pad_id) are masked
    out of every attention softmax as keys and flagged False in the
    returned mask; downstream consumers must respect it.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    _check_token_ids(ids, params)
    if ids.shape[0] > cfg.max_seq_len:
        raise SequenceTooLong(f"{ids.shape[0]} tokens > max_seq_len {cfg.max_seq_len}")
    mask = np.ones(ids.shape[0], dtype=bool) if pad_id is None else ids != pad_id
    x = ad.add(
        ad.embedding(params["embed.token"], ids),
        Tensor(sinusoidal_positions(ids.shape[0], cfg.d_model)),
    )
    x = apply_dropout(x, cfg.dropout_rate, dropout_rng)
    for layer in range(cfg.n_layers):
        attn = multi_head_self_attention(
            x, params, f"seq.l{layer}.attn", cfg, key_mask=mask, trace=trace
        )
        attn = apply_dropout(attn, cfg.dropout_rate, dropout_rng)
        x = residual_norm(x, attn, params, f"seq.l{layer}.ln1")
        ffn = apply_dropout(
            feed_forward(x, params, f"seq.l{layer}.ffn"), cfg.dropout_rate, dropout_rng
        )
        x = residual_norm(x, ffn, params, f"seq.l{layer}.ln2")
    return SequenceEncoding(states=x, mask=mask)


def graph_attention_scores(
    states: Tensor,
    rel_ids: np.ndarray,
    wq: Tensor,
    wk: Tensor,
    rel_key: Tensor,
    *,
    trace: list | None = None,
    name: str = "graph.attn",
) -> Tensor:
    """Relation-aware attention weights for one head.

    Returns the (M, M) row-stochastic matrix
    softmax_j((W_q h_i) . (W_k h_j + R_k[r_ij]) / sqrt(d_h)).
    With all-zero relation embeddings this is exactly standard scaled
    dot-product attention.
    """
    idx = np.asarray(rel_ids, dtype=np.int64)
    m = states.shape[0]
    if idx.shape != (m, m):
        raise ad.ShapeMismatch(f"relation ids {idx.shape} for {m} nodes")
    n_rel = rel_key.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rel):
        raise RelationIdOutOfRange(
            f"relation ids must be in [0, {n_rel}), got max {idx.max()}"
        )
    d_h = wq.shape[-1]
    q = ad.matmul(states, wq)
    k = ad.matmul(states, wk)
    # q_i . R_k[r_ij] for all pairs, via a gather from q @ R_k^T.
    rel_term = ad.row_gather(ad.matmul(q, ad.transpose_last_two(rel_key)), idx)
    scores = ad.scale(
        ad.add(ad.matmul(q, ad.transpose_last_two(k)), rel_term), 1.0 / np.sqrt(d_h)
    )
    probs = ad.softmax(scores)
    if trace is not None:
        trace.append((name, probs.data.copy()))
    return probs


def _graph_attention_layer(
    x: Tensor,
    rel_ids: np.ndarray,
    params: ParamStore,
    prefix: str,
    cfg: EncoderConfig,
    *,
    trace: list | None = None,
) -> Tensor:
    wq = params[f"{prefix}.wq"]
    wk = params[f"{prefix}.wk"]
    wv = params[f"{prefix}.wv"]
    rel_key = params[f"{prefix}.rel_k"]
    rel_value = params[f"{prefix}.rel_v"]
    n_rel = rel_key.shape[0]
    v = ad.matmul(x, wv)
    heads = []
    for h in range(cfg.n_heads):
        lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
        probs = graph_attention_scores(
            x,
            rel_ids,
            ad.slice_last_dim(wq, lo, hi),
            ad.slice_last_dim(wk, lo, hi),
            ad.slice_last_dim(rel_key, lo, hi),
            trace=trace,
            name=f"{prefix}.h{h}",
        )
        content = ad.matmul(probs, ad.slice_last_dim(v, lo, hi))
        # sum_j probs(i, j) R_v[r_ij]: pool weights by relation id first.
        pooled = ad.row_scatter(probs, np.asarray(rel_ids, dtype=np.int64), n_rel)
        relational = ad.matmul(pooled, ad.slice_last_dim(rel_value, lo, hi))
        heads.append(ad.add(content, relational))
    return heads[0] if len(heads) == 1 else ad.concat_last_dim(heads)


def encode_graph(
    node_ids,
    rel_ids,
    params: ParamStore,
    cfg: EncoderConfig,
    *,
    trace: list | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> GraphEncoding:
    """Encode graph nodes to (M, d_model) states.

    Node concepts share the token embedding table; there is no
    positional encoding, so the encoder is equivariant to permuting
    nodes together with the relation id matrix.
    """
    ids = np.asarray(node_ids, dtype=np.int64)
    _check_token_ids(ids, params)
    x = ad.embedding(params["embed.token"], ids)
    x = apply_dropout(x, cfg.dropout_rate, dropout_rng)
    for layer in range(cfg.n_layers):
        attn = _graph_attention_layer(
            x, rel_ids, params, f"graph.l{layer}.attn", cfg, trace=trace
        )
        attn = apply_dropout(attn, cfg.dropout_rate, dropout_rng)
        x = residual_norm(x, attn, params, f"graph.l{layer}.ln1")
        ffn = apply_dropout(
            feed_forward(x, params, f"graph.l{layer}.ffn"), cfg.dropout_rate, dropout_rng
        )
        x = residual_norm(x, ffn, params, f"graph.l{layer}.ln2")
    return GraphEncoding(states=x)


def build_encodings(
    x_ids,
    node_ids,
    rel_ids,
    params: ParamStore,
    cfg: EncoderConfig,
    *,
    ablation: str = "none",
    pad_id: int | None = 0,
    trace: list | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[SequenceEncoding, GraphEncoding]:
    """Run both encoders, honouring ablation switches.

    ``no_text`` / ``no_amr`` replace the ablated encoding with a single
    constant zero vector, so the decoder's shapes are unchanged but the
    corresponding cross-attention context is identically zero and
    carries no gradient.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"ablation must be one of {ABLATIONS}, got {ablation!r}")
    if ablation == "no_text":
        seq = SequenceEncoding(
            states=Tensor(np.zeros((1, cfg.d_model))), mask=np.array([True])
        )
    else:
        seq = encode_sequence(
            x_ids, params, cfg, pad_id=pad_id, trace=trace, dropout_rng=dropout_rng
        )
    if ablation == "no_amr":
        graph = GraphEncoding(states=Tensor(np.zeros((1, cfg.d_model))))
    else:
        graph = encode_graph(
            node_ids, rel_ids, params, cfg, trace=trace, dropout_rng=dropout_rng
        )
    return seq, graph
