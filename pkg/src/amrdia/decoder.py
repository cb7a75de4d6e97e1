"""Autoregressive decoder with dual cross-attention over text and graph.

Each layer applies causal self-attention, then attends separately over
the sequence states and the graph states.  For decoder state d_t the
two contexts are plain scaled dot-product attention with learned
query/key projections and the raw encoder states as values:

    c_tS = sum_i softmax_i((W_qs d_t) . (W_ks h_i) / sqrt(d)) h_i
    c_tG = sum_j softmax_j((W_qg d_t) . (W_kg h'_j) / sqrt(d)) h'_j
    c_t  = W_c [c_tS ; c_tG] + b

The fused context enters the residual stream, followed by a
feed-forward sublayer; all three sublayers are post-layer-norm.  The
final states project to vocabulary logits through a linear layer whose
weights are not tied to the input embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from .autodiff import ParamStore, Tensor
from .encoders import EncoderConfig, GraphEncoding, SequenceEncoding

DECODE_MODES = ("greedy", "beam")


class EmptyEncoding(ValueError):
    pass


class PrefixTooLong(ValueError):
    pass


@dataclass(frozen=True)
class DecodingConfig:
    mode: str = "greedy"
    beam_width: int = 1
    max_gen_len: int = 32
    length_penalty: float = 0.0

    def __post_init__(self):
        if self.mode not in DECODE_MODES:
            raise ValueError(f"mode must be one of {DECODE_MODES}, got {self.mode!r}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_gen_len < 1:
            raise ValueError("max_gen_len must be >= 1")
        if self.length_penalty < 0.0:
            raise ValueError("length_penalty must be >= 0")


def _cross_attention(
    queries: Tensor,
    source: Tensor,
    wq: Tensor,
    wk: Tensor,
    *,
    key_mask: np.ndarray | None = None,
    trace: list | None = None,
    name: str = "cross",
) -> Tensor:
    """Attention context over ``source`` states; values are the raw states."""
    if source.shape[0] == 0:
        raise EmptyEncoding(f"{name}: empty encoder states")
    d = wq.shape[-1]
    q = ad.matmul(queries, wq)
    k = ad.matmul(source, wk)
    scores = ad.scale(ad.matmul(q, ad.transpose_last_two(k)), 1.0 / np.sqrt(d))
    if key_mask is not None and not np.asarray(key_mask, dtype=bool).all():
        bias = np.zeros((queries.shape[0], source.shape[0]), dtype=np.float64)
        bias[:, ~np.asarray(key_mask, dtype=bool)] = enc.MASKED_SCORE
        scores = ad.add(scores, Tensor(bias))
    probs = ad.softmax(scores)
    if trace is not None:
        trace.append((name, probs.data.copy()))
    return ad.matmul(probs, source)


def _dual_attention_block(
    x: Tensor,
    seq: SequenceEncoding,
    graph: GraphEncoding,
    params: ParamStore,
    prefix: str,
    *,
    trace: list | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    c_seq = _cross_attention(
        x,
        seq.states,
        params[f"{prefix}.seq_wq"],
        params[f"{prefix}.seq_wk"],
        key_mask=seq.mask,
        trace=trace,
        name=f"{prefix}.seq",
    )
    c_graph = _cross_attention(
        x,
        graph.states,
        params[f"{prefix}.graph_wq"],
        params[f"{prefix}.graph_wk"],
        trace=trace,
        name=f"{prefix}.graph",
    )
    fused = ad.add(
        ad.matmul(ad.concat_last_dim([c_seq, c_graph]), params[f"{prefix}.fuse_w"]),
        params[f"{prefix}.fuse_b"],
    )
    return c_seq, c_graph, fused


def dual_attention_step(
    d_t: Tensor,
    seq: SequenceEncoding,
    graph: GraphEncoding,
    params: ParamStore,
    prefix: str = "dec.l0.cross",
    *,
    trace: list | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Dual attention for a single decoder state; returns (c_tS, c_tG, c_t)."""
    row = ad.reshape(d_t, (1, d_t.shape[-1]))
    c_seq, c_graph, fused = _dual_attention_block(
        row, seq, graph, params, prefix, trace=trace
    )
    width = fused.shape[-1]
    return (
        ad.reshape(c_seq, (c_seq.shape[-1],)),
        ad.reshape(c_graph, (c_graph.shape[-1],)),
        ad.reshape(fused, (width,)),
    )


def _last_row(x: Tensor) -> Tensor:
    rows = x.shape[0]
    flipped = ad.transpose_last_two(x)
    col = ad.slice_last_dim(flipped, rows - 1, rows)
    return ad.reshape(col, (x.shape[-1],))


def decode_prefix(
    prefix_ids,
    seq: SequenceEncoding,
    graph: GraphEncoding,
    params: ParamStore,
    cfg: EncoderConfig,
    *,
    trace: list | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits for every position of a teacher-forced prefix, shape (T, V).

    Position t sees prefix tokens up to and including t only (causal
    mask), so appending tokens never changes earlier rows.
    """
    ids = np.asarray(prefix_ids, dtype=np.int64)
    enc._check_token_ids(ids, params)
    if ids.shape[0] > cfg.max_seq_len:
        raise PrefixTooLong(f"{ids.shape[0]} tokens > max_seq_len {cfg.max_seq_len}")
    if seq.states.shape[0] == 0 or graph.states.shape[0] == 0:
        raise EmptyEncoding("encoder states must be non-empty")
    x = ad.add(
        ad.embedding(params["embed.token"], ids),
        Tensor(enc.sinusoidal_positions(ids.shape[0], cfg.d_model)),
    )
    x = enc.apply_dropout(x, cfg.dropout_rate, dropout_rng)
    for layer in range(cfg.n_layers):
        self_attn = enc.multi_head_self_attention(
            x, params, f"dec.l{layer}.self", cfg, causal=True, trace=trace
        )
        self_attn = enc.apply_dropout(self_attn, cfg.dropout_rate, dropout_rng)
        x = enc.residual_norm(x, self_attn, params, f"dec.l{layer}.ln1")
        _, _, fused = _dual_attention_block(
            x, seq, graph, params, f"dec.l{layer}.cross", trace=trace
        )
        fused = enc.apply_dropout(fused, cfg.dropout_rate, dropout_rng)
        x = enc.residual_norm(x, fused, params, f"dec.l{layer}.ln2")
        ffn = enc.apply_dropout(
            enc.feed_forward(x, params, f"dec.l{layer}.ffn"),
            cfg.dropout_rate,
            dropout_rng,
        )
        x = enc.residual_norm(x, ffn, params, f"dec.l{layer}.ln3")
    return ad.add(ad.matmul(x, params["out.w"]), params["out.b"])


def decode_step(
    prefix_ids,
    seq: SequenceEncoding,
    graph: GraphEncoding,
    params: ParamStore,
    cfg: EncoderConfig,
    *,
    trace: list | None = None,
) -> Tensor:
    """Next-token logits after the full prefix, shape (V,)."""
    return _last_row(decode_prefix(prefix_ids, seq, graph, params, cfg, trace=trace))


def _log_softmax(row: np.ndarray) -> np.ndarray:
    shifted = row - row.max()
    return shifted - np.log(np.exp(shifted).sum())


@dataclass
class _Hypothesis:
    tokens: list[int]  # sampled tokens, EOS excluded
    logp: float
    n_generated: int  # sampled tokens including EOS, for length penalty


def _final_score(hyp: _Hypothesis, length_penalty: float) -> float:
    if length_penalty == 0.0:
        return hyp.logp
    return hyp.logp / max(1, hyp.n_generated) ** length_penalty


def _greedy_rollout(
    step_logits, bos_id: int, eos_id: int, max_gen_len: int
) -> _Hypothesis:
    prefix = [bos_id]
    logp = 0.0
    tokens: list[int] = []
    n_generated = 0
    for _ in range(max_gen_len):
        log_probs = _log_softmax(step_logits(prefix))
        token = int(np.argmax(log_probs))  # argmax takes the lowest id on ties
        logp += float(log_probs[token])
        n_generated += 1
        if token == eos_id:
            break
        tokens.append(token)
        prefix.append(token)
    return _Hypothesis(tokens=tokens, logp=logp, n_generated=n_generated)


def _beam_rollout(
    step_logits, bos_id: int, eos_id: int, dcfg: DecodingConfig
) -> _Hypothesis:
    # The greedy hypothesis joins the finished pool so beam search never
    # returns anything that scores below it.
    finished = [_greedy_rollout(step_logits, bos_id, eos_id, dcfg.max_gen_len)]
    beams = [_Hypothesis(tokens=[], logp=0.0, n_generated=0)]
    for _ in range(dcfg.max_gen_len):
        candidates: list[_Hypothesis] = []
        for beam in beams:
            log_probs = _log_softmax(step_logits([bos_id] + beam.tokens))
            order = np.argsort(-log_probs, kind="stable")[: dcfg.beam_width]
            for token in order:
                candidates.append(
                    _Hypothesis(
                        tokens=beam.tokens + [int(token)],
                        logp=beam.logp + float(log_probs[token]),
                        n_generated=beam.n_generated + 1,
                    )
                )
        candidates.sort(key=lambda h: (-h.logp, h.tokens))
        beams = []
        for cand in candidates[: dcfg.beam_width]:
            if cand.tokens[-1] == eos_id:
                cand.tokens = cand.tokens[:-1]
                finished.append(cand)
            else:
                beams.append(cand)
        if not beams:
            break
    finished.extend(beams)
    finished.sort(key=lambda h: (-_final_score(h, dcfg.length_penalty), h.tokens))
    return finished[0]


def generate(
    x_ids,
    node_ids,
    rel_ids,
    params: ParamStore,
    cfg: EncoderConfig,
    dcfg: DecodingConfig,
    *,
    bos_id: int,
    eos_id: int,
    pad_id: int | None = 0,
    ablation: str = "none",
) -> list[int]:
    """Generate a response for one encoded example.

    Runs both encoders, then decodes greedily or with beam search
    (sum of token log-probabilities, length penalty applied when
    hypotheses are finalized).  The returned token ids contain neither
    BOS nor EOS.  ``beam_width=1`` reproduces greedy decoding exactly.
    """
    seq, graph = enc.build_encodings(
        x_ids, node_ids, rel_ids, params, cfg, ablation=ablation, pad_id=pad_id
    )

    def step_logits(prefix: list[int]) -> np.ndarray:
        return decode_step(prefix, seq, graph, params, cfg).data

    if dcfg.mode == "greedy" or dcfg.beam_width == 1:
        return _greedy_rollout(step_logits, bos_id, eos_id, dcfg.max_gen_len).tokens
    return _beam_rollout(step_logits, bos_id, eos_id, dcfg).tokens


def hypothesis_score(
    tokens_logp: float, n_generated: int, length_penalty: float
) -> float:
    """Finalized hypothesis score, exposed for tests and tooling."""
    return _final_score(
        _Hypothesis(tokens=[], logp=tokens_logp, n_generated=n_generated),
        length_penalty,
    )
