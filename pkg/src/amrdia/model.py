"""Parameter initialization and the full forward pass.

One flat :class:`ParamStore` holds everything: a token embedding table
shared by the sequence encoder, the graph encoder and the decoder
input, per-layer encoder/decoder weights, and an untied output
projection.  Weight matrices are Xavier-uniform, biases and layer-norm
offsets zero, layer-norm gains one.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import encoders as enc
from .autodiff import ParamStore, Tensor
from .encoders import EncoderConfig


def _add_linear(store: ParamStore, rng, name: str, rows: int, cols: int) -> None:
    store.add(name, ad.xavier_uniform(rng, rows, cols))


def _add_layer_norm(store: ParamStore, name: str, width: int) -> None:
    store.add(f"{name}.gain", np.ones(width))
    store.add(f"{name}.bias", np.zeros(width))


def _add_ffn(store: ParamStore, rng, name: str, width: int, hidden: int) -> None:
    _add_linear(store, rng, f"{name}.w1", width, hidden)
    store.add(f"{name}.b1", np.zeros(hidden))
    _add_linear(store, rng, f"{name}.w2", hidden, width)
    store.add(f"{name}.b2", np.zeros(width))


def init_params(
    cfg: EncoderConfig,
    vocab_size: int,
    n_relations: int,
    seed: int | np.random.Generator = 0,
) -> ParamStore:
    """Build the complete named parameter set for one model."""
    rng = seed if isinstance(seed, np.random.Generator) else ad.default_rng(seed)
    d = cfg.d_model
    store = ParamStore()
    _add_linear(store, rng, "embed.token", vocab_size, d)
    for layer in range(cfg.n_layers):
        base = f"seq.l{layer}"
        for proj in ("wq", "wk", "wv"):
            _add_linear(store, rng, f"{base}.attn.{proj}", d, d)
        _add_layer_norm(store, f"{base}.ln1", d)
        _add_ffn(store, rng, f"{base}.ffn", d, cfg.ffn_dim)
        _add_layer_norm(store, f"{base}.ln2", d)
    for layer in range(cfg.n_layers):
        base = f"graph.l{layer}"
        for proj in ("wq", "wk", "wv"):
            _add_linear(store, rng, f"{base}.attn.{proj}", d, d)
        _add_linear(store, rng, f"{base}.attn.rel_k", n_relations, d)
        _add_linear(store, rng, f"{base}.attn.rel_v", n_relations, d)
        _add_layer_norm(store, f"{base}.ln1", d)
        _add_ffn(store, rng, f"{base}.ffn", d, cfg.ffn_dim)
        _add_layer_norm(store, f"{base}.ln2", d)
    for layer in range(cfg.n_layers):
        base = f"dec.l{layer}"
        for proj in ("wq", "wk", "wv"):
            _add_linear(store, rng, f"{base}.self.{proj}", d, d)
        _add_layer_norm(store, f"{base}.ln1", d)
        for proj in ("seq_wq", "seq_wk", "graph_wq", "graph_wk"):
            _add_linear(store, rng, f"{base}.cross.{proj}", d, d)
        _add_linear(store, rng, f"{base}.cross.fuse_w", 2 * d, d)
        store.add(f"{base}.cross.fuse_b", np.zeros(d))
        _add_layer_norm(store, f"{base}.ln2", d)
        _add_ffn(store, rng, f"{base}.ffn", d, cfg.ffn_dim)
        _add_layer_norm(store, f"{base}.ln3", d)
    _add_linear(store, rng, "out.w", d, vocab_size)
    store.add("out.b", np.zeros(vocab_size))
    return store


def forward_logits(
    x_ids,
    node_ids,
    rel_ids,
    decoder_input_ids,
    params: ParamStore,
    cfg: EncoderConfig,
    *,
    ablation: str = "none",
    pad_id: int | None = 0,
    trace: list | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced logits (T, V) for one example."""
    seq, graph = enc.build_encodings(
        x_ids,
        node_ids,
        rel_ids,
        params,
        cfg,
        ablation=ablation,
        pad_id=pad_id,
        trace=trace,
        dropout_rng=dropout_rng,
    )
    return dec.decode_prefix(
        decoder_input_ids,
        seq,
        graph,
        params,
        cfg,
        trace=trace,
        dropout_rng=dropout_rng,
    )
