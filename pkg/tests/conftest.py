from __future__ import annotations

import math

import numpy as np

from amrdia.encoders import EncoderConfig
from amrdia.model import init_params


def tiny_config(**overrides) -> EncoderConfig:
    settings = dict(
        d_model=8,
        n_heads=2,
        n_layers=1,
        ffn_dim=16,
        max_seq_len=32,
        dropout_rate=0.0,
    )
    settings.update(overrides)
    return EncoderConfig(**settings)


def make_params(cfg: EncoderConfig, vocab_size: int = 12, n_relations: int = 7, seed: int = 0):
    return init_params(cfg, vocab_size, n_relations, seed)


# Plain-numpy re-implementations used as step-through oracles.  They are
# written from the formulas, independently of the autodiff ops.


def oracle_softmax_rows(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        row = x[i] - x[i].max()
        e = np.exp(row)
        out[i] = e / e.sum()
    return out


def oracle_layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain + bias


def oracle_gelu(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def oracle_positions(length: int, d: int) -> np.ndarray:
    table = np.zeros((length, d))
    for pos in range(length):
        for i in range(d):
            angle = pos / 10000.0 ** (2 * (i // 2) / d)
            table[pos, i] = math.sin(angle) if i % 2 == 0 else math.cos(angle)
    return table
