"""Training loop, loss, and checkpointing.

Teacher forcing convention: for a response ``y_1..y_T`` the decoder
consumes ``<bos> y_1..y_T`` and is scored against ``y_1..y_T <eos>``,
so every example contributes ``T + 1`` target tokens.  Batch loss is
the mean cross entropy per target token; epoch loss is the
token-weighted mean over the epoch's batches.

A single seeded generator drives parameter init, epoch shuffling, and
dropout, in that order.  Its state is stored in checkpoints, which is
what makes a resumed run reproduce an uninterrupted one exactly.

Checkpoints are a single binary file: magic ``AMRD``, a little-endian
u32 format version and u64 header length, a JSON header (configs,
vocabulary, relation labels, generator state, parameter manifest),
float64 parameter and optimizer blobs in manifest order, and a
trailing SHA-256 over everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .amr import RelationVocab
from .autodiff import (
    AdamState,
    ParamStore,
    Tensor,
    adam_step,
    add,
    clip_grad_norm,
    cross_entropy_sum,
    default_rng,
    scale,
)
from .data import EncodedExample, Vocab
from .encoders import ABLATIONS, EncoderConfig
from .model import forward_logits, init_params

CHECKPOINT_MAGIC = b"AMRD"
CHECKPOINT_VERSION = 1
_HASH_BYTES = 32


class EmptyBatch(ValueError):
    pass


class EmptyResponse(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    pass


class VersionMismatch(ValueError):
    pass


class CorruptChecksum(ValueError):
    pass


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 36
    learning_rate: float = 1e-4
    max_epochs: int = 10
    seed: int = 0
    grad_clip_norm: float = 1.0
    ablation: str = "none"
    early_stop_loss: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")


def teacher_forcing_pair(y_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decoder input ``<bos> y`` and target ``y <eos>`` for a response."""
    if len(y_ids) == 0:
        raise EmptyResponse("response has no tokens")
    decoder_input = np.concatenate(([Vocab.BOS], y_ids)).astype(np.int64)
    target = np.concatenate((y_ids, [Vocab.EOS])).astype(np.int64)
    return decoder_input, target


def batch_loss(
    batch: list[EncodedExample],
    params: ParamStore,
    cfg: EncoderConfig,
    *,
    ablation: str = "none",
    dropout_rng=None,
) -> tuple[Tensor, int]:
    """Mean per-token cross entropy over a batch, and the token count."""
    if not batch:
        raise EmptyBatch("batch has no examples")
    total = None
    n_tokens = 0
    for example in batch:
        decoder_input, target = teacher_forcing_pair(example.y_ids)
        logits = forward_logits(
            example.x_ids,
            example.node_ids,
            example.rel_ids,
            decoder_input,
            params,
            cfg,
            ablation=ablation,
            pad_id=Vocab.PAD,
            dropout_rng=dropout_rng,
        )
        ce = cross_entropy_sum(logits, target)
        total = ce if total is None else add(total, ce)
        n_tokens += len(target)
    return scale(total, 1.0 / n_tokens), n_tokens


def token_accuracy(
    examples: list[EncodedExample],
    params: ParamStore,
    cfg: EncoderConfig,
    *,
    ablation: str = "none",
    include_eos: bool = False,
) -> float:
    """Teacher-forced argmax accuracy over response tokens."""
    correct = 0
    total = 0
    for example in examples:
        decoder_input, target = teacher_forcing_pair(example.y_ids)
        logits = forward_logits(
            example.x_ids,
            example.node_ids,
            example.rel_ids,
            decoder_input,
            params,
            cfg,
            ablation=ablation,
            pad_id=Vocab.PAD,
        )
        predicted = np.argmax(logits.data, axis=-1)
        limit = len(target) if include_eos else len(target) - 1
        correct += int(np.sum(predicted[:limit] == target[:limit]))
        total += limit
    return correct / total if total else 0.0


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    enc_cfg: EncoderConfig
    train_cfg: TrainConfig
    vocab: Vocab
    rel_vocab: RelationVocab
    params: ParamStore
    adam: AdamState
    rng_state: dict
    epochs_done: int
    best_loss: float | None
    epoch_losses: list[float]
    version: int = CHECKPOINT_VERSION


def _blob(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = ckpt.params.names()
    header = {
        "enc_cfg": asdict(ckpt.enc_cfg),
        "train_cfg": asdict(ckpt.train_cfg),
        "vocab": list(ckpt.vocab.id_to_token),
        "relation_labels": list(ckpt.rel_vocab.labels),
        "rng_state": ckpt.rng_state,
        "epochs_done": ckpt.epochs_done,
        "best_loss": ckpt.best_loss,
        "epoch_losses": ckpt.epoch_losses,
        "adam_t": ckpt.adam.t,
        "params": [[name, list(ckpt.params[name].data.shape)] for name in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", ckpt.version),
        struct.pack("<Q", len(header_bytes)),
        header_bytes,
    ]
    for name in names:
        parts.append(_blob(ckpt.params[name].data))
    for name in names:
        parts.append(_blob(ckpt.adam.m[name]))
        parts.append(_blob(ckpt.adam.v[name]))
    payload = b"".join(parts)
    try:
        Path(path).write_bytes(payload + hashlib.sha256(payload).digest())
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    prefix_len = len(CHECKPOINT_MAGIC) + 4 + 8
    if len(raw) < prefix_len + _HASH_BYTES:
        raise CorruptChecksum("file too short to be a checkpoint")
    payload, digest = raw[:-_HASH_BYTES], raw[-_HASH_BYTES:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptChecksum("checksum mismatch")
    if payload[:4] != CHECKPOINT_MAGIC:
        raise CorruptChecksum("bad magic")
    (version,) = struct.unpack("<I", payload[4:8])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"checkpoint format {version}, expected {CHECKPOINT_VERSION}"
        )
    (header_len,) = struct.unpack("<Q", payload[8:16])
    if prefix_len + header_len > len(payload):
        raise CorruptChecksum("header length exceeds file size")
    header = json.loads(payload[prefix_len : prefix_len + header_len])

    params = ParamStore()
    offset = prefix_len + header_len
    arrays: dict[str, np.ndarray] = {}

    def take(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + count * 8
        if end > len(payload):
            raise CorruptChecksum("parameter blob extends past file end")
        array = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
        return array

    manifest = header["params"]
    for name, shape in manifest:
        arrays[name] = take(shape)
    for name, _ in manifest:
        params.add(name, Tensor(arrays[name]))
    adam = AdamState(t=header["adam_t"])
    for name, shape in manifest:
        adam.m[name] = take(shape)
        adam.v[name] = take(shape)
    if offset != len(payload):
        raise CorruptChecksum("trailing bytes after parameter blobs")

    return Checkpoint(
        enc_cfg=EncoderConfig(**header["enc_cfg"]),
        train_cfg=TrainConfig(**header["train_cfg"]),
        vocab=Vocab(tuple(header["vocab"])),
        rel_vocab=RelationVocab(tuple(header["relation_labels"])),
        params=params,
        adam=adam,
        rng_state=header["rng_state"],
        epochs_done=header["epochs_done"],
        best_loss=header["best_loss"],
        epoch_losses=list(header["epoch_losses"]),
        version=version,
    )


# ---------------------------------------------------------------------------
# The loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]


def _write_loss_log(out_dir: Path, losses: list[float]) -> None:
    lines = [
        json.dumps({"epoch": i + 1, "loss": loss}) for i, loss in enumerate(losses)
    ]
    (out_dir / "loss_log.jsonl").write_text("".join(line + "\n" for line in lines))


def train(
    examples: list[EncodedExample],
    enc_cfg: EncoderConfig,
    train_cfg: TrainConfig,
    vocab: Vocab,
    rel_vocab: RelationVocab,
    *,
    out_dir=None,
    resume_from: Checkpoint | None = None,
    log=None,
) -> TrainResult:
    """Run (or continue) training and return the final checkpoint.

    With ``out_dir`` set, writes ``last.ckpt`` and ``best.ckpt`` plus a
    ``loss_log.jsonl`` of epoch losses after every epoch.  When
    ``resume_from`` is given, model shape, vocabulary, and schedule come
    from the checkpoint and the supplied configs must match it.
    """
    if not examples:
        raise EmptyBatch("no training examples")

    if resume_from is not None:
        # max_epochs / early_stop_loss may change when extending a run;
        # everything that shapes the per-epoch trajectory must match.
        def trajectory(cfg: TrainConfig):
            return (
                cfg.batch_size,
                cfg.learning_rate,
                cfg.seed,
                cfg.grad_clip_norm,
                cfg.ablation,
            )

        if resume_from.enc_cfg != enc_cfg or trajectory(
            resume_from.train_cfg
        ) != trajectory(train_cfg):
            raise ValueError("resume configuration does not match checkpoint")
        params = resume_from.params
        adam = resume_from.adam
        rng = default_rng(train_cfg.seed)
        rng.bit_generator.state = resume_from.rng_state
        start_epoch = resume_from.epochs_done
        best_loss = resume_from.best_loss
        epoch_losses = list(resume_from.epoch_losses)
    else:
        rng = default_rng(train_cfg.seed)
        params = init_params(enc_cfg, len(vocab), rel_vocab.size, seed=rng)
        adam = AdamState.for_params(params)
        start_epoch = 0
        best_loss = None
        epoch_losses = []

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    def snapshot() -> Checkpoint:
        return Checkpoint(
            enc_cfg=enc_cfg,
            train_cfg=train_cfg,
            vocab=vocab,
            rel_vocab=rel_vocab,
            params=params,
            adam=adam,
            rng_state=rng.bit_generator.state,
            epochs_done=epoch,
            best_loss=best_loss,
            epoch_losses=epoch_losses,
        )

    epoch = start_epoch
    for epoch in range(start_epoch + 1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(examples))
        ce_total = 0.0
        tokens_total = 0
        for lo in range(0, len(examples), train_cfg.batch_size):
            batch = [examples[i] for i in order[lo : lo + train_cfg.batch_size]]
            params.zero_grad()
            loss, n_tokens = batch_loss(
                batch,
                params,
                enc_cfg,
                ablation=train_cfg.ablation,
                dropout_rng=rng,
            )
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(f"loss {value} at epoch {epoch}")
            loss.backward()
            # ablations cut whole branches out of the forward pass; their
            # parameters legitimately have no gradient this step
            for _, p in params.items():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            clip_grad_norm(params, train_cfg.grad_clip_norm)
            adam_step(params, adam, train_cfg.learning_rate)
            ce_total += value * n_tokens
            tokens_total += n_tokens
        epoch_loss = ce_total / tokens_total
        epoch_losses.append(epoch_loss)
        improved = best_loss is None or epoch_loss < best_loss
        if improved:
            best_loss = epoch_loss
        if log is not None:
            log(f"epoch {epoch}: loss {epoch_loss:.6f}")
        if out_dir is not None:
            save_checkpoint(snapshot(), out_dir / "last.ckpt")
            if improved:
                save_checkpoint(snapshot(), out_dir / "best.ckpt")
            _write_loss_log(out_dir, epoch_losses)
        if (
            train_cfg.early_stop_loss is not None
            and epoch_loss < train_cfg.early_stop_loss
        ):
            break

    return TrainResult(checkpoint=snapshot(), epoch_losses=epoch_losses)
