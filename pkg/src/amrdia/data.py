"""Dialogue corpus handling: tokenization, vocabulary, ingestion.

The corpus format is JSON lines.  Each record holds a dialogue context
(``turns``: list of ``{"speaker", "text"}``), the gold ``response``, an
``id``, and ``amr``: one PENMAN string per context sentence.  Sentence
graphs are merged into a single dialogue graph at load time.

Tokenization is deliberately simple and shared by training and
evaluation: lowercase, split punctuation from words, split on
whitespace.  ``detokenize`` joins with single spaces, so
``tokenize(detokenize(tokens)) == tokens`` for already-normalized text.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from collections import Counter
from importlib import resources
from pathlib import Path

import numpy as np

from . import amr
from .amr import AmrGraph, RelationVocab, SimplifyConfig

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


class NoValidExamples(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


def bundled_corpus_path(name: str = "overfit8.jsonl") -> Path:
    """Path of a small dialogue corpus shipped with the package."""
    return Path(str(resources.files(__package__) / "fixtures" / name))


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


class Vocab:
    """Token ids with fixed specials PAD=0, BOS=1, EOS=2, UNK=3.

    Remaining ids are assigned by descending frequency, ties broken
    lexicographically.  Tokens below ``min_freq`` are dropped and encode
    to UNK.
    """

    PAD = 0
    BOS = 1
    EOS = 2
    UNK = 3
    SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

    def __init__(self, id_to_token: tuple[str, ...]):
        if tuple(id_to_token[:4]) != self.SPECIALS:
            raise ValueError("vocab must start with the reserved special tokens")
        self.id_to_token = tuple(id_to_token)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocab")

    @classmethod
    def build(cls, token_streams, min_freq: int = 1) -> "Vocab":
        counts: Counter[str] = Counter()
        for stream in token_streams:
            counts.update(stream)
        for special in cls.SPECIALS:
            counts.pop(special, None)
        kept = [(tok, c) for tok, c in counts.items() if c >= min_freq]
        kept.sort(key=lambda item: (-item[1], item[0]))
        return cls(cls.SPECIALS + tuple(tok for tok, _ in kept))

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(tok, self.UNK) for tok in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


@dataclass(frozen=True)
class DialogueExample:
    """One raw corpus record with its merged dialogue graph."""

    example_id: str
    turns: tuple[tuple[str, str], ...]
    response: str
    sentence_graphs: tuple[AmrGraph, ...]
    graph: AmrGraph

    @property
    def context_text(self) -> str:
        return " ".join(f"{speaker}: {text}" for speaker, text in self.turns)


@dataclass
class IngestResult:
    examples: list[DialogueExample]
    skipped: list[tuple[int, str]]  # (1-based line number, reason)


def _parse_record(record: dict) -> DialogueExample:
    if not isinstance(record, dict):
        raise ValueError("record is not an object")
    example_id = str(record.get("id", "")).strip()
    if not example_id:
        raise ValueError("missing id")
    raw_turns = record.get("turns")
    if not isinstance(raw_turns, list) or not raw_turns:
        raise ValueError("missing turns")
    turns = []
    for turn in raw_turns:
        if not isinstance(turn, dict) or "speaker" not in turn or "text" not in turn:
            raise ValueError("turn needs speaker and text")
        turns.append((str(turn["speaker"]), str(turn["text"])))
    response = record.get("response")
    if not isinstance(response, str) or not response.strip():
        raise ValueError("missing response")
    raw_graphs = record.get("amr")
    if not isinstance(raw_graphs, list) or not raw_graphs:
        raise ValueError("missing amr graphs")
    graphs = tuple(amr.parse_penman(text) for text in raw_graphs)
    return DialogueExample(
        example_id=example_id,
        turns=tuple(turns),
        response=response,
        sentence_graphs=graphs,
        graph=amr.merge_graphs(list(graphs)),
    )


def ingest_dialogues(path: str) -> IngestResult:
    """Read a JSONL dialogue corpus, skipping malformed lines.

    Skipped lines are reported as (line number, reason) diagnostics.
    Raises FileNotFoundError for a missing file and
    :class:`NoValidExamples` when nothing survives.
    """
    examples: list[DialogueExample] = []
    skipped: list[tuple[int, str]] = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                examples.append(_parse_record(record))
            except (json.JSONDecodeError, ValueError) as exc:
                skipped.append((line_no, str(exc)))
    if not examples:
        raise NoValidExamples(f"no valid examples in {path!r}")
    return IngestResult(examples=examples, skipped=skipped)


# ---------------------------------------------------------------------------
# Vocabulary construction and example encoding


def _model_graph(example: DialogueExample, simplify_config: SimplifyConfig) -> AmrGraph:
    return amr.simplify(example.graph, simplify_config)


def example_token_streams(
    example: DialogueExample, simplify_config: SimplifyConfig = SimplifyConfig()
):
    """Token streams feeding the joint vocabulary.

    Context and response text are tokenized; the simplified dialogue
    graph contributes its linearization, so node concepts and relation
    labels become vocabulary items too.
    """
    yield tokenize(example.context_text)
    yield tokenize(example.response)
    yield amr.linearize(_model_graph(example, simplify_config))


def build_vocab(
    examples,
    min_freq: int = 1,
    simplify_config: SimplifyConfig = SimplifyConfig(),
) -> tuple[Vocab, RelationVocab]:
    """Joint token vocabulary plus relation vocabulary for a corpus."""
    examples = list(examples)
    if not examples:
        raise EmptyCorpus("cannot build a vocabulary from zero examples")
    streams = []
    graphs = []
    for example in examples:
        streams.extend(example_token_streams(example, simplify_config))
        graphs.append(_model_graph(example, simplify_config))
    vocab = Vocab.build(streams, min_freq=min_freq)
    return vocab, RelationVocab.from_graphs(graphs)


@dataclass(frozen=True)
class EncodedExample:
    """Id arrays for one example, ready for the model."""

    example_id: str
    x_ids: np.ndarray
    y_ids: np.ndarray
    node_ids: np.ndarray
    rel_ids: np.ndarray


def encode_example(
    example: DialogueExample,
    vocab: Vocab,
    rel_vocab: RelationVocab,
    simplify_config: SimplifyConfig = SimplifyConfig(),
) -> EncodedExample:
    graph = _model_graph(example, simplify_config)
    return EncodedExample(
        example_id=example.example_id,
        x_ids=np.asarray(vocab.encode(tokenize(example.context_text)), dtype=np.int64),
        y_ids=np.asarray(vocab.encode(tokenize(example.response)), dtype=np.int64),
        node_ids=np.asarray(
            vocab.encode([node.concept for node in graph.nodes]), dtype=np.int64
        ),
        rel_ids=amr.relation_matrix(graph, rel_vocab),
    )


def encode_examples(
    examples,
    vocab: Vocab,
    rel_vocab: RelationVocab,
    simplify_config: SimplifyConfig = SimplifyConfig(),
) -> list[EncodedExample]:
    return [
        encode_example(example, vocab, rel_vocab, simplify_config)
        for example in examples
    ]
