"""Semantic graphs in PENMAN notation.

A graph is a rooted, labelled multigraph.  Nodes carry a concept (a word
sense or a constant literal), edges carry relation labels such as
``:ARG0``.  The functions here parse PENMAN text into graphs, write
graphs back out, simplify them for modelling, flatten them to token
sequences, and turn their edge structure into the integer relation
matrix consumed by the graph encoder.

Parsing rules, where PENMAN is ambiguous:

* A bare child token that matches an already declared variable is a
  reentrant reference to that node.  Declarations must precede
  references (first-visit expansion order).
* A bare child token shaped like a variable (one lowercase letter plus
  optional digits) that was never declared raises
  :class:`UnknownVariableReference`.
* Any other bare token (numbers, words like ``imperative``, ``-``) is a
  constant; quoted strings are always constants.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

SELF_RELATION = ":self"

_NUMBER_RE = re.compile(r"^[+-]?\d+(\.\d+)?$")
_VARIABLE_SHAPED_RE = re.compile(r"^[a-z]\d*$")
_BARE_ATOM_RE = re.compile(r'^[^\s()"/:][^\s()"/]*$')
_SENSE_TAG_RE = re.compile(r"-\d{2}$")


class PenmanParseError(ValueError):
    """Malformed PENMAN input; ``offset`` is the character position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class UnbalancedParens(PenmanParseError):
    pass


class DuplicateVariable(PenmanParseError):
    pass


class UnknownVariableReference(PenmanParseError):
    pass


class EmptyConcept(PenmanParseError):
    pass


class MissingSlash(PenmanParseError):
    pass


class InvariantViolation(ValueError):
    """A graph handed to serialization or validation is not well formed."""


class EmptyInput(ValueError):
    """merge_graphs was called with no graphs."""


@dataclass(frozen=True)
class AmrNode:
    """One graph node: a concept with an optional PENMAN variable.

    Constants (string/number literals) have ``variable=None`` and
    ``is_constant=True``.
    """

    concept: str
    variable: str | None = None
    is_constant: bool = False


@dataclass(frozen=True)
class RelationTriple:
    """Directed labelled edge between node indices."""

    source: int
    label: str
    target: int


@dataclass(frozen=True)
class AmrGraph:
    """Immutable rooted graph; nodes are indexed in first-visit order."""

    nodes: tuple[AmrNode, ...]
    edges: tuple[RelationTriple, ...]
    root: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def outgoing(self, index: int) -> list[RelationTriple]:
        return [e for e in self.edges if e.source == index]


class RelationVocab:
    """Relation label ids for the graph encoder.

    Ids 0..2 are reserved: SELF for the diagonal, NONE for unrelated
    node pairs, UNK for labels unseen at build time.  Every known label
    gets two ids, one for the stored direction and one for the reverse,
    so the encoder can tell ``i -> j`` apart from ``j -> i``.
    """

    SELF = 0
    NONE = 1
    UNK = 2

    def __init__(self, labels: tuple[str, ...]):
        self.labels = tuple(labels)
        self._forward = {lab: 3 + 2 * k for k, lab in enumerate(self.labels)}

    @classmethod
    def from_graphs(cls, graphs: list[AmrGraph]) -> "RelationVocab":
        seen = {e.label for g in graphs for e in g.edges}
        return cls(tuple(sorted(seen)))

    @property
    def size(self) -> int:
        return 3 + 2 * len(self.labels)

    def id_of(self, label: str) -> int:
        return self._forward.get(label, self.UNK)

    def reverse_id_of(self, label: str) -> int:
        fwd = self._forward.get(label)
        return self.UNK if fwd is None else fwd + 1


# ---------------------------------------------------------------------------
# Lexing and parsing


@dataclass(frozen=True)
class _Token:
    kind: str  # "(", ")", "/", "atom", "string"
    text: str
    offset: int


def _lex(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch in "()/":
            tokens.append(_Token(ch, ch, i))
            i += 1
            continue
        if ch == '"':
            j = i + 1
            out: list[str] = []
            while j < n and text[j] != '"':
                if text[j] == "\\" and j + 1 < n:
                    j += 1
                out.append(text[j])
                j += 1
            if j >= n:
                raise PenmanParseError("unterminated string literal", i)
            tokens.append(_Token("string", "".join(out), i))
            i = j + 1
            continue
        j = i
        while j < n and not text[j].isspace() and text[j] not in '()/"':
            j += 1
        tokens.append(_Token("atom", text[i:j], i))
        i = j
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _lex(text)
        self.pos = 0
        self.nodes: list[AmrNode] = []
        self.edges: list[RelationTriple] = []
        self.var_index: dict[str, int] = {}

    def _peek(self) -> _Token | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _next(self) -> _Token | None:
        tok = self._peek()
        if tok is not None:
            self.pos += 1
        return tok

    def _eof_offset(self) -> int:
        return len(self.text)

    def parse(self) -> AmrGraph:
        tok = self._peek()
        if tok is None or tok.kind != "(":
            offset = tok.offset if tok is not None else self._eof_offset()
            raise UnbalancedParens("expected '(' to open a node", offset)
        self._parse_node()
        trailing = self._peek()
        if trailing is not None:
            raise UnbalancedParens("unexpected content after graph", trailing.offset)
        return AmrGraph(nodes=tuple(self.nodes), edges=tuple(self.edges), root=0)

    def _parse_node(self) -> int:
        open_tok = self._next()
        assert open_tok is not None and open_tok.kind == "("
        var_tok = self._next()
        if var_tok is None:
            raise UnbalancedParens("unclosed '('", self._eof_offset())
        if var_tok.kind != "atom" or var_tok.text.startswith(":"):
            raise PenmanParseError("expected a variable name", var_tok.offset)
        if _NUMBER_RE.match(var_tok.text):
            raise PenmanParseError("variable name cannot be a number", var_tok.offset)
        if var_tok.text in self.var_index:
            raise DuplicateVariable(
                f"variable {var_tok.text!r} declared twice", var_tok.offset
            )
        slash = self._peek()
        if slash is None:
            raise UnbalancedParens("unclosed '('", self._eof_offset())
        if slash.kind != "/":
            raise MissingSlash(
                f"expected '/' after variable {var_tok.text!r}", slash.offset
            )
        self._next()
        concept_tok = self._peek()
        if concept_tok is None:
            raise UnbalancedParens("unclosed '('", self._eof_offset())
        if concept_tok.kind != "atom" or concept_tok.text.startswith(":"):
            raise EmptyConcept("expected a concept after '/'", concept_tok.offset)
        self._next()
        index = len(self.nodes)
        self.nodes.append(AmrNode(concept=concept_tok.text, variable=var_tok.text))
        self.var_index[var_tok.text] = index

        while True:
            tok = self._peek()
            if tok is None:
                raise UnbalancedParens("unclosed '('", self._eof_offset())
            if tok.kind == ")":
                self._next()
                return index
            if tok.kind == "atom" and tok.text.startswith(":"):
                if len(tok.text) == 1:
                    raise PenmanParseError("empty relation label", tok.offset)
                self._next()
                # Reserve the slot first so edges come out in pre-order.
                slot = len(self.edges)
                self.edges.append(RelationTriple(index, tok.text, -1))
                target = self._parse_child(tok)
                self.edges[slot] = RelationTriple(index, tok.text, target)
                continue
            raise PenmanParseError("expected a relation label or ')'", tok.offset)

    def _parse_child(self, rel_tok: _Token) -> int:
        tok = self._peek()
        if tok is None:
            raise UnbalancedParens("unclosed '('", self._eof_offset())
        if tok.kind == "(":
            return self._parse_node()
        if tok.kind == "string":
            self._next()
            return self._add_constant(tok.text)
        if tok.kind == "atom" and not tok.text.startswith(":"):
            self._next()
            if tok.text in self.var_index:
                return self.var_index[tok.text]
            if _NUMBER_RE.match(tok.text):
                return self._add_constant(tok.text)
            if _VARIABLE_SHAPED_RE.match(tok.text):
                raise UnknownVariableReference(
                    f"reference to undeclared variable {tok.text!r}", tok.offset
                )
            return self._add_constant(tok.text)
        raise PenmanParseError(
            f"expected a value after {rel_tok.text!r}", tok.offset
        )

    def _add_constant(self, text: str) -> int:
        index = len(self.nodes)
        self.nodes.append(AmrNode(concept=text, is_constant=True))
        return index


def parse_penman(text: str) -> AmrGraph:
    """Parse one PENMAN expression into a graph.

    Nodes are indexed in depth-first first-visit order, so the root is
    node 0.  Each occurrence of a quoted or bare literal becomes its own
    constant node; reentrant variable references resolve to the already
    created node.
    """
    graph = _Parser(text).parse()
    for e in graph.edges:
        if e.source == e.target:
            raise PenmanParseError(
                f"self-referential edge {e.label!r} on node {e.source}", 0
            )
    return graph


# ---------------------------------------------------------------------------
# Validation and serialization


def validate_graph(graph: AmrGraph) -> None:
    """Raise :class:`InvariantViolation` unless the graph is well formed."""
    n = graph.n_nodes
    if n == 0:
        raise InvariantViolation("graph has no nodes")
    if not (0 <= graph.root < n):
        raise InvariantViolation(f"root index {graph.root} out of range")
    for node in graph.nodes:
        if node.is_constant and node.variable is not None:
            raise InvariantViolation(f"constant node {node.concept!r} has a variable")
        if not node.concept:
            raise InvariantViolation("node with empty concept")
    variables = [nd.variable for nd in graph.nodes if nd.variable is not None]
    if len(variables) != len(set(variables)):
        raise InvariantViolation("duplicate variable names")
    seen: set[RelationTriple] = set()
    for e in graph.edges:
        if not (0 <= e.source < n and 0 <= e.target < n):
            raise InvariantViolation(f"edge {e} references a missing node")
        if e.source == e.target and e.label != SELF_RELATION:
            raise InvariantViolation(f"self loop with label {e.label!r}")
        if e in seen:
            raise InvariantViolation(f"duplicate edge {e}")
        seen.add(e)
    reachable = {graph.root}
    frontier = [graph.root]
    adjacency: dict[int, list[int]] = {}
    for e in graph.edges:
        adjacency.setdefault(e.source, []).append(e.target)
        adjacency.setdefault(e.target, []).append(e.source)
    while frontier:
        current = frontier.pop()
        for other in adjacency.get(current, ()):
            if other not in reachable:
                reachable.add(other)
                frontier.append(other)
    if len(reachable) != n:
        missing = sorted(set(range(n)) - reachable)
        raise InvariantViolation(f"nodes {missing} unreachable from root")


def _canonical_variables(graph: AmrGraph) -> dict[int, str]:
    assigned: dict[int, str] = {}
    used: set[str] = set()
    for idx, node in enumerate(graph.nodes):
        if node.is_constant:
            continue
        first = node.concept[0].lower()
        base = first if first.isalpha() else "x"
        name = base
        suffix = 2
        while name in used:
            name = f"{base}{suffix}"
            suffix += 1
        used.add(name)
        assigned[idx] = name
    return assigned


def _constant_text(concept: str, used_vars: set[str]) -> str:
    if _NUMBER_RE.match(concept):
        return concept
    needs_quote = (
        not _BARE_ATOM_RE.match(concept)
        or _VARIABLE_SHAPED_RE.match(concept) is not None
        or concept in used_vars
    )
    if needs_quote:
        escaped = concept.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    return concept


def serialize_penman(graph: AmrGraph) -> str:
    """Write a graph as a single-line PENMAN string.

    Variables are regenerated canonically: first letter of the concept,
    deduplicated with numeric suffixes in node order.  The output
    re-parses to a graph isomorphic to the input (same concepts and
    edges, up to variable renaming).  Beyond the basic invariants this
    requires every node to be reachable from the root along edge
    direction and constants to be leaves with a single parent; anything
    else has no faithful PENMAN form and raises
    :class:`InvariantViolation`.
    """
    validate_graph(graph)
    if graph.nodes[graph.root].is_constant:
        raise InvariantViolation("root node is a constant")
    for node in graph.nodes:
        if not node.is_constant and not _BARE_ATOM_RE.match(node.concept):
            raise InvariantViolation(
                f"concept {node.concept!r} has no bare PENMAN form"
            )
    constant_parents: dict[int, int] = {}
    for e in graph.edges:
        if graph.nodes[e.target].is_constant:
            constant_parents[e.target] = constant_parents.get(e.target, 0) + 1
        if graph.nodes[e.source].is_constant:
            raise InvariantViolation("constant node has outgoing edges")
    for target, count in constant_parents.items():
        if count > 1:
            raise InvariantViolation(
                f"constant node {target} has multiple parents"
            )
    variables = _canonical_variables(graph)
    used_vars = set(variables.values())
    outgoing: dict[int, list[RelationTriple]] = {}
    for e in graph.edges:
        outgoing.setdefault(e.source, []).append(e)

    expanded: set[int] = set()

    def emit(index: int) -> str:
        node = graph.nodes[index]
        if node.is_constant:
            return _constant_text(node.concept, used_vars)
        if index in expanded:
            return variables[index]
        expanded.add(index)
        parts = [f"({variables[index]} / {node.concept}"]
        for edge in outgoing.get(index, ()):
            parts.append(f" {edge.label} {emit(edge.target)}")
        parts.append(")")
        return "".join(parts)

    text = emit(graph.root)
    if len(expanded) != sum(1 for nd in graph.nodes if not nd.is_constant):
        raise InvariantViolation(
            "some nodes are not reachable along edge direction"
        )
    return text


# ---------------------------------------------------------------------------
# Simplification, linearization, merging


@dataclass(frozen=True)
class SimplifyConfig:
    strip_sense_tags: bool = True
    drop_wiki_edges: bool = True


def simplify(graph: AmrGraph, config: SimplifyConfig = SimplifyConfig()) -> AmrGraph:
    """Normalize a graph for modelling.

    Strips trailing two-digit sense tags from non-constant concepts
    (``want-01`` becomes ``want``) and drops ``:wiki`` edges together
    with their now orphaned constant targets.  Idempotent.
    """
    nodes = list(graph.nodes)
    edges = list(graph.edges)
    if config.strip_sense_tags:
        for idx, node in enumerate(nodes):
            if node.is_constant:
                continue
            stripped = _SENSE_TAG_RE.sub("", node.concept)
            if stripped and stripped != node.concept:
                nodes[idx] = replace(node, concept=stripped)
    if config.drop_wiki_edges:
        kept_edges = [e for e in edges if e.label != ":wiki"]
        wiki_targets = {e.target for e in edges if e.label == ":wiki"}
        still_used = {e.source for e in kept_edges} | {e.target for e in kept_edges}
        removed = {
            t
            for t in wiki_targets
            if nodes[t].is_constant and t not in still_used and t != graph.root
        }
        if removed:
            index_map: dict[int, int] = {}
            new_nodes: list[AmrNode] = []
            for old, node in enumerate(nodes):
                if old in removed:
                    continue
                index_map[old] = len(new_nodes)
                new_nodes.append(node)
            nodes = new_nodes
            kept_edges = [
                RelationTriple(index_map[e.source], e.label, index_map[e.target])
                for e in kept_edges
            ]
            root = index_map[graph.root]
        else:
            root = graph.root
        edges = kept_edges
    else:
        root = graph.root
    return AmrGraph(nodes=tuple(nodes), edges=tuple(edges), root=root)


def linearize(graph: AmrGraph) -> list[str]:
    """Flatten a graph to tokens in depth-first order.

    Emits the concept, then for each outgoing edge the relation label
    followed by the child: wrapped in parentheses when the child has
    outgoing edges of its own, bare otherwise.  Reentrant second visits
    emit the concept only, with no re-expansion.
    """
    validate_graph(graph)
    outgoing: dict[int, list[RelationTriple]] = {}
    for e in graph.edges:
        outgoing.setdefault(e.source, []).append(e)
    tokens: list[str] = []
    visited: set[int] = set()

    def walk(index: int, wrap: bool) -> None:
        node = graph.nodes[index]
        first_visit = index not in visited
        visited.add(index)
        children = outgoing.get(index, ())
        expand = first_visit and bool(children)
        if wrap and expand:
            tokens.append("(")
        tokens.append(node.concept)
        if expand:
            for edge in children:
                tokens.append(edge.label)
                walk(edge.target, wrap=True)
            if wrap:
                tokens.append(")")

    walk(graph.root, wrap=False)
    return tokens


def relation_matrix(graph: AmrGraph, vocab: RelationVocab) -> np.ndarray:
    """Integer relation ids for every ordered node pair.

    The diagonal is SELF.  A stored edge ``i -> j`` puts its label id at
    ``(i, j)`` and the reverse id at ``(j, i)``; pairs with no edge stay
    NONE.  When several edges connect the same pair the first stored one
    wins.  Labels unknown to the vocab map to UNK in both directions.
    """
    n = graph.n_nodes
    matrix = np.full((n, n), RelationVocab.NONE, dtype=np.int64)
    np.fill_diagonal(matrix, RelationVocab.SELF)
    for e in graph.edges:
        if e.source == e.target:
            continue
        if matrix[e.source, e.target] == RelationVocab.NONE:
            matrix[e.source, e.target] = vocab.id_of(e.label)
        if matrix[e.target, e.source] == RelationVocab.NONE:
            matrix[e.target, e.source] = vocab.reverse_id_of(e.label)
    return matrix


MERGE_ROOT_CONCEPT = "multi-sentence"


def merge_graphs(graphs: list[AmrGraph]) -> AmrGraph:
    """Join sentence graphs into one dialogue graph.

    A single graph is returned unchanged.  Otherwise a fresh root with
    concept ``multi-sentence`` is added at index 0 and connected to each
    former root via ``:snt1``, ``:snt2``, ...  Concepts are never
    deduplicated across sentences; variables are regenerated to stay
    unique.
    """
    if not graphs:
        raise EmptyInput("merge_graphs requires at least one graph")
    if len(graphs) == 1:
        return graphs[0]
    nodes: list[AmrNode] = [AmrNode(concept=MERGE_ROOT_CONCEPT, variable="m")]
    edges: list[RelationTriple] = []
    used_vars = {"m"}

    def fresh_variable(concept: str) -> str:
        first = concept[0].lower()
        base = first if first.isalpha() else "x"
        name = base
        suffix = 2
        while name in used_vars:
            name = f"{base}{suffix}"
            suffix += 1
        used_vars.add(name)
        return name

    for position, graph in enumerate(graphs, start=1):
        offset = len(nodes)
        for node in graph.nodes:
            if node.is_constant:
                nodes.append(node)
            else:
                nodes.append(replace(node, variable=fresh_variable(node.concept)))
        edges.append(RelationTriple(0, f":snt{position}", offset + graph.root))
        for e in graph.edges:
            edges.append(RelationTriple(offset + e.source, e.label, offset + e.target))
    return AmrGraph(nodes=tuple(nodes), edges=tuple(edges), root=0)


# ---------------------------------------------------------------------------
# PENMAN files


def split_penman_blocks(text: str) -> list[str]:
    """Split file text into PENMAN blocks.

    Blocks are separated by blank lines; lines starting with ``#`` are
    comments.  A graph may span multiple lines within its block.
    """
    blocks: list[str] = []
    current: list[str] = []
    for line in text.splitlines():
        if line.strip().startswith("#"):
            continue
        if not line.strip():
            if current:
                blocks.append("\n".join(current))
                current = []
            continue
        current.append(line)
    if current:
        blocks.append("\n".join(current))
    return blocks


def load_penman_file(path: str) -> list[AmrGraph]:
    """Parse every graph block in a UTF-8 PENMAN file."""
    with open(path, encoding="utf-8") as handle:
        text = handle.read()
    return [parse_penman(block) for block in split_penman_blocks(text)]


def dump_penman_file(graphs: list[AmrGraph], path: str) -> None:
    """Write graphs as blank-line separated PENMAN blocks."""
    with open(path, "w", encoding="utf-8") as handle:
        for graph in graphs:
            handle.write(serialize_penman(graph))
            handle.write("\n\n")
