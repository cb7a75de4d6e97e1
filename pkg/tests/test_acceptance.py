"""Release acceptance suite.

One test per criterion; each prints a single ``PASS:``/``FAIL:`` line
(visible with ``pytest -s`` or in captured output) before asserting.
Tolerances are pinned in the assertions, not configurable.
"""

import json
import math
import random
import time

import numpy as np
import pytest

from amrdia import amr
from amrdia.amr import (
    AmrGraph,
    DuplicateVariable,
    EmptyConcept,
    MissingSlash,
    RelationVocab,
    UnbalancedParens,
    UnknownVariableReference,
    parse_penman,
    serialize_penman,
)
from amrdia.autodiff import grad_check
from amrdia.data import (
    EncodedExample,
    Vocab,
    build_vocab,
    bundled_corpus_path,
    encode_examples,
    ingest_dialogues,
    tokenize,
)
from amrdia.decoder import DecodingConfig, generate
from amrdia.encoders import EncoderConfig, encode_graph
from amrdia.metrics import bleu, distinct_n, lcs_length, rouge_l
from amrdia.model import forward_logits, init_params
from amrdia.training import (
    TrainConfig,
    batch_loss,
    load_checkpoint,
    save_checkpoint,
    token_accuracy,
    train,
)


def _verdict(label: str, ok: bool) -> None:
    print(f"{'PASS' if ok else 'FAIL'}: {label}")
    assert ok, label


def _relation_square(size: int, rel_vocab: RelationVocab, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rel = rng.integers(RelationVocab.NONE, rel_vocab.size, size=(size, size))
    np.fill_diagonal(rel, RelationVocab.SELF)
    return rel.astype(np.int64)


# ---------------------------------------------------------------------------
# 1. Gradient fidelity


def test_criterion_1_gradient_fidelity():
    cfg = EncoderConfig(
        d_model=8, n_heads=1, n_layers=1, ffn_dim=16, max_seq_len=16, dropout_rate=0.0
    )
    rel_vocab = RelationVocab((":ARG0", ":ARG1"))
    rng = np.random.default_rng(0)
    example = EncodedExample(
        example_id="gradcheck",
        x_ids=rng.integers(4, 16, size=5),
        y_ids=rng.integers(4, 16, size=3),
        node_ids=rng.integers(4, 16, size=4),
        rel_ids=_relation_square(4, rel_vocab, seed=0),
    )
    params = init_params(cfg, 16, rel_vocab.size, seed=0)

    start = time.monotonic()
    error = grad_check(lambda p: batch_loss([example], p, cfg)[0], params, h=1e-4)
    elapsed = time.monotonic() - start

    ok = error < 1e-4 and elapsed < 60.0
    _verdict(
        f"[1] gradient fidelity: max relative error {error:.2e} "
        f"(tolerance 1e-4) in {elapsed:.1f}s",
        ok,
    )


# ---------------------------------------------------------------------------
# 2. Attention normalization


def test_criterion_2_attention_rows_normalize():
    worst = 0.0
    n_distributions = 0
    kinds = set()
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = int(rng.choice([4, 8, 16]))
        cfg = EncoderConfig(
            d_model=d,
            n_heads=int(rng.choice([1, 2, 4])),
            n_layers=int(rng.integers(1, 3)),
            ffn_dim=2 * d,
            max_seq_len=32,
            dropout_rate=0.0,
        )
        rel_vocab = RelationVocab((":ARG0", ":ARG1"))
        params = init_params(cfg, 20, rel_vocab.size, seed=seed)
        x_ids = rng.integers(0, 20, size=int(rng.integers(1, 9)))  # may contain PAD
        node_ids = rng.integers(4, 20, size=int(rng.integers(1, 7)))
        rel_ids = _relation_square(len(node_ids), rel_vocab, seed=seed)
        decoder_input = np.concatenate(
            ([Vocab.BOS], rng.integers(4, 20, size=int(rng.integers(0, 5))))
        )
        trace = []
        forward_logits(
            x_ids, node_ids, rel_ids, decoder_input, params, cfg, trace=trace
        )
        for name, probs in trace:
            kinds.add(name.split(".")[0])
            n_distributions += probs.shape[0]
            worst = max(worst, float(np.abs(probs.sum(axis=-1) - 1.0).max()))
            assert probs.min() >= 0.0

    ok = worst <= 1e-9 and kinds == {"seq", "graph", "dec"} and n_distributions > 0
    _verdict(
        f"[2] attention normalization: {n_distributions} distributions over "
        f"100 configs, worst |row sum - 1| = {worst:.2e} (tolerance 1e-9)",
        ok,
    )


# ---------------------------------------------------------------------------
# 3. Zero relation embeddings reduce to standard attention


def test_criterion_3_zero_relations_reduce_to_standard_attention():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        d = int(rng.choice([8, 16]))
        heads = int(rng.choice([1, 2]))
        cfg = EncoderConfig(
            d_model=d,
            n_heads=heads,
            n_layers=1,
            ffn_dim=2 * d,
            max_seq_len=16,
            dropout_rate=0.0,
        )
        rel_vocab = RelationVocab((":ARG0", ":ARG1"))
        params = init_params(cfg, 12, rel_vocab.size, seed=seed)
        params["graph.l0.attn.rel_k"].data[:] = 0.0
        params["graph.l0.attn.rel_v"].data[:] = 0.0
        m = int(rng.integers(2, 6))
        node_ids = rng.integers(0, 12, size=m)
        rel_ids = _relation_square(m, rel_vocab, seed=seed)

        trace = []
        encode_graph(node_ids, rel_ids, params, cfg, trace=trace)

        # independent oracle: plain scaled dot-product attention per head
        emb = params["embed.token"].data[node_ids]
        head_dim = d // heads
        assert len(trace) == heads
        for h, (_, probs) in enumerate(trace):
            cols = slice(h * head_dim, (h + 1) * head_dim)
            q = emb @ params["graph.l0.attn.wq"].data[:, cols]
            k = emb @ params["graph.l0.attn.wk"].data[:, cols]
            scores = q @ k.T / math.sqrt(head_dim)
            shifted = np.exp(scores - scores.max(axis=-1, keepdims=True))
            expected = shifted / shifted.sum(axis=-1, keepdims=True)
            worst = max(worst, float(np.abs(probs - expected).max()))

    ok = worst <= 1e-10
    _verdict(
        f"[3] zeroed relation embeddings = standard attention: "
        f"max |difference| = {worst:.2e} (tolerance 1e-10)",
        ok,
    )


# ---------------------------------------------------------------------------
# 4. PENMAN round trip


GOOD_PENMAN = [
    "(d / dog)",
    "(w / want-01 :ARG0 (b / boy))",
    "(w / want-01 :ARG0 (b / boy) :ARG1 (g / go-02 :ARG0 b))",
    "(a / ask-01 :ARG2 (d / doctor :poss (h / hospital :location (c / city))))",
    "(p / pressure :quant 120)",
    '(c / city :name (n / name :op1 "New York"))',
    "(s / sleep-01 :polarity -)",
    "(t / temperature :quant 38.5)",
    "(s / say-01 :ARG0 (d / doctor) :ARG1 (l / like-01 :ARG0 (p / patient) :ARG1 d) :ARG2 p)",
    "(d / date-entity :year 2024 :month 3)",
    "(a / and :op1 (e / eat-01 :ARG0 (i / i)) :op2 (d / drink-01 :ARG0 i))",
    "(h / have-03 :ARG0 (i / i) :ARG1 (f / fever :mod (h2 / high)))",
    "(x / x)",
    " ( d  /  dog ) ",
    "(t / t-1)",
    "(p / pain :ARG0-of (c / cause-01))",
    '(p / person :wiki "Q42" :name (n / name :op1 "Douglas"))',
    "(b / between :op1 120 :op2 130)",
    "(r / recommend-01 :ARG0 (d / doctor) :ARG1 (t / take-01 :ARG0 (p / patient)"
    " :ARG1 (m / medicine :quant 2) :frequency (r2 / rate-entity :ARG1 1)) :ARG2 p)",
    "(m / multi-sentence :snt1 (g / go-02 :ARG0 (h / he)) :snt2 (s / stop-01 :ARG1 g))",
    "(n / name :op1 \"St. Mary's\")",
    "(a / a1 :x (b / b1 :y (c / c1 :z (d / d1))))",
    "(a / alpha :m (b2 / beta) :n b2)",
]

MALFORMED_PENMAN = [
    ("(d / dog", UnbalancedParens),
    ("(d / dog))", UnbalancedParens),
    ("d / dog)", UnbalancedParens),
    ("", UnbalancedParens),
    ("(w / want :ARG0 (w / wish))", DuplicateVariable),
    ("(w / want-01 :ARG0 b)", UnknownVariableReference),
    ("(d / )", EmptyConcept),
    ("(d /)", EmptyConcept),
    ("(d dog)", MissingSlash),
    ("(d)", MissingSlash),
]


def _shape(graph: AmrGraph) -> tuple:
    return (
        tuple((n.concept, n.is_constant) for n in graph.nodes),
        graph.edges,
        graph.root,
    )


def test_criterion_4_penman_round_trip():
    assert len(GOOD_PENMAN) >= 20
    assert len(MALFORMED_PENMAN) == 10
    survived = 0
    for text in GOOD_PENMAN:
        graph = parse_penman(text)
        again = parse_penman(serialize_penman(graph))
        if _shape(again) == _shape(graph):
            survived += 1
    rejected = 0
    for text, error in MALFORMED_PENMAN:
        with pytest.raises(error):
            parse_penman(text)
        rejected += 1

    ok = survived == len(GOOD_PENMAN) and rejected == len(MALFORMED_PENMAN)
    _verdict(
        f"[4] PENMAN round trip: {survived}/{len(GOOD_PENMAN)} fixtures "
        f"isomorphic, {rejected}/10 malformed rejected with the typed error",
        ok,
    )


# ---------------------------------------------------------------------------
# 5. Overfit reproduction


def test_criterion_5_overfit_reproduction():
    start = time.monotonic()
    result = ingest_dialogues(bundled_corpus_path())
    vocab, rel_vocab = build_vocab(result.examples)
    encoded = encode_examples(result.examples, vocab, rel_vocab)

    enc_cfg = EncoderConfig(
        d_model=32, n_heads=2, n_layers=1, ffn_dim=64, max_seq_len=64, dropout_rate=0.0
    )
    # batch_size = corpus size, so steps == epochs
    train_cfg = TrainConfig(
        batch_size=8,
        learning_rate=3e-3,
        max_epochs=2000,
        seed=1,
        grad_clip_norm=1.0,
        early_stop_loss=0.01,
    )
    outcome = train(encoded, enc_cfg, train_cfg, vocab, rel_vocab)
    steps = len(outcome.epoch_losses)
    final_loss = outcome.epoch_losses[-1]

    dcfg = DecodingConfig(mode="greedy", max_gen_len=16)
    exact = 0
    candidates, references = [], []
    for example, enc in zip(result.examples, encoded):
        ids = generate(
            enc.x_ids,
            enc.node_ids,
            enc.rel_ids,
            outcome.checkpoint.params,
            enc_cfg,
            dcfg,
            bos_id=Vocab.BOS,
            eos_id=Vocab.EOS,
        )
        decoded = vocab.decode(ids)
        gold = tokenize(example.response)
        exact += decoded == gold
        candidates.append(decoded)
        references.append(gold)
    b4 = bleu(candidates, references)[3]
    elapsed = time.monotonic() - start

    ok = (
        steps <= 2000
        and final_loss < 0.01
        and exact == 8
        and b4 >= 0.99
        and elapsed < 300.0
    )
    _verdict(
        f"[5] overfit reproduction: loss {final_loss:.4f} after {steps} steps, "
        f"{exact}/8 decoded exactly, B-4 {b4:.4f}, {elapsed:.1f}s",
        ok,
    )


# ---------------------------------------------------------------------------
# 6. Ablation direction


def _graph_only_corpus(tmp_path):
    """Targets recoverable only from the graph's :ARG0 child.

    Every context is identical, so a model without graph input cannot
    beat the majority baseline except by chance.
    """
    concepts = ["fever", "cough", "rash", "nausea", "fatigue"]
    lines = []
    k = 0
    for i, target in enumerate(concepts):
        for j in range(4):
            distractor = concepts[(i + 1 + j) % len(concepts)]
            graph = (
                f"(d / describe-01 :ARG0 ({target[0]} / {target})"
                f" :mod ({distractor[0]}2 / {distractor}))"
            )
            lines.append(
                json.dumps(
                    {
                        "id": f"syn-{k}",
                        "turns": [{"speaker": "patient", "text": "how do i feel"}],
                        "response": target,
                        "amr": [graph],
                    }
                )
            )
            k += 1
    path = tmp_path / "graph_only.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_criterion_6_ablation_direction(tmp_path):
    result = ingest_dialogues(_graph_only_corpus(tmp_path))
    examples = result.examples
    vocab, rel_vocab = build_vocab(examples)
    encoded = encode_examples(examples, vocab, rel_vocab)

    first_tokens = [tokenize(e.response)[0] for e in examples]
    counts = {tok: first_tokens.count(tok) for tok in set(first_tokens)}
    majority = max(counts.values()) / len(first_tokens)

    enc_cfg = EncoderConfig(
        d_model=32, n_heads=2, n_layers=1, ffn_dim=64, max_seq_len=32, dropout_rate=0.0
    )
    accuracies = {}
    for ablation in ("none", "no_amr"):
        cfg = TrainConfig(
            batch_size=20,
            learning_rate=3e-3,
            max_epochs=150,
            seed=2,
            grad_clip_norm=1.0,
            ablation=ablation,
        )
        outcome = train(encoded, enc_cfg, cfg, vocab, rel_vocab)
        accuracies[ablation] = token_accuracy(
            encoded, outcome.checkpoint.params, enc_cfg, ablation=ablation
        )

    ok = accuracies["none"] >= 0.95 and accuracies["no_amr"] <= majority + 0.10
    _verdict(
        f"[6] ablation direction: full model accuracy {accuracies['none']:.3f} "
        f"(needs >= 0.95), no_amr {accuracies['no_amr']:.3f} vs majority "
        f"baseline {majority:.3f} (allowed within +0.10)",
        ok,
    )


# ---------------------------------------------------------------------------
# 7. Metric oracles


def _brute_force_lcs(a, b):
    best = 0
    for mask in range(1 << len(a)):
        sub = [a[i] for i in range(len(a)) if mask >> i & 1]
        it = iter(b)
        if all(tok in it for tok in sub):
            best = max(best, len(sub))
    return best


def test_criterion_7_metric_oracles():
    clip = bleu(
        ["the the the the the the the".split()], ["the cat is on the mat".split()]
    )[0]
    clip_ok = clip == 2 / 7

    rng = random.Random(23)
    lcs_ok = True
    for _ in range(100):
        a = [rng.choice("abcd") for _ in range(rng.randrange(0, 13))]
        b = [rng.choice("abcd") for _ in range(rng.randrange(0, 13))]
        if lcs_length(a, b) != _brute_force_lcs(a, b):
            lcs_ok = False
            break

    dist_ok = (
        distinct_n(["a a a".split()], 1) == 1 / 3
        and distinct_n(["a b a b".split()], 2) == 2 / 3
    )
    rl = rouge_l("the cat sat".split(), "the cat on the mat sat".split())

    ok = clip_ok and lcs_ok and dist_ok and abs(rl - 200 / 3) < 1e-9
    _verdict(
        f"[7] metric oracles: BLEU clip {clip:.4f} == 2/7 {clip_ok}, "
        f"LCS == brute force over 100 pairs {lcs_ok}, "
        f"Dist hand cases {dist_ok}",
        ok,
    )


# ---------------------------------------------------------------------------
# 8. Loss sanity


def test_criterion_8_zero_projection_loss_is_log_vocab():
    cfg = EncoderConfig(
        d_model=16, n_heads=2, n_layers=1, ffn_dim=32, max_seq_len=32, dropout_rate=0.0
    )
    rel_vocab = RelationVocab((":ARG0",))
    vocab_size = 24
    rng = np.random.default_rng(4)
    batch = [
        EncodedExample(
            example_id=str(k),
            x_ids=rng.integers(4, vocab_size, size=6),
            y_ids=rng.integers(4, vocab_size, size=5),
            node_ids=rng.integers(4, vocab_size, size=3),
            rel_ids=_relation_square(3, rel_vocab, seed=k),
        )
        for k in range(3)
    ]
    params = init_params(cfg, vocab_size, rel_vocab.size, seed=4)
    params["out.w"].data[:] = 0.0
    params["out.b"].data[:] = 0.0
    loss, _ = batch_loss(batch, params, cfg)
    deviation = abs(loss.item() - math.log(vocab_size))

    ok = deviation < 1e-6
    _verdict(
        f"[8] loss sanity: zero projection loss deviates from ln|V| "
        f"by {deviation:.2e} (tolerance 1e-6)",
        ok,
    )


# ---------------------------------------------------------------------------
# 9. Determinism and persistence


def test_criterion_9_determinism_and_persistence(tmp_path):
    result = ingest_dialogues(bundled_corpus_path())
    vocab, rel_vocab = build_vocab(result.examples)
    encoded = encode_examples(result.examples, vocab, rel_vocab)
    enc_cfg = EncoderConfig(
        d_model=16, n_heads=2, n_layers=1, ffn_dim=32, max_seq_len=64, dropout_rate=0.0
    )

    def cfg(epochs):
        return TrainConfig(
            batch_size=4,
            learning_rate=1e-3,
            max_epochs=epochs,
            seed=5,
            grad_clip_norm=1.0,
        )

    run_a = train(encoded, enc_cfg, cfg(4), vocab, rel_vocab)
    run_b = train(encoded, enc_cfg, cfg(4), vocab, rel_vocab)
    seed_ok = run_a.epoch_losses == run_b.epoch_losses and all(
        np.array_equal(run_a.checkpoint.params[n].data, run_b.checkpoint.params[n].data)
        for n in run_a.checkpoint.params.names()
    )

    path = tmp_path / "model.ckpt"
    save_checkpoint(run_a.checkpoint, path)
    loaded = load_checkpoint(path)
    example = encoded[0]
    decoder_input = np.concatenate(([Vocab.BOS], example.y_ids))
    logits_before = forward_logits(
        example.x_ids,
        example.node_ids,
        example.rel_ids,
        decoder_input,
        run_a.checkpoint.params,
        enc_cfg,
    ).data
    logits_after = forward_logits(
        example.x_ids,
        example.node_ids,
        example.rel_ids,
        decoder_input,
        loaded.params,
        enc_cfg,
    ).data
    reload_ok = np.array_equal(logits_before, logits_after)

    first_leg = train(
        encoded, enc_cfg, cfg(2), vocab, rel_vocab, out_dir=tmp_path / "run"
    )
    resumed = train(
        encoded,
        enc_cfg,
        cfg(4),
        vocab,
        rel_vocab,
        resume_from=load_checkpoint(tmp_path / "run" / "last.ckpt"),
    )
    resume_ok = (
        first_leg.epoch_losses == run_a.epoch_losses[:2]
        and resumed.epoch_losses == run_a.epoch_losses
        and all(
            np.array_equal(
                resumed.checkpoint.params[n].data, run_a.checkpoint.params[n].data
            )
            for n in run_a.checkpoint.params.names()
        )
    )

    ok = seed_ok and reload_ok and resume_ok
    _verdict(
        f"[9] determinism and persistence: seed determinism {seed_ok}, "
        f"save/load forward bit-exact {reload_ok}, "
        f"resumed == uninterrupted {resume_ok}",
        ok,
    )
