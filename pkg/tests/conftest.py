import itertools

import numpy as np
import pytest

from d2tgen import autodiff as ad
from d2tgen.decoding import Hypothesis, rerank_score, suppressed_ids
from d2tgen.mr_data import (
    Example,
    MeaningRepresentation,
    build_vocab,
    extend_source,
    parse_mr,
    tokenize,
)
from d2tgen.seq2seq import ModelConfig, Seq2Seq, joint_token_distribution


@pytest.fixture(autouse=True)
def float64():
    with ad.precision(64):
        yield


@pytest.fixture
def small_corpus():
    rows = [
        ("name[Wildwood], eatType[coffee shop], area[riverside]",
         "Wildwood is a coffee shop by the riverside."),
        ("name[The Eagle], food[English], near[Burger King]",
         "The Eagle serves English food near Burger King."),
        ("name[Wildwood], eatType[coffee shop], area[riverside]",
         "There is a coffee shop called Wildwood in riverside."),
    ]
    grouped = {}
    for mr, ref in rows:
        grouped.setdefault(mr, []).append(tokenize(ref))
    return [Example(parse_mr(mr), tuple(refs)) for mr, refs in grouped.items()]


@pytest.fixture
def small_vocab(small_corpus):
    return build_vocab(small_corpus)


def tiny_config(**kw):
    base = dict(embed_size=8, hidden_size=8, encoder_layers=2, decoder_layers=2,
                attention_kind="dot", dropout_p=0.0, copy_enabled=True)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(vocab_size, seed=0, **kw):
    return Seq2Seq.create(tiny_config(**kw), vocab_size, np.random.default_rng(seed))


def mr_of(**items):
    return MeaningRepresentation.from_items(list(items.items()))


def toy_setup(seed=0, **kw):
    """Vocabulary whose only emittable tokens are a, b, c and EOS."""
    vocab = build_vocab([Example(parse_mr("name[a]"), (("b", "c"),))])
    model = tiny_model(len(vocab), seed=seed, embed_size=6, hidden_size=6, **kw)
    return vocab, model


def brute_force(model, vocab, source, cfg):
    """Score every sequence up to max_len by re-running the decoder from scratch."""
    src_ext, oov = extend_source(source, vocab)
    ext = len(vocab) + len(oov)
    emittable = [i for i in range(ext) if i not in set(suppressed_ids(vocab).tolist())]
    cache = {}

    def step(prefix):
        if prefix not in cache:
            with ad.no_grad():
                enc = model.encode([vocab.encode(source)])
                state = model.initial_state(enc)
                prev = vocab.bos_id
                for tok in prefix + (None,):
                    out = model.decode_step(np.array([prev]), state, enc)
                    state = out.state
                    if tok is not None:
                        prev = tok
            joint = joint_token_distribution(out.gen_dist[0], out.copy_attn.data[0],
                                             out.p_copy[0], src_ext, ext)
            cache[prefix] = (np.log(joint), out.rank_attn.data[0])
        return cache[prefix]

    best = None
    for n in range(1, cfg.max_len + 1):
        for seq in itertools.product(emittable, repeat=n):
            if vocab.eos_id in seq[:-1]:
                continue
            if n < cfg.max_len and seq[-1] != vocab.eos_id:
                continue
            lp, cov = 0.0, np.zeros(len(source))
            for t in range(n):
                logp, attn = step(seq[:t])
                lp += logp[seq[t]]
                cov = cov + attn
            hyp = Hypothesis(seq, (), lp, cov)
            score = rerank_score(hyp, cfg.alpha, cfg.beta)
            if best is None or score > best[0] + 1e-12:
                best = (score, seq)
    return best


# Verdict lines recorded by the acceptance suite, echoed after the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
