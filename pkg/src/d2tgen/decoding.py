"""Beam search over the copy/generation mixture with length and coverage reranking."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_EPS, Tensor
from .errors import EmptyBeam
from .mr_data import decode_extended, extend_source, is_boundary, linearize
from .seq2seq import EncoderOutput, joint_token_distribution

SENTENCE_END = frozenset({".", "!", "?"})


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 10
    max_len: int = 60
    alpha: float = 0.4
    beta: float = 0.1
    block_repeat_beginnings: bool = False
    suppress_special: bool = True

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class Hypothesis:
    tokens: tuple  # extended-vocabulary ids
    words: tuple
    logprob: float
    coverage: np.ndarray  # accumulated generation attention per source position
    finished: bool = False
    score: float | None = None

    def __len__(self):
        return len(self.tokens)


def length_penalty(n, alpha):
    return ((5.0 + n) / 6.0) ** alpha


def coverage_penalty(coverage, beta):
    """``beta * sum_i log(min(A_i, 1))``; zero attention is floored at the log epsilon."""
    if beta == 0:
        return 0.0
    clipped = np.minimum(np.asarray(coverage, dtype=float), 1.0)
    return float(beta * np.log(np.maximum(clipped, LOG_EPS)).sum())


def rerank_score(hyp, alpha, beta):
    return hyp.logprob / length_penalty(len(hyp.tokens), alpha) + coverage_penalty(hyp.coverage, beta)


def _split_sentences(words):
    closed, current = [], []
    for w in words:
        current.append(w)
        if w in SENTENCE_END:
            closed.append(current)
            current = []
    return closed, current


def block_repeat_beginnings(words, new_word):
    """True when appending ``new_word`` opens a sentence with an already used bigram."""
    closed, current = _split_sentences(list(words) + [new_word])
    if current:
        last, earlier = current, closed
    else:
        last, earlier = closed[-1], closed[:-1]
    if len(last) != 2 or not earlier:
        return False
    return any(tuple(s[:2]) == tuple(last) for s in earlier if len(s) >= 2)


def suppressed_ids(vocab):
    """PAD, BOS, UNK and attribute-boundary ids: tokens that never belong in output."""
    ids = [vocab.pad_id, vocab.bos_id, vocab.unk_id]
    ids += [i for i, tok in enumerate(vocab.tokens) if is_boundary(tok)]
    return np.asarray(sorted(ids), dtype=np.int64)


def _expand(enc, rows):
    def take(t):
        return None if t is None else Tensor(t.data[rows])

    return EncoderOutput(
        states=take(enc.states),
        mask=enc.mask[rows],
        final_h=[take(h) for h in enc.final_h],
        final_c=[take(c) for c in enc.final_c],
        keys=take(enc.keys),
        copy_keys=take(enc.copy_keys),
    )


@dataclass
class BeamResult:
    best: Hypothesis
    nbest: list
    source_tokens: list
    oov: list


def beam_search(model, source, vocab, cfg=None):
    """Decode one source with beam search and rerank the finished pool.

    ``source`` is a :class:`MeaningRepresentation` or an already linearized
    token list.  Hypotheses end on EOS or when they reach ``cfg.max_len``
    tokens; the search stops once ``beam_size`` hypotheses have finished,
    no live hypothesis remains, or ``max_len`` is reached.
    """
    cfg = cfg or DecodeConfig()
    source_tokens = source if isinstance(source, (list, tuple)) else linearize(source)
    source_tokens = list(source_tokens)
    src_ext, oov = extend_source(source_tokens, vocab)
    src_ids = np.asarray([vocab.encode(source_tokens)])
    V = len(vocab)
    ext_size = V + len(oov)
    m = len(source_tokens)
    suppressed = np.asarray([vocab.pad_id, vocab.bos_id], dtype=np.int64)
    if cfg.suppress_special:
        suppressed = suppressed_ids(vocab)
    with ad.no_grad():
        enc = model.encode(src_ids)
        state = model.initial_state(enc)
        live = [Hypothesis((), (), 0.0, np.zeros(m))]
        finished = []
        for _ in range(cfg.max_len):
            B = len(live)
            enc_b = _expand(enc, np.zeros(B, dtype=np.int64))
            prev = [h.tokens[-1] if h.tokens else vocab.bos_id for h in live]
            prev = [t if t < V else vocab.unk_id for t in prev]
            out = model.decode_step(np.asarray(prev), state, enc_b)
            joint = joint_token_distribution(
                out.gen_dist, out.copy_attn.data, out.p_copy, src_ext, ext_size
            )
            if suppressed.size:
                joint[:, suppressed] = 0.0
            with np.errstate(divide="ignore"):
                cand = np.array([h.logprob for h in live])[:, None] + np.log(joint)
            flat = cand.reshape(-1)
            # Rows are in lexicographic token order, so a stable sort breaks score
            # ties by token-id order of the extended sequences.
            order = np.argsort(-flat, kind="stable")
            attn = out.rank_attn.data
            new_live, rows = [], []
            for idx in order:
                if not np.isfinite(flat[idx]):
                    break
                b, w = divmod(int(idx), ext_size)
                word = decode_extended([w], vocab, oov)[0]
                hyp = live[b]
                if cfg.block_repeat_beginnings and block_repeat_beginnings(hyp.words, word):
                    continue
                new = Hypothesis(
                    hyp.tokens + (w,),
                    hyp.words + (word,),
                    float(flat[idx]),
                    hyp.coverage + attn[b],
                )
                if w == vocab.eos_id:
                    new.finished = True
                    finished.append(new)
                else:
                    new_live.append(new)
                    rows.append(b)
                    if len(new_live) == cfg.beam_size:
                        break
            if not new_live:
                live = []
                break
            sort = sorted(range(len(new_live)), key=lambda i: new_live[i].tokens)
            live = [new_live[i] for i in sort]
            rows = np.asarray([rows[i] for i in sort])
            state = [(Tensor(h.data[rows]), Tensor(c.data[rows])) for h, c in out.state]
            if len(finished) >= cfg.beam_size:
                break
        for hyp in live:
            if len(hyp.tokens) >= cfg.max_len:
                hyp.finished = True
                finished.append(hyp)
    if not finished:
        raise EmptyBeam("every beam candidate was pruned")
    for hyp in finished:
        hyp.score = rerank_score(hyp, cfg.alpha, cfg.beta)
    nbest = sorted(finished, key=lambda h: (-h.score, h.tokens))
    return BeamResult(nbest[0], nbest, source_tokens, oov)


def output_words(hyp, eos="</s>"):
    """Hypothesis words without the trailing EOS."""
    words = list(hyp.words)
    if words and words[-1] == eos:
        words = words[:-1]
    return words


def nbest_records(source_mr, result):
    return [
        {
            "source_mr": str(source_mr),
            "rank": rank,
            "tokens": output_words(hyp),
            "logprob": hyp.logprob,
            "score": hyp.score,
            "coverage_vector": [float(a) for a in hyp.coverage],
        }
        for rank, hyp in enumerate(result.nbest)
    ]


def nbest_jsonl(source_mr, result):
    return "".join(json.dumps(r) + "\n" for r in nbest_records(source_mr, result))
