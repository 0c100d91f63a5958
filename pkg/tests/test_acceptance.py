"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL`` line (printed in the pytest
terminal summary) and then asserts the same verdict.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from d2tgen import autodiff as ad
from d2tgen.cli import main
from d2tgen.config import RunConfig
from d2tgen.decoding import (
    DecodeConfig,
    beam_search,
    coverage_penalty,
    length_penalty,
    output_words,
)
from d2tgen.metrics import CoverageSummary, attribute_coverage, bleu, perplexity, rouge_l
from d2tgen.mr_data import (
    Example,
    MeaningRepresentation,
    build_vocab,
    extend_source,
    linearize,
    parse_mr,
    save_dataset,
    tokenize,
    training_pairs,
)
from d2tgen.seq2seq import ModelConfig, Seq2Seq, joint_token_distribution
from d2tgen.synthetic import copy_corpus, make_names, two_template_corpus
from d2tgen.training import (
    Adam,
    Ensemble,
    EnsembleConfig,
    EnsembleTrainer,
    assignment_purity,
    make_batch,
    member_perplexities,
    nll_loss,
    teacher_forced_accuracy,
)

import conftest
from conftest import brute_force, tiny_config

pytestmark = pytest.mark.acceptance


def verdict(n, title, ok, detail=""):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {title}" + (f" ({detail})" if detail else "")
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def random_examples(rng, n, words, keys=("name", "food", "area", "near")):
    out = []
    for _ in range(n):
        k = int(rng.integers(1, len(keys) + 1))
        chosen = rng.choice(keys, size=k, replace=False)
        items = [(key, list(rng.choice(words, size=int(rng.integers(1, 3))))) for key in chosen]
        ref = list(rng.choice(words + [".", "the"], size=int(rng.integers(1, 7))))
        # echo one value so the copy branch is exercised
        ref.insert(int(rng.integers(0, len(ref) + 1)), items[0][1][0])
        out.append(Example(MeaningRepresentation.from_items(items), (tuple(ref),)))
    return out


def test_criterion_1_gradient_integrity():
    rng = np.random.default_rng(101)
    words = ["alpha", "beta", "gamma", "delta", "eps"]
    worst, t0 = 0.0, time.time()
    configs = []
    for i in range(5):
        size = int(rng.choice([8, 10, 12, 14, 16]))
        kind = "dot" if i % 2 == 0 else "mlp"
        cfg = ModelConfig(embed_size=size, hidden_size=size, encoder_layers=1 + i % 2,
                          decoder_layers=1 + (i // 2) % 2, attention_kind=kind, dropout_p=0.0,
                          copy_enabled=i != 4)
        examples = random_examples(rng, 3, words)
        vocab = build_vocab(examples)
        model = Seq2Seq.create(cfg, len(vocab), np.random.default_rng(i))
        batch = make_batch(training_pairs(examples), vocab)
        err = ad.grad_check(lambda: nll_loss(model, batch), model.params.parameters(),
                            max_coords=4, rng=np.random.default_rng(i))
        worst = max(worst, err)
        configs.append(f"{kind}/{size}")
    elapsed = time.time() - t0
    verdict(1, "full-loss gradient check", worst <= 1e-4 and elapsed < 60,
            f"max rel err {worst:.2e} over {', '.join(configs)}; {elapsed:.1f}s")


def test_criterion_2_distribution_invariants():
    rng = np.random.default_rng(202)
    worst = 0.0
    for i in range(1000):
        V = int(rng.integers(2, 30))
        m = int(rng.integers(1, 10))
        gen = rng.dirichlet(np.ones(V))
        attn = rng.dirichlet(np.ones(m))
        p = [0.0, 0.5, 1.0][i % 3] if i % 2 == 0 else float(rng.random())
        pool = int(rng.integers(1, 4))  # few distinct ids -> many repeats
        src = rng.integers(0, V + pool, size=m)
        out = joint_token_distribution(gen, attn, p, src)
        worst = max(worst, abs(out.sum() - 1.0))
        assert (out >= 0).all()
    verdict(2, "joint distribution sums to one", worst <= 1e-6, f"max |sum-1| = {worst:.1e}")


def test_criterion_3_penalty_formulas():
    cases = [
        (length_penalty(7, 1.0), 2.0),
        (length_penalty(1, 0.4), 1.0),
        (length_penalty(5, 0.0), 1.0),
        (coverage_penalty([1.0, 1.3, 2.0], 0.1), 0.0),
        (coverage_penalty([0.5, 1.2], 0.1), 0.1 * math.log(0.5)),
        (coverage_penalty([0.25, 0.5], 1.0), math.log(0.25) + math.log(0.5)),
    ]
    ok = all(got == want for got, want in cases)
    verdict(3, "length/coverage penalty closed forms", ok,
            f"{sum(g == w for g, w in cases)}/{len(cases)} exact")


def test_criterion_4_beam_oracle():
    vocab = build_vocab([Example(parse_mr("name[a]"), (("b", "c"),))])
    model = Seq2Seq.create(tiny_config(embed_size=6, hidden_size=6), len(vocab),
                           np.random.default_rng(404))
    rng = np.random.default_rng(405)
    t0, mismatches, total = time.time(), 0, 0
    for _ in range(20):
        keys = rng.choice(["name", "food", "area"], size=int(rng.integers(1, 4)), replace=False)
        mr = MeaningRepresentation.from_items(
            [(k, list(rng.choice(["a", "b", "c"], size=int(rng.integers(1, 3))))) for k in keys]
        )
        source = linearize(mr)
        for alpha, beta in ((0.0, 0.0), (0.4, 0.1), (1.0, 1.0)):
            cfg = DecodeConfig(beam_size=64, max_len=3, alpha=alpha, beta=beta)
            best = beam_search(model, source, vocab, cfg).best
            score, seq = brute_force(model, vocab, source, cfg)
            total += 1
            if best.tokens != seq or abs(best.score - score) > 1e-9:
                mismatches += 1
    elapsed = time.time() - t0
    verdict(4, "exhaustive beam equals brute-force argmax", mismatches == 0 and elapsed < 60,
            f"{total - mismatches}/{total} agree; {elapsed:.1f}s")


def test_criterion_5_copy_capability():
    t0 = time.time()
    rng = np.random.default_rng(0)
    names = make_names(41, rng)
    held = names[-1]
    examples = copy_corpus(200, rng, names=names[:-1])
    vocab = build_vocab(examples)
    assert held not in vocab
    cfg = ModelConfig(embed_size=32, hidden_size=32, encoder_layers=1, decoder_layers=1,
                      dropout_p=0.0)
    ens = Ensemble.create(cfg, len(vocab), 1, "none", np.random.default_rng(1))
    trainer = EnsembleTrainer(ens, vocab, EnsembleConfig(K=1, pretrain_epochs=0), Adam(lr=0.01),
                              batch_size=8)
    pairs = training_pairs(examples)
    acc, epochs = 0.0, 0
    while epochs < 30 and acc < 0.99:
        trainer.train_epoch(pairs)
        epochs += 1
        acc = teacher_forced_accuracy(ens[0], pairs, vocab)

    mr = MeaningRepresentation.from_items([("name", held), ("food", "chinese"), ("area", "riverside")])
    words = output_words(beam_search(ens[0], mr, vocab, DecodeConfig(beam_size=5, max_len=20)).best)

    # a copy-less model of the same shape can never put mass on the extended id
    src = linearize(mr)
    src_ext, oov = extend_source(src, vocab)
    plain = Seq2Seq.create(replace(cfg, copy_enabled=False), len(vocab), np.random.default_rng(2))
    ref = tokenize(f"{held} serves chinese food in the riverside area .")
    mass = 0.0
    with ad.no_grad():
        enc = plain.encode([vocab.encode(src)])
        state, prev = plain.initial_state(enc), vocab.bos_id
        for tok in ref:
            out = plain.decode_step(np.array([prev]), state, enc)
            state = out.state
            joint = joint_token_distribution(out.gen_dist[0], out.copy_attn.data[0], out.p_copy[0],
                                             src_ext, len(vocab) + len(oov))
            mass += joint[len(vocab) + oov.index(held)]
            prev = vocab.token_to_id(tok) if tok in vocab else vocab.unk_id
    elapsed = time.time() - t0
    ok = acc >= 0.99 and epochs <= 30 and held in words and mass == 0.0 and elapsed < 300
    verdict(5, "copying unseen values", ok,
            f"accuracy {acc:.4f} after {epochs} epochs; output '{' '.join(words)}' for held-out "
            f"'{held}'; copy-less mass {mass}; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_6_smcl_template_recovery():
    t0 = time.time()
    rng = np.random.default_rng(0)
    names = make_names(30, rng)
    train_ex, labels = two_template_corpus(500, rng, names=names)
    valid_ex, _ = two_template_corpus(100, rng, names=names)
    vocab = build_vocab(train_ex)
    pairs, valid = training_pairs(train_ex), training_pairs(valid_ex)
    cfg = ModelConfig(embed_size=32, hidden_size=32, encoder_layers=1, decoder_layers=1,
                      dropout_p=0.0)
    epochs = 7
    results = {}
    for K in (2, 1):
        ens = Ensemble.create(cfg, len(vocab), K, "none", np.random.default_rng(1))
        trainer = EnsembleTrainer(ens, vocab, EnsembleConfig(K=K, pretrain_epochs=4),
                                  Adam(lr=0.01), batch_size=16)
        for _ in range(epochs):
            trainer.train_epoch(pairs)
        assigned = [trainer.last_assignment[i][0] for i in range(len(pairs))]
        results[K] = (assignment_purity(assigned, labels), member_perplexities(ens, valid, vocab))
    purity = results[2][0]
    best_member = min(results[2][1])
    single = results[1][1][0]
    elapsed = time.time() - t0
    purity_ok = purity >= 0.9
    ppl_ok = single > best_member
    verdict(6, "sMCL recovers planted templates", purity_ok and ppl_ok and elapsed < 600,
            f"purity {purity:.3f} ({'ok' if purity_ok else 'low'}); validation perplexity "
            f"K=1 {single:.3f} vs best K=2 member {best_member:.3f} "
            f"({'ok' if ppl_ok else 'single model is better'}); {elapsed:.0f}s")


def snapshot(model):
    return {n: p.data.copy() for n, p in model.params.items()}


def test_criterion_7_selective_update():
    rng = np.random.default_rng(7)
    examples, _ = two_template_corpus(12, rng)
    vocab = build_vocab(examples)
    pairs = training_pairs(examples)
    cfg = tiny_config(encoder_layers=1, decoder_layers=1)
    failures = []
    for sharing in ("none", "embeddings"):
        ens = Ensemble.create(cfg, len(vocab), 2, sharing, np.random.default_rng(0))
        trainer = EnsembleTrainer(ens, vocab, EnsembleConfig(K=2, sharing=sharing, pretrain_epochs=1),
                                  Adam(lr=0.01), batch_size=4)
        trainer.train_epoch(pairs)  # pretraining
        winners = set()
        for i, pair in enumerate(pairs):
            if sharing == "embeddings" and i < 2:
                # make sure both members get to win at least once
                other = ens[i % 2]
                other.params["out.b"].data[...] += np.random.default_rng(i).normal(0, 20, len(vocab))
            before = [snapshot(m) for m in ens.members]
            chosen, _ = trainer.train_batch(make_batch([pair], vocab, ids=[i]))
            w = chosen[0][0]
            winners.add(w)
            after = [snapshot(m) for m in ens.members]
            for name in after[1 - w]:
                moved = not np.array_equal(before[1 - w][name], after[1 - w][name])
                shared = name.startswith("embed.") and sharing == "embeddings"
                if moved != shared:
                    failures.append(f"{sharing}/{name}/example {i}")
            if not any(not np.array_equal(before[w][n], after[w][n]) for n in after[w]):
                failures.append(f"{sharing}: winner unchanged at example {i}")
        if sharing == "embeddings" and winners != {0, 1}:
            failures.append("embeddings: only one member ever won")
    verdict(7, "only the winner's private parameters move", not failures,
            "; ".join(failures[:3]) if failures else "checked sharing none and embeddings")


def test_criterion_8_metric_oracles():
    checks = {
        "bleu short": abs(bleu([["the", "cat"]], [[["the", "cat", "sat"]]]) - 100 * math.exp(-0.5)) <= 1e-6,
        "rouge lcs": abs(rouge_l([["a", "b", "c"]], [[["a", "c"]]]) - 80.0) <= 1e-6,
        "bleu identity": bleu([["x", "y", "z", "w", "v"]], [[["x", "y", "z", "w", "v"]]]) == 100.0,
        "rouge identity": rouge_l([["x", "y"]], [[["x", "y"]]]) == 100.0,
        "bleu disjoint": bleu([["a", "b", "c", "d"]], [[["e", "f", "g", "h"]]]) == 0.0,
        "rouge disjoint": rouge_l([["a"]], [[["b"]]]) == 0.0,
    }
    rng = np.random.default_rng(8)
    worst = 0.0
    for seed in range(3):
        examples = random_examples(rng, 5, ["alpha", "beta", "gamma", "delta"])
        vocab = build_vocab(examples)
        model = Seq2Seq.create(tiny_config(), len(vocab), np.random.default_rng(seed))
        pairs = training_pairs(examples)
        batch = make_batch(pairs, vocab)
        opt = Adam(lr=0.05)
        for _ in range(5):
            model.params.zero_grad()
            nll_loss(model, batch).backward()
            opt.step(model.params.parameters())
        expected = math.exp(nll_loss(model, batch).item())
        worst = max(worst, abs(perplexity(model, pairs, vocab, batch_size=2) - expected) / expected)
    checks["perplexity identity"] = worst <= 1e-9
    failed = [k for k, v in checks.items() if not v]
    verdict(8, "BLEU / ROUGE-L / perplexity oracles", not failed,
            f"failed: {failed}" if failed else f"perplexity rel diff {worst:.1e}")


def test_criterion_9_attribute_coverage():
    cases = [
        (parse_mr("area[riverside]"), "It is in the riverside area.", {"area": True}),
        (parse_mr("customer rating[5 out of 5]"), "It has a good rating.", {"customerRating": False}),
        (parse_mr("eatType[coffee shop]"), "A shop that sells coffee.", {"eatType": False}),
        (parse_mr("name[The Eagle], eatType[coffee shop]"), "The Eagle is a coffee shop.",
         {"name": True, "eatType": True}),
    ]
    ok = all(attribute_coverage(mr, tokenize(text)) == want for mr, text, want in cases)
    summary = CoverageSummary()
    summary.add(parse_mr("familyFriendly[yes]"), tokenize("Kids welcome."))
    ok = ok and summary.overall is None
    summary.add(parse_mr("name[x], familyFriendly[no], area[riverside]"), ["x", "no"])
    ok = ok and summary.overall == 50.0
    verdict(9, "exact contiguous attribute coverage", ok,
            "paraphrase undercount and familyFriendly exclusion included")


def test_criterion_10_determinism(tmp_path):
    rng = np.random.default_rng(10)
    examples, _ = two_template_corpus(6, rng)
    data = tmp_path / "train.csv"
    save_dataset(examples, data)
    cfg = RunConfig(model=tiny_config(encoder_layers=1, decoder_layers=1), precision=64, epochs=3,
                    threads=1, seed=5)
    cfg = cfg.override(**{"optimizer.batch_size": 4, "ensemble.pretrain_epochs": 1})
    cfg.save(tmp_path / "config.json")
    runs = []
    for name in ("a", "b"):
        code = main(["train", "--config", str(tmp_path / "config.json"), "--train", str(data),
                     "--valid", str(data), "--out", str(tmp_path / name)])
        assert code == 0
        files = sorted(p for p in (tmp_path / name).iterdir()
                       if p.name.startswith("member") or p.name == "report.json")
        runs.append({p.name: p.read_bytes() for p in files})
    same = runs[0] == runs[1] and len(runs[0]) == 2 * 4 + 1
    verdict(10, "bit-identical training runs", same,
            f"{len(runs[0])} checkpoint/report files compared")
