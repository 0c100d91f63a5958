import json

import numpy as np
import pytest

from d2tgen import autodiff as ad
from d2tgen.autodiff import LOG_EPS
from d2tgen.config import RunConfig
from d2tgen.mr_data import build_vocab, extend_source, linearize, parse_mr, training_pairs
from d2tgen.seq2seq import joint_token_distribution
from d2tgen.synthetic import copy_corpus, two_template_corpus
from d2tgen.training import (
    Adam,
    Ensemble,
    EnsembleConfig,
    EnsembleTrainer,
    adam_step,
    assignment_purity,
    clip_grad_norm,
    make_batch,
    make_copy_labels,
    mixture_loglik,
    nll_loss,
    read_assignment_log,
    select_inference_model,
    sequence_nll,
    smcl_assign,
    train,
    write_assignment_log,
)

from conftest import tiny_config, tiny_model


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


class TestCopyLabels:
    def test_labels_and_positions(self):
        src = linearize(parse_mr("name[wildwood], area[city centre]"))
        sup = make_copy_labels(src, ["wildwood", "is", "in", "the", "city", "centre"])
        assert sup.z == (1, 0, 0, 0, 1, 1)
        assert sup.positions[0] == (1,) and sup.positions[4] == (4,)

    def test_repeated_source_token(self):
        sup = make_copy_labels(["a", "b", "a"], ["a"])
        assert sup.positions == ((0, 2),)

    def test_boundary_tokens_never_copied(self):
        sup = make_copy_labels(["__start_name__", "x", "__end_name__"], ["__start_name__"])
        assert sup.z == (0,)


def manual_nll(model, vocab, mr, ref):
    """Per-token NLL of one pair, stepping the decoder one token at a time."""
    src = linearize(mr)
    sup = make_copy_labels(src, ref)
    targets = vocab.encode(list(ref)) + [vocab.eos_id]
    z = list(sup.z) + [0]
    positions = list(sup.positions) + [()]
    with ad.no_grad():
        enc = model.encode([vocab.encode(src)])
        state = model.initial_state(enc)
        prev, total = vocab.bos_id, 0.0
        for y, zt, pos in zip(targets, z, positions):
            out = model.decode_step(np.array([prev]), state, enc)
            state = out.state
            if not model.config.copy_enabled:
                total -= out.gen_log_probs.data[0, y]
            else:
                s = out.copy_logit.data[0]
                if zt:
                    total -= log_sigmoid(s) + np.log(out.copy_attn.data[0, list(pos)].sum() + LOG_EPS)
                else:
                    total -= log_sigmoid(-s) + out.gen_log_probs.data[0, y]
            prev = y
    return total, len(targets)


class TestLoss:
    @pytest.mark.parametrize("copy", [True, False])
    def test_matches_stepwise_oracle(self, small_corpus, small_vocab, copy):
        model = tiny_model(len(small_vocab), seed=2, copy_enabled=copy)
        pairs = training_pairs(small_corpus)
        totals = [manual_nll(model, small_vocab, mr, ref) for mr, ref in pairs]
        expected = sum(t for t, _ in totals) / sum(n for _, n in totals)
        got = nll_loss(model, make_batch(pairs, small_vocab)).item()
        assert got == pytest.approx(expected, abs=1e-10)
        rows = sequence_nll(model, make_batch(pairs, small_vocab)).data
        np.testing.assert_allclose(rows, [t for t, _ in totals], atol=1e-10)

    def test_uniform_model_gives_log_vocab(self, small_corpus, small_vocab):
        model = tiny_model(len(small_vocab), copy_enabled=False)
        model.params["out.W"].data[...] = 0.0
        loss = nll_loss(model, make_batch(training_pairs(small_corpus), small_vocab)).item()
        assert loss == pytest.approx(np.log(len(small_vocab)), abs=1e-12)

    def test_unseen_token_needs_copy(self):
        rng = np.random.default_rng(0)
        train_ex = copy_corpus(10, rng, names=["kalo", "miru"])
        vocab = build_vocab(train_ex)
        mr = parse_mr("name[zorvan], food[chinese], area[riverside]")
        src = linearize(mr)
        ext_ids = np.array([vocab.encode(src)])
        src_ext, oov = extend_source(src, vocab)
        assert oov == ["zorvan"]
        target = len(vocab)
        for copy, positive in ((True, True), (False, False)):
            model = tiny_model(len(vocab), copy_enabled=copy)
            with ad.no_grad():
                enc = model.encode(ext_ids)
                out = model.decode_step(np.array([vocab.bos_id]), model.initial_state(enc), enc)
            joint = joint_token_distribution(out.gen_dist[0], out.copy_attn.data[0], out.p_copy[0],
                                             src_ext, len(vocab) + 1)
            assert bool(joint[target] > 0) is positive


class TestAdam:
    def test_first_step_moves_by_lr(self):
        # bias correction makes the first update lr * sign(grad)
        p, m, v = adam_step(np.array([1.0, -1.0]), np.array([0.3, -2.0]), 0.0, 0.0, 1, lr=0.1, eps=0)
        np.testing.assert_allclose(p, [0.9, -0.9])

    def test_zero_grad_no_move(self):
        p, _, _ = adam_step(np.array([1.0]), np.array([0.0]), 0.0, 0.0, 1, lr=0.1)
        assert p[0] == 1.0

    def test_clipping(self):
        a = ad.Parameter(np.zeros(2))
        a.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([a], 1.0) == pytest.approx(5.0)
        assert np.linalg.norm(a.grad) == pytest.approx(1.0)
        a.grad = np.array([0.3, 0.4])
        clip_grad_norm([a], 1.0)
        np.testing.assert_array_equal(a.grad, [0.3, 0.4])

    def test_minimises_quadratic(self):
        p = ad.Parameter(np.array([3.0, -2.0]))
        opt = Adam(lr=0.1)
        for _ in range(300):
            p.zero_grad()
            (p * p).sum().backward()
            opt.step([p])
        assert np.abs(p.data).max() < 1e-2

    def test_per_parameter_step_counts(self):
        a, b = ad.Parameter(np.ones(1)), ad.Parameter(np.ones(1))
        opt = Adam(lr=0.1)
        for p in (a, b):
            p.grad = np.ones(1)
        opt.step([a])
        opt.step([a, b])
        assert opt.state[a][2] == 2 and opt.state[b][2] == 1


class TestEnsembleHelpers:
    def test_smcl_assign_ties_to_lower_index(self):
        assert smcl_assign([2.0, 1.0, 1.0]) == [1, 2, 0]

    def test_mixture_loglik(self):
        assert mixture_loglik([-1.0, -1.0]) == pytest.approx(-1.0)
        assert mixture_loglik([0.0, -np.inf]) == pytest.approx(np.log(0.5))
        assert mixture_loglik([-1000.0, -1001.0]) == pytest.approx(
            -1000.0 + np.log((1 + np.exp(-1.0)) / 2)
        )

    def test_purity(self):
        assert assignment_purity([0, 0, 1, 1], ["b", "b", "a", "a"]) == 1.0
        assert assignment_purity([0, 1, 0, 1], [0, 0, 1, 1]) == 0.5
        assert assignment_purity([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5
        assert assignment_purity([], []) == 0.0

    def test_assignment_log_round_trip(self, tmp_path):
        records = [(0, 1, (0, 1)), (1, 1, (1,)), (0, 2, ())]
        write_assignment_log(records, tmp_path / "a.csv")
        assert read_assignment_log(tmp_path / "a.csv") == records

    def test_config_validation(self):
        for kw in (dict(K=0), dict(K=2, top_u=3), dict(sharing="all"), dict(pretrain_epochs=-1)):
            with pytest.raises(ValueError):
                EnsembleConfig(**kw)

    @pytest.mark.parametrize(
        "sharing,shared,private",
        [
            ("none", [], ["embed.src", "enc.l0.fwd.W", "out.W"]),
            ("embeddings", ["embed.src", "embed.tgt"], ["enc.l0.fwd.W", "out.W"]),
            ("encoder", ["embed.src", "enc.l0.fwd.W"], ["embed.tgt", "dec.l0.W", "out.W"]),
            ("encoder+decoder", ["embed.tgt", "enc.l1.bwd.U", "dec.l0.W"], ["out.W"]),
        ],
    )
    def test_sharing_modes(self, sharing, shared, private):
        ens = Ensemble.create(tiny_config(), 30, 3, sharing, np.random.default_rng(0))
        for name in shared:
            assert ens[0].params[name] is ens[1].params[name] is ens[2].params[name]
        for name in private:
            assert ens[0].params[name] is not ens[1].params[name]
            assert not np.array_equal(ens[0].params[name].data, ens[1].params[name].data)

    def test_select_inference_model(self, small_corpus, small_vocab):
        pairs = training_pairs(small_corpus)
        good = tiny_model(len(small_vocab), seed=1)
        opt = Adam(lr=0.05)
        batch = make_batch(pairs, small_vocab)
        for _ in range(20):
            good.params.zero_grad()
            nll_loss(good, batch).backward()
            opt.step(good.params.parameters())
        bad = tiny_model(len(small_vocab), seed=2)
        assert select_inference_model([bad, good], pairs, small_vocab) == 1
        with pytest.raises(ValueError):
            select_inference_model([bad, good], [], small_vocab)


def template_setup(n=8, K=2, sharing="none", pretrain=0, seed=0):
    rng = np.random.default_rng(seed)
    examples, labels = two_template_corpus(n, rng)
    vocab = build_vocab(examples)
    ens = Ensemble.create(tiny_config(encoder_layers=1, decoder_layers=1), len(vocab), K, sharing,
                          np.random.default_rng(seed))
    cfg = EnsembleConfig(K=K, sharing=sharing, top_u=1, pretrain_epochs=pretrain, seed=seed)
    trainer = EnsembleTrainer(ens, vocab, cfg, Adam(lr=0.01), batch_size=4)
    return trainer, training_pairs(examples), vocab


def snapshot(model):
    return {n: p.data.copy() for n, p in model.params.items()}


class TestSelectiveUpdate:
    def test_loser_untouched_per_example(self):
        trainer, pairs, vocab = template_setup()
        for i in range(4):
            before = [snapshot(m) for m in trainer.ensemble.members]
            chosen, nlls = trainer.train_batch(make_batch([pairs[i]], vocab, ids=[i]))
            winner = chosen[0][0]
            assert winner == int(np.argmin(nlls[:, 0]))
            loser = 1 - winner
            after = [snapshot(m) for m in trainer.ensemble.members]
            assert all(np.array_equal(before[loser][n], after[loser][n]) for n in after[loser])
            assert any(not np.array_equal(before[winner][n], after[winner][n]) for n in after[winner])

    def test_pretraining_updates_everyone(self):
        trainer, pairs, vocab = template_setup(pretrain=1)
        before = [snapshot(m) for m in trainer.ensemble.members]
        chosen, _ = trainer.train_batch(make_batch(pairs[:2], vocab))
        assert chosen == [[0, 1], [0, 1]]
        for k, m in enumerate(trainer.ensemble.members):
            after = snapshot(m)
            assert not np.array_equal(before[k]["out.W"], after["out.W"])

    def test_shared_embeddings_move_under_either_winner(self):
        trainer, pairs, vocab = template_setup(sharing="embeddings")
        batch = make_batch([pairs[0]], vocab, ids=[0])
        for winner in (0, 1):
            # spoil the other member's private output bias so ``winner`` must win
            loser = trainer.ensemble[1 - winner]
            loser.params["out.b"].data[...] = np.random.default_rng(winner).normal(0, 20, len(vocab))
            emb = trainer.ensemble[0].params["embed.tgt"].data.copy()
            before = snapshot(loser)
            chosen, _ = trainer.train_batch(batch)
            assert chosen == [[winner]]
            assert not np.array_equal(emb, loser.params["embed.tgt"].data)
            after = snapshot(loser)
            for name in after:
                if not name.startswith("embed."):
                    assert np.array_equal(before[name], after[name]), name

    def test_epoch_records(self):
        trainer, pairs, _ = template_setup(n=4)
        records = trainer.train_epoch(pairs)
        assert sorted(r[0] for r in records) == list(range(len(pairs)))
        assert all(r[1] == 1 and len(r[2]) == 1 for r in records)
        assert len(trainer.last_train_nll) == 2


def tiny_run_config(**kw):
    base = RunConfig(
        model=tiny_config(encoder_layers=1, decoder_layers=1),
        ensemble=EnsembleConfig(K=2, pretrain_epochs=1),
        precision=64,
        epochs=2,
    )
    return base.override(**{"optimizer.batch_size": 4, **kw})


class TestTrainRun:
    def test_zero_epochs(self, small_corpus, tmp_path):
        trainer, report = train(tiny_run_config(epochs=0), small_corpus, small_corpus, tmp_path)
        assert report["epochs"] == [] and "selected_member" not in report
        assert sorted(p.name for p in tmp_path.glob("member*")) == [
            "member0-epoch0.json", "member1-epoch0.json"
        ]
        assert (tmp_path / "vocab.json").is_file() and (tmp_path / "assignments.csv").is_file()

    def test_deterministic(self, small_corpus, tmp_path):
        outputs = []
        for name in ("a", "b"):
            train(tiny_run_config(), small_corpus, small_corpus, tmp_path / name)
            outputs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
        assert outputs[0] == outputs[1]
        report = json.loads(outputs[0]["report.json"])
        assert len(report["epochs"]) == 2 and report["selected_member"] in (0, 1)
        assert report["epochs"][0]["pretraining"] and not report["epochs"][1]["pretraining"]

    def test_seed_changes_result(self, small_corpus, tmp_path):
        train(tiny_run_config(seed=1), small_corpus, None, tmp_path / "a")
        train(tiny_run_config(seed=2), small_corpus, None, tmp_path / "b")
        a = (tmp_path / "a" / "member0-epoch2.json").read_bytes()
        b = (tmp_path / "b" / "member0-epoch2.json").read_bytes()
        assert a != b
