"""Supervised-copy training and diverse ensembling with a multiple-choice loss.

Each ensemble member is a full :class:`~d2tgen.seq2seq.Seq2Seq`.  After the
pretraining epochs only the member(s) with the lowest per-token NLL on an
example receive gradient from that example; parameters named by the sharing
mode are single objects referenced by every member's store.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore
from .mr_data import build_vocab, extend_source, is_boundary, linearize, training_pairs
from .seq2seq import Seq2Seq, decode_step, init_params, joint_token_distribution

log = logging.getLogger(__name__)

SHARING_MODES = {
    "none": (),
    "embeddings": ("embed.",),
    "encoder": ("embed.src", "enc."),
    "encoder+decoder": ("embed.", "enc.", "dec."),
}


# ---------------------------------------------------------------- supervision


@dataclass(frozen=True)
class CopySupervision:
    z: tuple  # per target position, 1 if copied
    positions: tuple  # per target position, matching source indices

    def __post_init__(self):
        for z, pos in zip(self.z, self.positions):
            if bool(z) != bool(pos):
                raise ValueError("z label must be 1 exactly when a copy position exists")


def make_copy_labels(source_tokens, target_tokens):
    """Label every target token that also occurs among the source values as copied."""
    where = {}
    for i, tok in enumerate(source_tokens):
        if not is_boundary(tok):
            where.setdefault(tok, []).append(i)
    positions = tuple(tuple(where.get(tok, ())) for tok in target_tokens)
    return CopySupervision(tuple(int(bool(p)) for p in positions), positions)


@dataclass
class Batch:
    src: np.ndarray  # (B, m) base-vocabulary ids, OOV -> UNK
    src_mask: np.ndarray  # (B, m) bool
    src_ext: np.ndarray  # (B, m) extended-vocabulary ids
    oovs: list
    tgt_in: np.ndarray  # (B, n) BOS + target
    tgt_out: np.ndarray  # (B, n) target + EOS, base ids
    tgt_ext: np.ndarray  # (B, n) target + EOS, extended ids
    z: np.ndarray  # (B, n)
    copy_mask: np.ndarray  # (B, n, m)
    tok_mask: np.ndarray  # (B, n)
    ids: np.ndarray

    @property
    def lengths(self):
        return self.tok_mask.sum(axis=1)

    def __len__(self):
        return self.src.shape[0]


def make_batch(pairs, vocab, ids=None, dtype=None):
    """Pad ``(mr, reference_tokens)`` pairs into one teacher-forcing batch."""
    dtype = dtype or ad.get_dtype()
    sources = [linearize(mr) for mr, _ in pairs]
    targets = [list(ref) for _, ref in pairs]
    B = len(pairs)
    m = max(len(s) for s in sources)
    n = max(len(t) for t in targets) + 1
    src = np.full((B, m), vocab.pad_id, dtype=np.int64)
    src_ext = np.full((B, m), vocab.pad_id, dtype=np.int64)
    src_mask = np.zeros((B, m), dtype=bool)
    tgt_in = np.full((B, n), vocab.pad_id, dtype=np.int64)
    tgt_out = np.full((B, n), vocab.pad_id, dtype=np.int64)
    tgt_ext = np.full((B, n), vocab.pad_id, dtype=np.int64)
    z = np.zeros((B, n), dtype=dtype)
    copy_mask = np.zeros((B, n, m), dtype=dtype)
    tok_mask = np.zeros((B, n), dtype=dtype)
    oovs = []
    for b, (s, t) in enumerate(zip(sources, targets)):
        ext, oov = extend_source(s, vocab)
        oovs.append(oov)
        src[b, : len(s)] = vocab.encode(s)
        src_ext[b, : len(s)] = ext
        src_mask[b, : len(s)] = True
        tgt_in[b, : len(t) + 1] = [vocab.bos_id] + vocab.encode(t)
        tgt_out[b, : len(t) + 1] = vocab.encode(t) + [vocab.eos_id]
        tgt_ext[b, : len(t) + 1] = [
            vocab.token_to_id(tok) if tok in vocab or tok not in oov else len(vocab) + oov.index(tok)
            for tok in t
        ] + [vocab.eos_id]
        sup = make_copy_labels(s, t)
        z[b, : len(t)] = sup.z
        for j, pos in enumerate(sup.positions):
            copy_mask[b, j, list(pos)] = 1.0
        tok_mask[b, : len(t) + 1] = 1.0
    if ids is None:
        ids = np.arange(B)
    return Batch(src, src_mask, src_ext, oovs, tgt_in, tgt_out, tgt_ext, z, copy_mask, tok_mask,
                 np.asarray(ids))


def step_log_likelihood(step, batch, t, copy_enabled):
    """log p(y_t, z_t) for every row of the batch at target position ``t``."""
    gen_ll = ad.gather(step.gen_log_probs, batch.tgt_out[:, t])
    if not copy_enabled:
        return gen_ll
    z = batch.z[:, t]
    copy_ll = ad.log((step.copy_attn * batch.copy_mask[:, t, :]).sum(axis=1))
    copied = ad.log_sigmoid(step.copy_logit) + copy_ll
    generated = ad.log_sigmoid(-step.copy_logit) + gen_ll
    return copied * z + generated * (1.0 - z)


def sequence_nll(model, batch, train=False, rng=None, on_step=None):
    """Summed negative log-likelihood of each row, shape ``(B,)``.

    ``on_step(t, step)`` is called after every decoder step (used for
    teacher-forced accuracy).
    """
    cfg, params = model.config, model.params
    enc = model.encode(batch.src, train, rng, batch.src_mask)
    state = model.initial_state(enc)
    emb = ad.embedding(params["embed.tgt"], batch.tgt_in)
    emb = ad.dropout(emb, cfg.dropout_p, train, rng)
    x_proj = emb @ params["dec.l0.W"] + params["dec.l0.b"]
    terms = []
    for t in range(batch.tgt_in.shape[1]):
        step = decode_step(None, state, enc, params, cfg, train, rng, x_proj0=x_proj[:, t, :])
        state = step.state
        if on_step is not None:
            on_step(t, step)
        terms.append(step_log_likelihood(step, batch, t, cfg.copy_enabled))
    ll = ad.stack(terms, axis=1) * batch.tok_mask
    return -ll.sum(axis=1)


def nll_loss(model, batch, train=False, rng=None):
    """Per-token mean negative log-likelihood over the whole batch (scalar)."""
    return sequence_nll(model, batch, train, rng).sum() * (1.0 / batch.tok_mask.sum())


def iter_batches(pairs, vocab, batch_size, order=None):
    order = np.arange(len(pairs)) if order is None else np.asarray(order)
    for start in range(0, len(order), batch_size):
        ids = order[start : start + batch_size]
        yield make_batch([pairs[i] for i in ids], vocab, ids=ids)


def corpus_nll(model, pairs, vocab, batch_size=64):
    """Total NLL and token count with teacher forcing, dropout off."""
    total, tokens = 0.0, 0.0
    with ad.no_grad():
        for batch in iter_batches(pairs, vocab, batch_size):
            total += float(sequence_nll(model, batch).data.sum())
            tokens += float(batch.tok_mask.sum())
    return total, tokens


def per_example_nll(model, pairs, vocab, batch_size=64):
    """Per-token mean NLL of every pair, shape ``(N,)``."""
    out = np.zeros(len(pairs))
    with ad.no_grad():
        for batch in iter_batches(pairs, vocab, batch_size):
            out[batch.ids] = sequence_nll(model, batch).data / batch.lengths
    return out


def teacher_forced_accuracy(model, pairs, vocab, batch_size=64):
    """Fraction of target tokens (EOS included) that are the argmax of the joint distribution."""
    correct, total = 0, 0
    with ad.no_grad():
        for batch in iter_batches(pairs, vocab, batch_size):
            hits = np.zeros(batch.tok_mask.shape, dtype=bool)

            def record(t, step, batch=batch, hits=hits):
                joint = joint_token_distribution(
                    step.gen_dist, step.copy_attn.data * batch.src_mask, step.p_copy, batch.src_ext
                )
                hits[:, t] = joint.argmax(axis=1) == batch.tgt_ext[:, t]

            sequence_nll(model, batch, on_step=record)
            mask = batch.tok_mask > 0
            correct += int(hits[mask].sum())
            total += int(mask.sum())
    return correct / total


# ---------------------------------------------------------------- optimizer


def adam_step(param, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(param, m, v)``."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad *= scale
    return norm


class Adam:
    """Adam with per-parameter step counters and global gradient clipping."""

    def __init__(self, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=5.0):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.state = {}

    def step(self, params):
        params = list(params)
        clip_grad_norm(params, self.clip_norm)
        for p in params:
            m, v, t = self.state.get(p, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
            t += 1
            new, m, v = adam_step(p.data, p.grad, m, v, t, self.lr, self.beta1, self.beta2,
                                  self.eps)
            p.data[...] = new
            self.state[p] = (m, v, t)


# ---------------------------------------------------------------- ensembles


@dataclass(frozen=True)
class EnsembleConfig:
    K: int = 2
    sharing: str = "none"
    top_u: int = 1
    pretrain_epochs: int = 4
    seed: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 1 <= self.top_u <= self.K:
            raise ValueError("top_u must satisfy 1 <= top_u <= K")
        if self.sharing not in SHARING_MODES:
            raise ValueError(f"sharing must be one of {sorted(SHARING_MODES)}")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


def is_shared(name, sharing):
    return any(name.startswith(prefix) for prefix in SHARING_MODES[sharing])


class Ensemble:
    """K models whose shared parameters are the same objects."""

    def __init__(self, members, sharing="none"):
        self.members = list(members)
        self.sharing = sharing

    @classmethod
    def create(cls, model_config, vocab_size, K, sharing, rng):
        members = []
        for k in range(K):
            own = init_params(model_config, vocab_size, rng)
            if k == 0:
                store = own
            else:
                store = ParamStore()
                for name, p in own.items():
                    store.add(name, members[0].params[name] if is_shared(name, sharing) else p)
            members.append(Seq2Seq(model_config, store, vocab_size))
        return cls(members, sharing)

    def __len__(self):
        return len(self.members)

    def __getitem__(self, k):
        return self.members[k]

    @property
    def K(self):
        return len(self.members)

    def shared_names(self):
        return [n for n in self.members[0].params if is_shared(n, self.sharing)]

    def parameters(self, members=None):
        """Unique parameters of the given members (all by default), in order."""
        seen, out = set(), []
        for k in range(self.K) if members is None else members:
            for p in self.members[k].params.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def save(self, directory, epoch):
        paths = []
        for k, member in enumerate(self.members):
            path = Path(directory) / checkpoint_name(k, epoch)
            member.params.save(path)
            paths.append(path)
        return paths


def checkpoint_name(member, epoch):
    return f"member{member}-epoch{epoch}.json"


def smcl_assign(nlls):
    """Member indices ranked by ascending NLL; ties go to the lower index."""
    return [int(k) for k in np.argsort(np.asarray(nlls, dtype=float), kind="stable")]


def mixture_loglik(logliks):
    """log of the uniform mixture ``(1/K) sum_k exp(loglik_k)``."""
    logliks = np.asarray(logliks, dtype=float)
    return float(np.logaddexp.reduce(logliks) - np.log(len(logliks)))


def member_logliks(ensemble, pairs, vocab, batch_size=64):
    """Sequence log-likelihood of every pair under every member, ``(K, N)``."""
    out = np.zeros((ensemble.K, len(pairs)))
    with ad.no_grad():
        for k, member in enumerate(ensemble.members):
            for batch in iter_batches(pairs, vocab, batch_size):
                out[k, batch.ids] = -sequence_nll(member, batch).data
    return out


def perplexity_of(model, pairs, vocab, batch_size=64):
    total, tokens = corpus_nll(model, pairs, vocab, batch_size)
    return float(np.exp(total / tokens))


def member_perplexities(ensemble, pairs, vocab, batch_size=64):
    """Validation perplexity of each member; accepts an Ensemble or a list of models."""
    members = getattr(ensemble, "members", ensemble)
    return [perplexity_of(m, pairs, vocab, batch_size) for m in members]


def select_inference_model(ensemble, valid_pairs, vocab, batch_size=64):
    """Index of the member with the lowest validation perplexity."""
    if not valid_pairs:
        raise ValueError("validation data is empty")
    return smcl_assign(member_perplexities(ensemble, valid_pairs, vocab, batch_size))[0]


@dataclass
class EnsembleTrainer:
    """Training state: ensemble, optimizer, rngs, epoch counter and assignment log."""

    ensemble: Ensemble
    vocab: object
    config: EnsembleConfig
    optimizer: Adam
    batch_size: int = 64
    threads: int = 1
    epoch: int = 0
    last_assignment: dict = field(default_factory=dict)
    log: list = field(default_factory=list)

    def __post_init__(self):
        seeds = np.random.SeedSequence(self.config.seed).spawn(self.ensemble.K + 1)
        self.order_rng = np.random.default_rng(seeds[0])
        self.dropout_rngs = [np.random.default_rng(s) for s in seeds[1:]]

    @property
    def pretraining(self):
        return self.epoch < self.config.pretrain_epochs

    def _forward(self, k, batch):
        return sequence_nll(self.ensemble[k], batch, train=True, rng=self.dropout_rngs[k])

    def train_batch(self, batch):
        """One E-step/M-step on a batch; returns chosen members per row and the member NLLs."""
        K, B = self.ensemble.K, len(batch)
        lengths = batch.lengths
        parallel = self.threads > 1 and self.ensemble.sharing == "none" and K > 1
        if parallel:
            with ThreadPoolExecutor(self.threads) as pool:
                per_ex = list(pool.map(lambda k: self._forward(k, batch), range(K)))
        else:
            per_ex = [self._forward(k, batch) for k in range(K)]
        nlls = np.stack([pe.data / lengths for pe in per_ex])  # (K, B)
        if self.pretraining:
            chosen = [list(range(K)) for _ in range(B)]
        else:
            chosen = [smcl_assign(nlls[:, b])[: self.config.top_u] for b in range(B)]
        active = []
        masks = []
        for k in range(K):
            mask = np.array([k in c for c in chosen], dtype=lengths.dtype)
            masks.append(mask)
            if mask.any():
                active.append(k)

        def backward_member(k):
            loss = (per_ex[k] * masks[k]).sum() * (1.0 / float((lengths * masks[k]).sum()))
            loss.backward()

        self.ensemble.zero_grad()
        if parallel:
            with ThreadPoolExecutor(self.threads) as pool:
                list(pool.map(backward_member, active))
        else:
            for k in active:
                backward_member(k)
        self.optimizer.step(self.ensemble.parameters(active))
        return chosen, nlls

    def train_epoch(self, pairs):
        """Run one epoch over ``pairs``; returns this epoch's log records."""
        order = self.order_rng.permutation(len(pairs))
        records = []
        nll_sum = np.zeros(self.ensemble.K)
        for batch in iter_batches(pairs, self.vocab, self.batch_size, order):
            chosen, nlls = self.train_batch(batch)
            nll_sum += nlls.sum(axis=1)
            for b, ex_id in enumerate(batch.ids):
                ex_id = int(ex_id)
                self.last_assignment[ex_id] = chosen[b]
                records.append((ex_id, self.epoch + 1, tuple(chosen[b])))
        self.epoch += 1
        self.log.extend(records)
        self.last_train_nll = (nll_sum / max(len(pairs), 1)).tolist()
        return records


def smcl_train_epoch(pairs, trainer):
    """Module-level alias of :meth:`EnsembleTrainer.train_epoch`."""
    return trainer.train_epoch(pairs)


# ---------------------------------------------------------------- assignments


def write_assignment_log(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id", "epoch", "chosen_members"])
        for ex_id, epoch, members in records:
            writer.writerow([ex_id, epoch, ";".join(str(m) for m in members)])


def read_assignment_log(path):
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            members = tuple(int(m) for m in row["chosen_members"].split(";") if m != "")
            records.append((int(row["example_id"]), int(row["epoch"]), members))
    return records


def assignment_purity(assigned, labels):
    """Share of examples whose member matches its label under the best one-to-one map."""
    from scipy.optimize import linear_sum_assignment

    assigned = np.asarray(assigned)
    labels = np.asarray(labels)
    if assigned.size == 0:
        return 0.0
    a_vals, a_idx = np.unique(assigned, return_inverse=True)
    l_vals, l_idx = np.unique(labels, return_inverse=True)
    table = np.zeros((len(a_vals), len(l_vals)), dtype=np.int64)
    np.add.at(table, (a_idx, l_idx), 1)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / assigned.size)


# ---------------------------------------------------------------- full run


def train(run_config, train_examples, valid_examples=None, out_dir=None):
    """Train an ensemble from scratch, writing checkpoints, logs and a report.

    Returns ``(trainer, report)``.
    """

    out = Path(out_dir or run_config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with ad.precision(run_config.precision):
        vocab = build_vocab(train_examples, run_config.min_freq)
        vocab.save(out / "vocab.json")
        (out / "config.json").write_text(json.dumps(run_config.to_dict(), indent=2, sort_keys=True))
        ens_cfg = run_config.ensemble
        rng = np.random.default_rng(ens_cfg.seed)
        ensemble = Ensemble.create(run_config.model, len(vocab), ens_cfg.K, ens_cfg.sharing, rng)
        opt = run_config.optimizer
        trainer = EnsembleTrainer(
            ensemble,
            vocab,
            ens_cfg,
            Adam(opt.lr, opt.beta1, opt.beta2, opt.eps, opt.clip_norm),
            batch_size=opt.batch_size,
            threads=run_config.threads,
        )
        pairs = training_pairs(train_examples)
        valid_pairs = training_pairs(valid_examples) if valid_examples else []
        ensemble.save(out, 0)
        report = {
            "members": ens_cfg.K,
            "train_pairs": len(pairs),
            "valid_pairs": len(valid_pairs),
            "vocab_size": len(vocab),
            "epochs": [],
        }
        for _ in range(run_config.epochs):
            records = trainer.train_epoch(pairs)
            counts = np.zeros(ens_cfg.K, dtype=int)
            for _, _, members in records:
                counts[list(members)] += 1
            entry = {
                "epoch": trainer.epoch,
                "pretraining": trainer.epoch <= ens_cfg.pretrain_epochs,
                "train_nll": trainer.last_train_nll,
                "assignment_counts": counts.tolist(),
            }
            if valid_pairs:
                entry["valid_perplexity"] = member_perplexities(
                    ensemble, valid_pairs, vocab, opt.batch_size
                )
            report["epochs"].append(entry)
            ensemble.save(out, trainer.epoch)
            log.info("epoch %d: %s", trainer.epoch, entry)
        if valid_pairs and report["epochs"]:
            ppl = report["epochs"][-1]["valid_perplexity"]
            report["selected_member"] = smcl_assign(ppl)[0]
        write_assignment_log(trainer.log, out / "assignments.csv")
        (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return trainer, report
