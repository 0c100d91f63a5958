"""Check analytic gradients of the full training loss against finite differences.

Run: python3 demos/02_gradient_check.py
"""

import numpy as np

from d2tgen import autodiff as ad
from d2tgen.mr_data import Example, build_vocab, parse_mr, tokenize, training_pairs
from d2tgen.seq2seq import ModelConfig, Seq2Seq
from d2tgen.training import make_batch, nll_loss

examples = [
    Example(parse_mr("name[Aromi], food[Italian]"), (tokenize("Aromi serves Italian food."),)),
    Example(parse_mr("name[Bibimbap House], area[riverside]"),
            (tokenize("Bibimbap House is by the riverside."),)),
]
vocab = build_vocab(examples)
batch = make_batch(training_pairs(examples), vocab)

with ad.precision(64):
    for kind in ("dot", "mlp"):
        cfg = ModelConfig(embed_size=8, hidden_size=8, attention_kind=kind, dropout_p=0.0)
        model = Seq2Seq.create(cfg, len(vocab), np.random.default_rng(0))
        err = ad.grad_check(lambda: nll_loss(model, batch), model.params.parameters(),
                            max_coords=5)
        print(f"{kind:>3} attention: loss {nll_loss(model, batch).item():.4f}, "
              f"max relative gradient error {err:.2e}")
