"""Train a small copy model and let it produce a restaurant name it never saw.

The synthetic corpus echoes every attribute value, so the only way to get the
name right is to copy it from the input.  Takes about half a minute.

Run: python3 demos/03_copy_attention.py
"""

import numpy as np

from d2tgen import autodiff as ad
from d2tgen.decoding import DecodeConfig, beam_search, output_words
from d2tgen.mr_data import MeaningRepresentation, build_vocab, training_pairs
from d2tgen.seq2seq import ModelConfig
from d2tgen.synthetic import copy_corpus, make_names
from d2tgen.training import Adam, Ensemble, EnsembleConfig, EnsembleTrainer, teacher_forced_accuracy

rng = np.random.default_rng(0)
names = make_names(41, rng)
held_out = names.pop()
examples = copy_corpus(200, rng, names=names)
vocab = build_vocab(examples)
pairs = training_pairs(examples)
print(f"{len(pairs)} training pairs; held-out name '{held_out}' in vocabulary: {held_out in vocab}")

with ad.precision(64):
    cfg = ModelConfig(embed_size=32, hidden_size=32, encoder_layers=1, decoder_layers=1,
                      dropout_p=0.0)
    ens = Ensemble.create(cfg, len(vocab), 1, "none", np.random.default_rng(1))
    trainer = EnsembleTrainer(ens, vocab, EnsembleConfig(K=1, pretrain_epochs=0), Adam(lr=0.01),
                              batch_size=8)
    for epoch in range(1, 11):
        trainer.train_epoch(pairs)
        acc = teacher_forced_accuracy(ens[0], pairs, vocab)
        print(f"epoch {epoch}: train nll {trainer.last_train_nll[0]:.3f}, token accuracy {acc:.3f}")
        if acc >= 0.99:
            break

    mr = MeaningRepresentation.from_items(
        [("name", held_out), ("food", "japanese"), ("area", "city centre")]
    )
    result = beam_search(ens[0], mr, vocab, DecodeConfig(beam_size=5, max_len=20))
    print("input: ", mr)
    print("output:", " ".join(output_words(result.best)))
