"""Parse meaning representations, linearize them and build a vocabulary.

Run: python3 demos/01_meaning_representations.py
"""

from d2tgen.mr_data import Example, build_vocab, extend_source, linearize, parse_mr, tokenize

mr = parse_mr("name[The Eagle], eatType[coffee shop], customer rating[5 out of 5], area[city centre]")
print("parsed keys:", mr.keys())
print("canonical form:", mr)

# Each attribute becomes its value wrapped in per-attribute boundary tokens.
print("linearized:", " ".join(linearize(mr)))

ref = tokenize("The Eagle is a coffee shop in the city centre with a 5 out of 5 rating.")
vocab = build_vocab([Example(mr, (ref,))])
print(f"vocabulary: {len(vocab)} tokens, first words {vocab.tokens[20:26]}")

# Words outside the vocabulary get temporary ids past the end so they can be copied.
ids, oov = extend_source(linearize(parse_mr("name[Zizzi], area[riverside]")), vocab)
print("extended ids:", ids, "out-of-vocabulary:", oov)
