"""How the length and coverage penalties reorder finished beam hypotheses.

Three candidate outputs for ``name[Loch Fyne], food[seafood]`` with
made-up log-probabilities and accumulated attention per source position:
a short one that drops the food, a longer complete one, and one that
stutters on the name.  The rerank score is logp / lp(|y|) + cp.

Run: python3 demos/04_beam_penalties.py
"""

import numpy as np

from d2tgen.decoding import Hypothesis, coverage_penalty, length_penalty, rerank_score
from d2tgen.mr_data import linearize, parse_mr

source = linearize(parse_mr("name[Loch Fyne], food[seafood]"))
print("source:", " ".join(source))

print("lp(|y|) for alpha=1:", [round(length_penalty(n, 1.0), 3) for n in (1, 7, 13)])
print("cp for beta=0.1, A=[0.5, 1.2]:", round(coverage_penalty([0.5, 1.2], 0.1), 4))


def hyp(text, logprob, coverage):
    words = tuple(text.split()) + ("</s>",)
    return text, Hypothesis(tuple(range(len(words))), words, logprob, np.asarray(coverage))


# coverage per source position: start loch fyne end start seafood end
candidates = [
    hyp("loch fyne is a restaurant .", -4.0, [0.6, 1.5, 1.4, 0.8, 0.1, 0.05, 0.1]),
    hyp("loch fyne is a restaurant that serves seafood .", -5.5,
        [1.0, 1.2, 1.1, 1.0, 1.0, 1.3, 1.0]),
    hyp("loch fyne loch fyne serves seafood .", -5.0, [1.0, 2.0, 2.0, 0.4, 0.3, 1.0, 0.2]),
]

for alpha, beta in ((0.0, 0.0), (1.0, 0.0), (0.0, 0.2), (0.4, 0.1)):
    ranked = sorted(candidates, key=lambda c: -rerank_score(c[1], alpha, beta))
    print(f"\nalpha={alpha} beta={beta}")
    for text, h in ranked:
        print(f"  {rerank_score(h, alpha, beta):7.3f}  {text}")
