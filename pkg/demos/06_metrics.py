"""Score generated text with BLEU, ROUGE-L and the attribute-coverage heuristic.

Run: python3 demos/06_metrics.py
"""

from d2tgen.metrics import evaluate
from d2tgen.mr_data import Example, parse_mr, tokenize

examples = [
    Example(parse_mr("name[The Mill], eatType[pub], area[riverside], familyFriendly[yes]"),
            (tokenize("The Mill is a family friendly pub by the riverside."),
             tokenize("Near the river, The Mill pub welcomes children."))),
    Example(parse_mr("name[Zizzi], customer rating[5 out of 5]"),
            (tokenize("Zizzi has a customer rating of 5 out of 5."),)),
]
outputs = [
    tokenize("The Mill is a pub by the riverside."),
    tokenize("Zizzi has a good rating."),  # paraphrase: not counted as covered
]
report = evaluate(examples, outputs)
print(report.to_table())
