"""Small planted corpora for sanity checks and demos.

``copy_corpus`` echoes attribute values inside a fixed sentence frame, so a
model can only get the values right by copying.  ``two_template_corpus``
renders each MR with one of two disjoint sentence layouts and returns the
layout label, which lets ensemble assignments be scored for purity.
"""

from __future__ import annotations

import numpy as np

from .mr_data import Example, MeaningRepresentation, tokenize

_SYLLABLES = ("ka", "lo", "mi", "ru", "te", "vo", "zan", "pel", "dor", "fin", "gu", "sha")

FOODS = ("chinese", "english", "french", "indian", "italian", "japanese", "fast food")
AREAS = ("riverside", "city centre")
NEAR = ("clare hall", "the bakers", "cafe sicilia", "the sorrento", "raja indian cuisine",
        "burger king", "ranch", "yippee noodle bar")
PRICES = ("cheap", "moderate", "high", "less than £20", "more than £30")


def make_names(n, rng, exclude=()):
    """``n`` distinct made-up single-token names."""
    names, seen = [], set(exclude)
    while len(names) < n:
        k = int(rng.integers(2, 4))
        name = "".join(rng.choice(_SYLLABLES, size=k))
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


def copy_corpus(n, rng, names=None, n_names=40):
    """MR -> text pairs whose values are echoed verbatim."""
    names = names if names is not None else make_names(n_names, rng)
    examples = []
    for _ in range(n):
        name = str(rng.choice(names))
        food = str(rng.choice(FOODS))
        area = str(rng.choice(AREAS))
        mr = MeaningRepresentation.from_items([("name", name), ("food", food), ("area", area)])
        text = f"{name} serves {food} food in the {area} area ."
        examples.append(Example(mr, (tokenize(text),)))
    return examples


TEMPLATES = (
    "{name} is a {food} restaurant near {near} with {price} prices .",
    "close to {near} you will find {name} , where {food} dishes cost {price} .",
)


def two_template_corpus(n_per_template, rng, names=None, n_names=30):
    """Examples rendered with two disjoint layouts; returns ``(examples, labels)``.

    Each MR gets a single reference.  Layout order is shuffled.
    """
    names = names if names is not None else make_names(n_names, rng)
    labels = np.repeat(np.arange(len(TEMPLATES)), n_per_template)
    rng.shuffle(labels)
    examples = []
    for label in labels:
        values = {
            "name": str(rng.choice(names)),
            "food": str(rng.choice(FOODS)),
            "near": str(rng.choice(NEAR)),
            "price": str(rng.choice(PRICES)),
        }
        mr = MeaningRepresentation.from_items(
            [("name", values["name"]), ("food", values["food"]), ("near", values["near"]),
             ("priceRange", values["price"])]
        )
        text = TEMPLATES[label].format(**values)
        examples.append(Example(mr, (tokenize(text),)))
    return examples, labels.tolist()
