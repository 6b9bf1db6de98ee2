"""Templated toy corpus used by the tests, the gradient check and the overfit gate."""
from __future__ import annotations

from .corpus import ReviewRecord

_NAMES = ["zorblax", "quindle", "frapper", "blinket", "morvane", "tazzle", "plumbix", "glimmet",
          "snorvel", "drabbit", "wexley", "cronkle"]
_NOUNS = ["puzzle", "blender", "lantern", "backpack"]
_TOPIC_WORDS = [
    ("colorful", "pieces", "kids"),
    ("sharp", "blades", "kitchen"),
    ("bright", "battery", "camping"),
    ("sturdy", "straps", "hiking"),
]
_LOVED = ["loved it", "absolutely great", "would buy again"]
_MEH = ["not my thing", "pretty boring", "returned it"]


def templated_records(n_users: int = 8, n_items: int = 8, topics: int = 4) -> list[ReviewRecord]:
    """Every user reviews every item.

    A user likes one topic; rating is 5 when the item's topic matches and 2
    otherwise. Each review names the item, so the item's own reviews share a
    rare token with any review written about it.
    """
    records = []
    for u in range(n_users):
        for i in range(n_items):
            ut, it = u % topics, i % topics
            adj, part, use = _TOPIC_WORDS[it % len(_TOPIC_WORDS)]
            name, noun = _NAMES[i % len(_NAMES)], _NOUNS[it % len(_NOUNS)]
            liked = ut == it
            verdict = (_LOVED if liked else _MEH)[(u + i) % 3]
            text = (f"I bought the {name} {noun} for {use}. "
                    f"The {part} are {adj}, {verdict}! "
                    f"Reviewer {u} says the {name} is {'perfect' if liked else 'fine'}.")
            records.append(ReviewRecord(f"u{u}", f"i{i}", 5.0 if liked else 2.0, text))
    return records
