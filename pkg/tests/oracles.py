"""Exhaustive reference implementations used to check the fast code paths."""

import itertools
import math
import random


def all_segmentations(word):
    L = len(word)
    for cuts in itertools.product((0, 1), repeat=L - 1):
        pieces, start = [], 0
        for pos, cut in enumerate(cuts, start=1):
            if cut:
                pieces.append(word[start:pos])
                start = pos
        pieces.append(word[start:])
        yield pieces


def brute_force_best(word, logp):
    best = -math.inf
    for seg in all_segmentations(word):
        if all(p in logp for p in seg):
            best = max(best, sum(logp[p] for p in seg))
    return best


def brute_force_em(logp, word, freq):
    segs = [s for s in all_segmentations(word) if all(p in logp for p in s)]
    weights = [math.exp(sum(logp[p] for p in s)) for s in segs]
    z = sum(weights)
    counts = dict.fromkeys(logp, 0.0)
    for s, w in zip(segs, weights):
        for p in s:
            counts[p] += freq * w / z
    total = sum(counts.values())
    return {p: math.log(c / total) for p, c in counts.items()}


def toy_model(seed):
    rnd = random.Random(seed)
    alphabet = "abcd"
    pieces = {c: -rnd.uniform(1, 6) for c in alphabet}
    while len(pieces) < 50:
        s = "".join(rnd.choice(alphabet) for _ in range(rnd.randint(2, 4)))
        pieces.setdefault(s, -rnd.uniform(1, 8))
    return pieces
