from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from mmfex.hashing import fnv1a_64, mix
from mmfex.ingest import InteractionSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitBundle:
    train: InteractionSet
    validation: InteractionSet
    test: InteractionSet
    seed: int
    dropped_users: int = field(default=0, compare=False)


def _floor_fraction(n: int, fraction: float) -> int:
    # exact rational arithmetic: 0.1 * 30 must be 3, not 3.0000000000000004 or 2.99...
    return int(n * Fraction(str(fraction)))


def user_rng(seed: int, user_id: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(mix(seed, fnv1a_64(user_id))))


def holdout_split(
    interactions: InteractionSet,
    seed: int,
    test_fraction: float = 0.2,
    validation_fraction: float = 0.1,
) -> SplitBundle:
    """Per-user random hold-out.

    Each user's items are shuffled with a stream keyed on (seed, user id);
    ``floor(test_fraction * n)`` (at least one) go to test, then
    ``floor(validation_fraction * rest)`` to validation, the remainder to
    train. Users with fewer than two interactions are dropped.
    """
    if len(interactions) == 0:
        raise ValueError("cannot split an empty interaction set")
    by_user = InteractionSet.from_pairs(interactions.pairs).by_user()
    train, val, test = [], [], []
    dropped = 0
    for user in sorted(by_user, key=lambda u: u.encode("utf-8")):
        items = sorted(by_user[user], key=lambda i: i.encode("utf-8"))
        n = len(items)
        if n < 2:
            dropped += 1
            continue
        order = user_rng(seed, user).permutation(n)
        shuffled = [items[k] for k in order]
        n_test = max(1, _floor_fraction(n, test_fraction))
        n_val = _floor_fraction(n - n_test, validation_fraction)
        test += [(user, i) for i in shuffled[:n_test]]
        val += [(user, i) for i in shuffled[n_test:n_test + n_val]]
        train += [(user, i) for i in shuffled[n_test + n_val:]]
    if dropped:
        log.info("split dropped %d users with fewer than 2 interactions", dropped)
    if not train:
        raise ValueError("no user has at least two interactions")
    return SplitBundle(InteractionSet(tuple(train)), InteractionSet(tuple(val)),
                       InteractionSet(tuple(test)), seed, dropped)
