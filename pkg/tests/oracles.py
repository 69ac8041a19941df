"""Independent reference computations used by the recbench and acceptance tests.

Nothing here imports the metric or scoring code under test.
"""

from __future__ import annotations

import math

import numpy as np

from mmfex.ingest import InteractionSet
from mmfex.recbench import SplitBundle, VBPRHyperParams, VBPRModel


def brute_score(model, u: int, i: int) -> float:
    """x_ui written out as explicit sums."""
    f = model.features[i]
    total = float(model.beta_item[i])
    for a in range(model.gamma_user.shape[1]):
        total += model.gamma_user[u, a] * model.gamma_item[i, a]
    for a in range(model.theta_user.shape[1]):
        proj = 0.0
        for d in range(len(f)):
            proj += model.E[a, d] * f[d]
        total += model.theta_user[u, a] * proj
    for d in range(len(f)):
        total += model.beta_feat[d] * f[d]
    return total


def brute_metrics(model, split: SplitBundle, k: int) -> dict[str, float]:
    """Mean recall / precision / nDCG / HR over test users known to the model."""
    seen: dict[str, set[str]] = {}
    for s in (split.train, split.validation):
        for u, i in s.pairs:
            seen.setdefault(u, set()).add(i)
    truth: dict[str, set[str]] = {}
    for u, i in split.test.pairs:
        truth.setdefault(u, set()).add(i)
    sums = {"recall": 0.0, "precision": 0.0, "ndcg": 0.0, "hit_rate": 0.0}
    users = [u for u in sorted(truth, key=lambda s: s.encode()) if u in model.users]
    for user in users:
        u = model.users.index(user)
        scored = [(-brute_score(model, u, n), item.encode(), item)
                  for n, item in enumerate(model.items) if item not in seen.get(user, set())]
        scored.sort()
        ranked = [item for _, _, item in scored[:k]]
        rel = truth[user]
        gains = [1.0 if item in rel else 0.0 for item in ranked]
        hits = sum(gains)
        dcg = sum(g / math.log2(pos + 2) for pos, g in enumerate(gains))
        ideal = sum(1.0 / math.log2(pos + 2) for pos in range(min(k, len(rel))))
        sums["recall"] += hits / len(rel)
        sums["precision"] += hits / k
        sums["ndcg"] += dcg / ideal
        sums["hit_rate"] += 1.0 if hits > 0 else 0.0
    return {name: value / len(users) for name, value in sums.items()}


def random_model(rng: np.random.Generator, users, items, d: int = 3, factors: int = 2,
                 coarse: bool = False) -> VBPRModel:
    """Random parameters; ``coarse`` rounds them so score ties are common."""
    def draw(*shape):
        x = rng.normal(size=shape)
        return np.round(x) if coarse else x

    n_u, n_i = len(users), len(items)
    return VBPRModel(
        users=list(users), items=list(items), features=draw(n_i, d),
        gamma_user=draw(n_u, factors), gamma_item=draw(n_i, factors),
        beta_item=draw(n_i), theta_user=draw(n_u, factors), E=draw(factors, d),
        beta_feat=draw(d), hp=VBPRHyperParams(factors=factors, feature_factors=factors),
    )


def random_instance(rng: np.random.Generator):
    """Model plus split with at most 10 users and 20 items."""
    n_users = int(rng.integers(1, 11))
    n_items = int(rng.integers(2, 21))
    users = [f"u{n}" for n in range(n_users)]
    items = [f"i{n:02d}" for n in range(n_items)]
    train, val, test = [], [], []
    for user in users:
        chosen = rng.permutation(n_items)[: int(rng.integers(1, n_items + 1))]
        roles = rng.integers(0, 3, size=len(chosen))
        roles[0] = 2
        for idx, role in zip(chosen.tolist(), roles.tolist()):
            (train, val, test)[role].append((user, items[idx]))
    model = random_model(rng, users, items, coarse=bool(rng.integers(0, 2)))
    train_set = InteractionSet(tuple(train))
    model.train_items = {u: frozenset(i) for u, i in train_set.by_user().items()}
    split = SplitBundle(train_set, InteractionSet(tuple(val)), InteractionSet(tuple(test)), seed=0)
    return model, split, int(rng.integers(1, 25))


def finite_difference_check(model, u, i, j, reg, objective, gradients, eps=1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The error is measured per touched parameter block as
    ||analytic - numeric|| / max(||analytic||, ||numeric||).
    """
    _, grads = gradients(model, u, i, j, reg)
    params = model.parameters()
    worst = 0.0
    for (name, row), analytic in grads.items():
        target = params[name] if row is None else params[name][row:row + 1]
        view = target.reshape(-1)
        numeric = np.zeros(view.size)
        for n in range(view.size):
            keep = view[n]
            view[n] = keep + eps
            up = objective(model, u, i, j, reg)
            view[n] = keep - eps
            down = objective(model, u, i, j, reg)
            view[n] = keep
            numeric[n] = (up - down) / (2 * eps)
        analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
