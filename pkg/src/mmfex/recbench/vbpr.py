"""VBPR: BPR-trained matrix factorisation with a visual/content preference term.

Score of user ``u`` for item ``i`` with content vector ``f_i``::

    x_ui = beta_i + gamma_u . gamma_i + theta_u . (E f_i) + beta_feat . f_i

The global offset and the user bias are left out: both are constant over a
user's ranking.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from mmfex.hashing import tag_seed
from mmfex.ingest import InteractionSet

log = logging.getLogger(__name__)


class MissingEmbeddingError(KeyError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"no stored embedding for train item {item_id!r}")

    def __str__(self) -> str:
        return self.args[0]


class DivergenceError(ArithmeticError):
    pass


class UnknownUserError(KeyError):
    pass


@dataclass(frozen=True)
class VBPRHyperParams:
    factors: int = 16
    feature_factors: int = 16
    learning_rate: float = 0.05
    reg: float = 0.01
    epochs: int = 100
    init_scale: float = 0.01
    validation_k: int = 20


def _bytes_key(s: str) -> bytes:
    return s.encode("utf-8")


@dataclass
class VBPRModel:
    users: list[str]
    items: list[str]
    features: np.ndarray            # (items, d_f), fixed
    gamma_user: np.ndarray          # (users, k)
    gamma_item: np.ndarray          # (items, k)
    beta_item: np.ndarray           # (items,)
    theta_user: np.ndarray          # (users, k')
    E: np.ndarray                   # (k', d_f)
    beta_feat: np.ndarray           # (d_f,)
    hp: VBPRHyperParams = field(default_factory=VBPRHyperParams)
    # user -> items seen in training; excluded from every ranking
    train_items: dict[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.user_index = {u: n for n, u in enumerate(self.users)}
        self.item_index = {i: n for n, i in enumerate(self.items)}

    @classmethod
    def initialize(cls, users: Sequence[str], items: Sequence[str], features: np.ndarray,
                   hp: VBPRHyperParams, seed: int) -> "VBPRModel":
        rng = np.random.Generator(np.random.PCG64(tag_seed(seed, "vbpr-init")))
        s = hp.init_scale
        n_u, n_i, d = len(users), len(items), features.shape[1]
        return cls(
            users=list(users),
            items=list(items),
            features=np.asarray(features, dtype=np.float64),
            gamma_user=rng.uniform(-s, s, (n_u, hp.factors)),
            gamma_item=rng.uniform(-s, s, (n_i, hp.factors)),
            beta_item=np.zeros(n_i),
            theta_user=rng.uniform(-s, s, (n_u, hp.feature_factors)),
            E=rng.uniform(-s, s, (hp.feature_factors, d)),
            beta_feat=np.zeros(d),
            hp=hp,
        )

    def copy(self) -> "VBPRModel":
        return copy.deepcopy(self)

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "gamma_user": self.gamma_user, "gamma_item": self.gamma_item,
            "beta_item": self.beta_item, "theta_user": self.theta_user,
            "E": self.E, "beta_feat": self.beta_feat,
        }

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters().values())

    def knows(self, user: str) -> bool:
        return user in self.user_index

    def score(self, u: int, i: int) -> float:
        f = self.features[i]
        return float(
            self.beta_item[i]
            + self.gamma_user[u] @ self.gamma_item[i]
            + self.theta_user[u] @ (self.E @ f)
            + self.beta_feat @ f
        )

    def user_scores(self, user: str) -> np.ndarray:
        """Scores of ``user`` for every item, in ``self.items`` order."""
        u = self.user_index.get(user)
        if u is None:
            raise UnknownUserError(user)
        visual = self.features @ (self.E.T @ self.theta_user[u] + self.beta_feat)
        return self.beta_item + self.gamma_item @ self.gamma_user[u] + visual


# --------------------------------------------------------------------------
# objective and gradients for one (u, i, j) triple


def _log_sigmoid(x: float) -> float:
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def _sigmoid_neg(x: float) -> float:
    """sigma(-x), overflow-safe."""
    if x >= 0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


def triple_objective(model: VBPRModel, u: int, i: int, j: int, reg: float) -> float:
    """ln sigma(x_ui - x_uj) - reg * ||touched parameters||^2."""
    x = model.score(u, i) - model.score(u, j)
    penalty = (
        model.gamma_user[u] @ model.gamma_user[u]
        + model.gamma_item[i] @ model.gamma_item[i]
        + model.gamma_item[j] @ model.gamma_item[j]
        + model.beta_item[i] ** 2 + model.beta_item[j] ** 2
        + model.theta_user[u] @ model.theta_user[u]
        + np.sum(model.E * model.E)
        + model.beta_feat @ model.beta_feat
    )
    return _log_sigmoid(x) - reg * float(penalty)


def triple_gradients(model: VBPRModel, u: int, i: int, j: int, reg: float) -> tuple[float, dict]:
    """Ascent direction of :func:`triple_objective`.

    Returns ``(x_uij, grads)`` with grads keyed by (parameter, row) where the
    row is ``None`` for the shared parameters ``E`` and ``beta_feat``.
    """
    gu, gi, gj = model.gamma_user[u], model.gamma_item[i], model.gamma_item[j]
    tu = model.theta_user[u]
    df = model.features[i] - model.features[j]
    e_df = model.E @ df
    x = (model.beta_item[i] - model.beta_item[j] + gu @ (gi - gj) + tu @ e_df
         + model.beta_feat @ df)
    z = _sigmoid_neg(float(x))
    two_reg = 2.0 * reg
    grads = {
        ("gamma_user", u): z * (gi - gj) - two_reg * gu,
        ("gamma_item", i): z * gu - two_reg * gi,
        ("gamma_item", j): -z * gu - two_reg * gj,
        ("beta_item", i): z - two_reg * model.beta_item[i],
        ("beta_item", j): -z - two_reg * model.beta_item[j],
        ("theta_user", u): z * e_df - two_reg * tu,
        ("E", None): z * np.outer(tu, df) - two_reg * model.E,
        ("beta_feat", None): z * df - two_reg * model.beta_feat,
    }
    return float(x), grads


def sgd_step(model: VBPRModel, u: int, i: int, j: int, lr: float, reg: float) -> float:
    x, grads = triple_gradients(model, u, i, j, reg)
    params = model.parameters()
    # all gradients are computed from the pre-step values before any update
    for (name, row), g in grads.items():
        if row is None:
            params[name] += lr * g
        else:
            params[name][row] += lr * g
    return x


# --------------------------------------------------------------------------
# training


def feature_matrix(features, item_ids: Sequence[str]) -> np.ndarray:
    rows = []
    for item in item_ids:
        if item not in features:
            raise MissingEmbeddingError(item)
        value = features[item] if isinstance(features, Mapping) else features.get(item)
        rows.append(np.asarray(value, dtype=np.float64))
    return np.stack(rows)


def _feature_items(features) -> list[str]:
    ids = list(features.keys()) if isinstance(features, Mapping) else list(features.item_ids)
    return sorted(ids, key=_bytes_key)


def train_vbpr(
    train: InteractionSet,
    features,
    hp: VBPRHyperParams | None = None,
    seed: int = 42,
    validation: InteractionSet | None = None,
    on_epoch: Callable[[int, float | None], None] | None = None,
) -> VBPRModel:
    """Fit VBPR with plain SGD on uniformly sampled (u, i+, j-) triples.

    ``features`` maps item id -> vector (a dict or an EmbeddingStore); its item
    set is the candidate catalogue. Each epoch draws ``len(train)`` triples.
    With a validation set, the epoch with the best Recall@k snapshot is
    returned.
    """
    from mmfex.recbench.metrics import evaluate_ranker

    hp = hp or VBPRHyperParams()
    items = _feature_items(features)
    known = set(items)
    for _, item in train.pairs:
        if item not in known:
            raise MissingEmbeddingError(item)
    users = sorted({u for u, _ in train.pairs}, key=_bytes_key)
    model = VBPRModel.initialize(users, items, feature_matrix(features, items), hp, seed)
    model.train_items = {u: frozenset(i) for u, i in train.by_user().items()}
    if hp.epochs <= 0 or len(train) == 0:
        return model

    u_idx = np.array([model.user_index[u] for u, _ in train.pairs])
    i_idx = np.array([model.item_index[i] for _, i in train.pairs])
    positives: dict[int, set[int]] = {}
    for u, i in zip(u_idx.tolist(), i_idx.tolist()):
        positives.setdefault(u, set()).add(i)
    n_items = len(items)
    rng = np.random.Generator(np.random.PCG64(tag_seed(seed, "vbpr-sample")))

    best, best_recall = None, -1.0
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(u_idx))
        draws = rng.integers(0, n_items, size=2 * len(order)).tolist()
        cursor = 0
        for t in order.tolist():
            u, i = int(u_idx[t]), int(i_idx[t])
            pos = positives[u]
            if len(pos) >= n_items:
                continue
            while True:
                if cursor < len(draws):
                    j = draws[cursor]
                    cursor += 1
                else:
                    j = int(rng.integers(0, n_items))
                if j not in pos:
                    break
            x = sgd_step(model, u, i, j, hp.learning_rate, hp.reg)
            if not math.isfinite(x):
                raise DivergenceError(f"non-finite score difference at epoch {epoch}")
        if not model.is_finite():
            raise DivergenceError(f"non-finite parameters after epoch {epoch}")

        recall = None
        if validation is not None and len(validation):
            report = evaluate_ranker(model, validation, k=hp.validation_k,
                                     exclude=[train])
            if report.n_users:
                recall = report.recall
                if recall > best_recall:
                    best, best_recall = model.copy(), recall
        if on_epoch is not None:
            on_epoch(epoch, recall)
        log.debug("epoch %d validation recall@%d=%s", epoch, hp.validation_k, recall)
    return best if best is not None else model


def predict_scores(model, user: str, candidates: Sequence[str] | None = None,
                   exclusions=()) -> list[tuple[str, float]]:
    """Score candidates for ``user``; the user's training items are always excluded."""
    scores = model.user_scores(user)
    excluded = set(exclusions) | set(model.train_items.get(user, ()))
    if candidates is None:
        candidates = model.items
    out = []
    for item in candidates:
        if item in excluded:
            continue
        idx = model.item_index.get(item)
        if idx is None:
            continue
        out.append((item, float(scores[idx])))
    return out


class PopularityModel:
    """Ranks items by training interaction count."""

    def __init__(self, train: InteractionSet, items: Sequence[str] | None = None):
        counts: dict[str, int] = {}
        for _, i in train.pairs:
            counts[i] = counts.get(i, 0) + 1
        self.items = sorted(set(items) if items is not None else set(counts), key=_bytes_key)
        self.item_index = {i: n for n, i in enumerate(self.items)}
        self.users = sorted({u for u, _ in train.pairs}, key=_bytes_key)
        self.user_index = {u: n for n, u in enumerate(self.users)}
        self._scores = np.array([float(counts.get(i, 0)) for i in self.items])
        self.train_items = {u: frozenset(i) for u, i in train.by_user().items()}

    def knows(self, user: str) -> bool:
        return user in self.user_index

    def user_scores(self, user: str) -> np.ndarray:
        if user not in self.user_index:
            raise UnknownUserError(user)
        return self._scores
