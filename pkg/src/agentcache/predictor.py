"""Multi-step workflow forecasters.

Every predictor follows the scikit-learn estimator protocol: constructor
arguments are hyper-parameters (so ``get_params``/``set_params``/``clone``
work), ``fit`` learns from a list of :class:`WorkflowTrace` and returns
``self``, and ``predict(prefix)`` returns a :class:`Forecast`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from ._validation import ValidationError, check_scalar
from .callgraph import CallGraph, WorkflowTrace, true_kstep_marginals
from .forecast import Forecast, propagate


def oracle_predict(g: CallGraph, prefix: Sequence[int], K: int) -> Forecast:
    return true_kstep_marginals(g, prefix, K)


def noisy_predict(base: Forecast, lam: float) -> Forecast:
    """Mix every step with the uniform distribution over all outcomes, END included."""
    check_scalar(lam, "lambda", lo=0.0, hi=1.0)
    if lam == 0.0:
        return base
    uniform = 1.0 / base.num_outcomes
    return Forecast((1.0 - lam) * base.steps + lam * uniform)


def forecast_l1_error(truth: Forecast, est: Forecast, gamma: float = 1.0):
    """Per-step l1 deviation and its gamma-discounted sum.

    Returns ``(per_step, discounted)``.
    """
    if truth.steps.shape != est.steps.shape:
        raise ValidationError(
            f"forecast shapes differ: {truth.steps.shape} vs {est.steps.shape}"
        )
    per_step = np.abs(truth.steps - est.steps).sum(axis=1)
    weights = gamma ** np.arange(truth.horizon)
    return per_step, float(weights @ per_step)


@dataclass
class MarkovModel:
    """Outcome counts per context of length ``0..order``.

    The empty context holds the global unigram used as the last backoff.
    """

    order: int
    num_agents: int
    alpha: float = 0.1
    counts: dict = field(default_factory=dict)

    def row(self, history: Sequence[int]) -> np.ndarray:
        h = tuple(history[-self.order:]) if self.order else ()
        for start in range(len(h) + 1):
            c = self.counts.get(h[start:])
            if c is not None and c.sum() > 0:
                smoothed = c + self.alpha
                return smoothed / smoothed.sum()
        return np.full(self.num_agents + 1, 1.0 / (self.num_agents + 1))

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "num_agents": self.num_agents,
            "alpha": self.alpha,
            "counts": {
                ",".join(map(str, ctx)): c.astype(int).tolist() for ctx, c in self.counts.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "MarkovModel":
        n = int(doc["num_agents"])
        counts = {}
        for key, c in doc["counts"].items():
            ctx = tuple(int(x) for x in key.split(",")) if key else ()
            arr = np.asarray(c, dtype=float)
            if arr.shape != (n + 1,) or np.any(arr < 0):
                raise ValidationError(f"bad counts for context {key!r}")
            counts[ctx] = arr
        return cls(int(doc["order"]), n, float(doc["alpha"]), counts)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "MarkovModel":
        return cls.from_dict(json.loads(text))


def train_markov(
    traces: Sequence[WorkflowTrace], n: int, alpha: float = 0.1, num_agents: int | None = None
) -> MarkovModel:
    check_scalar(n, "n", kind=int, lo=1)
    check_scalar(alpha, "alpha", lo=0.0)
    if not traces:
        raise ValidationError("cannot train a Markov model on an empty corpus")
    if num_agents is None:
        num_agents = 1 + max(max(t.invocations) for t in traces if t.invocations)
    end = num_agents
    counts: dict[tuple[int, ...], np.ndarray] = {}
    for t in traces:
        seq = list(t.invocations) + ([end] if t.terminated else [])
        for i, target in enumerate(seq):
            for length in range(min(n, i) + 1):
                ctx = tuple(seq[i - length:i])
                c = counts.get(ctx)
                if c is None:
                    c = counts[ctx] = np.zeros(num_agents + 1)
                c[target] += 1.0
    return MarkovModel(n, num_agents, alpha, counts)


def markov_predict(m: MarkovModel, prefix: Sequence[int], K: int) -> Forecast:
    if not prefix:
        raise ValidationError("prefix must be non-empty")
    check_scalar(K, "K", kind=int, lo=1)
    return propagate(m.row, [int(a) for a in prefix], K, m.order, m.num_agents)


class OraclePredictor(BaseEstimator):
    """Exact marginals of the generating call graph."""

    def __init__(self, graph: CallGraph | None = None, horizon: int = 3):
        self.graph = graph
        self.horizon = horizon

    def fit(self, traces=None, y=None):
        if self.graph is None:
            raise ValidationError("OraclePredictor needs the generating call graph")
        check_scalar(self.horizon, "horizon", kind=int, lo=1)
        self.graph_ = self.graph
        self._memo = {}
        return self

    def predict(self, prefix: Sequence[int]) -> Forecast:
        check_is_fitted(self, "graph_")
        key = tuple(prefix[-self.graph_.n_ctx:])
        f = self._memo.get(key)
        if f is None:
            # the marginals only depend on the last n_ctx agents
            f = self._memo[key] = oracle_predict(self.graph_, prefix, self.horizon)
        return f


class NoisyPredictor(BaseEstimator):
    """Wraps another predictor and mixes its output toward uniform."""

    def __init__(self, base=None, noise: float = 0.0):
        self.base = base
        self.noise = noise

    def fit(self, traces=None, y=None):
        if self.base is None:
            raise ValidationError("NoisyPredictor needs a base predictor")
        check_scalar(self.noise, "noise", lo=0.0, hi=1.0)
        self.base.fit(traces)
        self.fitted_ = True
        return self

    @property
    def horizon(self) -> int:
        return self.base.horizon

    def predict(self, prefix: Sequence[int]) -> Forecast:
        check_is_fitted(self, "fitted_")
        return noisy_predict(self.base.predict(prefix), self.noise)


class MarkovPredictor(BaseEstimator):
    """Order-``order`` Markov chain with add-alpha smoothing and backoff."""

    def __init__(self, order: int = 3, alpha: float = 0.1, horizon: int = 3, num_agents=None):
        self.order = order
        self.alpha = alpha
        self.horizon = horizon
        self.num_agents = num_agents

    def fit(self, traces, y=None):
        check_scalar(self.horizon, "horizon", kind=int, lo=1)
        self.model_ = train_markov(list(traces), self.order, self.alpha, self.num_agents)
        self._memo = {}
        return self

    def predict(self, prefix: Sequence[int]) -> Forecast:
        check_is_fitted(self, "model_")
        key = tuple(prefix[-self.order:])
        f = self._memo.get(key)
        if f is None:
            f = self._memo[key] = markov_predict(self.model_, prefix, self.horizon)
        return f

    def score(self, traces, y=None) -> float:
        """Top-1 next-step accuracy over every position of ``traces`` (END included)."""
        return top1_accuracy(self, traces, self.model_.num_agents)


def top1_accuracy(predictor, traces: Sequence[WorkflowTrace], num_agents: int, step: int = 1) -> float:
    """Fraction of positions where the argmax of step ``step`` is the realised outcome."""
    hits = total = 0
    for t in traces:
        seq = list(t.invocations) + ([num_agents] if t.terminated else [])
        for i in range(1, len(seq) - step + 1):
            f = predictor.predict(seq[:i])
            if step > f.horizon:
                raise ValidationError("step beyond the predictor horizon")
            hits += int(np.argmax(f.step(step)) == seq[i + step - 1])
            total += 1
    if total == 0:
        raise ValidationError("no positions to score")
    return hits / total


def make_predictor(kind: str, graph: CallGraph, horizon: int, **params):
    """Build a predictor by name: ``oracle``, ``noisy`` or ``markov``."""
    if kind == "oracle":
        return OraclePredictor(graph, horizon)
    if kind == "noisy":
        return NoisyPredictor(OraclePredictor(graph, horizon), params.get("noise", 0.0))
    if kind == "markov":
        return MarkovPredictor(
            params.get("order", 3), params.get("alpha", 0.1), horizon, graph.num_agents
        )
    raise ValidationError(f"unknown predictor {kind!r}")


__all__ = [
    "Forecast",
    "MarkovModel",
    "MarkovPredictor",
    "NoisyPredictor",
    "NotFittedError",
    "OraclePredictor",
    "forecast_l1_error",
    "make_predictor",
    "markov_predict",
    "noisy_predict",
    "oracle_predict",
    "top1_accuracy",
    "train_markov",
]
