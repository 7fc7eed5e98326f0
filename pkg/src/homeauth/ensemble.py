"""Two-model agreement ensemble over disjoint feature sets, with abstention.

One member scores device features, the other domain features. A combined
score exists only when both argmax users coincide; otherwise the decision is
an explicit abstention that still carries both raw vectors for diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .features import KIND_DEVICE, KIND_DOMAIN, device_features, domain_features
from .models import AuthScore, TrainedModel, predict_proba_matrix
from .sessions import ObservationWindow

AGREED = "agreed"
ABSTAIN = "abstain"


@dataclass(frozen=True)
class EnsembleModel:
    model_dev: TrainedModel
    model_dom: TrainedModel

    def __post_init__(self):
        if self.model_dev.user_set != self.model_dom.user_set:
            raise ValueError("ensemble members must share an identical user_set")
        if self.model_dev.schema is not None and self.model_dev.schema.kind != KIND_DEVICE:
            raise ValueError("model_dev must be trained on a device-only schema")
        if self.model_dom.schema is not None and self.model_dom.schema.kind != KIND_DOMAIN:
            raise ValueError("model_dom must be trained on a domain-only schema")

    @property
    def user_set(self) -> tuple[str, ...]:
        return self.model_dev.user_set


@dataclass(frozen=True, slots=True)
class EnsembleDecision:
    """Either an agreed joint score or an abstention, plus both sub-scores."""

    outcome: str
    t: float
    user: str | None
    scores: dict[str, float] | None
    dev_scores: dict[str, float]
    dom_scores: dict[str, float]

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "outcome": self.outcome,
            "user": self.user,
            "scores": self.scores,
            "dev_scores": self.dev_scores,
            "dom_scores": self.dom_scores,
        }


def agree(dev: AuthScore, dom: AuthScore, min_confidence: float = 0.0) -> EnsembleDecision:
    """Combine two sub-model scores: agree on matching argmax, else abstain.

    The agreed vector is the renormalized arithmetic mean of the two members,
    which preserves the shared argmax. min_confidence (default off) demands
    the combined top score reach a floor before agreeing.
    """
    t = dev.t
    if dev.argmax_user != dom.argmax_user:
        return EnsembleDecision(ABSTAIN, t, None, None, dev.scores, dom.scores)
    users = list(dev.scores)
    mean = np.array([(dev.scores[u] + dom.scores[u]) / 2.0 for u in users])
    mean = mean / mean.sum()
    combined = {u: float(p) for u, p in zip(users, mean)}
    if combined[dev.argmax_user] < min_confidence:
        return EnsembleDecision(ABSTAIN, t, None, None, dev.scores, dom.scores)
    return EnsembleDecision(AGREED, t, dev.argmax_user, combined, dev.scores, dom.scores)


def _window_score(model: TrainedModel, values: np.ndarray, t: float) -> AuthScore:
    probs = predict_proba_matrix(model, values.reshape(1, -1))[0]
    arg = int(np.argmax(probs))
    return AuthScore(
        t=t,
        scores={u: float(p) for u, p in zip(model.user_set, probs)},
        argmax_user=model.user_set[arg],
    )


def ensemble_predict(
    ens: EnsembleModel, window: ObservationWindow, min_confidence: float = 0.0
) -> EnsembleDecision:
    """Extract both feature views of one window and combine the two scores."""
    dev_vals = device_features(window, ens.model_dev.schema.device_order)
    dom_vals = domain_features(window, ens.model_dom.schema.domain_vocab)
    dev = _window_score(ens.model_dev, dev_vals, window.t_end)
    dom = _window_score(ens.model_dom, dom_vals, window.t_end)
    return agree(dev, dom, min_confidence)


def coverage(decisions: Sequence[EnsembleDecision]) -> float:
    """Fraction of decisions that agreed (received a score)."""
    if not decisions:
        raise ValueError("coverage of an empty decision list is undefined")
    agreed = sum(1 for d in decisions if d.outcome == AGREED)
    return agreed / len(decisions)


def write_decisions(path, decisions: Iterable[EnsembleDecision]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_dict()) + "\n")
