"""Importance-score evaluation for weight pruning.

A metric is a signed sum of scaled factor products over the weight
matrix, the column activation norms, and a per-weight gradient magnitude
aggregated across calibration samples. The grammar covers plain
magnitude, activation-weighted (wanda) scoring, gradient-only scoring,
and every combined variant, including squared activation terms and
sign-preserving gradient terms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from gradprune.container import Container
from gradprune.stats import GRAD_AGGREGATIONS, LayerStats, stats_from_container

WEIGHT_FACTORS = ("abs_w", "signed_w", "none")
ACT_FACTORS = ("none", "act_l2")

DEFAULT_METRIC = "gblm-l1"
DEFAULT_ALPHA = 100.0
DEFAULT_SKIP_LIST = ("embed", "lm_head")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricTerm:
    """One additive term: coefficient * (wf(W) * af(col))**power * gf(W_stats).

    ``power`` applies to the weight*activation product only, so squared
    terms are restricted to gradient-free factors. Sign convention: when
    ``weight_factor`` is "signed_w" and the gradient aggregation is "acc",
    the signed gradient sum is used (no absolute value), reproducing the
    sign-sensitive variants; all other combinations use the nonnegative
    aggregated magnitude.
    """

    coefficient: float = 1.0
    weight_factor: str = "abs_w"
    act_factor: str = "none"
    grad_factor: str | None = None
    power: int = 1

    def __post_init__(self):
        if not np.isfinite(self.coefficient):
            raise MetricError("term coefficient must be finite")
        if self.weight_factor not in WEIGHT_FACTORS:
            raise MetricError(f"unknown weight_factor {self.weight_factor!r}")
        if self.act_factor not in ACT_FACTORS:
            raise MetricError(f"unknown act_factor {self.act_factor!r}")
        if self.grad_factor is not None and self.grad_factor not in GRAD_AGGREGATIONS:
            raise MetricError(f"unknown grad_factor {self.grad_factor!r}")
        if self.weight_factor == "none" and self.act_factor == "none" and self.grad_factor is None:
            raise MetricError("term must use at least one factor")
        if self.power not in (1, 2):
            raise MetricError("power must be 1 or 2")
        if self.power == 2 and self.grad_factor is not None:
            raise MetricError("power=2 applies to the weight*activation product only")

    @property
    def needs_activations(self) -> bool:
        return self.act_factor == "act_l2"

    @property
    def needs_gradients(self) -> bool:
        return self.grad_factor is not None


@dataclass(frozen=True)
class MetricSpec:
    """Named, declarative pruning metric; evaluation is a pure function."""

    name: str
    terms: tuple[MetricTerm, ...]

    def __post_init__(self):
        if not self.terms:
            raise MetricError("metric needs at least one term")
        object.__setattr__(self, "terms", tuple(self.terms))

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "terms": [
                {
                    "coefficient": t.coefficient,
                    "weight_factor": t.weight_factor,
                    "act_factor": t.act_factor,
                    "grad_factor": t.grad_factor,
                    "power": t.power,
                }
                for t in self.terms
            ],
        }


@dataclass
class ImportanceMatrix:
    scores: np.ndarray
    metric_name: str

    def __post_init__(self):
        if not np.isfinite(self.scores).all():
            raise MetricError(f"importance scores for {self.metric_name!r} contain non-finite entries")


def _t(coefficient=1.0, weight_factor="abs_w", act_factor="none", grad_factor=None, power=1):
    return MetricTerm(coefficient, weight_factor, act_factor, grad_factor, power)


def _builtin_terms(name: str, alpha: float) -> list[MetricTerm]:
    wanda = _t(act_factor="act_l2")
    wanda_sq = _t(act_factor="act_l2", power=2)

    table = {
        "magnitude": [_t()],
        "wanda": [wanda],
        "grad-acc": [_t(grad_factor="acc")],
        "grad-l1": [_t(grad_factor="l1")],
        "grad-l2": [_t(grad_factor="l2")],
        "wanda-grad-l1": [_t(act_factor="act_l2", grad_factor="l1")],
        "wanda-grad-l2": [_t(act_factor="act_l2", grad_factor="l2")],
        "gblm-l1": [wanda, _t(alpha, grad_factor="l1")],
        "gblm-l2": [wanda, _t(alpha, grad_factor="l2")],
        "gblm-acc": [wanda, _t(alpha, grad_factor="acc")],
        "gblm-minus-l1": [wanda, _t(-alpha, grad_factor="l1")],
        "gblm-minus-l2": [wanda, _t(-alpha, grad_factor="l2")],
        "gblm-sq-l1": [wanda_sq, _t(alpha, grad_factor="l1")],
        "gblm-sq-l2": [wanda_sq, _t(alpha, grad_factor="l2")],
        "gblm-sq-minus-l1": [wanda_sq, _t(-alpha, grad_factor="l1")],
        "gblm-sq-minus-l2": [wanda_sq, _t(-alpha, grad_factor="l2")],
        "sq-signed-plus-l1": [wanda_sq, _t(alpha, weight_factor="signed_w", grad_factor="l1")],
        "sq-signed-plus-l2": [wanda_sq, _t(alpha, weight_factor="signed_w", grad_factor="l2")],
        "sq-signed-acc-plus": [wanda_sq, _t(alpha, weight_factor="signed_w", grad_factor="acc")],
        "sq-signed-acc-minus": [wanda_sq, _t(-alpha, weight_factor="signed_w", grad_factor="acc")],
    }
    if name not in table:
        raise MetricError(f"unknown metric {name!r}; known: {', '.join(sorted(table))}")
    return table[name]


BUILTIN_METRICS = (
    "magnitude", "wanda", "grad-acc", "grad-l1", "grad-l2",
    "wanda-grad-l1", "wanda-grad-l2",
    "gblm-l1", "gblm-l2", "gblm-acc",
    "gblm-minus-l1", "gblm-minus-l2",
    "gblm-sq-l1", "gblm-sq-l2", "gblm-sq-minus-l1", "gblm-sq-minus-l2",
    "sq-signed-plus-l1", "sq-signed-plus-l2",
    "sq-signed-acc-plus", "sq-signed-acc-minus",
)


def builtin_metric(name: str, alpha: float = DEFAULT_ALPHA) -> MetricSpec:
    """Look up a named metric; alpha scales every gradient term."""
    if not np.isfinite(alpha):
        raise MetricError("alpha must be finite")
    return MetricSpec(name=name, terms=tuple(_builtin_terms(name, float(alpha))))


def metric_from_json(text: str) -> MetricSpec:
    """Parse a custom metric from a JSON term list (see MetricTerm fields)."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise MetricError(f"metric JSON is invalid: {e.msg}") from e
    if not isinstance(obj, dict) or "terms" not in obj:
        raise MetricError('metric JSON must be an object with a "terms" list')
    terms = []
    for raw in obj["terms"]:
        terms.append(
            MetricTerm(
                coefficient=float(raw.get("coefficient", 1.0)),
                weight_factor=raw.get("weight_factor", "abs_w"),
                act_factor=raw.get("act_factor", "none"),
                grad_factor=raw.get("grad_factor"),
                power=int(raw.get("power", 1)),
            )
        )
    return MetricSpec(name=str(obj.get("name", "custom")), terms=tuple(terms))


def _term_scores(term: MetricTerm, w: np.ndarray, stats: LayerStats | None) -> np.ndarray:
    if term.weight_factor == "abs_w":
        base = np.abs(w)
    elif term.weight_factor == "signed_w":
        base = w.copy()
    else:
        base = np.ones_like(w)

    if term.needs_activations:
        if stats is None or stats.n_act_rows < 1:
            raise MetricError("metric term needs activation stats (none accumulated)")
        base = base * stats.act_norm()[np.newaxis, :]

    if term.power == 2:
        base = base * base

    if term.needs_gradients:
        if stats is None or stats.n_samples < 1:
            raise MetricError("metric term needs gradient stats (no samples accumulated)")
        if term.grad_factor == "acc" and term.weight_factor == "signed_w":
            grad = stats.grad_sum  # sign-preserving variant
        else:
            grad = stats.grad_norm(term.grad_factor)
        base = base * grad

    return term.coefficient * base


def score(spec: MetricSpec, w, stats: LayerStats | None) -> ImportanceMatrix:
    """Evaluate a metric over one weight matrix in float64.

    Deterministic and side-effect free; raises on shape mismatch, missing
    stats, or any non-finite score (reporting the offending index).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise MetricError(f"weight matrix must be 2-D, got shape {w.shape}")
    if stats is not None and w.shape != (stats.d_out, stats.d_in):
        raise MetricError(f"weight shape {w.shape} != stats shape ({stats.d_out}, {stats.d_in})")

    total = np.zeros_like(w)
    for term in spec.terms:
        total += _term_scores(term, w, stats)

    bad = ~np.isfinite(total)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise MetricError(f"metric {spec.name!r} produced a non-finite score at ({int(i)}, {int(j)})")
    return ImportanceMatrix(scores=total, metric_name=spec.name)


def eligible_weights(container: Container, skip_list=DEFAULT_SKIP_LIST) -> list[str]:
    """Names of prunable weight records: '*.weight' minus skip-list matches."""
    out = []
    for name in container.names():
        if not name.endswith(".weight"):
            continue
        if any(frag in name for frag in skip_list):
            continue
        if container[name].ndim != 2:
            continue
        out.append(name)
    return out


def score_all_layers(
    weights: Container,
    stats_container: Container,
    spec: MetricSpec,
    skip_list=DEFAULT_SKIP_LIST,
) -> dict[str, ImportanceMatrix]:
    """Score every eligible weight record against its layer stats."""
    stats_by_layer = stats_from_container(stats_container)
    result = {}
    for name in eligible_weights(weights, skip_list):
        if name not in stats_by_layer:
            raise MetricError(f"no calibration stats for weight {name!r}")
        result[name] = score(spec, weights[name], stats_by_layer[name])
    return result
