"""Inference-time spectral surgery: rank truncation of routing / filtering.

Nothing here touches parameters. A plan is turned into per-layer score
hooks; the model is evaluated through those hooks and the weights stay
bit-identical.

Standard layers: the unmasked score matrix A is split into R (skew) and F
(symmetric), each is truncated per the directive, and R' + F' goes through
the usual causal mask + softmax.

S-D layers: S is truncated directly and the damping vector d is replaced
(per-head window mean, zero, or kept).

"Scalar" filtering on a standard layer means F -> c I with c the mean of
diag(F) for that (sequence, head) -- the direct analog of collapsing every
d_i to its per-head mean.
"""
import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import spectral
from .attention import ScoreHook
from .model import perplexity
from .probe import _fmt

log = logging.getLogger(__name__)

FULL = "full"
ZERO = "zero"
SCALAR = "per-head-mean-scalar"
RANK_K = "rank-k"
FILTERING_MODES = (FULL, SCALAR, RANK_K, ZERO)


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class LayerDirective:
    """routing_rank: even int, "full" or "zero". filtering_mode: one of
    FILTERING_MODES; "rank-k" reads ``filtering_rank``."""

    layer: int
    routing_rank: object = FULL
    filtering_mode: str = FULL
    filtering_rank: int = None

    def problems(self):
        out = []
        r = self.routing_rank
        if isinstance(r, str):
            if r not in (FULL, ZERO):
                out.append(f"layer {self.layer}: routing_rank {r!r} must be an even integer, 'full' or 'zero'")
        elif isinstance(r, bool) or not isinstance(r, (int, np.integer)):
            out.append(f"layer {self.layer}: routing_rank {r!r} must be an even integer, 'full' or 'zero'")
        elif r < 0 or r % 2:
            out.append(f"layer {self.layer}: routing_rank {r} must be a non-negative even integer")
        if self.filtering_mode not in FILTERING_MODES:
            out.append(f"layer {self.layer}: filtering_mode {self.filtering_mode!r} not in {FILTERING_MODES}")
        elif self.filtering_mode == RANK_K:
            k = self.filtering_rank
            if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k < 0:
                out.append(f"layer {self.layer}: rank-k filtering needs filtering_rank >= 0")
        return out

    @property
    def identity(self):
        return self.routing_rank == FULL and self.filtering_mode == FULL

    def describe(self):
        f = f"rank-{self.filtering_rank}" if self.filtering_mode == RANK_K else self.filtering_mode
        return f"L{self.layer}:R={self.routing_rank},F={f}"

    def as_dict(self):
        return asdict(self)


@dataclass
class SurgeryPlan:
    directives: list = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.directives = [d if isinstance(d, LayerDirective) else LayerDirective(**d) for d in self.directives]

    def problems(self, config=None):
        out = []
        seen = set()
        for d in self.directives:
            out.extend(d.problems())
            if d.layer in seen:
                out.append(f"layer {d.layer}: more than one directive")
            seen.add(d.layer)
            if config is not None:
                if not 0 <= d.layer < config.n_layers:
                    out.append(f"layer {d.layer}: model has {config.n_layers} layers")
                elif config.layers[d.layer].mechanism == "linear" and not d.identity:
                    out.append(f"layer {d.layer}: linear-attention layers have no score matrix to operate on")
        return out

    def validate(self, config=None):
        p = self.problems(config)
        if p:
            raise PlanError("; ".join(p))
        return self

    def by_layer(self):
        return {d.layer: d for d in self.directives}

    def modified_layers(self):
        return sorted(d.layer for d in self.directives if not d.identity)

    def describe(self):
        if self.name:
            return self.name
        return " ".join(d.describe() for d in self.directives) or "identity"

    def to_dict(self):
        return {"name": self.name, "directives": [d.as_dict() for d in self.directives]}

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - {"name", "directives"}
        if unknown:
            raise PlanError(f"unknown plan keys: {sorted(unknown)}")
        try:
            return cls(directives=list(doc.get("directives", [])), name=doc.get("name", ""))
        except TypeError as exc:
            raise PlanError(f"bad directive: {exc}") from None


# ---------------------------------------------------------------------------
# canned plans


def linearize_directive(layer):
    """Rank-2 routing + scalar filtering."""
    return LayerDirective(layer, routing_rank=2, filtering_mode=SCALAR)


def identity_plan(n_layers):
    return SurgeryPlan([LayerDirective(i) for i in range(n_layers)], name="identity")


def linearize_plan(layers):
    layers = list(layers)
    return SurgeryPlan([linearize_directive(i) for i in layers], name="linearize[" + ",".join(map(str, layers)) + "]")


def collapse_damping_plan(n_layers):
    return SurgeryPlan([LayerDirective(i, filtering_mode=SCALAR) for i in range(n_layers)], name="collapse-damping")


def zero_routing_plan(n_layers):
    return SurgeryPlan([LayerDirective(i, routing_rank=ZERO) for i in range(n_layers)], name="zero-routing")


def uniform_rank_plan(n_layers, routing_rank, filtering):
    """Same (routing, filtering) truncation on every layer; filtering is an
    int rank, "full", "zero" or the scalar mode."""
    if isinstance(filtering, str):
        mode, k = filtering, None
    else:
        mode, k = RANK_K, int(filtering)
    return SurgeryPlan([LayerDirective(i, routing_rank, mode, k) for i in range(n_layers)],
                       name=f"R={routing_rank},F={filtering}")


# ---------------------------------------------------------------------------
# the intercept


def _truncate_routing(R, rank):
    if rank == FULL:
        return R
    if rank == ZERO:
        return np.zeros_like(R)
    return spectral.truncate_rank(R, rank, spectral.ROUTING)


def _scalar_identity(F):
    n = F.shape[-1]
    c = np.trace(F, axis1=-2, axis2=-1) / n
    return c[..., None, None] * np.eye(n)


def _truncate_filtering(F, directive):
    mode = directive.filtering_mode
    if mode == FULL:
        return F
    if mode == ZERO:
        return np.zeros_like(F)
    if mode == SCALAR:
        return _scalar_identity(F)
    return spectral.truncate_rank(F, directive.filtering_rank, spectral.FILTERING)


def _truncate_damping(d, directive):
    mode = directive.filtering_mode
    if mode == FULL:
        return d
    if mode == ZERO:
        return np.zeros_like(d)
    if mode == SCALAR:
        return np.broadcast_to(d.mean(axis=-1, keepdims=True), d.shape).copy()
    # rank-k of a non-negative diagonal keeps its k largest entries
    k = directive.filtering_rank
    if k >= d.shape[-1]:
        return d
    out = np.zeros_like(d)
    top = np.argsort(-d, axis=-1, kind="stable")[..., :k]
    np.put_along_axis(out, top, np.take_along_axis(d, top, axis=-1), axis=-1)
    return out


class SurgeryHook(ScoreHook):
    """Applies one layer's directive and reports each modification to ``audit``."""

    def __init__(self, directive, audit):
        self.directive = directive
        self.audit = audit

    def standard(self, layer, A):
        if self.directive.identity:
            return None
        dec = spectral.decompose(np.asarray(A, dtype=np.float64))
        R = _truncate_routing(dec.R, self.directive.routing_rank)
        F = _truncate_filtering(dec.F, self.directive)
        self.audit.touch(layer)
        return R + F

    def sd(self, layer, S, d):
        if self.directive.identity:
            return None
        S = _truncate_routing(np.asarray(S, dtype=np.float64), self.directive.routing_rank)
        d = _truncate_damping(np.asarray(d, dtype=np.float64), self.directive)
        self.audit.touch(layer)
        return S, d


@dataclass
class AuditLog:
    """One entry per model forward: the layers whose scores were replaced."""

    entries: list = field(default_factory=list)
    _current: set = field(default_factory=set, repr=False)

    def touch(self, layer):
        self._current.add(layer)

    def close_forward(self):
        self.entries.append(sorted(self._current))
        self._current = set()

    def consistent_with(self, plan):
        want = plan.modified_layers()
        return all(e == want for e in self.entries)


class SurgeryView:
    """A model seen through a surgery plan. Parameters are never modified."""

    def __init__(self, model, plan):
        plan.validate(model.config)
        self.model = model
        self.plan = plan
        self.config = model.config
        self.audit = AuditLog()
        self.hooks = {d.layer: SurgeryHook(d, self.audit) for d in plan.directives}

    def token_nll(self, inputs, targets, hooks=None):
        if hooks:
            raise ValueError("a surgery view already owns the score hooks")
        out = self.model.token_nll(inputs, targets, hooks=self.hooks)
        self.audit.close_forward()
        return out

    def perplexity(self, corpus, stride=None, batch_size=16):
        return perplexity(self, corpus, stride=stride, batch_size=batch_size)


def apply_surgery(model, plan):
    return SurgeryView(model, plan)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    descriptor: str
    ppl: float
    delta_pct: float
    plan: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    audit_ok: bool = True

    def row(self):
        r = {"descriptor": self.descriptor}
        r.update(self.extra)
        r.update({"ppl": self.ppl, "delta_ppl_pct": self.delta_pct, "audit_ok": self.audit_ok})
        return r


@dataclass
class Sweep:
    kind: str
    baseline_ppl: float
    results: list
    stride: int
    eval_tokens: int
    meta: dict = field(default_factory=dict)

    def rows(self):
        return [r.row() for r in self.results]

    def deltas(self):
        return [r.delta_pct for r in self.results]

    def to_dict(self):
        return {
            "kind": self.kind,
            "baseline_ppl": self.baseline_ppl,
            "stride": self.stride,
            "eval_tokens": self.eval_tokens,
            "meta": self.meta,
            "results": [asdict(r) for r in self.results],
        }

    def write_csv(self, path, header_lines=()):
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write(f"# baseline_ppl: {self.baseline_ppl!r}\n")
            if not rows:
                return
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: _fmt(v) for k, v in r.items()})

    def write_json(self, path, extra=None):
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, allow_nan=True)
            fh.write("\n")


def _stride(model, stride):
    return model.config.context // 2 if stride is None else stride


def baseline_ppl(model, eval_corpus, stride=None, batch_size=16):
    return perplexity(model, eval_corpus, stride=_stride(model, stride), batch_size=batch_size)


def evaluate_plan(model, plan, eval_corpus, baseline, stride=None, batch_size=16, extra=None):
    view = apply_surgery(model, plan)
    ppl = view.perplexity(eval_corpus, stride=_stride(model, stride), batch_size=batch_size)
    return SweepResult(
        descriptor=plan.describe(),
        ppl=ppl,
        delta_pct=100.0 * (ppl - baseline) / baseline,
        plan=plan.to_dict(),
        extra=dict(extra or {}),
        audit_ok=bool(view.audit.entries) and view.audit.consistent_with(plan),
    )


def _score_layers(model):
    return [i for i, l in enumerate(model.config.layers) if l.mechanism != "linear"]


def run_plans(model, plans, eval_corpus, stride=None, batch_size=16, kind="plans", extras=None):
    base = baseline_ppl(model, eval_corpus, stride, batch_size)
    extras = extras or [{} for _ in plans]
    results = [evaluate_plan(model, p, eval_corpus, base, stride, batch_size, e) for p, e in zip(plans, extras)]
    return Sweep(kind, base, results, _stride(model, stride), int(np.asarray(eval_corpus).size))


def per_layer_linearization_sweep(model, eval_corpus, stride=None, batch_size=16):
    """Linearize each layer alone (rank-2 routing, scalar filtering)."""
    layers = _score_layers(model)
    plans = [linearize_plan([i]) for i in layers]
    return run_plans(model, plans, eval_corpus, stride, batch_size, kind="per-layer",
                     extras=[{"layer": i} for i in layers])


def cumulative_linearization_sweep(model, eval_corpus, stride=None, batch_size=16):
    """Fold layers in front to back; row k has the first k layers linearized
    (k = 0 is the baseline)."""
    layers = _score_layers(model)
    plans = [linearize_plan(layers[:k]) for k in range(len(layers) + 1)]
    return run_plans(model, plans, eval_corpus, stride, batch_size, kind="cumulative",
                     extras=[{"k": k} for k in range(len(layers) + 1)])


def joint_rank_grid(model, routing_ranks, filtering_ranks, eval_corpus, stride=None, batch_size=16):
    """Every (routing rank, filtering rank) pair applied uniformly to all
    layers. Ranks are ints, "full" or "zero"."""
    bad = [i for i, l in enumerate(model.config.layers) if l.mechanism != "standard"]
    if bad:
        raise PlanError(f"joint rank grid acts on decomposed standard scores; layers {bad} are not standard")
    n = model.config.n_layers
    plans, extras = [], []
    for r in routing_ranks:
        for f in filtering_ranks:
            plans.append(uniform_rank_plan(n, r, f))
            extras.append({"routing_rank": r, "filtering_rank": f})
    sweep = run_plans(model, plans, eval_corpus, stride, batch_size, kind="grid", extras=extras)
    sweep.meta = {"routing_ranks": list(routing_ranks), "filtering_ranks": list(filtering_ranks)}
    return sweep


def grid_matrix(sweep):
    """ΔPPL% as a (routing x filtering) nested list, for heat maps."""
    rr, fr = sweep.meta["routing_ranks"], sweep.meta["filtering_ranks"]
    vals = iter(sweep.deltas())
    return [[next(vals) for _ in fr] for _ in rr]


def write_grid_csv(path, sweep, header_lines=()):
    rr, fr = sweep.meta["routing_ranks"], sweep.meta["filtering_ranks"]
    mat = grid_matrix(sweep)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["routing\\filtering"] + [str(f) for f in fr])
        for r, row in zip(rr, mat):
            w.writerow([str(r)] + [_fmt(v) for v in row])


def inversion_ratio(model, eval_corpus, stride=None, batch_size=16):
    """(ΔPPL zero-routing, ΔPPL damping collapse, ratio) in absolute PPL."""
    n = model.config.n_layers
    sweep = run_plans(model, [zero_routing_plan(n), collapse_damping_plan(n)], eval_corpus, stride, batch_size,
                      kind="inversion")
    base = sweep.baseline_ppl
    dz = sweep.results[0].ppl - base
    dc = sweep.results[1].ppl - base
    ratio = dz / abs(dc) if dc != 0 else float("inf")
    return dz, dc, ratio, sweep


def cascade_correlation(deltas, ranks):
    """Spearman rank correlation between per-layer cost and routing effrank."""
    if len(deltas) != len(ranks):
        raise ValueError("one ΔPPL per layer rank is required")
    res = stats.spearmanr(deltas, ranks)
    return float(res.statistic if hasattr(res, "statistic") else res.correlation)
