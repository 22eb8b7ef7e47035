"""Cascade-guided architecture prescriptions and their accounting.

A rank profile (mean weight-kernel routing effective rank per layer) is
turned into a per-layer head layout. Accounting is weights-only:

    attention params / layer = 4 * d_model * heads * d_head   (Q, K, V, O)

FLOPs per token per layer, 2 ops per multiply-add:

    projections     2 * 4 * d_model * inner
    softmax core    2 * 2 * N * inner                 (Q K^T row + A V row)
    linear core     2 * 2 * (2 * heads * d_head^2)    (state update + readout)

where inner = heads * d_head and N is the context length.
"""
import json
import math
import re
from dataclasses import asdict, dataclass, field
from importlib import resources

from .model import LayerSpec, ModelConfig

SOFTMAX = "softmax"
LINEAR = "linear"
POLICIES = ("compressed", "wide", "deep", "linear-boundary")

MIN_D_HEAD = 8
MAX_D_HEAD = 64
LOW_RANK_THRESHOLD = 5.0

# Wide: head-count multiplier per narrowed d_head (8 -> 2x, 16 -> 4/3x).
WIDE_HEAD_FACTORS = {8: 2.0, 16: 4.0 / 3.0}
# Deep: extra layers appended to the narrowest and to the widest tier.
DEEP_EXTRA_LOW = 1
DEEP_EXTRA_HIGH = 2

FLOP_CONVENTION = {
    "unit": "FLOPs per token, 2 ops per multiply-add, summed over layers",
    "projections": "2*4*d_model*heads*d_head",
    "softmax_core": "2*2*N*heads*d_head",
    "linear_core": "2*2*(2*heads*d_head^2)",
    "biases": "excluded",
}


class PrescriptionError(ValueError):
    pass


@dataclass
class RankProfile:
    ranks: list
    head_dim: int = 64
    heads: int = 12
    source: str = ""

    def __post_init__(self):
        self.ranks = [float(r) for r in self.ranks]
        if any(not (r >= 0) for r in self.ranks):
            raise PrescriptionError("ranks must be non-negative")

    @property
    def depth(self):
        return len(self.ranks)

    @classmethod
    def from_dict(cls, doc):
        known = {"ranks", "head_dim", "heads", "source"}
        return cls(**{k: v for k, v in doc.items() if k in known})

    @classmethod
    def from_trace_rows(cls, rows, head_dim, heads, step=None):
        """Profile at ``step`` (default: last) of cascade-trace CSV rows."""
        if not rows:
            raise PrescriptionError("empty trace")
        row = rows[-1] if step is None else next(r for r in rows if int(r["step"]) == step)
        keys = sorted((k for k in row if k.startswith("layer") and k[5:].isdigit()), key=lambda k: int(k[5:]))
        return cls([float(row[k]) for k in keys], head_dim=head_dim, heads=heads,
                   source=f"trace step {row['step']}")


@dataclass
class LayerPlan:
    d_head: int
    heads: int
    mechanism: str = SOFTMAX

    @property
    def inner(self):
        return self.heads * self.d_head


@dataclass
class Prescription:
    layers: list
    policy: str
    d_model: int = 768
    context: int = 1024
    baseline: list = field(default_factory=list)

    def schedule(self):
        return [l.d_head for l in self.layers]

    def mechanisms(self):
        return [l.mechanism for l in self.layers]

    def totals(self):
        p = count_attention_params(self, self.d_model)
        p0 = count_attention_params(self.baseline, self.d_model) if self.baseline else p
        fl = count_attention_flops(self, self.d_model, self.context)
        return {
            "attention_params": p,
            "baseline_attention_params": p0,
            "param_savings_pct": 100.0 * (1 - p / p0),
            "attention_flops_per_token": fl["flops"],
            "baseline_attention_flops_per_token": fl["baseline_flops"],
            "flop_savings_pct": fl["savings_pct"],
            "context": self.context,
        }

    def to_dict(self):
        return {
            "policy": self.policy,
            "d_model": self.d_model,
            "context": self.context,
            "layers": [asdict(l) for l in self.layers],
            "baseline": [asdict(l) for l in self.baseline],
            "totals": self.totals(),
            "flop_convention": FLOP_CONVENTION,
        }

    def to_model_config(self, vocab_size=256, epsilon=0.05, mechanism_softmax="standard", **kw):
        """ModelConfig with one LayerSpec per row (softmax rows -> standard)."""
        specs = tuple(LayerSpec(mechanism=mechanism_softmax if l.mechanism == SOFTMAX else "linear",
                                heads=l.heads, d_head=l.d_head) for l in self.layers)
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, context=self.context,
                           layers=specs, epsilon=epsilon, **kw)


# ---------------------------------------------------------------------------
# accounting


def _rows(p):
    return p.layers if isinstance(p, Prescription) else list(p)


def count_attention_params(prescription, d_model):
    return sum(4 * d_model * l.inner for l in _rows(prescription))


def layer_flops(layer, d_model, N):
    proj = 2 * 4 * d_model * layer.inner
    if layer.mechanism == LINEAR:
        core = 2 * 2 * (2 * layer.heads * layer.d_head ** 2)
    else:
        core = 2 * 2 * N * layer.inner
    return proj + core


def count_attention_flops(prescription, d_model, N, baseline=None):
    """{"flops", "baseline_flops", "savings_pct", "per_layer", "convention"}.

    The baseline defaults to the prescription's own uniform baseline rows.
    """
    if N <= 0:
        raise PrescriptionError("context length must be positive")
    rows = _rows(prescription)
    if baseline is None:
        baseline = prescription.baseline if isinstance(prescription, Prescription) and prescription.baseline else rows
    per = [layer_flops(l, d_model, N) for l in rows]
    base = sum(layer_flops(l, d_model, N) for l in _rows(baseline))
    total = sum(per)
    return {
        "flops": total,
        "baseline_flops": base,
        "savings_pct": 100.0 * (1 - total / base),
        "per_layer": per,
        "convention": FLOP_CONVENTION,
    }


def low_rank_fraction(profile, threshold=LOW_RANK_THRESHOLD):
    ranks = profile.ranks if isinstance(profile, RankProfile) else list(profile)
    if not ranks:
        raise PrescriptionError("empty profile")
    return sum(r <= threshold for r in ranks) / len(ranks)


# ---------------------------------------------------------------------------
# policies


def pow2_head_dim(rank, lo=MIN_D_HEAD, hi=MAX_D_HEAD):
    """Smallest power of two >= rank, clamped to [lo, hi]."""
    d = 1 << max(0, math.ceil(math.log2(rank))) if rank > 1 else 1
    return int(min(hi, max(lo, d)))


def parse_policy(policy):
    """'compressed' | 'wide' | 'deep' | 'linear-boundary(K)' (also 'linear-boundary:K').

    Returns (name, K, narrow). 'linear-boundary-cascade(K)' narrows d_head
    with the compressed rule on top of the linear boundary.
    """
    m = re.fullmatch(r"\s*(linear-boundary(?:-cascade)?)\s*(?:\((\d+)\)|:(\d+))\s*", policy)
    if m:
        return "linear-boundary", int(m.group(2) or m.group(3)), m.group(1).endswith("cascade")
    name = policy.strip()
    if name in ("compressed", "wide", "deep"):
        return name, None, False
    raise PrescriptionError(f"unknown policy {policy!r}; expected compressed, wide, deep or linear-boundary(K)")


def _tiers(schedule):
    """Runs of equal d_head as (d_head, count) in order."""
    out = []
    for d in schedule:
        if out and out[-1][0] == d:
            out[-1][1] += 1
        else:
            out.append([d, 1])
    return out


def prescribe(profile, policy, d_model=768, context=1024, heads=None, lo=MIN_D_HEAD, hi=MAX_D_HEAD):
    if not isinstance(profile, RankProfile):
        profile = RankProfile(list(profile))
    if profile.depth == 0:
        raise PrescriptionError("empty profile")
    name, K, narrow = parse_policy(policy)
    H = heads or profile.heads
    baseline = [LayerPlan(profile.head_dim, H) for _ in range(profile.depth)]
    compressed = [pow2_head_dim(r, lo, hi) for r in profile.ranks]

    if name == "compressed":
        layers = [LayerPlan(d, H) for d in compressed]
    elif name == "wide":
        layers = [LayerPlan(d, int(round(H * WIDE_HEAD_FACTORS.get(d, 1.0)))) for d in compressed]
    elif name == "deep":
        tiers = _tiers(compressed)
        if len(tiers) > 1:
            tiers[0][1] += DEEP_EXTRA_LOW
            tiers[-1][1] += DEEP_EXTRA_HIGH
        else:
            tiers[0][1] += DEEP_EXTRA_LOW + DEEP_EXTRA_HIGH
        layers = [LayerPlan(d, H) for d, n in tiers for _ in range(n)]
    else:
        if K > profile.depth:
            raise PrescriptionError(f"linear boundary K={K} exceeds depth {profile.depth}")
        dims = compressed if narrow else [profile.head_dim] * profile.depth
        layers = [LayerPlan(d, H, LINEAR if i < K else SOFTMAX) for i, d in enumerate(dims)]
        policy = f"linear-boundary{'-cascade' if narrow else ''}({K})"
    return Prescription(layers=layers, policy=policy, d_model=d_model, context=context, baseline=baseline)


def uniform_prescription(depth=12, heads=12, d_head=64, d_model=768, context=1024):
    rows = [LayerPlan(d_head, heads) for _ in range(depth)]
    return Prescription(layers=rows, policy="uniform", d_model=d_model, context=context,
                        baseline=[LayerPlan(d_head, heads) for _ in range(depth)])


# ---------------------------------------------------------------------------
# fixtures


def load_fixture(name):
    """Packaged JSON fixture from ``sdlab/data``."""
    text = resources.files("sdlab").joinpath(f"data/{name}").read_text(encoding="utf-8")
    return json.loads(text)


def fixture_profile(name="profile_12layer_cascade.json"):
    return RankProfile.from_dict(load_fixture(name))
