"""Per-head spectral statistics from weights and from live score matrices.

Weight level: each head's kernel M = W_Q^T W_K / sqrt(d_head) is split into
skew and symmetric parts. Sequence level: unmasked score matrices are
captured during a forward pass of a toolkit model and split the same way.
The causal mask never reaches the decomposition.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from . import spectral
from .archive import TensorArchive, read_archive, write_archive
from .attention import ScoreHook
from .model import Model, ModelConfig

CONFIG_META_KEY = "sdlab.config"


class KernelLayoutError(ValueError):
    pass


@dataclass
class HeadStats:
    layer: int
    head: int
    rho_weight: float
    effrank_R_weight: float
    effrank_F_weight: float
    max_re_lambda_weight: float


@dataclass
class SequenceHeadReport:
    layer: int
    head: int
    rho: float
    effrank_R: float
    effrank_F: float
    max_re_lambda: float
    n_sequences: int


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model, path, metadata=None):
    meta = {CONFIG_META_KEY: json.dumps(model.config.to_dict(), sort_keys=True)}
    meta.update(metadata or {})
    write_archive(path, {k: p.data for k, p in model.params.items()}, meta)


def load_model(path):
    arc = read_archive(path)
    return model_from_archive(arc)


def model_from_archive(arc):
    if CONFIG_META_KEY not in arc.metadata:
        raise KernelLayoutError("archive carries no toolkit model config")
    cfg = ModelConfig.from_dict(json.loads(arc.metadata[CONFIG_META_KEY]))
    model = Model.build(cfg)
    for name, p in model.params.items():
        if name not in arc.tensors:
            raise KernelLayoutError(f"checkpoint is missing tensor {name!r}")
        arr = arc.tensors[name]
        if arr.shape != p.shape:
            raise KernelLayoutError(f"tensor {name!r} has shape {arr.shape}, expected {p.shape}")
        p.data = np.array(arr, dtype=np.float32)
    return model


# ---------------------------------------------------------------------------
# naming conventions


@dataclass
class NamingConvention:
    """Where each layer's Q and K projections live and how heads are sliced.

    ``layout="separate"``: ``q_key``/``k_key`` name (d_model, H*d_head)
    matrices. ``layout="fused"``: ``fused_key`` names a (d_model, 3*inner)
    matrix with Q, K, V blocks side by side (GPT-2 ``c_attn``).
    ``heads`` and ``d_head`` are per-layer lists.
    """

    n_layers: int
    heads: list
    d_head: list
    layout: str = "separate"
    q_key: str = "layers.{layer}.attn.w_q"
    k_key: str = "layers.{layer}.attn.w_k"
    fused_key: str = "h.{layer}.attn.c_attn.weight"

    @classmethod
    def toolkit(cls, config):
        return cls(n_layers=config.n_layers,
                   heads=[l.heads for l in config.layers],
                   d_head=[l.d_head for l in config.layers])

    @classmethod
    def gpt2(cls, n_layers, heads, d_model):
        if d_model % heads:
            raise KernelLayoutError(f"d_model {d_model} not divisible by {heads} heads")
        return cls(n_layers=n_layers, heads=[heads] * n_layers,
                   d_head=[d_model // heads] * n_layers, layout="fused")


def detect_convention(arc, heads=None):
    if CONFIG_META_KEY in arc.metadata:
        cfg = ModelConfig.from_dict(json.loads(arc.metadata[CONFIG_META_KEY]))
        return NamingConvention.toolkit(cfg)
    if "h.0.attn.c_attn.weight" in arc:
        if heads is None:
            raise KernelLayoutError("fused GPT-2 layout needs the head count")
        n_layers = 0
        while f"h.{n_layers}.attn.c_attn.weight" in arc:
            n_layers += 1
        d_model = arc["h.0.attn.c_attn.weight"].shape[0]
        return NamingConvention.gpt2(n_layers, heads, d_model)
    raise KernelLayoutError("cannot infer the tensor naming convention of this archive")


def _projections(arc, conv, layer):
    H, dh = conv.heads[layer], conv.d_head[layer]
    inner = H * dh
    if conv.layout == "fused":
        key = conv.fused_key.format(layer=layer)
        if key not in arc:
            raise KernelLayoutError(f"missing tensor {key!r}")
        W = arc[key]
        if W.ndim != 2 or W.shape[1] != 3 * inner:
            raise KernelLayoutError(f"{key!r} has shape {W.shape}; expected (d_model, {3 * inner})")
        return W[:, :inner], W[:, inner:2 * inner]
    if conv.layout != "separate":
        raise KernelLayoutError(f"unknown layout {conv.layout!r}")
    qk, kk = conv.q_key.format(layer=layer), conv.k_key.format(layer=layer)
    for key in (qk, kk):
        if key not in arc:
            raise KernelLayoutError(f"missing tensor {key!r}")
    Wq, Wk = arc[qk], arc[kk]
    if Wq.shape != Wk.shape or Wq.ndim != 2 or Wq.shape[1] != inner:
        raise KernelLayoutError(f"layer {layer}: Q {Wq.shape} / K {Wk.shape} inconsistent with {H} heads x {dh}")
    return Wq, Wk


def per_head_kernels(arc, convention=None, heads=None):
    """One WeightKernel per (layer, head), in layer-major order."""
    if isinstance(arc, (str, bytes)) or hasattr(arc, "__fspath__"):
        arc = read_archive(arc)
    conv = convention or detect_convention(arc, heads)
    out = []
    for layer in range(conv.n_layers):
        Wq, Wk = _projections(arc, conv, layer)
        dh = conv.d_head[layer]
        for h in range(conv.heads[layer]):
            sl = slice(h * dh, (h + 1) * dh)
            out.append(spectral.weight_kernel(Wq[:, sl], Wk[:, sl], dh, layer=layer, head=h))
    return out


def kernels_from_model(model):
    tensors = {k: p.data for k, p in model.params.items()}
    arc = TensorArchive(tensors=tensors, entries={}, metadata={})
    return per_head_kernels(arc, NamingConvention.toolkit(model.config))


def layer_routing_ranks(kernels):
    """Mean weight-kernel routing effective rank per layer."""
    by_layer = {}
    for k in kernels:
        by_layer.setdefault(k.layer, []).append(spectral.routing_effrank(k.M))
    return [float(np.mean(by_layer[l])) for l in sorted(by_layer)]


# ---------------------------------------------------------------------------
# statistics


def head_statistics(kernels):
    """Per-head stats plus per-layer means (Fig. 1d-style profiles)."""
    stats = []
    for k in kernels:
        d = spectral.decompose(k.M)
        stats.append(HeadStats(
            layer=k.layer,
            head=k.head,
            rho_weight=spectral.rho(d),
            effrank_R_weight=spectral.effective_rank(d.R),
            effrank_F_weight=spectral.effective_rank(d.F),
            max_re_lambda_weight=spectral.max_real_eigenvalue(k.M),
        ))
    return stats, layer_aggregates(stats)


def layer_aggregates(stats):
    layers = sorted({s.layer for s in stats})
    rows = []
    for l in layers:
        group = [s for s in stats if s.layer == l]
        rows.append({
            "layer": l,
            "heads": len(group),
            "mean_rho_weight": float(np.mean([s.rho_weight for s in group])),
            "median_rho_weight": float(np.median([s.rho_weight for s in group])),
            "mean_effrank_R_weight": float(np.mean([s.effrank_R_weight for s in group])),
            "mean_effrank_F_weight": float(np.mean([s.effrank_F_weight for s in group])),
            "mean_max_re_lambda_weight": float(np.mean([s.max_re_lambda_weight for s in group])),
            "frac_unstable": float(np.mean([s.max_re_lambda_weight > 0 for s in group])),
        })
    return rows


class CaptureHook(ScoreHook):
    """Records the unmasked per-head interaction of each layer it is attached to."""

    def __init__(self):
        self.scores = {}

    def standard(self, layer, A):
        self.scores[layer] = np.array(A, dtype=np.float64)

    def sd(self, layer, S, d):
        L = np.array(S, dtype=np.float64)
        n = L.shape[-1]
        idx = np.arange(n)
        L[..., idx, idx] -= d
        self.scores[layer] = L

    def linear(self, layer, phi_q, phi_k):
        self.scores[layer] = np.matmul(phi_q.astype(np.float64), np.swapaxes(phi_k, -1, -2).astype(np.float64))


def capture_scores(model, tokens):
    """{layer: (B, H, n, n) float64} unmasked scores for one forward."""
    cap = CaptureHook()
    model.forward(tokens, hooks={i: cap for i in range(model.config.n_layers)})
    return cap.scores


def sequence_level_report(model, sequences):
    """Average per-head statistics of unmasked scores over token sequences."""
    sums = {}
    for seq in sequences:
        seq = np.asarray(seq)
        if seq.size > model.config.context:
            raise ValueError(f"sequence of {seq.size} tokens exceeds context {model.config.context}")
        scores = capture_scores(model, seq[None, :])
        for layer, A in scores.items():
            for h in range(A.shape[1]):
                rep = spectral.spectral_report(A[0, h])
                acc = sums.setdefault((layer, h), [0.0, 0.0, 0.0, 0.0, 0])
                acc[0] += rep.rho
                acc[1] += rep.effrank_R
                acc[2] += rep.effrank_F
                acc[3] += rep.max_re_lambda
                acc[4] += 1
    out = []
    for (layer, h), (r, er, ef, mr, n) in sorted(sums.items()):
        out.append(SequenceHeadReport(layer, h, r / n, er / n, ef / n, mr / n, n))
    return out


def evaluation_sequences():
    """The six probe sentences shipped with the package, as text."""
    text = resources.files("sdlab").joinpath("data/eval_sequences.txt").read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# serialization


def _fmt(v):
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return v


def stats_rows(stats):
    return [{k: _fmt(v) for k, v in asdict(s).items()} for s in stats]


def write_stats_csv(path, rows, header_lines=()):
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
