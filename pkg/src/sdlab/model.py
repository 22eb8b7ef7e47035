"""Decoder-only toy transformers assembled from per-layer specs.

Byte-level (vocab 256) by default. Pre-LN blocks when a layer's
``layer_norm`` flag is on; with every flag off the network has no
normalization anywhere, including before the logits.
"""
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from .attention import DEFAULT_EPSILON, MECHANISMS, attention_layer_forward

INIT_STD = 0.02


class InvalidConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class LayerSpec:
    mechanism: str = "sd"
    heads: int = 4
    d_head: int = 32
    layer_norm: bool = False

    @property
    def inner(self):
        return self.heads * self.d_head


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    context: int = 256
    layers: tuple = field(default_factory=lambda: tuple(LayerSpec() for _ in range(4)))
    ffn_mult: int = 4
    tie_weights: bool = True
    epsilon: float = DEFAULT_EPSILON
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers))

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def final_norm(self):
        return any(l.layer_norm for l in self.layers)

    def problems(self):
        out = []
        if self.vocab_size < 1:
            out.append(f"vocab_size: must be >= 1 (got {self.vocab_size})")
        if self.d_model < 1:
            out.append(f"d_model: must be >= 1 (got {self.d_model})")
        if self.context < 2:
            out.append(f"context: must be >= 2 (got {self.context})")
        if not self.layers:
            out.append("layers: must be non-empty")
        if self.ffn_mult < 1:
            out.append(f"ffn_mult: must be >= 1 (got {self.ffn_mult})")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            out.append(f"epsilon: must be a finite value >= 0 (got {self.epsilon})")
        for i, l in enumerate(self.layers):
            if l.mechanism not in MECHANISMS:
                out.append(f"layers[{i}].mechanism: {l.mechanism!r} not in {MECHANISMS}")
            if l.heads < 1 or l.d_head < 1:
                out.append(f"layers[{i}]: heads and d_head must be >= 1")
            elif l.inner > 4 * self.d_model:
                out.append(f"layers[{i}]: heads*d_head = {l.inner} exceeds 4*d_model")
        return out

    def validate(self):
        p = self.problems()
        if p:
            raise InvalidConfigError(p)
        return self

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [asdict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**l) for l in d.get("layers", ()))
        return cls(**d)


def uniform_config(mechanism="sd", n_layers=4, heads=4, d_head=32, layer_norm=False, **kw):
    spec = LayerSpec(mechanism=mechanism, heads=heads, d_head=d_head, layer_norm=layer_norm)
    return ModelConfig(layers=tuple(spec for _ in range(n_layers)), **kw)


def _param_shapes(cfg):
    D, V, N = cfg.d_model, cfg.vocab_size, cfg.context
    shapes = OrderedDict()
    shapes["tok_emb"] = (V, D)
    shapes["pos_emb"] = (N, D)
    for i, l in enumerate(cfg.layers):
        p = f"layers.{i}."
        if l.layer_norm:
            shapes[p + "ln1.g"] = (D,)
            shapes[p + "ln1.b"] = (D,)
        for w in ("w_q", "w_k", "w_v"):
            shapes[p + "attn." + w] = (D, l.inner)
        shapes[p + "attn.w_o"] = (l.inner, D)
        if l.mechanism == "sd":
            shapes[p + "attn.w_d"] = (D, l.heads)
            shapes[p + "attn.b_d"] = (l.heads,)
        if l.layer_norm:
            shapes[p + "ln2.g"] = (D,)
            shapes[p + "ln2.b"] = (D,)
        shapes[p + "ffn.w1"] = (D, cfg.ffn_mult * D)
        shapes[p + "ffn.b1"] = (cfg.ffn_mult * D,)
        shapes[p + "ffn.w2"] = (cfg.ffn_mult * D, D)
        shapes[p + "ffn.b2"] = (D,)
    if cfg.final_norm:
        shapes["ln_f.g"] = (D,)
        shapes["ln_f.b"] = (D,)
    if not cfg.tie_weights:
        shapes["lm_head"] = (D, V)
    return shapes


ATTN_WEIGHTS = ("w_q", "w_k", "w_v", "w_o")


def parameter_shapes(config):
    """Name -> shape table that ``Model.build`` allocates from."""
    return _param_shapes(config)


def _is_attn_weight(name):
    return name.startswith("layers.") and name.rsplit(".", 1)[-1] in ATTN_WEIGHTS


def config_census(config):
    """Parameter counts implied by a config, without allocating anything."""
    shapes = _param_shapes(config)
    size = {k: math.prod(s) for k, s in shapes.items()}
    return {
        "total": sum(size.values()),
        "attention_weights": sum(v for k, v in size.items() if _is_attn_weight(k)),
        "damping": sum(v for k, v in size.items() if k.endswith(("attn.w_d", "attn.b_d"))),
    }


class Model:
    def __init__(self, config, params):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, config, seed=None):
        config.validate()
        seed = config.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        params = OrderedDict()
        for name, shape in _param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "g":
                arr = np.ones(shape, dtype=np.float32)
            elif len(shape) == 1:  # biases, LN shifts, damping biases
                arr = np.zeros(shape, dtype=np.float32)
            else:
                arr = rng.standard_normal(shape, dtype=np.float32) * np.float32(INIT_STD)
            params[name] = ag.parameter(arr, name=name)
        return cls(replace(config, seed=seed), params)

    def layer_params(self, i):
        p = f"layers.{i}.attn."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    # -- census -------------------------------------------------------------

    def n_parameters(self):
        return sum(p.size for p in self.params.values())

    def attention_weight_census(self):
        """Stored values in the four attention projections (weights only)."""
        return sum(p.size for k, p in self.params.items() if _is_attn_weight(k))

    def damping_param_census(self):
        return sum(p.size for k, p in self.params.items() if k.endswith(("attn.w_d", "attn.b_d")))

    # -- forward ------------------------------------------------------------

    def _block_norm(self, x, i, which):
        g = self.params[f"layers.{i}.{which}.g"]
        b = self.params[f"layers.{i}.{which}.b"]
        return ag.layer_norm(x, g, b)

    def forward(self, tokens, hooks=None):
        """tokens (B, n) ints -> logits Tensor (B*n, vocab)."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        B, n = tokens.shape
        cfg = self.config
        if n > cfg.context:
            raise ValueError(f"sequence length {n} exceeds context {cfg.context}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise IndexError(f"token out of range [0, {cfg.vocab_size})")
        D = cfg.d_model
        pos = np.broadcast_to(np.arange(n), (B, n))
        x = ag.add(ag.embedding(self.params["tok_emb"], tokens), ag.embedding(self.params["pos_emb"], pos))
        for i, spec in enumerate(cfg.layers):
            h = self._block_norm(x, i, "ln1") if spec.layer_norm else x
            hook = hooks.get(i) if hooks else None
            x = ag.add(x, attention_layer_forward(h, self.layer_params(i), spec, cfg.epsilon, hook=hook, layer=i))
            h = self._block_norm(x, i, "ln2") if spec.layer_norm else x
            x = ag.add(x, self._ffn(h, i, B, n))
        if cfg.final_norm:
            x = ag.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        x2 = ag.reshape(x, (B * n, D))
        head = ag.transpose(self.params["tok_emb"]) if cfg.tie_weights else self.params["lm_head"]
        return ag.matmul(x2, head)

    def _ffn(self, h, i, B, n):
        p = f"layers.{i}.ffn."
        D = self.config.d_model
        h2 = ag.reshape(h, (B * n, D))
        u = ag.gelu(ag.add(ag.matmul(h2, self.params[p + "w1"]), self.params[p + "b1"]))
        o = ag.add(ag.matmul(u, self.params[p + "w2"]), self.params[p + "b2"])
        return ag.reshape(o, (B, n, D))

    def token_nll(self, inputs, targets, hooks=None):
        """Per-position NLL (float64 array shaped like targets); no tape."""
        targets = np.asarray(targets)
        if targets.ndim == 1:
            targets = targets[None, :]
        logits = self.forward(inputs, hooks=hooks).data.astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        t = targets.reshape(-1)
        return (lse - z[np.arange(t.size), t]).reshape(targets.shape)


def forward_loss(model, batch, hooks=None):
    """Mean next-token cross entropy for a (B, n+1) token batch."""
    batch = np.asarray(batch)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.size and batch.max() >= model.config.vocab_size:
        raise IndexError(f"token out of range [0, {model.config.vocab_size})")
    logits = model.forward(batch[:, :-1], hooks=hooks)
    return ag.cross_entropy(logits, batch[:, 1:].reshape(-1))


def build(config, seed=None):
    return Model.build(config, seed)


# ---------------------------------------------------------------------------
# overlapping-stride perplexity


def stride_windows(n_tokens, context, stride):
    """(begin, first_scored_offset) pairs covering every target exactly once.

    A window feeds tokens[begin:begin+context] and predicts
    tokens[begin+1:begin+context+1]; only offsets >= first_scored count.
    """
    if stride < 1 or stride > context:
        raise ValueError(f"stride must be in [1, context={context}], got {stride}")
    last_target = n_tokens - 1
    if last_target < 1:
        raise ValueError("corpus needs at least two tokens")
    if last_target <= context:
        return [(0, 0)], last_target
    windows = []
    next_target = 1
    b = 0
    while True:
        if b + context > last_target:
            b = last_target - context
        windows.append((b, next_target - (b + 1)))
        next_target = b + context + 1
        if next_target > last_target:
            break
        b += stride
    return windows, context


def perplexity(model, corpus, stride=None, batch_size=16, hooks=None, return_nll=False):
    """exp(total NLL / scored tokens) with overlapping windows.

    The first window scores every position; each later window scores only
    the positions it adds. ``stride`` defaults to context/2.
    """
    tokens = np.asarray(corpus)
    N = model.config.context
    stride = N // 2 if stride is None else stride
    windows, length = stride_windows(tokens.size, N, stride)
    total, count = 0.0, 0
    for s in range(0, len(windows), batch_size):
        chunk = windows[s:s + batch_size]
        inp = np.stack([tokens[b:b + length] for b, _ in chunk])
        tgt = np.stack([tokens[b + 1:b + length + 1] for b, _ in chunk])
        nll = model.token_nll(inp, tgt, hooks=hooks)
        for row, (_, first) in zip(nll, chunk):
            total += float(row[first:].sum())
            count += length - first
    ppl = math.exp(total / count)
    if return_nll:
        return ppl, total, count
    return ppl
