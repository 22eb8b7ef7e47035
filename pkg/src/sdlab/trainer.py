"""AdamW training loop with cascade logging and divergence detection."""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from . import spectral
from .model import InvalidConfigError, Model, forward_loss, perplexity
from .probe import CaptureHook, kernels_from_model, layer_routing_ranks

log = logging.getLogger(__name__)

CONVERGED = "converged"
NAN_DIVERGED = "nan-diverged"
BLOWUP = "blowup"

LOW_RANK_THRESHOLD = 5.0
PROP1_TOL = 1e-8


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient in {name}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6e-4
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.1
    warmup_steps: int = 200
    total_steps: int = 3000
    min_lr_frac: float = 0.1
    batch_size: int = 16
    seed: int = 0
    adam_eps: float = 1e-8
    log_every: int = 100
    rank_log_every: int = 250
    monitor_every: int = 100
    blowup_ref_step: int = 100
    blowup_factor: float = 3.0
    blowup_patience: int = 200

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))

    def problems(self):
        out = []
        if not (self.lr > 0):
            out.append(f"lr: must be > 0 (got {self.lr})")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            out.append(f"betas: need two values in [0, 1) (got {self.betas})")
        if self.weight_decay < 0:
            out.append(f"weight_decay: must be >= 0 (got {self.weight_decay})")
        if self.total_steps < 1:
            out.append(f"total_steps: must be >= 1 (got {self.total_steps})")
        if not (0 <= self.warmup_steps < self.total_steps):
            out.append(f"warmup_steps: must satisfy 0 <= warmup < total_steps (got {self.warmup_steps})")
        if not (0 <= self.min_lr_frac <= 1):
            out.append(f"min_lr_frac: must be in [0, 1] (got {self.min_lr_frac})")
        if self.batch_size < 1:
            out.append(f"batch_size: must be >= 1 (got {self.batch_size})")
        for name in ("log_every", "rank_log_every", "monitor_every"):
            if getattr(self, name) < 1:
                out.append(f"{name}: must be >= 1")
        return out

    def validate(self):
        p = self.problems()
        if p:
            raise InvalidConfigError(p)
        return self


def lr_at(step, cfg):
    """Linear warmup from 0 to peak, then cosine down to min_lr_frac * peak."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    progress = min(1.0, (step - cfg.warmup_steps) / span) if span > 0 else 1.0
    floor = cfg.lr * cfg.min_lr_frac
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, state, lr, betas=(0.9, 0.95), weight_decay=0.1, eps=1e-8, grads=None):
    """One decoupled-weight-decay Adam update, in place.

    ``params`` maps names to tensors; gradients come from ``grads`` when
    given, otherwise from each tensor's ``.grad``. Only matrices decay.
    A non-finite gradient raises before any parameter moves.
    """
    b1, b2 = betas
    gs = {}
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        gs[name] = g
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = gs[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay and p.data.ndim >= 2:
            p.data *= p.data.dtype.type(1.0 - lr * weight_decay)
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= (lr * upd).astype(p.data.dtype, copy=False)
    return state


# ---------------------------------------------------------------------------
# traces and outcomes


@dataclass
class CascadeTrace:
    steps: list = field(default_factory=list)
    layer_ranks: list = field(default_factory=list)

    def record(self, step, ranks):
        if self.steps and step <= self.steps[-1]:
            raise ValueError(f"trace steps must increase ({step} after {self.steps[-1]})")
        self.steps.append(int(step))
        self.layer_ranks.append([float(r) for r in ranks])

    def low_rank_fraction(self, i=-1, threshold=LOW_RANK_THRESHOLD):
        ranks = self.layer_ranks[i]
        return sum(r <= threshold for r in ranks) / len(ranks)

    def layer0(self, i=-1):
        return self.layer_ranks[i][0]

    def rows(self):
        out = []
        for i, (s, ranks) in enumerate(zip(self.steps, self.layer_ranks)):
            row = {"step": s}
            row.update({f"layer{j}": r for j, r in enumerate(ranks)})
            row["low_rank_fraction"] = self.low_rank_fraction(i)
            row["layer0_rank"] = ranks[0]
            out.append(row)
        return out


@dataclass
class RunOutcome:
    status: str
    divergence_step: int = None
    final_val_ppl: float = None
    initial_val_ppl: float = None
    initial_val_loss: float = None
    final_val_loss: float = None
    prop1_checks: int = 0
    prop1_violations: int = 0
    prop1_worst_ratio: float = None
    min_damping: float = None
    loss_curve: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if (self.divergence_step is None) != (self.status == CONVERGED):
            raise ValueError("divergence_step must be set exactly when the run did not converge")

    def to_dict(self):
        d = asdict(self)
        d.pop("loss_curve")
        return d


class DampingCapture(CaptureHook):
    """CaptureHook that also keeps each S-D layer's damping vector."""

    def __init__(self):
        super().__init__()
        self.d = {}

    def sd(self, layer, S, d):
        self.d[layer] = np.array(d)
        super().sd(layer, S, d)


def cascade_profile(model):
    return layer_routing_ranks(kernels_from_model(model))


def prop1_check(model, tokens):
    """(n_checked, n_violations, worst ratio, min d) over every S-D head.

    The ratio is max Re(lambda(L)) / ||L||_2, evaluated in float64.
    """
    sd_layers = [i for i, l in enumerate(model.config.layers) if l.mechanism == "sd"]
    if not sd_layers:
        return 0, 0, None, None

    cap = DampingCapture()
    model.forward(tokens, hooks={i: cap for i in sd_layers})
    checked = viol = 0
    worst = -math.inf
    for layer in sd_layers:
        L = cap.scores[layer].reshape((-1,) + cap.scores[layer].shape[-2:])
        mre = np.atleast_1d(spectral.max_real_eigenvalue(L))
        norms = np.atleast_1d(spectral.spectral_norm(L))
        ratio = mre / np.where(norms > 0, norms, 1.0)
        checked += ratio.size
        viol += int((ratio > PROP1_TOL).sum())
        worst = max(worst, float(ratio.max()))
    min_d = float(min(d.min() for d in cap.d.values()))
    return checked, viol, worst, min_d


# ---------------------------------------------------------------------------
# the loop


def sample_batch(rng, corpus, batch_size, context):
    hi = corpus.size - context - 1
    if hi < 0:
        raise ValueError(f"corpus of {corpus.size} tokens is shorter than context + 1")
    starts = rng.integers(0, hi + 1, size=batch_size)
    return np.stack([corpus[s:s + context + 1] for s in starts])


def train(model, corpus, cfg, eval_corpus=None, callback=None):
    """Run AdamW to ``cfg.total_steps`` or until divergence.

    Returns (model, CascadeTrace, RunOutcome). The model is updated in place.
    """
    cfg.validate()
    corpus = np.asarray(corpus)
    N = model.config.context
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState()
    trace = CascadeTrace()
    trace.record(0, cascade_profile(model))

    init_ppl = init_loss = None
    if eval_corpus is not None:
        init_ppl = perplexity(model, eval_corpus)
        init_loss = math.log(init_ppl)

    curve = []
    status, div_step = CONVERGED, None
    ref_loss, over = None, 0
    checks = viols = 0
    worst, min_d = None, None

    for step in range(1, cfg.total_steps + 1):
        batch = sample_batch(rng, corpus, cfg.batch_size, N)
        lr = lr_at(step, cfg)
        with ag.Tape() as tape:
            loss = forward_loss(model, batch)
        lv = float(loss.data)
        curve.append((step, lv, lr))
        if not math.isfinite(lv):
            status, div_step = NAN_DIVERGED, step
            log.warning("non-finite loss at step %d", step)
            break
        tape.backward(loss)
        del tape
        try:
            adamw_step(model.params, state, lr, cfg.betas, cfg.weight_decay, cfg.adam_eps)
        except NonFiniteGradientError as exc:
            status, div_step = NAN_DIVERGED, step
            log.warning("%s at step %d", exc, step)
            break
        finally:
            for p in model.params.values():
                p.grad = None

        if step == cfg.blowup_ref_step:
            ref_loss = lv
        if ref_loss is not None and lv > cfg.blowup_factor * ref_loss:
            over += 1
            if over >= cfg.blowup_patience:
                status, div_step = BLOWUP, step
                log.warning("loss blow-up at step %d", step)
                break
        else:
            over = 0

        if step % cfg.monitor_every == 0:
            c, v, w, md = prop1_check(model, batch[:1, :-1])
            checks += c
            viols += v
            if w is not None:
                worst = w if worst is None else max(worst, w)
                min_d = md if min_d is None else min(min_d, md)
        if step % cfg.rank_log_every == 0 or step == cfg.total_steps:
            trace.record(step, cascade_profile(model))
        if step % cfg.log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, lv, lr)
        if callback is not None:
            callback(step, lv, model)

    final_ppl = final_loss = None
    if eval_corpus is not None and status == CONVERGED:
        final_ppl = perplexity(model, eval_corpus)
        final_loss = math.log(final_ppl)
    outcome = RunOutcome(
        status=status, divergence_step=div_step,
        final_val_ppl=final_ppl, initial_val_ppl=init_ppl,
        initial_val_loss=init_loss, final_val_loss=final_loss,
        prop1_checks=checks, prop1_violations=viols, prop1_worst_ratio=worst,
        min_damping=min_d, loss_curve=curve,
    )
    return model, trace, outcome


def _sweep_one(args):
    model_cfg, train_cfg, eps, seed, corpus, eval_corpus = args
    from dataclasses import replace

    mc = replace(model_cfg, epsilon=eps, seed=seed)
    tc = replace(train_cfg, seed=seed)
    model = Model.build(mc)
    _, _, outcome = train(model, corpus, tc, eval_corpus=eval_corpus)
    return {
        "epsilon": eps,
        "seed": seed,
        "status": outcome.status,
        "divergence_step": outcome.divergence_step,
        "final_val_ppl": outcome.final_val_ppl,
    }


def epsilon_sweep(model_cfg, train_cfg, epsilons, seeds, corpus, eval_corpus=None, workers=1):
    """One RunOutcome row per (epsilon, seed); each run is fully seeded."""
    epsilons, seeds = list(epsilons), list(seeds)
    if not epsilons:
        raise ValueError("epsilon list is empty")
    if not seeds:
        raise ValueError("seed list is empty")
    bad = [e for e in epsilons if not e >= 0]
    if bad:
        raise InvalidConfigError([f"epsilon: must be >= 0 (got {e})" for e in bad])
    train_cfg.validate()
    jobs = [(model_cfg, train_cfg, e, s, corpus, eval_corpus) for e in epsilons for s in seeds]
    if workers > 1:
        from multiprocessing import get_context

        with get_context("spawn").Pool(workers) as pool:
            return pool.map(_sweep_one, jobs)
    return [_sweep_one(j) for j in jobs]
