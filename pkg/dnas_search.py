"""
The search loop: multi-sample stochastic gradient steps on
L_task + λ·L_E, projection of every π onto the exploration set
{π : max π ≤ 1/K + ξ}, rejection sampling and periodic mask refresh.

All randomness of a step is drawn up front in a fixed order (coin flips from
one stream, Gumbel noise from one stream per MC-sample index), so results do
not depend on how many workers evaluate the samples.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
from scipy import optimize
from tqdm import tqdm

import tensor_engine as te
from data_io import BatchIterator
from data_io import MetricsWriter
from data_io import atomic_write_json
from data_io import load_checkpoint
from data_io import make_stream
from data_io import rng_state
from data_io import save_checkpoint
from data_io import set_rng_state
from errors import ConfigError
from errors import InfeasibleTargetError
from errors import NonFiniteError
from optim import make_optimizer
from schedules import Schedule
from search_space import PROBABILITY_FLOOR
from search_space import extract_argmax_config
from search_space import gumbel_softmax_batch
from search_space import gumbel_softmax_sample
from search_space import one_hot
from search_space import refresh_masks
from search_space import ste_forward
from size_model import constraint_regularizer
from size_model import dense8_bits
from size_model import estimate_config
from size_model import network_size
from size_model import space_bounds
from supernet import build_supernet
from supernet import flatten_inputs

logger = logging.getLogger(__name__)

T_BRACKET = (1.0, 1e6)
T_XTOL = 1e-8
T_RTOL = 4 * np.finfo(float).eps
T_MAXITER = 200

REGULARIZERS = ("sample", "expected")


# ----------------------------
# Projection onto the exploration set
# ----------------------------

def _max_entry(logits: np.ndarray, temperature: float) -> float:
    z = logits / temperature
    e = np.exp(z - z.max())
    return float((e / e.sum()).max())


def solve_temperature(logits, xi: float) -> float:
    """
    Smallest T ≥ 1 with max softmax(logits / T) ≤ 1/K + ξ, found by bisection.
    Returns 1.0 when already feasible and inf when only the uniform vector is.
    """
    if xi < 0:
        raise ValueError(f"exploration bound must be >= 0, got {xi}")
    logits = np.asarray(logits, dtype=np.float64)
    bound = 1.0 / logits.size + xi
    if logits.size == 1 or _max_entry(logits, 1.0) <= bound:
        return 1.0
    if xi == 0 or _max_entry(logits, T_BRACKET[1]) > bound:
        return math.inf

    def excess(t):
        return _max_entry(logits, t) - bound

    t = optimize.bisect(excess, *T_BRACKET, xtol=T_XTOL, rtol=T_RTOL, maxiter=T_MAXITER)
    # bisect returns within tolerance of the root, possibly on the infeasible side
    t += 2 * (T_XTOL + T_RTOL * t)
    while excess(t) > 0:
        t *= 1.0 + 1e-12
    return t


def project_logits(logits, xi: float) -> np.ndarray:
    """softmax(log π / T) in logit space is just logits / T."""
    logits = np.asarray(logits, dtype=np.float64)
    t = solve_temperature(logits, xi)
    if math.isinf(t):
        return np.zeros_like(logits)
    if t == 1.0:
        return logits.copy()
    return logits / t


def project_pi(pi, xi: float) -> np.ndarray:
    """P_S(π) = softmax(log π / T*); π already inside the set comes back unchanged."""
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 1 or np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
        raise ValueError(f"not a probability vector: {pi}")
    logits = np.log(np.maximum(pi, PROBABILITY_FLOOR))
    t = solve_temperature(logits, xi)
    if t == 1.0 and pi.max() <= 1.0 / pi.size + xi:
        return pi.copy()
    if math.isinf(t):
        return np.full(pi.size, 1.0 / pi.size)
    z = logits / t
    e = np.exp(z - z.max())
    return e / e.sum()


def exploration_bound(zeta: float, k: int) -> float:
    """ξ_j = ζ·(1 − 1/K_j): ζ = 0 forces uniform π, ζ = 1 leaves π free."""
    return zeta * (1.0 - 1.0 / k)


# ----------------------------
# Rejection sampling
# ----------------------------

@dataclass
class RejectionSample:
    sample: te.Tensor
    accepted: int
    drawn: int

    @property
    def fallback(self) -> bool:
        return self.accepted == 0


def rejection_sample(pi, tau: float, samples: int, rng=None, noise=None) -> RejectionSample:
    """
    Average of the Gumbel-softmax draws whose argmax equals argmax π.
    No accepted draw: a constant one-hot at argmax π.
    """
    if samples < 1:
        raise ValueError(f"rejection sampling needs at least one draw, got {samples}")
    pi = te.as_tensor(pi)
    k = pi.shape[0]
    if noise is None:
        noise = rng.gumbel(size=(samples, k))
    noise = np.asarray(noise, dtype=np.float64)
    k_star = int(np.argmax(pi.data))
    draws = gumbel_softmax_batch(pi, tau, noise)
    accepted = np.flatnonzero(np.argmax(draws.data, axis=1) == k_star)
    if accepted.size == 0:
        return RejectionSample(one_hot(k_star, k), 0, samples)
    return RejectionSample(te.mean(te.take(draws, accepted), axis=0), int(accepted.size), samples)


# ----------------------------
# Targets
# ----------------------------

def resolve_target(target: dict, net) -> tuple[float, str]:
    """(e*, cost kind) from the `target` config section."""
    given = [k for k in ("bytes", "bits", "fraction_of_dense8", "macs") if target.get(k) is not None]
    if len(given) != 1:
        raise ConfigError("target", f"give exactly one of bytes, bits, fraction_of_dense8, macs (got {given})")
    key = given[0]
    value = float(target[key])
    if value <= 0:
        raise ConfigError(f"target.{key}", f"must be positive, got {value}")
    if key == "bytes":
        return 8.0 * value, "compressed-bits"
    if key == "bits":
        return value, "compressed-bits"
    if key == "macs":
        return value, "mac-count"
    return value * dense8_bits(net.layers, net.input_channels), "compressed-bits"


# ----------------------------
# Search state
# ----------------------------

@dataclass
class SearchState:
    net: object
    target: float
    cost: str
    settings: dict
    theta_opt: object
    pi_opt: object
    coin_rng: np.random.Generator
    sample_rngs: list
    batches: BatchIterator
    schedules: dict
    warmup_steps: int
    total_steps: int
    step: int = 0

    @property
    def samples(self) -> int:
        return len(self.sample_rngs)

    @property
    def lam(self) -> float:
        return float(self.settings["lambda"])

    @property
    def in_warmup(self) -> bool:
        return self.step < self.warmup_steps

    def search_step_index(self) -> int:
        return max(self.step - self.warmup_steps, 0)

    def state_dict(self) -> tuple[dict, dict]:
        tensors = {name: p.data for name, p in self.net.parameters().items()}
        tensors.update({name: p.data for name, p in self.net.architecture_parameters().items()})
        tensors.update({f"opt_theta/{k}": v for k, v in self.theta_opt.state_dict().items()})
        tensors.update({f"opt_pi/{k}": v for k, v in self.pi_opt.state_dict().items()})
        betas = {}
        for layer in self.net.layers:
            for op, branch in layer.branches.items():
                for i, m in enumerate(branch.masks):
                    tensors[f"mask/{layer.name}.{op}.{i}"] = m
                betas[f"{layer.name}.{op}"] = branch.quant.beta
        batch_tensors, batch_meta = self.batches.state_dict()
        tensors.update({f"batches/{k}": v for k, v in batch_tensors.items()})
        meta = {
            "kind": "search",
            "step": self.step,
            "betas": betas,
            "coin_rng": rng_state(self.coin_rng),
            "sample_rngs": [rng_state(r) for r in self.sample_rngs],
            "batches": batch_meta,
        }
        return tensors, meta

    def load_state_dict(self, tensors: dict, meta: dict):
        for name, p in {**self.net.parameters(), **self.net.architecture_parameters()}.items():
            p.data = np.array(tensors[name])
        self.theta_opt.load_state_dict(_strip(tensors, "opt_theta/"))
        self.pi_opt.load_state_dict(_strip(tensors, "opt_pi/"))
        for layer in self.net.layers:
            for op, branch in layer.branches.items():
                branch.masks = [np.array(tensors[f"mask/{layer.name}.{op}.{i}"])
                                for i in range(len(layer.sparsity.options))]
                branch.mask_counts = [int(m.sum()) for m in branch.masks]
                branch.quant.beta = float(meta["betas"][f"{layer.name}.{op}"])
        self.batches.load_state_dict(_strip(tensors, "batches/"), meta["batches"])
        set_rng_state(self.coin_rng, meta["coin_rng"])
        for r, state in zip(self.sample_rngs, meta["sample_rngs"]):
            set_rng_state(r, state)
        self.step = int(meta["step"])


def _strip(tensors: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def init_search_state(cfg: dict, net, data, target: float, cost: str) -> SearchState:
    settings = cfg["search"]
    seed = cfg["seed"]
    samples = int(settings["samples"])
    batches = BatchIterator(data.x_train, data.y_train, settings["batch_size"], make_stream(seed, "data"),
                            flip=settings.get("flip", False), crop_pad=settings.get("crop_pad", 0))
    spe = batches.steps_per_epoch
    warmup_steps = int(settings["warmup_epochs"]) * spe // samples
    search_steps = max(1, int(settings["epochs"]) * spe // samples)
    total = warmup_steps + search_steps
    schedules = {
        "tau": Schedule.from_dict(settings["tau"], search_steps),
        "exploitation": Schedule.from_dict(settings["exploitation"], search_steps),
        "theta_mix": Schedule.from_dict(settings["theta_mix"], search_steps),
        "lr_theta": Schedule.from_dict(settings["lr_theta"], total),
        "lr_pi": Schedule.from_dict(settings["lr_pi"], search_steps),
    }
    theta_opt = make_optimizer(settings.get("theta_optimizer", "sgd"), net.parameters(),
                               schedules["lr_theta"].value(0), weight_decay=settings["weight_decay"],
                               momentum=settings.get("momentum", 0.9),
                               decay_filter=lambda name: name.endswith(".theta"))
    pi_opt = make_optimizer("adam", net.architecture_parameters(), schedules["lr_pi"].value(0))
    return SearchState(
        net=net, target=target, cost=cost, settings=settings, theta_opt=theta_opt, pi_opt=pi_opt,
        coin_rng=make_stream(seed, "coin"),
        sample_rngs=[make_stream(seed, "sample", s) for s in range(samples)],
        batches=batches, schedules=schedules, warmup_steps=warmup_steps, total_steps=total,
    )


# ----------------------------
# One step
# ----------------------------

@dataclass
class _Draws:
    gumbel: list  # per layer: {kind: (K,)}
    rejection: list  # per layer: {kind: (R, K)} or None
    use_tilde: list  # per layer: {kind: bool}


@dataclass
class _SampleGraph:
    task: te.Tensor
    size: te.Tensor
    accepted: int = 0
    drawn: int = 0


def _draw(state: SearchState, theta_mix: float) -> list[_Draws]:
    layers = state.net.layers
    rejection = state.settings.get("rejection", True)
    r = int(state.settings.get("rejection_samples", 16))
    n_decisions = sum(len(layer.decisions) for layer in layers)
    coins = state.coin_rng.random((state.samples, n_decisions)) < theta_mix
    draws = []
    for s, rng in enumerate(state.sample_rngs):
        gumbel, rej, tilde = [], [], []
        j = 0
        for layer in layers:
            g, rn, t = {}, {}, {}
            for d in layer.decisions:
                g[d.kind] = rng.gumbel(size=len(d))
                rn[d.kind] = rng.gumbel(size=(r, len(d))) if rejection else None
                t[d.kind] = bool(rejection and coins[s, j])
                j += 1
            gumbel.append(g)
            rej.append(rn)
            tilde.append(t)
        draws.append(_Draws(gumbel, rej, tilde))
    return draws


def _build_samples(layers, draws: _Draws, tau: float):
    samples, accepted, drawn = [], 0, 0
    for li, layer in enumerate(layers):
        z = {}
        for d in layer.decisions:
            pi = d.pi()
            if draws.use_tilde[li][d.kind]:
                res = rejection_sample(pi, tau, draws.rejection[li][d.kind].shape[0],
                                       noise=draws.rejection[li][d.kind])
                accepted += res.accepted
                drawn += res.drawn
                raw = res.sample
            else:
                raw = gumbel_softmax_sample(pi, tau, noise=draws.gumbel[li][d.kind])
            z[d.kind] = ste_forward(raw, d.kappa)
        samples.append(z)
    return samples, accepted, drawn


def task_loss(net, out, y):
    if net.task == "classification":
        return te.cross_entropy_loss(out, y)
    return te.mse_loss(out, y)


def _forward_sample(state: SearchState, draws: _Draws, batch, tau: float) -> _SampleGraph:
    net = state.net
    samples, accepted, drawn = _build_samples(net.layers, draws, tau)
    x, y = batch
    out = net.forward(flatten_inputs(net, x), samples)
    size, _ = network_size(net.layers, samples, net.input_channels, state.cost)
    return _SampleGraph(task_loss(net, out, y), size, accepted, drawn)


def _diagnose(net, step: int) -> str:
    for name, p in {**net.parameters(), **net.architecture_parameters()}.items():
        if not p.is_finite():
            return f"step {step}, {name}"
    return f"step {step}, task loss"


def _map(state: SearchState, fn, items):
    workers = int(state.settings.get("workers", 1))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _decision_stats(net) -> dict:
    stats = {}
    for d in net.decisions():
        p = d.probs
        stats[f"maxpi:{d.name}"] = float(p.max())
        nz = p[p > 0]
        stats[f"entropy:{d.name}"] = float(-(nz * np.log2(nz)).sum())
    return stats


def search_step(state: SearchState) -> dict:
    net = state.net
    t = state.step
    warm = state.in_warmup
    k = state.search_step_index()
    tau = state.schedules["tau"].value(k)
    zeta = state.schedules["exploitation"].value(k)
    theta_mix = 0.0 if warm else state.schedules["theta_mix"].value(k)

    if t % int(state.settings.get("mask_refresh_every", 16)) == 0:
        for layer in net.layers:
            refresh_masks(layer)

    draws = _draw(state, theta_mix)
    batches = [next(state.batches) for _ in range(state.samples)]
    graphs = _map(state, lambda s: _forward_sample(state, draws[s], batches[s], tau), range(state.samples))

    # the size term is |E - e*| per sample, or linearized around the sample mean in expectation mode
    target = state.target
    scale = target if state.settings.get("normalize", True) else 1.0
    mode = state.settings.get("regularizer", "sample")
    mean_size = float(np.mean([g.size.item() for g in graphs]))
    sign = 1.0 if mean_size >= target else -1.0

    theta_params = net.parameters()
    pi_params = {} if warm else net.architecture_parameters()
    params = {**theta_params, **pi_params}

    def backward_sample(g: _SampleGraph):
        if mode == "expected":
            reg = te.divide(te.multiply(te.subtract(g.size, target), sign), scale)
        else:
            reg = constraint_regularizer([g.size], target, normalize=scale != 1.0)
        loss = te.add(g.task, te.multiply(reg, state.lam))
        try:
            grads = te.gradients(loss, params)
        except NonFiniteError as e:
            raise NonFiniteError(_diagnose(net, t), e.detail) from None
        return grads, g.task.item(), reg.item()

    results = _map(state, backward_sample, graphs)
    merged = {
        name: te.tree_reduce([r[0][name] for r in results]) / state.samples for name in params
    }

    state.theta_opt.lr = state.schedules["lr_theta"].value(t)
    state.theta_opt.step({n: merged[n] for n in theta_params})
    if not warm:
        state.pi_opt.lr = state.schedules["lr_pi"].value(k)
        state.pi_opt.step({n: merged[n] for n in pi_params})
        if state.settings.get("projection", True):
            for d in net.decisions():
                d.logits.data = project_logits(d.logits.data, exploration_bound(zeta, len(d)))

    for name, p in params.items():
        if not p.is_finite():
            raise NonFiniteError(f"step {t}, {name}", "non-finite value after the update")

    state.step += 1
    accepted = sum(g.accepted for g in graphs)
    drawn = sum(g.drawn for g in graphs)
    argmax = estimate_config(net.layers, extract_argmax_config(net.layers), net.input_channels, target, state.cost)
    widest = max(len(d) for d in net.decisions())
    metrics = {
        "step": t,
        "phase": "warmup" if warm else "search",
        "L_task": float(np.mean([r[1] for r in results])),
        "L_E": float(np.mean([r[2] for r in results])),
        "E_argmax": argmax.total,
        "E_sample_mean": mean_size,
        "tau": tau,
        "zeta": zeta,
        "xi": exploration_bound(zeta, widest),
        "theta_mix": theta_mix,
        "acceptance": accepted / drawn if drawn else float("nan"),
    }
    metrics.update(_decision_stats(net))
    return metrics


# ----------------------------
# Full run
# ----------------------------

@dataclass
class SearchResult:
    net: object
    config: list
    estimate: object
    target: float
    cost: str
    history: list = field(default_factory=list)
    state: SearchState | None = None


METRIC_FIELDS = ["step", "phase", "L_task", "L_E", "E_argmax", "E_sample_mean", "tau", "zeta", "xi", "theta_mix",
                 "acceptance"]


def metric_fields(net) -> list:
    fields = list(METRIC_FIELDS)
    for d in net.decisions():
        fields += [f"maxpi:{d.name}", f"entropy:{d.name}"]
    return fields


def check_feasible(net, target: float, cost: str) -> dict:
    bounds = space_bounds(net.layers, net.input_channels, cost)
    if target < bounds["min"]:
        raise InfeasibleTargetError(target, bounds["min"], "bits" if cost == "compressed-bits" else "MACs")
    return bounds


def run_search(cfg: dict, data, out_dir=None, resume=None, config_hash: str = "", progress: bool = True,
               net=None) -> SearchResult:
    """Warmup (θ only, π uniform) followed by the search proper; returns γ(π) and its size."""
    settings = cfg["search"]
    if settings.get("regularizer", "sample") not in REGULARIZERS:
        raise ConfigError("search.regularizer", f"expected one of {REGULARIZERS}")
    if net is None:
        net = build_supernet(cfg["space"], data.input_shape, data.num_outputs, data.task,
                             rng=make_stream(cfg["seed"], "init"))
    target, cost = resolve_target(cfg["target"], net)
    bounds = check_feasible(net, target, cost)
    logger.info("search target %.1f (%s); achievable range [%.1f, %.1f]", target, cost, bounds["min"], bounds["max"])

    state = init_search_state(cfg, net, data, target, cost)
    out_dir = Path(out_dir) if out_dir else None
    if resume:
        tensors, meta = load_checkpoint(resume, config_hash or None)
        state.load_state_dict(tensors, meta)
        logger.info("resumed search at step %d", state.step)

    writer = MetricsWriter(out_dir / "search_metrics.csv", metric_fields(net)) if out_dir else None
    every = int(settings.get("checkpoint_every", 0))
    log_every = int(settings.get("log_every", 50))
    history = []
    with tqdm(total=state.total_steps, initial=state.step, desc="search", disable=not progress) as bar:
        while state.step < state.total_steps:
            metrics = search_step(state)
            history.append(metrics)
            if writer:
                writer.write(metrics)
            if metrics["step"] % log_every == 0:
                logger.info("step %d %s: L_task=%.4f L_E=%.4f E(argmax)=%.1f", metrics["step"], metrics["phase"],
                            metrics["L_task"], metrics["L_E"], metrics["E_argmax"])
            if out_dir and every and state.step % every == 0:
                save_checkpoint(out_dir / "search.ckpt", *state.state_dict(), config_hash)
            bar.update(1)

    config = extract_argmax_config(net.layers)
    estimate = estimate_config(net.layers, config, net.input_channels, target, cost)
    if out_dir:
        save_checkpoint(out_dir / "search.ckpt", *state.state_dict(), config_hash)
        atomic_write_json(out_dir / "arch.json", {"layers": config, "estimate": estimate.as_dict()})
    return SearchResult(net, config, estimate, target, cost, history, state)


# ----------------------------
# Measurements at fixed π
# ----------------------------

def _fixed_probs(layers, xi):
    return [
        {d.kind: (d.probs if xi is None else project_pi(d.probs, min(xi, 1.0 - 1.0 / len(d))))
         for d in layer.decisions}
        for layer in layers
    ]


def measure_relaxed_regularizer(layers, input_channels: int, target: float, tau: float, xi: float | None = None,
                                theta_mix: float = 0.0, draws: int = 200, rng=None, rejection_samples: int = 16,
                                cost: str = "compressed-bits", normalize: bool = True) -> float:
    """
    Mean of |E(z) - e*| over relaxed samples z at the current π (projected
    with ξ when given), with no top-κ truncation. Noise consumption does not
    depend on τ, ξ or ϑ, so cells sharing a seed share their noise.
    """
    probs = _fixed_probs(layers, xi)
    total = 0.0
    for _ in range(draws):
        samples = []
        for layer, p in zip(layers, probs):
            z = {}
            for d in layer.decisions:
                g = rng.gumbel(size=len(d))
                rej = rng.gumbel(size=(rejection_samples, len(d)))
                coin = rng.random()
                if coin < theta_mix:
                    z[d.kind] = rejection_sample(p[d.kind], tau, rejection_samples, noise=rej).sample
                else:
                    z[d.kind] = gumbel_softmax_sample(p[d.kind], tau, noise=g)
            samples.append(z)
        size, _ = network_size(layers, samples, input_channels, cost)
        gap = abs(size.item() - target)
        total += gap / target if normalize else gap
    return total / draws


def gradient_variance(layers, input_channels: int, target: float, tau: float, draws: int = 200, rng=None,
                      cost: str = "compressed-bits", normalize: bool = True) -> float:
    """Mean per-coordinate variance of ∂L_E/∂logits over independent relaxed samples."""
    params = {}
    for layer in layers:
        params.update(layer.architecture_parameters())
    rows = []
    for _ in range(draws):
        samples = [
            {d.kind: gumbel_softmax_sample(d.pi(), tau, noise=rng.gumbel(size=len(d))) for d in layer.decisions}
            for layer in layers
        ]
        size, _ = network_size(layers, samples, input_channels, cost)
        reg = constraint_regularizer([size], target, normalize=normalize)
        grads = te.gradients(reg, params)
        rows.append(np.concatenate([grads[n].reshape(-1) for n in params]))
    return float(np.var(np.stack(rows), axis=0).mean())
