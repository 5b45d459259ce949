"""Losses, gradient estimators for the discrete reads, and the update loop.

Two estimator families drive the read decisions:
  * REINFORCE (Eq.-16 style): discounted centered returns weight the log
    probability of each sampled read; rewards are either the per-step
    prediction log-likelihood or the auxiliary read-only head's
    log-likelihood, with a per-position EMA baseline and variance
    normalization of the advantages.
  * Gumbel straight-through: the soft weights carry the gradient, so the
    task loss alone trains everything.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor, backward
from .controller import TardisModel, lstm_step, tardis_step
from .rng import substream
from .tasks import Task, TaskBatch

LOG_EPS = 1e-12

ADDRESSING_FOR_MODE = {
    "reinforce-aux": "reinforce-sample",
    "reinforce-R": "reinforce-sample",
    "gumbel-st": "gumbel-st",
    "lstm-baseline": None,
}
REWARD_FOR_MODE = {
    "reinforce-aux": "aux",
    "reinforce-R": "loglik",
    "gumbel-st": None,
    "lstm-baseline": None,
}


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite; carries a batch dump."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


# ---------------------------------------------------------------------------
# episode unroll


@dataclass
class EpisodeFreeze:
    """Recorded draws that make an episode replayable as a pure function."""

    read_indices: list
    gumbel_noises: list
    reset_noises: list


@dataclass
class EpisodeTrace:
    decisions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)      # Tensor (B,) per step
    step_nll: list = field(default_factory=list)       # detached (B,) values
    rewards: np.ndarray = None                         # (B, T)
    mask: np.ndarray = None
    read_indices: list = field(default_factory=list)
    gumbel_noises: list = field(default_factory=list)
    reset_noises: list = field(default_factory=list)
    write_values: list = field(default_factory=list)   # Tensors, collect mode
    step_logits: np.ndarray = None                     # (B, T, d_out), collect mode

    def freeze(self) -> EpisodeFreeze:
        return EpisodeFreeze(list(self.read_indices), list(self.gumbel_noises),
                             list(self.reset_noises))


@dataclass
class EpisodeResult:
    task_loss: Tensor          # per-unit mean over scored (example, step[, bit])
    aux_loss: Tensor           # same normalization, None without the aux head
    trace: EpisodeTrace
    scored_units: float


def _bernoulli_nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Summed per-bit cross-entropy, stable softplus form: sum softplus(z) - y z."""
    y = Tensor(targets)
    per_bit = ad.add(ad.softplus(logits), ad.mul(ad.mul(logits, y), Tensor(-1.0)))
    return ad.tsum(per_bit, axis=-1)


def run_episode(model: TardisModel, batch: TaskBatch, addressing_mode: str, *,
                train: bool, seed: int = 0, tag: str = "ep", reward_kind=None,
                with_aux: bool = False, freeze: EpisodeFreeze = None,
                reset_override=None, straight_through: bool = True,
                autoregressive: bool = False, collect: bool = False) -> EpisodeResult:
    """Unroll the model over one batch of sequences.

    `freeze` replays previously recorded reads and noises (gradient checks),
    `autoregressive` feeds the previous argmax back through the feedback
    channels (stroke evaluation), `collect` keeps per-step logits and write
    values for probes.
    """
    B, T, _ = batch.inputs.shape
    tardis = model.kind == "tardis"
    state = model.initial_state(B)
    memory = model.memory_template.fresh(B) if tardis else None

    rng_read = substream(seed, f"{tag}/read-sample")
    rng_gumbel = substream(seed, f"{tag}/gumbel-noise")
    rng_reset = substream(seed, f"{tag}/reset-noise")

    inputs = batch.inputs.copy() if autoregressive else batch.inputs
    fb_start = batch.meta.get("feedback_start") if autoregressive else None
    fb_channels = batch.meta.get("feedback_channels")

    bernoulli = model.output_kind == "bernoulli"
    n_bits = batch.targets.shape[-1]
    trace = EpisodeTrace(rewards=np.zeros((B, T)), mask=batch.mask)
    if collect:
        trace.step_logits = np.zeros((B, T, model.d_out))

    total = Tensor(0.0)
    aux_total = Tensor(0.0) if (with_aux and tardis) else None
    prev_argmax = None

    for t in range(T):
        x_np = inputs[:, t, :]
        if fb_start is not None and prev_argmax is not None:
            rows = np.nonzero(t >= fb_start)[0]
            if rows.size:
                lo, hi = fb_channels
                x_np[rows, lo:hi] = 0.0
                x_np[rows, lo + prev_argmax[rows]] = 1.0
        x = Tensor(x_np)

        if tardis:
            gumbel_noise = frozen_index = reset_noise = None
            if freeze is not None:
                frozen_index = freeze.read_indices[t]
                gumbel_noise = freeze.gumbel_noises[t]
                reset_noise = freeze.reset_noises[t]
            else:
                if addressing_mode == "gumbel-st":
                    gumbel_noise = rng_gumbel.gumbel(size=(B, memory.k))
                if train and reset_override is None:
                    shape = (B, 2)
                    reset_noise = rng_reset.gumbel(size=shape) - rng_reset.gumbel(size=shape)
            state, memory, decision, logits, reset_noise, r = tardis_step(
                model, state, memory, x, t + 1, addressing_mode, train=train,
                rng=rng_read, gumbel_noise=gumbel_noise, frozen_index=frozen_index,
                reset_noise=reset_noise, reset_override=reset_override,
                straight_through=straight_through)
            trace.decisions.append(decision)
            trace.log_probs.append(decision.log_prob)
            trace.read_indices.append(decision.index)
            trace.gumbel_noises.append(gumbel_noise)
            trace.reset_noises.append(reset_noise)
            if collect:
                trace.write_values.append(memory.content)
        else:
            state, logits = lstm_step(model, state, x)
            r = None

        m = batch.mask[:, t]
        if m.any():
            if bernoulli:
                ce = _bernoulli_nll(logits, batch.targets[:, t, :])
            else:
                ce = ad.cross_entropy_with_softmax(logits, Tensor(batch.targets[:, t, :]))
            total = ad.add(total, ad.tsum(ad.mul(ce, Tensor(m))))
            trace.step_nll.append(ce.data * m)
            if reward_kind == "loglik":
                trace.rewards[:, t] = -ce.data * m
            if aux_total is not None:
                r_content = Tensor(r.data[..., model.a:])  # detached read content
                aux_logits = ad.add(ad.matmul(r_content, model.params["aux/w_r"]),
                                    ad.matmul(x, model.params["aux/w_x"]))
                aux_logits = ad.add(aux_logits, model.params["aux/b"])
                if bernoulli:
                    aux_ce = _bernoulli_nll(aux_logits, batch.targets[:, t, :])
                else:
                    aux_ce = ad.cross_entropy_with_softmax(
                        aux_logits, Tensor(batch.targets[:, t, :]))
                aux_total = ad.add(aux_total, ad.tsum(ad.mul(aux_ce, Tensor(m))))
                if reward_kind == "aux":
                    trace.rewards[:, t] = -aux_ce.data * m
        else:
            trace.step_nll.append(np.zeros(B))

        if collect:
            trace.step_logits[:, t] = logits.data
        if autoregressive:
            prev_argmax = logits.data.argmax(axis=-1)

    scored = float(batch.mask.sum()) * (n_bits if bernoulli else 1)
    scored = max(scored, 1.0)
    task_loss = ad.mul(total, Tensor(1.0 / scored))
    aux_loss = ad.mul(aux_total, Tensor(1.0 / scored)) if aux_total is not None else None
    return EpisodeResult(task_loss, aux_loss, trace, scored)


# ---------------------------------------------------------------------------
# losses and estimators


def nll_loss(predictions, targets, mask, kind: str = "categorical") -> float:
    """Mean negative log-likelihood over scored (example, step) pairs.

    `predictions` are probabilities; zero probabilities are clamped at 1e-12.
    The bernoulli variant averages per bit.
    """
    p = np.clip(np.asarray(predictions, dtype=np.float64), LOG_EPS, 1.0)
    y = np.asarray(targets, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if kind == "categorical":
        per_step = -(y * np.log(p)).sum(axis=-1)
        units = m.sum()
    elif kind == "bernoulli":
        q = np.clip(1.0 - np.asarray(predictions, dtype=np.float64), LOG_EPS, 1.0)
        per_step = -(y * np.log(p) + (1.0 - y) * np.log(q)).sum(axis=-1)
        units = m.sum() * y.shape[-1]
    else:
        raise ValueError(f"nll_loss: unknown kind {kind!r}")
    if units == 0:
        return 0.0
    return float((per_step * m).sum() / units)


def discounted_advantages(rewards, baselines, gamma: float) -> np.ndarray:
    """A_t = sum_{j>=t} gamma^(j-t) (R_j - b_j), by a reverse-pass recursion."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"discounted_advantages: gamma must be in [0,1], got {gamma}")
    R = np.asarray(rewards, dtype=np.float64)
    T = R.shape[-1]
    b = np.broadcast_to(np.asarray(baselines, dtype=np.float64), (T,))
    out = np.zeros_like(R)
    trailing = 0.0
    for t in range(T - 1, -1, -1):
        trailing = (R[..., t] - b[t]) + gamma * trailing
        out[..., t] = trailing
    return out


def reinforce_surrogate(log_probs, advantages: np.ndarray) -> Tensor:
    """-mean_batch sum_t A_t log w[a_t]; advantages enter as constants."""
    A = np.asarray(advantages, dtype=np.float64)
    if A.ndim == 1:
        A = A[None, :]
    B = A.shape[0]
    total = Tensor(0.0)
    for t, logp in enumerate(log_probs):
        total = ad.add(total, ad.tsum(ad.mul(logp, Tensor(-A[:, t] / B))))
    return total


class RewardBaseline:
    """Per-position exponential moving average of rewards, frozen within a batch."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.values = np.zeros(0)

    def _grow(self, T: int):
        if self.values.shape[0] < T:
            self.values = np.concatenate([self.values, np.zeros(T - self.values.shape[0])])

    def baselines(self, T: int) -> np.ndarray:
        self._grow(T)
        return self.values[:T].copy()

    def update(self, rewards: np.ndarray):
        R = np.asarray(rewards, dtype=np.float64)
        T = R.shape[-1]
        self._grow(T)
        batch_mean = R.reshape(-1, T).mean(axis=0)
        self.values[:T] = self.decay * self.values[:T] + (1.0 - self.decay) * batch_mean


class VarianceNormalizer:
    """Scale advantages by max(running std, 1); stats updated after use."""

    def __init__(self, decay: float = 0.99):
        self.decay = decay
        self.mean = 0.0
        self.mean_sq = 0.0

    @property
    def variance(self) -> float:
        return max(self.mean_sq - self.mean ** 2, 0.0)

    def normalize(self, advantages: np.ndarray) -> np.ndarray:
        scaled = advantages / max(np.sqrt(self.variance), 1.0)
        self.update(advantages)
        return scaled

    def update(self, advantages: np.ndarray):
        a = np.asarray(advantages, dtype=np.float64).ravel()
        if a.size == 0:
            return
        self.mean = self.decay * self.mean + (1.0 - self.decay) * a.mean()
        self.mean_sq = self.decay * self.mean_sq + (1.0 - self.decay) * (a ** 2).mean()


def auxiliary_reward(r_detached: np.ndarray, x: np.ndarray, y: np.ndarray,
                     params: dict, kind: str = "categorical") -> Tensor:
    """Log-likelihood of y from the detached read content and the input alone.

    Maximizing it trains only the read-only head; the episode sees the value
    purely as a reward scalar.
    """
    logits = ad.add(ad.matmul(Tensor(np.asarray(r_detached)), params["aux/w_r"]),
                    ad.matmul(Tensor(np.asarray(x)), params["aux/w_x"]))
    logits = ad.add(logits, params["aux/b"])
    if kind == "bernoulli":
        nll = _bernoulli_nll(logits, np.asarray(y))
    else:
        nll = ad.cross_entropy_with_softmax(logits, Tensor(np.asarray(y)))
    return ad.mul(nll, Tensor(-1.0))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict, lr: float = 3e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float = 1.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def gradients(self) -> dict:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.params.items()}

    def step(self):
        grads = self.gradients()
        if self.clip_norm and self.clip_norm > 0:
            norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = {k: g * scale for k, g in grads.items()}
        self.step_count += 1
        correct1 = 1.0 - self.beta1 ** self.step_count
        correct2 = 1.0 - self.beta2 ** self.step_count
        for k, t in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / correct1
            v_hat = self.v[k] / correct2
            t.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            t.grad = None


# ---------------------------------------------------------------------------
# evaluation and the training loop


def evaluate(model: TardisModel, task: Task, seed: int, n_examples: int = 256, *,
             batch_size: int = 64, length=None, with_aux: bool = False,
             stream: str = "data/valid") -> dict:
    """Deterministic argmax-mode evaluation; returns the task's metric(s)."""
    rng = substream(seed, stream if length is None else f"{stream}/len{length}")
    totals = {"nll": 0.0, "units": 0.0, "aux_nll": 0.0}
    digit_errors, digit_total = 0, 0
    done = 0
    while done < n_examples:
        b = min(batch_size, n_examples - done)
        kwargs = {"length": length} if (length is not None and task.name == "copy") else {}
        batch = task.valid_sample(b, rng) if not kwargs else task.sample(b, rng, **kwargs)
        autoregressive = task.name == "stroke-digits"
        res = run_episode(model, batch, "argmax" if model.kind == "tardis" else None,
                          train=False, seed=seed, tag=f"{stream}/{done}",
                          with_aux=with_aux and model.kind == "tardis",
                          autoregressive=autoregressive, collect=autoregressive)
        totals["nll"] += float(res.task_loss.data) * res.scored_units
        totals["units"] += res.scored_units
        if with_aux and res.aux_loss is not None:
            totals["aux_nll"] += float(res.aux_loss.data) * res.scored_units
        if autoregressive:
            starts = batch.meta["pred_start"]
            labels = batch.meta["labels"]
            n_digits = labels.shape[1]
            for row in range(b):
                steps = np.arange(starts[row], starts[row] + n_digits)
                pred = res.trace.step_logits[row, steps].argmax(axis=-1)
                digit_errors += int((pred != labels[row]).sum())
                digit_total += n_digits
        done += b
    out = {"bce" if model.output_kind == "bernoulli" else "nll":
           totals["nll"] / max(totals["units"], 1.0)}
    if with_aux:
        out["aux_" + ("bce" if model.output_kind == "bernoulli" else "nll")] = \
            totals["aux_nll"] / max(totals["units"], 1.0)
    if digit_total:
        out["per_digit_error"] = digit_errors / digit_total
    return out


def _metric_value(metrics: dict, task: Task) -> float:
    if task.metric_name == "per_digit_error":
        return metrics["per_digit_error"]
    return metrics.get("bce", metrics.get("nll"))


@dataclass
class TrainResult:
    model: TardisModel
    metrics: list
    steps_run: int
    best_valid: float
    stopped_early: bool


def train_run(config, *, task: Task = None, metrics_sink=None,
              model: TardisModel = None) -> TrainResult:
    """Run the update loop for `config`; emits one metrics dict per interval."""
    from .config import build_model, build_task  # deferred: config imports tasks

    seed = config.seed
    if task is None:
        task = build_task(config)
    if model is None:
        model = build_model(config, task)
    addressing_mode = ADDRESSING_FOR_MODE[config.mode]
    reward_kind = REWARD_FOR_MODE[config.mode]
    reinforce = reward_kind is not None
    with_aux = config.mode == "reinforce-aux"

    opt = Adam(model.params, lr=config.lr, clip_norm=config.clip_norm)
    baseline = RewardBaseline()
    normalizer = VarianceNormalizer()

    metrics = []
    best = float("inf")
    since_best = 0
    stopped = False
    loss_accum, loss_n = 0.0, 0
    t0 = time.monotonic()

    for step in range(1, config.budget + 1):
        batch = task.sample(config.batch, substream(seed, f"data/train/{step}"))
        with Graph():
            res = run_episode(model, batch, addressing_mode, train=True, seed=seed,
                              tag=f"ep/{step}", reward_kind=reward_kind,
                              with_aux=with_aux)
            loss = res.task_loss
            if with_aux:
                loss = ad.add(loss, res.aux_loss)
            if reinforce:
                T = res.trace.rewards.shape[1]
                adv = discounted_advantages(res.trace.rewards,
                                            baseline.baselines(T), config.gamma)
                adv = normalizer.normalize(adv)
                baseline.update(res.trace.rewards)
                loss = ad.add(loss, reinforce_surrogate(res.trace.log_probs, adv))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise DivergenceError(
                    f"non-finite loss {loss_val} at step {step}",
                    dump={"step": step, "task": task.name, "mode": config.mode,
                          "seed": seed,
                          "batch_inputs_absmax": float(np.abs(batch.inputs).max()),
                          "rewards": res.trace.rewards.tolist()})
            backward(loss)
        opt.step()
        loss_accum += float(res.task_loss.data)
        loss_n += 1

        if step % config.eval_interval == 0 or step == config.budget:
            valid = evaluate(model, task, seed, n_examples=config.valid_examples)
            metric = _metric_value(valid, task)
            record = {"step": step, "mode": config.mode, "task": task.name,
                      "train_loss": loss_accum / max(loss_n, 1),
                      "valid_metric": metric,
                      "wall_time_s": time.monotonic() - t0, "seed": seed}
            metrics.append(record)
            if metrics_sink:
                metrics_sink(record)
            loss_accum, loss_n = 0.0, 0
            if metric < best - 1e-12:
                best = metric
                since_best = 0
            else:
                since_best += 1
            if config.early_stop_target is not None and metric <= config.early_stop_target:
                stopped = True
                break
            if config.patience and since_best >= config.patience:
                stopped = True
                break

    return TrainResult(model, metrics, step, best, stopped)
