"""Prebuilt gradient-check scenarios: op battery, controller step, full episodes."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .controller import init_tardis_model
from .gradcheck import GradCheckReport, check_gradients
from .rng import substream
from .tasks import gen_copy
from .training import run_episode

FULL_STEP_DIMS = dict(d_x=3, d_h=8, d_out=4, k=3, a=2, d_m=4, addr_hidden=6)
FULL_STEP_T = 6


def _linear_probe(x: Tensor, rng) -> Tensor:
    w = Tensor(rng.normal(size=x.data.shape))
    return ad.tsum(ad.mul(x, w))


def check_ops(seed: int = 0, h: float = 1e-5) -> dict:
    """Finite-difference every primitive op on random inputs in [-2, 2]."""
    rng = substream(seed, "opcheck")

    def rand(*shape, low=-2.0, high=2.0):
        return ad.param(rng.uniform(low, high, size=shape))

    cases = {}

    def case(name, builder, **params):
        cases[name] = (builder, params)

    case("matmul", lambda p, r: _linear_probe(ad.matmul(p["x"], p["w"]), r),
         x=rand(3, 4), w=rand(4, 5))
    case("matmul-vec", lambda p, r: _linear_probe(ad.matmul(p["w"], p["x"]), r),
         w=rand(3, 4), x=rand(4))
    case("add", lambda p, r: _linear_probe(ad.add(p["a"], p["b"]), r),
         a=rand(3, 4), b=rand(4))
    case("mul", lambda p, r: _linear_probe(ad.mul(p["a"], p["b"]), r),
         a=rand(3, 4), b=rand(3, 1))
    case("tanh", lambda p, r: _linear_probe(ad.tanh(p["x"]), r), x=rand(3, 4))
    case("sigmoid", lambda p, r: _linear_probe(ad.sigmoid(p["x"]), r), x=rand(3, 4))
    case("softplus", lambda p, r: _linear_probe(ad.softplus(p["x"]), r), x=rand(3, 4))
    case("softmax", lambda p, r: _linear_probe(ad.softmax(p["x"]), r), x=rand(3, 5))
    case("log", lambda p, r: _linear_probe(ad.log(p["x"]), r),
         x=rand(3, 4, low=0.5, high=2.5))
    case("exp", lambda p, r: _linear_probe(ad.exp(p["x"]), r), x=rand(3, 4))
    case("concat", lambda p, r: _linear_probe(ad.concat([p["a"], p["b"]]), r),
         a=rand(3, 2), b=rand(3, 4))
    case("slice", lambda p, r: _linear_probe(ad.slice_cols(p["x"], 1, 4), r),
         x=rand(3, 5))
    case("gather-row", lambda p, r: _linear_probe(ad.gather_rows(p["m"], np.array([2, 0])), r),
         m=rand(2, 4, 3))
    case("scatter-row",
         lambda p, r: _linear_probe(ad.scatter_rows(p["m"], np.array([1, 3]), p["v"]), r),
         m=rand(2, 4, 3), v=rand(2, 3))
    case("weighted-rows", lambda p, r: _linear_probe(ad.weighted_rows(p["m"], p["w"]), r),
         m=rand(4, 3), w=rand(2, 4))
    case("sum", lambda p, r: ad.tsum(p["x"]), x=rand(3, 4))
    case("mean", lambda p, r: _linear_probe(ad.tmean(p["x"], axis=-1), r), x=rand(3, 4))
    case("reshape", lambda p, r: _linear_probe(ad.reshape(p["x"], (4, 3)), r), x=rand(3, 4))

    target = rng.uniform(size=(3, 5))
    target /= target.sum(axis=-1, keepdims=True)
    case("cross-entropy-with-softmax",
         lambda p, r: ad.tsum(ad.cross_entropy_with_softmax(p["x"], Tensor(target))),
         x=rand(3, 5))

    results = {}
    for name, (builder, params) in cases.items():
        # the probe weights must be identical on every call for the FD sweep
        report = check_gradients(
            lambda b=builder, p=params, n=name: b(p, substream(seed, f"opcheck/{n}/probe")),
            params, h=h)
        results[name] = report.max_rel_err
    return results


def _episode_loss_fn(model, batch, mode, seed, freeze, straight_through=True):
    def fn():
        res = run_episode(model, batch, mode, train=True, seed=seed, tag="gradcheck",
                          freeze=freeze, straight_through=straight_through)
        return res.task_loss

    return fn


def _small_model_and_batch(seed: int, batch_size: int = 2):
    dims = FULL_STEP_DIMS
    model = init_tardis_model(dims["d_x"], dims["d_h"], dims["d_out"], dims["k"],
                              dims["a"], dims["d_m"], dims["addr_hidden"],
                              "categorical", substream(seed, "gradcheck/init"))
    rng = substream(seed, "gradcheck/data")
    T = FULL_STEP_T
    inputs = rng.uniform(-1, 1, size=(batch_size, T, dims["d_x"]))
    labels = rng.integers(0, dims["d_out"], size=(batch_size, T))
    targets = np.zeros((batch_size, T, dims["d_out"]))
    for b in range(batch_size):
        targets[b, np.arange(T), labels[b]] = 1.0
    mask = np.ones((batch_size, T))
    from .tasks import TaskBatch

    return model, TaskBatch(inputs, targets, mask, {"task": "gradcheck"})


def check_full_step(seed: int = 0, h: float = 1e-5, corrupt: bool = False,
                    mode: str = "reinforce-sample") -> GradCheckReport:
    """Episode gradcheck with reads and noises frozen to recorded draws."""
    model, batch = _small_model_and_batch(seed)
    straight_through = mode != "gumbel-soft"
    addressing = "gumbel-st" if mode == "gumbel-soft" else mode
    first = run_episode(model, batch, addressing, train=True, seed=seed,
                        tag="gradcheck", straight_through=straight_through)
    freeze = first.trace.freeze()
    fn = _episode_loss_fn(model, batch, addressing, seed, freeze,
                          straight_through=straight_through)
    return check_gradients(fn, model.params, h=h, corrupt=corrupt)


def check_gumbel_soft(seed: int = 0, h: float = 1e-5, corrupt: bool = False) -> GradCheckReport:
    """Gumbel path with frozen noise, differentiating the soft forward."""
    return check_full_step(seed, h=h, corrupt=corrupt, mode="gumbel-soft")


def check_controller(seed: int = 0, h: float = 1e-5, corrupt: bool = False) -> GradCheckReport:
    """Single step: frozen read, frozen reset noise, cross-entropy on the output."""
    from .controller import tardis_step

    model, batch = _small_model_and_batch(seed, batch_size=1)
    rng = substream(seed, "gradcheck/ctrl")
    x = batch.inputs[:, 0, :]
    target = batch.targets[:, 0, :]
    reset_noise = rng.gumbel(size=(1, 2)) - rng.gumbel(size=(1, 2))

    def fn():
        state = model.initial_state(1)
        memory = model.memory_template.fresh(1)
        state, memory, _, logits, _, _ = tardis_step(
            model, state, memory, Tensor(x), 1, "reinforce-sample", train=True,
            frozen_index=np.zeros(1, dtype=np.intp), reset_noise=reset_noise)
        return ad.tsum(ad.cross_entropy_with_softmax(logits, Tensor(target)))

    return check_gradients(fn, model.params, h=h, corrupt=corrupt)


def run_scope(scope: str, seed: int = 0, corrupt: bool = False) -> dict:
    """Named gradcheck entry points used by the CLI. Returns name -> max rel err."""
    if scope == "ops":
        return check_ops(seed)
    if scope == "controller":
        return check_controller(seed, corrupt=corrupt).per_param
    if scope == "full-step":
        return check_full_step(seed, corrupt=corrupt).per_param
    if scope == "gumbel-st":
        return check_gumbel_soft(seed, corrupt=corrupt).per_param
    raise ValueError(f"gradcheck: unknown scope {scope!r}")
