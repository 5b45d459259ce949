"""LSTM controller with RESET-gated candidate update and deep-fusion output.

The read vector r enters the gates directly while two near-binary scalar
gates (Gumbel-sigmoid, temperature 0.3) scale the candidate's memory and
previous-hidden contributions. A step reads, updates the state, writes the
new state's projection back to the slot given by the fill-then-tied rule,
and predicts from [h; r].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .addressing import (AddressingParams, discretize, mask_last_read,
                         normalize_usage, read_logits, update_usage)
from .autodiff import Tensor
from .memory import MemoryState, init_memory, read, read_index, select_write_slot, write

RESET_TEMPERATURE = 0.3


@dataclass
class ControllerState:
    h: Tensor
    cell: Tensor


@dataclass
class TardisModel:
    kind: str                 # "tardis" or "lstm"
    d_x: int
    d_h: int
    d_out: int
    output_kind: str          # "categorical" or "bernoulli"
    params: dict
    k: int = 0
    a: int = 0
    d_m: int = 0
    addr_hidden: int = 0
    memory_template: MemoryState = None

    def trainable(self) -> dict:
        return self.params

    def initial_state(self, batch=None) -> ControllerState:
        shape = (self.d_h,) if batch is None else (batch, self.d_h)
        return ControllerState(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def addressing(self) -> AddressingParams:
        p = self.params
        return AddressingParams(p["addr/score"], p["addr/w_hidden"], p["addr/w_input"],
                                p["addr/w_cell"], p["addr/w_usage"], p["addr/bias"],
                                p["addr/temp_w"], p["addr/temp_b"])


def uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape if shape is not None else (fan_in, fan_out))


def _gate_bias(d_h: int) -> np.ndarray:
    b = np.zeros(3 * d_h)
    b[:d_h] = 1.0  # forget gate opens by default
    return b


def init_tardis_model(d_x: int, d_h: int, d_out: int, k: int, a: int, d_m: int,
                      addr_hidden: int, output_kind: str,
                      rng: np.random.Generator) -> TardisModel:
    if d_h <= d_m:
        raise ValueError(f"init_tardis_model: need d_h > d_m, got d_h={d_h} d_m={d_m}")
    q = a + d_m
    p = {}

    def mat(name, fi, fo):
        p[name] = ad.param(uniform_init(rng, fi, fo), name=name)

    def vec(name, n, value=0.0):
        p[name] = ad.param(np.full(n, value), name=name)

    mat("ctrl/gates_h", d_h, 3 * d_h)
    mat("ctrl/gates_x", d_x, 3 * d_h)
    mat("ctrl/gates_r", q, 3 * d_h)
    p["ctrl/gates_b"] = ad.param(_gate_bias(d_h), name="ctrl/gates_b")
    mat("ctrl/cand_h", d_h, d_h)
    mat("ctrl/cand_x", d_x, d_h)
    mat("ctrl/cand_r", q, d_h)
    vec("ctrl/cand_b", d_h)
    mat("ctrl/reset_h", d_h, 2)
    mat("ctrl/reset_x", d_x, 2)
    mat("ctrl/reset_r", q, 2)
    vec("ctrl/reset_b", 2)
    mat("ctrl/fuse_w", d_h + q, d_h)
    vec("ctrl/fuse_b", d_h)
    mat("ctrl/out_w", d_h, d_out)
    vec("ctrl/out_b", d_out)
    mat("ctrl/mem_proj", d_h, d_m)
    mat("addr/w_hidden", d_h, addr_hidden)
    mat("addr/w_input", d_x, addr_hidden)
    mat("addr/w_cell", q, addr_hidden)
    mat("addr/w_usage", k, addr_hidden)
    vec("addr/bias", addr_hidden)
    p["addr/score"] = ad.param(uniform_init(rng, addr_hidden, 1), name="addr/score")
    mat("addr/temp_w", d_h, 1)
    vec("addr/temp_b", 1)
    mat("aux/w_r", d_m, d_out)
    mat("aux/w_x", d_x, d_out)
    vec("aux/b", d_out)

    template = init_memory(k, a, d_m, rng)
    return TardisModel("tardis", d_x, d_h, d_out, output_kind, p,
                       k=k, a=a, d_m=d_m, addr_hidden=addr_hidden,
                       memory_template=template)


def init_lstm_model(d_x: int, d_h: int, d_out: int, output_kind: str,
                    rng: np.random.Generator) -> TardisModel:
    p = {}
    p["ctrl/gates_h"] = ad.param(uniform_init(rng, d_h, 3 * d_h), name="ctrl/gates_h")
    p["ctrl/gates_x"] = ad.param(uniform_init(rng, d_x, 3 * d_h), name="ctrl/gates_x")
    p["ctrl/gates_b"] = ad.param(_gate_bias(d_h), name="ctrl/gates_b")
    p["ctrl/cand_h"] = ad.param(uniform_init(rng, d_h, d_h), name="ctrl/cand_h")
    p["ctrl/cand_x"] = ad.param(uniform_init(rng, d_x, d_h), name="ctrl/cand_x")
    p["ctrl/cand_b"] = ad.param(np.zeros(d_h), name="ctrl/cand_b")
    p["ctrl/fuse_w"] = ad.param(uniform_init(rng, d_h, d_h), name="ctrl/fuse_w")
    p["ctrl/fuse_b"] = ad.param(np.zeros(d_h), name="ctrl/fuse_b")
    p["ctrl/out_w"] = ad.param(uniform_init(rng, d_h, d_out), name="ctrl/out_w")
    p["ctrl/out_b"] = ad.param(np.zeros(d_out), name="ctrl/out_b")
    return TardisModel("lstm", d_x, d_h, d_out, output_kind, p)


def gates(params: dict, h: Tensor, x: Tensor, r: Tensor = None):
    """(forget, input, output) gates, each sigmoid of an affine map."""
    pre = ad.add(ad.matmul(h, params["ctrl/gates_h"]), ad.matmul(x, params["ctrl/gates_x"]))
    if r is not None:
        pre = ad.add(pre, ad.matmul(r, params["ctrl/gates_r"]))
    g = ad.sigmoid(ad.add(pre, params["ctrl/gates_b"]))
    d_h = g.data.shape[-1] // 3
    return (ad.slice_cols(g, 0, d_h),
            ad.slice_cols(g, d_h, 2 * d_h),
            ad.slice_cols(g, 2 * d_h, 3 * d_h))


def reset_gates(params: dict, h: Tensor, x: Tensor, r: Tensor, *, train: bool,
                noise: np.ndarray = None, rng: np.random.Generator = None):
    """Scalar gates (alpha, beta) in (0,1), sharpened by the 0.3 temperature.

    Training perturbs the pre-activation with a Gumbel difference; evaluation
    drops the noise but keeps the sharpening.
    """
    s = ad.add(ad.matmul(h, params["ctrl/reset_h"]), ad.matmul(x, params["ctrl/reset_x"]))
    s = ad.add(s, ad.matmul(r, params["ctrl/reset_r"]))
    s = ad.add(s, params["ctrl/reset_b"])
    if train:
        if noise is None:
            noise = rng.gumbel(size=s.data.shape) - rng.gumbel(size=s.data.shape)
        s = ad.add(s, Tensor(noise))
    g = ad.sigmoid(ad.mul(s, Tensor(1.0 / RESET_TEMPERATURE)))
    return ad.slice_cols(g, 0, 1), ad.slice_cols(g, 1, 2), noise


def cell_update(params: dict, state: ControllerState, x: Tensor, r: Tensor,
                f: Tensor, i: Tensor, o: Tensor, alpha: Tensor = None,
                beta: Tensor = None) -> ControllerState:
    """Candidate with gated memory/hidden paths, then the usual LSTM cell."""
    hid = ad.matmul(state.h, params["ctrl/cand_h"])
    if beta is not None:
        hid = ad.mul(hid, beta)
    cand = ad.add(hid, ad.matmul(x, params["ctrl/cand_x"]))
    if r is not None:
        mem = ad.matmul(r, params["ctrl/cand_r"])
        if alpha is not None:
            mem = ad.mul(mem, alpha)
        cand = ad.add(cand, mem)
    cand = ad.tanh(ad.add(cand, params["ctrl/cand_b"]))
    cell = ad.add(ad.mul(f, state.cell), ad.mul(i, cand))
    h = ad.mul(o, ad.tanh(cell))
    return ControllerState(h, cell)


def predict_logits(params: dict, h: Tensor, r: Tensor = None) -> Tensor:
    fused_in = h if r is None else ad.concat([h, r], axis=-1)
    fused = ad.tanh(ad.add(ad.matmul(fused_in, params["ctrl/fuse_w"]), params["ctrl/fuse_b"]))
    return ad.add(ad.matmul(fused, params["ctrl/out_w"]), params["ctrl/out_b"])


def predict(model: TardisModel, h: Tensor, r: Tensor = None) -> Tensor:
    """Output distribution: softmax over classes or per-bit Bernoulli probs."""
    logits = predict_logits(model.params, h, r)
    if model.output_kind == "bernoulli":
        return ad.sigmoid(logits)
    return ad.softmax(logits)


class FusedStepWeights:
    """Episode-lifetime stacks of the per-source weight blocks.

    One matmul per source (h, x, r) covers the three gates, both RESET gates
    and the candidate's column block; the addressing MLP's h/x/usage maps are
    stacked the same way. Must be built inside the episode's Graph so the
    concat nodes route gradients back to the underlying parameters.
    """

    def __init__(self, params: dict, d_h: int):
        self.d_h = d_h
        self.n_gr = 3 * d_h + 2
        self.h = ad.concat([params["ctrl/gates_h"], params["ctrl/reset_h"],
                            params["ctrl/cand_h"]], axis=-1)
        self.x = ad.concat([params["ctrl/gates_x"], params["ctrl/reset_x"],
                            params["ctrl/cand_x"]], axis=-1)
        self.r = ad.concat([params["ctrl/gates_r"], params["ctrl/reset_r"],
                            params["ctrl/cand_r"]], axis=-1)
        self.bias_gr = ad.concat([params["ctrl/gates_b"], params["ctrl/reset_b"]],
                                 axis=-1)
        self.addr_in = ad.concat([params["addr/w_hidden"], params["addr/w_input"],
                                  params["addr/w_usage"]], axis=0)


def tardis_step(model: TardisModel, state: ControllerState, memory: MemoryState,
                x: Tensor, t: int, mode: str, *, train: bool,
                rng: np.random.Generator = None, gumbel_noise=None,
                frozen_index=None, reset_noise=None, reset_override=None,
                straight_through: bool = True, fused: FusedStepWeights = None,
                need_log_prob: bool = True):
    """One full step: address, read, update state, write, predict.

    t is 1-based. Returns (state', memory', decision, logits, reset_noise, r).
    Computes the same composition as read_logits / mask_last_read /
    discretize / read / gates / reset_gates / cell_update /
    select_write_slot / write / predict, with the affine maps batched
    through `fused` (built on the fly when not supplied).
    """
    if t < 1:
        raise ValueError(f"tardis_step: t must be >= 1, got {t}")
    params = model.params
    d_h = model.d_h
    if fused is None:
        fused = FusedStepWeights(params, d_h)

    # addressing scores: score^T tanh(W_cell M[i] + [h; x; u] @ addr_in + bias)
    usage = normalize_usage(memory.usage_counts)
    rows = memory.full_rows()
    per_cell = ad.matmul(rows, params["addr/w_cell"])
    zin = ad.concat([state.h, x, Tensor(usage)], axis=-1)
    base = ad.add(ad.matmul(zin, fused.addr_in), params["addr/bias"])
    base = ad.reshape(base, base.data.shape[:-1] + (1, base.data.shape[-1]))
    feat = ad.tanh(ad.add(per_cell, base))
    scores = ad.matmul(feat, params["addr/score"])
    logits_raw = ad.reshape(scores, scores.data.shape[:-1])

    logits_masked = mask_last_read(logits_raw, memory.last_read_index)
    decision = discretize(logits_masked, state.h, model.addressing(), mode, rng,
                          gumbel_noise=gumbel_noise, frozen_index=frozen_index,
                          straight_through=straight_through,
                          need_log_prob=need_log_prob)
    update_usage(memory, decision.onehot, decision.index)
    if isinstance(decision.read_weights, Tensor):
        r = read(memory, decision.read_weights)
    else:
        r = read_index(memory, decision.index)

    # gates, RESET gates and candidate from the three stacked products
    hs = ad.matmul(state.h, fused.h)
    xs = ad.matmul(x, fused.x)
    rs = ad.matmul(r, fused.r)
    n_gr = fused.n_gr
    pre = ad.add(ad.add(ad.slice_cols(hs, 0, n_gr), ad.slice_cols(xs, 0, n_gr)),
                 ad.add(ad.slice_cols(rs, 0, n_gr), fused.bias_gr))
    gate_act = ad.sigmoid(ad.slice_cols(pre, 0, 3 * d_h))
    f = ad.slice_cols(gate_act, 0, d_h)
    i = ad.slice_cols(gate_act, d_h, 2 * d_h)
    o = ad.slice_cols(gate_act, 2 * d_h, 3 * d_h)

    noise = None
    if reset_override is not None:
        alpha = Tensor(np.full(f.data.shape[:-1] + (1,), reset_override[0]))
        beta = Tensor(np.full(f.data.shape[:-1] + (1,), reset_override[1]))
    else:
        s = ad.slice_cols(pre, 3 * d_h, n_gr)
        if train:
            noise = reset_noise
            if noise is None:
                noise = rng.gumbel(size=s.data.shape) - rng.gumbel(size=s.data.shape)
            s = ad.add(s, Tensor(noise))
        rg = ad.sigmoid(ad.mul(s, Tensor(1.0 / RESET_TEMPERATURE)))
        alpha = ad.slice_cols(rg, 0, 1)
        beta = ad.slice_cols(rg, 1, 2)

    cand = ad.add(ad.mul(ad.slice_cols(hs, n_gr, n_gr + d_h), beta),
                  ad.slice_cols(xs, n_gr, n_gr + d_h))
    cand = ad.add(cand, ad.mul(ad.slice_cols(rs, n_gr, n_gr + d_h), alpha))
    cand = ad.tanh(ad.add(cand, params["ctrl/cand_b"]))
    cell = ad.add(ad.mul(f, state.cell), ad.mul(i, cand))
    h = ad.mul(o, ad.tanh(cell))
    new_state = ControllerState(h, cell)

    slot = select_write_slot(memory, t, decision.index)
    if t > memory.k:
        assert np.all(np.asarray(slot) == np.asarray(decision.index)), \
            "tied read/write violated after fill"
    new_memory = write(memory, slot, new_state.h, params["ctrl/mem_proj"])

    logits = predict_logits(params, new_state.h, r)
    return new_state, new_memory, decision, logits, noise, r


def lstm_step(model: TardisModel, state: ControllerState, x: Tensor):
    """Plain LSTM step for the baseline; same output head on h alone."""
    params = model.params
    f, i, o = gates(params, state.h, x, r=None)
    new_state = cell_update(params, state, x, None, f, i, o)
    logits = predict_logits(params, new_state.h, None)
    return new_state, logits
