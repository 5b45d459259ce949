"""External memory: fixed random sparse address section, writable content section.

A memory is k cells of width a+c. Addresses are frozen at init; the content
rows are graph tensors so gradients reach whatever was written. Writes are
functional: every write yields a new content tensor, keeping all versions
alive for backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class MemoryState:
    k: int
    a: int
    c: int
    addresses: np.ndarray            # (k, a), never changes after init
    content: Tensor                  # (k, c) or (batch, k, c)
    usage_counts: np.ndarray = None  # (k,) or (batch, k) one-hot read tallies
    write_cursor: int = 0            # next sequential slot while filling
    last_read_index: object = None   # int or (batch,) ints, None before first read

    def __post_init__(self):
        if self.usage_counts is None:
            lead = self.content.data.shape[:-2]
            self.usage_counts = np.zeros(lead + (self.k,))

    @property
    def width(self) -> int:
        return self.a + self.c

    def fresh(self, batch=None) -> "MemoryState":
        """New episode state over the same frozen addresses."""
        shape = (self.k, self.c) if batch is None else (batch, self.k, self.c)
        return MemoryState(self.k, self.a, self.c, self.addresses,
                           Tensor(np.zeros(shape)))

    def record_read(self, onehot: np.ndarray, index):
        self.usage_counts = self.usage_counts + onehot
        self.last_read_index = index

    def full_rows(self) -> Tensor:
        """(..., k, a+c) tensor of [address; content] rows."""
        lead = self.content.data.shape[:-2]
        cached = getattr(self, "_addr_tensor", None)
        if cached is None or cached.data.shape[:-2] != lead:
            addr = np.broadcast_to(self.addresses, lead + self.addresses.shape)
            cached = Tensor(np.ascontiguousarray(addr))
            self._addr_tensor = cached
        return ad.concat([cached, self.content], axis=-1)


def init_memory(k: int, a: int, c: int, rng: np.random.Generator,
                batch=None) -> MemoryState:
    """Zero content plus one frozen random sparse address row per cell.

    Each address row has exactly ceil(a/4) nonzeros, placed uniformly, with
    values drawn from {-1, +1}.
    """
    if k < 1 or a < 1 or c < 1:
        raise ValueError(f"init_memory: dimensions must be positive, got k={k} a={a} c={c}")
    n_nonzero = -(-a // 4)
    addresses = np.zeros((k, a))
    for row in range(k):
        cols = rng.choice(a, size=n_nonzero, replace=False)
        addresses[row, cols] = rng.choice([-1.0, 1.0], size=n_nonzero)
    shape = (k, c) if batch is None else (batch, k, c)
    return MemoryState(k, a, c, addresses, Tensor(np.zeros(shape)))


def _validate_onehot(w: np.ndarray, k: int):
    w = np.asarray(w)
    if w.shape[-1] != k:
        raise ad.ShapeError(f"read: weights shape {w.shape} vs {k} cells")
    ones = (w == 1.0).sum(axis=-1)
    zeros = (w == 0.0).sum(axis=-1)
    if not ((ones == 1) & (zeros == k - 1)).all():
        raise ValueError("read: weights must be one-hot in discrete mode")


def read(memory: MemoryState, w) -> Tensor:
    """r = [A[i]; C[i]] for the hot cell i.

    `w` may be a plain one-hot array (discrete read, validated) or a Tensor
    carrying straight-through weights, in which case the gradient flows into
    the weights as well as the content.
    """
    if isinstance(w, Tensor):
        wt = w
    else:
        _validate_onehot(w, memory.k)
        wt = Tensor(w)
    addr_part = ad.weighted_rows(Tensor(memory.addresses), wt)
    content_part = ad.weighted_rows(memory.content, wt)
    return ad.concat([addr_part, content_part], axis=-1)


def read_index(memory: MemoryState, index) -> Tensor:
    """Row read by index; cheaper than one-hot mixing when w carries no gradient."""
    content_part = ad.gather_rows(memory.content, index)
    if np.isscalar(index) or np.asarray(index).ndim == 0:
        addr = memory.addresses[int(index)]
    else:
        addr = memory.addresses[np.asarray(index, dtype=np.intp)]
    return ad.concat([Tensor(np.array(addr)), content_part], axis=-1)


def write(memory: MemoryState, index, h: Tensor, projection: Tensor) -> MemoryState:
    """New state whose content row `index` holds h @ projection.

    Addresses are untouched; gradient reaches both the projection and h.
    The fill cursor advances when the sequential slot was the target.
    """
    arr = np.asarray(index)
    if arr.size and ((arr < 0).any() or (arr >= memory.k).any()):
        raise IndexError(f"write: index {index} out of range for {memory.k} cells")
    value = ad.matmul(h, projection)
    if value.data.shape[-1] != memory.c:
        raise ad.ShapeError(
            f"write: projected width {value.data.shape[-1]} vs content width {memory.c}")
    new_content = ad.scatter_rows(memory.content, index, value)
    cursor = memory.write_cursor
    if cursor < memory.k and arr.ndim == 0 and int(arr) == cursor:
        cursor += 1
    state = MemoryState(memory.k, memory.a, memory.c, memory.addresses, new_content,
                        usage_counts=memory.usage_counts,
                        write_cursor=cursor,
                        last_read_index=memory.last_read_index)
    cached = getattr(memory, "_addr_tensor", None)
    if cached is not None:
        state._addr_tensor = cached
    return state


def select_write_slot(memory: MemoryState, t: int, read_idx):
    """Slot t-1 during the sequential fill (t is 1-based), then the read slot."""
    if t <= memory.k:
        if memory.write_cursor != t - 1:
            raise RuntimeError(
                f"select_write_slot: cursor {memory.write_cursor} out of step with t={t}")
        return t - 1
    return read_idx
