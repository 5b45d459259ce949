"""Synthetic sequence tasks: copy, associative recall, stroke digit sequences.

Copy and recall follow the usual external-memory benchmark layout: binary
items, a delimiter channel, loss masked to the answer phase. The stroke task
feeds unit pen offsets (dx, dy, end-of-stroke, end-of-digit quadruples) for a
few glyphs, then a begin-output marker, after which the digit labels are
predicted one per step with the previous digit fed back.

Stroke files are CSV: one "dx,dy,eos,eod" quadruple per line, a "# digit N"
header line before each digit, and a blank line between digits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_DIGIT_CLASSES = 10
STROKE_CHANNELS = 4            # dx, dy, eos, eod
BOS_CHANNEL = STROKE_CHANNELS  # begin-output marker
FEEDBACK_OFFSET = STROKE_CHANNELS + 1
STROKE_INPUT_WIDTH = FEEDBACK_OFFSET + N_DIGIT_CLASSES


@dataclass
class TaskBatch:
    inputs: np.ndarray    # (batch, T, d_x)
    targets: np.ndarray   # (batch, T, d_out)
    mask: np.ndarray      # (batch, T), 1 exactly where a prediction is scored
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# copy


def gen_copy(max_len: int, n_bits: int, batch: int, rng: np.random.Generator,
             length: int = None) -> TaskBatch:
    """Random bits, a delimiter, then reproduce the bits while input is silent."""
    lengths = (np.full(batch, length, dtype=np.intp) if length is not None
               else rng.integers(1, max_len + 1, size=batch))
    horizon = 2 * int(lengths.max()) + 1
    inputs = np.zeros((batch, horizon, n_bits + 1))
    targets = np.zeros((batch, horizon, n_bits))
    mask = np.zeros((batch, horizon))
    for b in range(batch):
        n = int(lengths[b])
        bits = rng.integers(0, 2, size=(n, n_bits)).astype(np.float64)
        inputs[b, :n, :n_bits] = bits
        inputs[b, n, n_bits] = 1.0
        targets[b, n + 1:2 * n + 1] = bits
        mask[b, n + 1:2 * n + 1] = 1.0
    return TaskBatch(inputs, targets, mask, {"task": "copy", "lengths": lengths})


# ---------------------------------------------------------------------------
# associative recall


def gen_assoc_recall(n_items: int, item_len: int, n_bits: int, batch: int,
                     rng: np.random.Generator) -> TaskBatch:
    """Delimited random items, a query item, answer is the item that followed it."""
    if n_items < 2:
        raise ValueError(f"gen_assoc_recall: need n_items >= 2, got {n_items}")
    d_x = n_bits + 2
    horizon = n_items * (item_len + 1) + 1 + item_len + 1 + item_len
    inputs = np.zeros((batch, horizon, d_x))
    targets = np.zeros((batch, horizon, n_bits))
    mask = np.zeros((batch, horizon))
    queries = np.zeros(batch, dtype=np.intp)
    for b in range(batch):
        items = rng.integers(0, 2, size=(n_items, item_len, n_bits)).astype(np.float64)
        t = 0
        for j in range(n_items):
            inputs[b, t, n_bits] = 1.0
            t += 1
            inputs[b, t:t + item_len, :n_bits] = items[j]
            t += item_len
        q = int(rng.integers(0, n_items - 1))
        queries[b] = q
        inputs[b, t, n_bits + 1] = 1.0
        t += 1
        inputs[b, t:t + item_len, :n_bits] = items[q]
        t += item_len
        inputs[b, t, n_bits + 1] = 1.0
        t += 1
        targets[b, t:t + item_len] = items[q + 1]
        mask[b, t:t + item_len] = 1.0
    return TaskBatch(inputs, targets, mask,
                     {"task": "assoc-recall", "queries": queries})


# ---------------------------------------------------------------------------
# stroke digits

def _trace_polyline(points) -> list:
    """Unit offsets along the polyline; both offsets stay in {-1, 0, 1}."""
    moves = []
    x, y = points[0]
    for nx, ny in points[1:]:
        while (x, y) != (nx, ny):
            dx = int(np.sign(nx - x))
            dy = int(np.sign(ny - y))
            moves.append((dx, dy))
            x += dx
            y += dy
    return moves


_GLYPH_POLYLINES = {
    0: [(0, 0), (4, 2), (6, 6), (6, 13), (4, 16), (0, 17), (-4, 16), (-6, 13),
        (-6, 6), (-4, 2), (0, 0)],
    1: [(0, 0), (6, 6), (6, -20), (1, -20)],
    2: [(0, 0), (2, 2), (8, 3), (11, 1), (11, -3), (0, -12), (0, -14), (12, -14)],
    3: [(0, 0), (5, 2), (9, -1), (9, -7), (3, -10), (9, -13), (9, -19), (5, -22),
        (0, -21)],
    4: [(0, 0), (-2, -8), (6, -8), (6, 2), (6, -14)],
    5: [(0, 0), (-10, 0), (-10, -8), (-3, -7), (0, -10), (0, -14), (-3, -17),
        (-10, -16)],
    6: [(0, 0), (-4, -3), (-8, -9), (-9, -14), (-6, -18), (-2, -17), (0, -13),
        (-3, -10), (-7, -11), (-9, -14)],
    7: [(0, 0), (12, 0), (12, -2), (5, -12), (2, -22)],
    8: [(0, 0), (4, -4), (0, -11), (-4, -4), (0, 0), (-4, 4), (0, 11), (4, 4), (0, 0)],
    9: [(0, 0), (-5, 1), (-7, 5), (-5, 9), (-1, 10), (2, 7), (1, 2), (0, 0),
        (1, -6), (0, -12)],
}


def _glyph_quadruples(digit: int) -> np.ndarray:
    moves = _trace_polyline(_GLYPH_POLYLINES[digit])
    quads = np.zeros((len(moves) + 1, 4))
    quads[1:, 0] = [m[0] for m in moves]
    quads[1:, 1] = [m[1] for m in moves]
    quads[-1, 2] = 1.0  # end of stroke
    quads[-1, 3] = 1.0  # end of digit
    return quads


GLYPH_TEMPLATES = [(d, _glyph_quadruples(d)) for d in range(N_DIGIT_CLASSES)]


def _jitter_glyph(quads: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Delete up to 10% of the quadruples, order preserved, endpoints kept."""
    n = quads.shape[0]
    max_del = int(0.1 * n)
    n_del = int(rng.integers(0, max_del + 1)) if max_del > 0 else 0
    if n_del == 0 or n <= 3:
        return quads
    victims = rng.choice(np.arange(1, n - 1), size=n_del, replace=False)
    keep = np.setdiff1d(np.arange(n), victims)
    return quads[keep]


def gen_stroke_digits(n_digits: int, batch: int, rng: np.random.Generator,
                      source=None, jitter: bool = None) -> TaskBatch:
    """Concatenated glyph quadruples, then <bos> and one prediction step per digit.

    During the prediction phase the input carries a one-hot of the previous
    digit (teacher-forced here; evaluation substitutes the model's own
    prediction). `source` is a list of (label, quadruples) pairs; the built-in
    templates are used when omitted, with deletion jitter on by default.
    """
    if source is None:
        source = GLYPH_TEMPLATES
        if jitter is None:
            jitter = True
    if not source:
        raise ValueError("gen_stroke_digits: no digits in source")
    jitter = bool(jitter)

    seqs, all_labels = [], []
    for _ in range(batch):
        picks = rng.integers(0, len(source), size=n_digits)
        labels = []
        rows = []
        for p in picks:
            label, quads = source[int(p)]
            labels.append(label)
            rows.append(_jitter_glyph(quads, rng) if jitter else quads)
        seqs.append(np.concatenate(rows, axis=0))
        all_labels.append(labels)
    labels = np.asarray(all_labels, dtype=np.intp)
    stroke_lens = np.array([s.shape[0] for s in seqs], dtype=np.intp)
    horizon = int(stroke_lens.max()) + n_digits

    inputs = np.zeros((batch, horizon, STROKE_INPUT_WIDTH))
    targets = np.zeros((batch, horizon, N_DIGIT_CLASSES))
    mask = np.zeros((batch, horizon))
    for b in range(batch):
        n = int(stroke_lens[b])
        inputs[b, :n, :STROKE_CHANNELS] = seqs[b]
        inputs[b, n, BOS_CHANNEL] = 1.0
        for j in range(n_digits):
            targets[b, n + j, labels[b, j]] = 1.0
            mask[b, n + j] = 1.0
            if j > 0:
                inputs[b, n + j, FEEDBACK_OFFSET + labels[b, j - 1]] = 1.0
    return TaskBatch(inputs, targets, mask, {
        "task": "stroke-digits",
        "labels": labels,
        "pred_start": stroke_lens,
        "feedback_start": stroke_lens + 1,
        "feedback_channels": (FEEDBACK_OFFSET, STROKE_INPUT_WIDTH),
        "n_classes": N_DIGIT_CLASSES,
    })


def write_stroke_file(path, digits):
    """Inverse of load_stroke_file; digits is a list of (label, quadruples)."""
    with open(path, "w") as fh:
        for j, (label, quads) in enumerate(digits):
            if j:
                fh.write("\n")
            fh.write(f"# digit {int(label)}\n")
            for dx, dy, eos, eod in quads:
                fh.write(f"{int(dx)},{int(dy)},{int(eos)},{int(eod)}\n")


def load_stroke_file(path):
    """Parse a stroke CSV into a list of (label, quadruples) digit records."""
    digits = []
    label = None
    rows = []

    def flush(line_no):
        nonlocal label, rows
        if rows:
            if label is None:
                raise ValueError(f"{path}:{line_no}: digit block missing '# digit N' header")
            digits.append((label, np.array(rows, dtype=np.float64)))
        label, rows = None, []

    line_no = 0
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                flush(line_no)
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) != 2 or parts[0] != "digit" or not parts[1].isdigit():
                    raise ValueError(f"{path}:{line_no}: malformed header {line!r}")
                label = int(parts[1])
                continue
            fields = line.split(",")
            if len(fields) != 4:
                raise ValueError(f"{path}:{line_no}: expected 4 fields, got {len(fields)}")
            try:
                dx, dy, eos, eod = (float(f) for f in fields)
            except ValueError:
                raise ValueError(f"{path}:{line_no}: non-numeric quadruple {line!r}")
            if dx not in (-1.0, 0.0, 1.0) or dy not in (-1.0, 0.0, 1.0):
                raise ValueError(f"{path}:{line_no}: dx/dy must be in {{-1,0,1}}")
            if eos not in (0.0, 1.0) or eod not in (0.0, 1.0):
                raise ValueError(f"{path}:{line_no}: eos/eod must be binary")
            rows.append((dx, dy, eos, eod))
    flush(line_no)
    return digits


def per_digit_error(predictions: np.ndarray, targets: np.ndarray) -> float:
    """Fraction of digit positions whose prediction differs from the target."""
    predictions = np.asarray(predictions)
    targets = np.asarray(targets)
    if predictions.shape != targets.shape:
        raise ValueError(f"per_digit_error: {predictions.shape} vs {targets.shape}")
    if predictions.size == 0:
        return 0.0
    return float((predictions != targets).mean())


# ---------------------------------------------------------------------------
# task handles used by the training loop


@dataclass
class Task:
    name: str
    d_x: int
    d_out: int
    output_kind: str
    metric_name: str

    def sample(self, batch, rng, **overrides) -> TaskBatch:
        raise NotImplementedError


@dataclass
class CopyTask(Task):
    max_len: int = 10
    n_bits: int = 8

    def sample(self, batch, rng, length=None):
        return gen_copy(self.max_len, self.n_bits, batch, rng, length=length)

    def valid_sample(self, batch, rng):
        # scored at the longest length seen in training
        return self.sample(batch, rng, length=self.max_len)


@dataclass
class RecallTask(Task):
    n_items: int = 4
    item_len: int = 3
    n_bits: int = 6

    def sample(self, batch, rng, **_):
        return gen_assoc_recall(self.n_items, self.item_len, self.n_bits, batch, rng)

    valid_sample = sample


@dataclass
class StrokeTask(Task):
    n_digits: int = 3
    source: object = None

    def sample(self, batch, rng, **_):
        return gen_stroke_digits(self.n_digits, batch, rng, source=self.source)

    valid_sample = sample


def make_task(name: str, *, max_len=10, n_bits=8, n_items=4, item_len=3,
              n_digits=3, stroke_source=None) -> Task:
    if name == "copy":
        return CopyTask("copy", n_bits + 1, n_bits, "bernoulli", "bce",
                        max_len=max_len, n_bits=n_bits)
    if name == "assoc-recall":
        return RecallTask("assoc-recall", n_bits + 2, n_bits, "bernoulli", "bce",
                          n_items=n_items, item_len=item_len, n_bits=n_bits)
    if name == "stroke-digits":
        return StrokeTask("stroke-digits", STROKE_INPUT_WIDTH, N_DIGIT_CLASSES,
                          "categorical", "per_digit_error",
                          n_digits=n_digits, source=stroke_source)
    raise ValueError(f"unknown task {name!r}; expected copy, assoc-recall or stroke-digits")
