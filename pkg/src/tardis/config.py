"""Run configuration: a flat key=value file, '#' comments, strict keys."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .rng import substream

MODES = ("reinforce-aux", "reinforce-R", "gumbel-st", "lstm-baseline")
TASKS = ("copy", "assoc-recall", "stroke-digits")


@dataclass
class RunConfig:
    task: str = "copy"
    mode: str = "gumbel-st"
    d_h: int = 120
    k: int = 16
    a: int = 4
    d_m: int = 32
    addr_hidden: int = 64
    batch: int = 32
    lr: float = 3e-3
    gamma: float = 0.99
    seed: int = 0
    budget: int = 10000
    eval_interval: int = 250
    output_dir: str = "runs/out"
    valid_examples: int = 256
    early_stop_target: float = None
    patience: int = 0
    clip_norm: float = 1.0
    # task knobs
    max_len: int = 10
    n_bits: int = 8
    n_items: int = 4
    item_len: int = 3
    n_digits: int = 3
    stroke_file: str = None

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"config: mode must be one of {MODES}, got {self.mode!r}")
        if self.task not in TASKS:
            raise ValueError(f"config: task must be one of {TASKS}, got {self.task!r}")
        if self.d_h <= self.d_m:
            raise ValueError(f"config: requires d_h > d_m, got d_h={self.d_h} d_m={self.d_m}")
        for name in ("d_h", "k", "a", "d_m", "addr_hidden", "batch", "budget",
                     "eval_interval", "valid_examples"):
            if getattr(self, name) < 1:
                raise ValueError(f"config: {name} must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"config: gamma must be in [0,1], got {self.gamma}")
        return self


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_INT_KEYS = {n for n, t in _FIELD_TYPES.items() if t == "int"}
_FLOAT_KEYS = {"lr", "gamma", "early_stop_target", "clip_norm"}


def parse_config_text(text: str, path: str = "<config>") -> RunConfig:
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(
                f"{path}:{line_no}: unknown key {key!r}; valid keys: "
                f"{', '.join(sorted(_FIELD_TYPES))}")
        if key in _INT_KEYS:
            values[key] = int(value)
        elif key in _FLOAT_KEYS:
            values[key] = float(value)
        else:
            values[key] = value
    return RunConfig(**values).validate()


def parse_config_file(path) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path))


def build_task(config: RunConfig):
    from .tasks import load_stroke_file, make_task

    source = None
    if config.task == "stroke-digits" and config.stroke_file:
        source = load_stroke_file(config.stroke_file)
        if not source:
            raise ValueError(f"{config.stroke_file}: no digits")
    return make_task(config.task, max_len=config.max_len, n_bits=config.n_bits,
                     n_items=config.n_items, item_len=config.item_len,
                     n_digits=config.n_digits, stroke_source=source)


def build_model(config: RunConfig, task):
    from .controller import init_lstm_model, init_tardis_model

    rng = substream(config.seed, "init")
    if config.mode == "lstm-baseline":
        return init_lstm_model(task.d_x, config.d_h, task.d_out, task.output_kind, rng)
    return init_tardis_model(task.d_x, config.d_h, task.d_out, config.k, config.a,
                             config.d_m, config.addr_hidden, task.output_kind, rng)
