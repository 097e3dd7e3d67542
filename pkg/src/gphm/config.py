"""Run configuration files.

The format is flat ``key = value`` lines grouped under optional section
headers; ``#`` and ``;`` start comment lines. Every key belongs to exactly one
section, and a key placed under the wrong section, an unknown key, or a
repeated key is an error::

    [problem]
    problem = poisson1d_mix:k=20
    grid_sizes = 400
    eval_refinement = 10

    [kernel]
    kernel = stm
    Q = 10
    F = 10

    [training]
    learning_rate = 0.01
    max_iters = 50000
    lambda_b = 500
    stop_threshold = 1e-6
    seed = 0
    trace_every = 100

    [output]
    output_dir = runs/mix20
"""

import math
from dataclasses import asdict, dataclass

from .errors import ConfigError
from .kernels import KernelKind

SECTIONS = {
    "problem": ("problem", "grid_sizes", "eval_refinement"),
    "kernel": ("kernel", "Q", "F"),
    "training": (
        "learning_rate",
        "max_iters",
        "lambda_b",
        "stop_threshold",
        "seed",
        "trace_every",
    ),
    "output": ("output_dir",),
}
_SECTION_OF = {key: sec for sec, keys in SECTIONS.items() for key in keys}
REQUIRED = ("problem", "grid_sizes")


@dataclass(frozen=True)
class RunConfig:
    problem: str
    grid_sizes: tuple
    kernel: str = "stm"
    Q: int = 30
    F: float = 20.0
    learning_rate: float = 1e-2
    max_iters: int = 1_000_000
    lambda_b: float = 500.0
    stop_threshold: float = 1e-6
    seed: int = 0
    trace_every: int = 100
    output_dir: str = "gphm_out"
    eval_refinement: int = 10

    def as_dict(self):
        d = asdict(self)
        d["grid_sizes"] = list(self.grid_sizes)
        return d

    def train_config(self):
        from .optim import TrainConfig

        return TrainConfig(
            learning_rate=self.learning_rate,
            max_iters=self.max_iters,
            stop_threshold=self.stop_threshold,
            Q=self.Q,
            ending_frequency=self.F,
            lambda_b=self.lambda_b,
            seed=self.seed,
            trace_every=self.trace_every,
            kernel=self.kernel,
        )


def _int(text):
    v = float(text)
    if not (math.isfinite(v) and v == int(v)):
        raise ValueError(f"'{text}' is not an integer")
    return int(v)


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise ValueError("must be positive")
    return v


def _positive_int(text):
    v = _int(text)
    if v < 1:
        raise ValueError("must be at least 1")
    return v


def _sizes(text):
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if not parts:
        raise ValueError("no grid sizes given")
    sizes = tuple(_int(p.strip()) for p in parts)
    if any(s < 4 for s in sizes):
        raise ValueError("every grid size must be at least 4")
    if len(sizes) > 3:
        raise ValueError("at most 3 grid dimensions")
    return sizes


def _kernel(text):
    try:
        return KernelKind(text.lower()).value
    except ValueError:
        raise ValueError(f"unknown kernel '{text}' (use stm, gm, se or matern52)") from None


def _text(text):
    if not text:
        raise ValueError("empty value")
    return text


def _nonneg_float(text):
    v = float(text)
    if not (v >= 0 and math.isfinite(v)):
        raise ValueError("must be a finite non-negative number")
    return v


def _nonneg_int(text):
    v = _int(text)
    if v < 0:
        raise ValueError("must be non-negative")
    return v


PARSERS = {
    "problem": _text,
    "grid_sizes": _sizes,
    "kernel": _kernel,
    "Q": _positive_int,
    "F": _nonneg_float,
    "learning_rate": _positive_float,
    "max_iters": _nonneg_int,
    "lambda_b": _positive_float,
    "stop_threshold": _positive_float,
    "seed": _nonneg_int,
    "trace_every": _positive_int,
    "output_dir": _text,
    "eval_refinement": _positive_int,
}


def parse_config(text):
    """Parse configuration text into a :class:`RunConfig`.

    Raises
    ------
    ConfigError
        With the offending line number and field name where known.
    """
    values, lines = {}, {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError("malformed section header", line=lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(
                    f"unknown section '{section}' (expected one of {', '.join(SECTIONS)})",
                    line=lineno,
                )
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError("expected 'key = value'", line=lineno)
        if key not in PARSERS:
            raise ConfigError("unknown key", line=lineno, field=key)
        if section is not None and _SECTION_OF[key] != section:
            raise ConfigError(
                f"belongs in section [{_SECTION_OF[key]}], not [{section}]",
                line=lineno,
                field=key,
            )
        if key in values:
            raise ConfigError(f"repeated key (first set on line {lines[key]})", line=lineno, field=key)
        try:
            values[key] = PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value '{value}': {exc}", line=lineno, field=key) from None
        lines[key] = lineno
    for key in REQUIRED:
        if key not in values:
            raise ConfigError("missing required key", field=key)
    return RunConfig(**values)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    return parse_config(text)


def format_config(config):
    """Render a :class:`RunConfig` back to the file format (round-trips through :func:`parse_config`)."""
    d = config.as_dict()
    out = []
    for sec, keys in SECTIONS.items():
        out.append(f"[{sec}]")
        for key in keys:
            v = d[key]
            if key == "grid_sizes":
                v = ",".join(str(s) for s in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{key} = {v}")
        out.append("")
    return "\n".join(out)
