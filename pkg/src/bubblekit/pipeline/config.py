"""Engine configuration and its TOML/JSON loader.

Every validation error names the offending field as ``section.field`` so a
bad config file can be fixed without reading code.
"""

from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..perf_model import ClusterSpec, ModelSpec


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class DelayProfile:
    """Simulated costs in milliseconds.

    ``forward_ms`` applies to every stage unless ``stage_forward_ms`` lists
    one value per stage. ``sampling_gpu_ms`` is charged to the last stage when
    sampling runs there; ``sampling_cpu_ms`` is the CPU pool's cost for a whole
    microbatch, shared out across samplers by column count.
    """

    forward_ms: float = 30.0
    stage_forward_ms: tuple = ()
    forward_jitter: float = 0.03
    prep_ms: float = 7.0
    prep_reuse_ms: float = 0.5
    sampling_gpu_ms: float = 9.0
    sampling_cpu_ms: float = 2.0
    meta_ms: float = 2.0
    payload_ms: float = 0.2
    logits_ms: float = 0.3
    token_ms: float = 0.2
    schedule_ms: float = 0.3

    def forward(self, stage: int) -> float:
        return (self.stage_forward_ms[stage] if self.stage_forward_ms else self.forward_ms) / 1e3

    def validate(self, p: int) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "stage_forward_ms":
                if v and len(v) != p:
                    raise ConfigError("delays.stage_forward_ms", f"needs {p} entries, got {len(v)}")
                if any(x < 0 for x in v):
                    raise ConfigError("delays.stage_forward_ms", "entries must be >= 0")
            elif not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"delays.{f.name}", f"must be a finite number >= 0, got {v!r}")

    @classmethod
    def zero(cls, forward_ms: float = 0.0) -> "DelayProfile":
        return cls(forward_ms=forward_ms, forward_jitter=0.0, prep_ms=0.0, prep_reuse_ms=0.0,
                   sampling_gpu_ms=0.0, sampling_cpu_ms=0.0, meta_ms=0.0, payload_ms=0.0,
                   logits_ms=0.0, token_ms=0.0, schedule_ms=0.0)


@dataclass(frozen=True)
class Features:
    cpu_sampling: bool = False
    tsem: bool = False
    sat_aware: bool = False

    @classmethod
    def for_mode(cls, mode: str) -> "Features":
        if mode == "baseline":
            return cls()
        if mode == "optimized":
            return cls(True, True, True)
        raise ConfigError("run.mode", f"expected 'baseline' or 'optimized', got {mode!r}")

    @property
    def label(self) -> str:
        on = [name for name, v in asdict(self).items() if v]
        return "+".join(on) if on else "baseline"


@dataclass(frozen=True)
class WorkloadSpec:
    """Decode-only requests. ``num_sequences = None`` means an endless supply."""

    num_sequences: Optional[int] = None
    prompt_len: tuple = (2, 12)
    max_new_tokens: tuple = (32, 160)
    greedy_fraction: float = 0.2

    def validate(self, vocab: int) -> None:
        if self.num_sequences is not None and self.num_sequences < 0:
            raise ConfigError("workload.num_sequences", "must be >= 0")
        for name in ("prompt_len", "max_new_tokens"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ConfigError(f"workload.{name}", f"needs 1 <= min <= max, got [{lo}, {hi}]")
        if not 0 <= self.greedy_fraction <= 1:
            raise ConfigError("workload.greedy_fraction", "must be in [0, 1]")


@dataclass(frozen=True)
class EngineConfig:
    p: int = 4
    t: int = 1
    batch: int = 32
    samplers: int = 4
    vocab: int = 512
    hidden: int = 32
    layers: int = 8
    logit_scale: float = 4.0
    iterations: int = 200
    seed: int = 0
    features: Features = field(default_factory=Features)
    delays: DelayProfile = field(default_factory=DelayProfile)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)

    def __post_init__(self):
        checks = [
            ("parallel.p", self.p >= 1, "must be >= 1"),
            ("parallel.t", self.t >= 1, "must be >= 1"),
            ("parallel.batch", self.batch >= 1, "must be >= 1"),
            ("parallel.samplers", self.samplers >= 1, "must be >= 1"),
            ("model.vocab", self.vocab >= 2, "must be >= 2"),
            ("model.hidden", self.hidden >= 1, "must be >= 1"),
            ("model.layers", self.layers >= self.p, f"must be >= parallel.p ({self.p})"),
            ("model.vocab", self.vocab % self.t == 0, f"must be divisible by parallel.t ({self.t})"),
            ("run.iterations", self.iterations >= 0, "must be >= 0"),
            ("run.seed", 0 <= self.seed < 2**64, "must be an unsigned 64-bit integer"),
        ]
        for name, ok, msg in checks:
            if not ok:
                raise ConfigError(name, msg)
        self.delays.validate(self.p)
        self.workload.validate(self.vocab)

    @property
    def width(self) -> int:
        """Microbatch width; the last microbatch is padded when p does not divide b."""
        return -(-self.batch // self.p)

    @property
    def max_len(self) -> int:
        return self.workload.prompt_len[1] + self.workload.max_new_tokens[1] + 1

    def with_features(self, **kw) -> "EngineConfig":
        return replace(self, features=replace(self.features, **kw))

    def with_mode(self, mode: str) -> "EngineConfig":
        return replace(self, features=Features.for_mode(mode))


@dataclass(frozen=True)
class PredictConfig:
    model: ModelSpec
    cluster: ClusterSpec
    gpus: int
    slo_delay: float = math.inf


@dataclass(frozen=True)
class LoadedConfig:
    path: Optional[str]
    name: str
    engine: EngineConfig
    predict: Optional[PredictConfig]
    raw: dict


_SECTIONS = {"model", "parallel", "run", "delays", "workload", "features", "predict"}


def _take(section: dict, sec_name: str, key: str, kind, default):
    if key not in section:
        return default
    v = section[key]
    name = f"{sec_name}.{key}"
    try:
        if kind is bool:
            if not isinstance(v, bool):
                raise TypeError
            return v
        if kind is tuple:
            if not isinstance(v, (list, tuple)):
                raise TypeError
            return tuple(float(x) if isinstance(x, float) else x for x in v)
        if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
            raise TypeError
        if kind is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise TypeError
        return kind(v)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected {kind.__name__}, got {v!r}") from None


def parse_config(data: dict, path: Optional[str] = None) -> LoadedConfig:
    unknown = set(data) - _SECTIONS - {"name"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    for s in _SECTIONS & set(data):
        if not isinstance(data[s], dict):
            raise ConfigError(s, "must be a table")
    model = data.get("model", {})
    par = data.get("parallel", {})
    run = data.get("run", {})
    dl = data.get("delays", {})
    wl = data.get("workload", {})
    ft = data.get("features", {})

    d = DelayProfile()
    delay_kw = {}
    for f in fields(DelayProfile):
        kind = tuple if f.name == "stage_forward_ms" else float
        delay_kw[f.name] = _take(dl, "delays", f.name, kind, getattr(d, f.name))
    extra = set(dl) - {f.name for f in fields(DelayProfile)}
    if extra:
        raise ConfigError(f"delays.{sorted(extra)[0]}", "unknown field")

    w = WorkloadSpec()
    workload = WorkloadSpec(
        num_sequences=_take(wl, "workload", "num_sequences", int, w.num_sequences),
        prompt_len=tuple(_take(wl, "workload", "prompt_len", tuple, w.prompt_len)),
        max_new_tokens=tuple(_take(wl, "workload", "max_new_tokens", tuple, w.max_new_tokens)),
        greedy_fraction=_take(wl, "workload", "greedy_fraction", float, w.greedy_fraction),
    )
    for key in ("prompt_len", "max_new_tokens"):
        if len(getattr(workload, key)) != 2:
            raise ConfigError(f"workload.{key}", "expected [min, max]")

    mode = _take(run, "run", "mode", str, "baseline")
    feats = Features.for_mode(mode)
    feats = Features(
        cpu_sampling=_take(ft, "features", "cpu_sampling", bool, feats.cpu_sampling),
        tsem=_take(ft, "features", "tsem", bool, feats.tsem),
        sat_aware=_take(ft, "features", "sat_aware", bool, feats.sat_aware),
    )
    e = EngineConfig.__dataclass_fields__
    engine = EngineConfig(
        p=_take(par, "parallel", "p", int, e["p"].default),
        t=_take(par, "parallel", "t", int, e["t"].default),
        batch=_take(par, "parallel", "batch", int, e["batch"].default),
        samplers=_take(par, "parallel", "samplers", int, e["samplers"].default),
        vocab=_take(model, "model", "vocab", int, e["vocab"].default),
        hidden=_take(model, "model", "hidden", int, e["hidden"].default),
        layers=_take(model, "model", "layers", int, e["layers"].default),
        logit_scale=_take(model, "model", "logit_scale", float, e["logit_scale"].default),
        iterations=_take(run, "run", "iterations", int, e["iterations"].default),
        seed=_take(run, "run", "seed", int, e["seed"].default),
        features=feats,
        delays=DelayProfile(**delay_kw),
        workload=workload,
    )
    predict = _parse_predict(data["predict"]) if "predict" in data else None
    return LoadedConfig(path, str(data.get("name", Path(path).stem if path else "inline")),
                        engine, predict, data)


def _parse_predict(sec: dict) -> PredictConfig:
    g = lambda key, kind, default=None: _take(sec, "predict", key, kind, default)  # noqa: E731
    required = ["layers", "per_layer_compute", "seq_len", "batch", "hidden", "gpus",
                "launch_delay", "intra_bw"]
    for key in required:
        if key not in sec:
            raise ConfigError(f"predict.{key}", "missing required field")
    try:
        model = ModelSpec(layers=g("layers", int), per_layer_compute=g("per_layer_compute", float),
                          seq_len=g("seq_len", int), batch=g("batch", int), hidden=g("hidden", int),
                          bytes_per_element=g("bytes_per_element", int, 2))
    except ValueError as exc:
        raise ConfigError("predict", str(exc)) from None
    gpus = g("gpus", int)
    intra = g("intra_bw", float)
    try:
        cluster = ClusterSpec(gpus=gpus, pp_degree=1, tp_degree=gpus, launch_delay=g("launch_delay", float),
                              intra_bw=intra, inter_bw=g("inter_bw", float, intra),
                              hosts=g("hosts", int, 1))
    except ValueError as exc:
        raise ConfigError("predict", str(exc)) from None
    slo = g("slo_delay", float, math.inf)
    return PredictConfig(model, cluster, gpus, slo)


def load_config(path) -> LoadedConfig:
    path = Path(path)
    text = path.read_bytes()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text.decode("utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(str(path), f"cannot parse: {exc}") from None
    return parse_config(data, str(path))


def bundled_profile(name: str = "qwen72b-like") -> Path:
    from importlib import resources
    return Path(str(resources.files("bubblekit") / "profiles" / f"{name}.toml"))
