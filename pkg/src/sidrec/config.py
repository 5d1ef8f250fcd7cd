"""Run configuration: a nested YAML document validated against dataclasses."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class Paths:
    embeddings_jsonl: str | None = None
    embeddings: str = "work/embeddings.sidf"
    pca: str = "work/pca.sidc"
    reduced: str = "work/embeddings_reduced.sidf"
    quantizer: str = "work/quantizer.sidc"
    sids: str = "work/sids.jsonl"
    store: str = "work/store.side"
    sequences: str | None = None
    train_examples: str | None = None
    eval_examples: str | None = None
    checkpoint: str = "work/esu.sidc"
    sessions: str | None = None
    meta: str | None = None
    pairs: str = "work/pairs.jsonl"
    verdicts: str = "work/verdicts.jsonl"
    accepted: str = "work/accepted_pairs.jsonl"
    ratings: str | None = None
    prep_dir: str = "work/prep"
    figures: str | None = None


@dataclass
class PcaSection:
    rank: int = 8


@dataclass
class QuantizerSection:
    K: int = 8192
    n_fsq: int = 13
    L: int = 1
    max_iters: int = 100
    fsq_epochs: int = 10
    fsq_lr: float = 0.1
    seed: int | None = None


@dataclass
class SidAnalyzeSection:
    ks: list = field(default_factory=lambda: [1, 10])


@dataclass
class GsuSection:
    k: int = 50
    per_trigger_k: int = 50
    n_triggers: int = 10
    ks: list = field(default_factory=lambda: [200, 500])
    use_reduced: bool = True
    trigger_flag: str = "click"


@dataclass
class EsuSection:
    e: int = 8
    h: int = 8
    experts: int = 4
    expert_hidden: int = 16
    mix_dim: int = 8
    lr: float = 0.3
    epochs: int = 20
    batch_size: int = 32
    tasks: list = field(default_factory=lambda: ["ctr"])
    use_sid: bool = True
    init_scale: float = 0.1


@dataclass
class PairsSection:
    min_score: float = 1.0
    top_n: int = 10
    window: int = 50
    positive_flag: str = "click"


@dataclass
class JudgeSection:
    mode: str = "mock"              # mock | http
    mock_rule: str = "category"     # category | accept_all
    url: str | None = None
    i2i_url: str | None = None
    u2i_url: str | None = None
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4


@dataclass
class MaskSection:
    n_in: int = 4
    n_emb: int = 2
    n_qa: int = 3
    total_steps: int = 10
    step: int = 0
    shape: str = "linear"


@dataclass
class PrepSection:
    min_len: int = 20
    positive_rating: float = 4.0
    test_fraction: float = 0.15
    depth: int = 50


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    paths: Paths = field(default_factory=Paths)
    pca: PcaSection = field(default_factory=PcaSection)
    quantizer: QuantizerSection = field(default_factory=QuantizerSection)
    sid_analyze: SidAnalyzeSection = field(default_factory=SidAnalyzeSection)
    gsu: GsuSection = field(default_factory=GsuSection)
    esu: EsuSection = field(default_factory=EsuSection)
    pairs: PairsSection = field(default_factory=PairsSection)
    judge: JudgeSection = field(default_factory=JudgeSection)
    mask: MaskSection = field(default_factory=MaskSection)
    prep: PrepSection = field(default_factory=PrepSection)
    base_dir: Path = field(default=Path("."), repr=False)

    def path(self, name: str) -> Path | None:
        value = getattr(self.paths, name)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def require_path(self, name: str) -> Path:
        p = self.path(name)
        if p is None:
            raise ConfigError(f"paths.{name}", "required by this subcommand but not set")
        return p


_POSITIVE = {"threads", "rank", "K", "n_fsq", "L", "max_iters", "k", "per_trigger_k",
             "n_triggers", "e", "h", "experts", "expert_hidden", "mix_dim", "batch_size",
             "top_n", "window", "max_in_flight", "total_steps", "min_len", "depth"}


def _coerce(key: str, value, ftype):
    t = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    optional = "None" in t
    if value is None:
        if optional:
            return None
        raise ConfigError(key, "must not be null")
    base = t.replace(" | None", "").strip()
    if base == "bool":
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if base == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if base == "str":
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if base == "list":
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return list(value)
    return value


def _build(cls, data, prefix: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
    for key in data:
        if key not in fields:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        key = f"{prefix}{name}"
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, data[name], f"{key}.")
        else:
            value = _coerce(key, data[name], f.type)
            if name in _POSITIVE and value is not None and value < 1:
                raise ConfigError(key, f"must be >= 1, got {value}")
            kwargs[name] = value
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> None:
    if cfg.judge.mode not in ("mock", "http"):
        raise ConfigError("judge.mode", f"must be 'mock' or 'http', got {cfg.judge.mode!r}")
    if cfg.judge.mock_rule not in ("category", "accept_all"):
        raise ConfigError("judge.mock_rule", f"unknown rule {cfg.judge.mock_rule!r}")
    if cfg.judge.mode == "http" and not (cfg.judge.url or (cfg.judge.i2i_url and cfg.judge.u2i_url)):
        raise ConfigError("judge.url", "http mode needs judge.url or both per-source urls")
    if cfg.mask.shape not in ("linear", "cosine"):
        raise ConfigError("mask.shape", f"unknown schedule {cfg.mask.shape!r}")
    if not 0 <= cfg.mask.step <= cfg.mask.total_steps:
        raise ConfigError("mask.step", "must lie in [0, total_steps]")
    if min(cfg.mask.n_in, cfg.mask.n_emb, cfg.mask.n_qa) < 0:
        raise ConfigError("mask", "segment lengths must be >= 0")
    if not 0.0 <= cfg.prep.test_fraction <= 1.0:
        raise ConfigError("prep.test_fraction", "must lie in [0, 1]")
    if cfg.esu.lr < 0:
        raise ConfigError("esu.lr", "must be >= 0")
    if not cfg.esu.tasks or not all(isinstance(t, str) for t in cfg.esu.tasks):
        raise ConfigError("esu.tasks", "must be a non-empty list of task names")
    for key, ks in (("gsu.ks", cfg.gsu.ks), ("sid_analyze.ks", cfg.sid_analyze.ks)):
        if not ks or not all(isinstance(k, int) and not isinstance(k, bool) and k >= 1 for k in ks):
            raise ConfigError(key, "must be a non-empty list of positive integers")


def set_override(data: dict, assignment: str) -> None:
    """Apply ``section.key=value`` (value parsed as YAML) to a raw config dict."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like section.key=value")
    dotted, raw = assignment.split("=", 1)
    keys = dotted.strip().split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "override path crosses a non-mapping value")
    node[keys[-1]] = yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"cannot parse {path}: {exc}") from exc
        base = path.parent
    for ov in overrides:
        set_override(data, ov)
    cfg = _build(RunConfig, data, "")
    cfg.base_dir = base
    _validate(cfg)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d.pop("base_dir", None)
    return d
