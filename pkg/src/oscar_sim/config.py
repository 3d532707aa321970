"""Sectioned key=value experiment configuration with strict validation.

The format is deliberately minimal: bracketed section headers, one
key = value pair per line, # comments. Every key has a documented default,
unknown keys are rejected, and the effective config can be echoed back
byte-identically, which keeps experiment provenance diffable.
"""
import io
from dataclasses import dataclass, field, fields, replace

from .evaluation import ClassifierConfig
from .synthdata import CorpusConfig


class ConfigError(ValueError):
    pass


DEFAULT_SEED = 1288

_METHODS = ("oscar", "local", "fedavg", "cado")


@dataclass(frozen=True)
class CorpusSection:
    n_categories: int = 8
    n_domains: int = 6
    n_clients: int = 6
    images_per_category: int = 30
    test_images_per_category: int = 20
    image_size: int = 16
    images_per_cell: int = 200


@dataclass(frozen=True)
class DiffusionSection:
    t_train: int = 200
    train_steps: int = 40000
    batch_size: int = 128
    lr: float = 1e-3
    p_uncond: float = 0.1
    guidance_scale: float = 7.5
    n_steps: int = 50
    embed_dim: int = 32


@dataclass(frozen=True)
class FederationSection:
    mode: str = "common"
    methods: tuple[str, ...] = _METHODS
    rounds: int = 20
    local_epochs: int = 2
    cado_epochs: int = 100
    n_per_rep: int = 10


@dataclass(frozen=True)
class ClassifierSection:
    width: int = 128
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20


@dataclass(frozen=True)
class RunSection:
    seed: int = DEFAULT_SEED
    out: str = "out"


@dataclass(frozen=True)
class ExperimentConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    federation: FederationSection = field(default_factory=FederationSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    run: RunSection = field(default_factory=RunSection)

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            seed=self.run.seed,
            n_categories=self.corpus.n_categories,
            n_domains=self.corpus.n_domains,
            n_clients=self.corpus.n_clients,
            images_per_category=self.corpus.images_per_category,
            test_images_per_category=self.corpus.test_images_per_category,
            image_size=self.corpus.image_size,
        )

    def classifier_config(self) -> ClassifierConfig:
        c = self.classifier
        return ClassifierConfig(
            width=c.width,
            lr=c.lr,
            batch_size=c.batch_size,
            max_epochs=c.max_epochs,
            patience=c.patience,
        )


_SECTIONS = {
    "corpus": CorpusSection,
    "diffusion": DiffusionSection,
    "federation": FederationSection,
    "classifier": ClassifierSection,
    "run": RunSection,
}


def _parse_value(section: str, key: str, raw: str, kind):
    raw = raw.strip()
    if key == "seed" and raw == "":
        raise ConfigError("missing seed")
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == tuple[str, ...]:
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: invalid {kind.__name__} {raw!r}") from None
    raise ConfigError(f"[{section}] {key}: unsupported value type")


def _validate(config: ExperimentConfig) -> ExperimentConfig:
    d = config.diffusion
    if d.guidance_scale < 0:
        raise ConfigError("guidance scale must be >= 0")
    if d.t_train < 1:
        raise ConfigError("t_train must be >= 1")
    if not 1 <= d.n_steps <= d.t_train:
        raise ConfigError(f"n_steps must be in [1, {d.t_train}]")
    if not 0.0 <= d.p_uncond <= 1.0:
        raise ConfigError("p_uncond must be in [0, 1]")
    if d.train_steps < 1 or d.batch_size < 1:
        raise ConfigError("train_steps and batch_size must be >= 1")
    if d.embed_dim < 1:
        raise ConfigError("embed_dim must be >= 1")
    f = config.federation
    if f.mode not in ("common", "unique"):
        raise ConfigError(f"unknown split mode '{f.mode}'")
    for m in f.methods:
        if m not in _METHODS:
            raise ConfigError(f"unknown method '{m}'")
    if not f.methods:
        raise ConfigError("methods must be non-empty")
    if f.rounds < 1 or f.local_epochs < 1 or f.cado_epochs < 1:
        raise ConfigError("rounds, local_epochs and cado_epochs must be >= 1")
    if f.n_per_rep < 1:
        raise ConfigError("n_per_rep must be >= 1")
    if not 0 <= config.run.seed <= 2**64 - 1:
        raise ConfigError("seed must be a u64")
    config.corpus_config()  # corpus invariants
    config.classifier_config()  # classifier invariants
    return config


def parse_config_text(text: str) -> ExperimentConfig:
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section '[{section}]' on line {lineno}")
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value on line {lineno}: {raw_line!r}")
        if section is None:
            raise ConfigError(f"key outside any section on line {lineno}")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        cls = _SECTIONS[section]
        by_name = {f.name: f for f in fields(cls)}
        if key not in by_name:
            raise ConfigError(f"unknown key '{key}' in [{section}]")
        values[section][key] = _parse_value(section, key, raw_value, by_name[key].type)

    try:
        config = ExperimentConfig(
            **{name: cls(**values[name]) for name, cls in _SECTIONS.items()}
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return _validate(config)


def parse_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())


def render_config(config: ExperimentConfig) -> str:
    """Full effective config, every key explicit; parses back to itself."""
    out = io.StringIO()
    for name in _SECTIONS:
        out.write(f"[{name}]\n")
        section = getattr(config, name)
        for f in fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ",".join(value)
            elif isinstance(value, float):
                value = repr(value)
            out.write(f"{f.name} = {value}\n")
        out.write("\n")
    return out.getvalue()


def with_overrides(
    config: ExperimentConfig, seed: int | None = None, out: str | None = None
) -> ExperimentConfig:
    run = config.run
    if seed is not None:
        run = replace(run, seed=seed)
    if out is not None:
        run = replace(run, out=out)
    return _validate(replace(config, run=run))
