"""Declarative run configuration: defaults, strict JSON parsing, presets.

A run config is a JSON document with sections ``data``, ``preprocess``,
``model``, ``train`` plus top-level ``seeds`` and ``output_dir``.  Every
field has a default (the dataclass defaults below); unknown keys are
rejected with the offending path named.  Flag overrides take precedence
over the config file, which takes precedence over defaults.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import models, pipeline, preprocess, synthdata
from .errors import ConfigError

PRESETS = ("full", "limited")


@dataclass
class SynthConfig:
    """Synthetic-source knobs (matrix-valued knobs stay at library level)."""

    n_samples: int = 20000
    seed: int = 0
    n_factors: int = 3
    burst_dwell_on_ms: float = 250.0
    burst_dwell_off_ms: float = 350.0
    fading_persistence: float = 0.93
    load_period_ms: float = 3000.0
    noise_std: float = 0.7
    n_noise_components: int = 4
    idiosyncratic_noise_frac: float = 0.1
    missing_prob: float = 0.0
    delay_missing_prob: float = 0.25
    outlier_rate: float = 0.0


@dataclass
class DataConfig:
    source: str = "synth"  # "synth" | "csv"
    path: str | None = None
    schema: dict | None = None  # csv column-name mapping
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class PreprocessConfig:
    window_len_ms: float = preprocess.DEFAULT_WINDOW_LEN_MS
    t_step_ms: float = preprocess.DEFAULT_T_STEP_MS
    lower_pct: float = 10.0
    upper_pct: float = 90.0
    n_seq: int = preprocess.DEFAULT_SEQ_LEN


@dataclass
class ModelConfig:
    arch: str = "tesn"
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_layers: int = 2
    n_res: int = 64
    spectral_radius: float = 0.9
    input_scaling: float = 0.5
    embedding_dim: int = 8


@dataclass
class TrainSection:
    regime: str = "full"
    train_fraction: float | None = None
    epochs_extractor: int | None = None
    epochs_autoencoder: int | None = None
    epochs_predictor: int | None = None
    batch_size: int = 128
    learning_rate: float = 1e-3
    target_kpis: list = field(default_factory=lambda: list(pipeline.DEFAULT_TARGETS))
    centered_second_moment: bool = False


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSection = field(default_factory=TrainSection)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str | None = None

    # -- conversions into module-level configs --------------------------------
    def latent_config(self):
        s = self.data.synth
        return synthdata.LatentProcessConfig(
            n_factors=s.n_factors,
            burst_dwell_on_ms=s.burst_dwell_on_ms,
            burst_dwell_off_ms=s.burst_dwell_off_ms,
            fading_persistence=s.fading_persistence,
            load_period_ms=s.load_period_ms,
            noise_std=s.noise_std,
            n_noise_components=s.n_noise_components,
            idiosyncratic_noise_frac=s.idiosyncratic_noise_frac,
            missing_prob=s.missing_prob,
            delay_missing_prob=s.delay_missing_prob,
            outlier_rate=s.outlier_rate,
            seed=s.seed,
        )

    def extractor_config(self, arch=None):
        m = self.model
        return models.ExtractorConfig(
            arch=arch or m.arch,
            n_seq=self.preprocess.n_seq,
            n_kpis=preprocess.N_KPIS,
            n_embed=m.embedding_dim,
            transformer=models.TransformerConfig(
                d_model=m.d_model, n_heads=m.n_heads, d_ff=m.d_ff, n_layers=m.n_layers),
            reservoir=models.ReservoirConfig(
                n_res=m.n_res, spectral_radius=m.spectral_radius,
                input_scaling=m.input_scaling),
        )

    def train_config(self, seed=None):
        t = self.train
        return pipeline.TrainConfig(
            regime=t.regime,
            train_fraction=t.train_fraction,
            epochs_extractor=t.epochs_extractor,
            epochs_autoencoder=t.epochs_autoencoder,
            epochs_predictor=t.epochs_predictor,
            batch_size=t.batch_size,
            learning_rate=t.learning_rate,
            seed=self.seeds[0] if seed is None else seed,
            target_kpis=tuple(t.target_kpis),
            embedding_dim=self.model.embedding_dim,
            centered_second_moment=t.centered_second_moment,
            extractor=self.extractor_config(),
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{path or '<root>'}' must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key '{where}{sorted(unknown)[0]}'")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        if name in _NESTED:
            kwargs[name] = _from_dict(_NESTED[name], value, sub)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    "data": DataConfig,
    "preprocess": PreprocessConfig,
    "model": ModelConfig,
    "train": TrainSection,
    "synth": SynthConfig,
}


def config_from_dict(data):
    return _from_dict(RunConfig, data, "")


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(raw)


def load_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (expected one of {PRESETS})")
    text = resources.files("kpiembed.presets").joinpath(f"{name}.preset").read_text()
    return config_from_dict(json.loads(text))


def deep_update(base: dict, overrides: dict):
    """Recursive dict merge; override values win."""
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_update(out[key], value)
        else:
            out[key] = value
    return out


def resolve_config(config_path=None, preset=None, overrides=None):
    """defaults <- preset <- config file <- flag overrides."""
    merged = RunConfig().to_dict()
    if preset:
        merged = deep_update(merged, load_preset(preset).to_dict())
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from exc
        config_from_dict(raw)  # validate keys before merging
        merged = deep_update(merged, raw)
    if overrides:
        merged = deep_update(merged, overrides)
    return config_from_dict(merged)
