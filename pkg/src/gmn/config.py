"""Experiment configuration: a sectioned ``key = value`` file plus CLI overrides.

Sections are ``[experiment]``, ``[data]``, ``[train]`` and ``[eval]``; every
field of :class:`~gmn.data.SyntheticSpec`, :class:`~gmn.trainer.TrainConfig`
and :class:`~gmn.evaluator.EvalConfig` is addressable by name. Lists are
comma-separated. Example::

    [experiment]
    seed = 3
    preset = full

    [train]
    epochs = 60
    lr_decay_epochs = 20, 45
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field

from .data import SyntheticSpec
from .errors import ConfigError
from .evaluator import EvalConfig, Protocol
from .trainer import TrainConfig

# (use_mnet, use_dp, use_pic) for the four ablation rows
PRESETS = {
    "baseline": (False, False, False),
    "+A": (True, False, False),
    "+A+B": (True, True, False),
    "+A+B+C": (True, True, True),
}
PRESET_ALIASES = {"baseline": "baseline", "a": "+A", "ab": "+A+B", "abc": "+A+B+C",
                  "full": "+A+B+C", "+a": "+A", "+a+b": "+A+B", "+a+b+c": "+A+B+C"}

# desk-scale preset: 120/60 epochs and decays at 40/90 halved. Negatives are drawn
# within a domain because identities never cross domains: with random negatives the
# M-Net learns "same domain" instead of "same identity".
DESK_TRAIN = dict(epochs=60, dp_activation_epoch=30, lr_decay_epochs=(20, 45), base_lr=3e-3,
                  identities_per_batch=4, pair_scheme="intra_domain", negatives_per_positive=4)


def canonical_preset(name: str) -> str:
    key = str(name).strip().lower()
    if key not in PRESET_ALIASES:
        raise ConfigError(f"unknown preset {name!r}; choose from baseline, a, ab, abc (full)")
    return PRESET_ALIASES[key]


@dataclass(frozen=True)
class DataSettings:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train_path: str = ""
    probe_path: str = ""
    gallery_path: str = ""
    heldout_domains: tuple[int, ...] = ()
    probe_fraction: float = 0.25
    file_format: str = "text"


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    eval: EvalConfig = field(default_factory=EvalConfig)
    preset: str = "+A+B+C"
    output_dir: str = "gmn_out"
    seed: int = 0

    @property
    def heldout(self) -> tuple[int, ...]:
        if self.data.heldout_domains:
            return self.data.heldout_domains
        return (self.data.synthetic.num_domains - 1,)

    def with_preset(self, preset: str) -> "ExperimentConfig":
        name = canonical_preset(preset)
        use_mnet, use_dp, use_pic = PRESETS[name]
        train = self.train.replace(use_mnet=use_mnet, use_dp=use_dp, use_pic=use_pic)
        return dataclasses.replace(self, preset=name, train=train)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Master seed fans out to data generation and training."""
        data = dataclasses.replace(self.data,
                                   synthetic=dataclasses.replace(self.data.synthetic, seed=seed))
        return dataclasses.replace(self, seed=seed, data=data, train=self.train.replace(seed=seed))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["experiment"] = {"seed": str(self.seed), "preset": self.preset,
                            "output_dir": self.output_dir}
        data = {k: _fmt(v) for k, v in dataclasses.asdict(self.data.synthetic).items()}
        for f in dataclasses.fields(DataSettings):
            if f.name != "synthetic":
                data[f.name] = _fmt(getattr(self.data, f.name))
        cp["data"] = data
        cp["train"] = {k: _fmt(v) for k, v in self.train.to_dict().items()}
        cp["eval"] = {f.name: _fmt(getattr(self.eval, f.name)) for f in dataclasses.fields(EvalConfig)}
        from io import StringIO
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, Protocol):
        return v.value
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(cls, name: str, raw: str):
    hints = typing.get_type_hints(cls)
    if name not in hints:
        raise ConfigError(f"unknown setting {cls.__name__}.{name}")
    tp = hints[name]
    origin = typing.get_origin(tp)
    raw = raw.strip()
    try:
        if origin is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(inner(x.strip()) for x in raw.split(",") if x.strip())
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp in (int, float, str):
            return tp(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {cls.__name__}.{name}") from None


def _apply(cfg: ExperimentConfig, section: str, key: str, raw: str) -> ExperimentConfig:
    key = key.strip()
    if section == "experiment":
        if key == "seed":
            return cfg.with_seed(_coerce(ExperimentConfig, "seed", raw))
        if key == "preset":
            return cfg.with_preset(raw)
        if key == "output_dir":
            return dataclasses.replace(cfg, output_dir=raw.strip())
        raise ConfigError(f"unknown setting experiment.{key}")
    if section == "data":
        if key in {f.name for f in dataclasses.fields(SyntheticSpec)}:
            spec = dataclasses.replace(cfg.data.synthetic, **{key: _coerce(SyntheticSpec, key, raw)})
            return dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, synthetic=spec))
        val = _coerce(DataSettings, key, raw)
        return dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, **{key: val}))
    if section == "eval":
        val = _coerce(EvalConfig, key, raw)
        return dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, **{key: val}))
    raise ConfigError(f"unknown config section [{section}]")


def _apply_all(cfg: ExperimentConfig, items) -> ExperimentConfig:
    """Apply ``(section, key, raw)`` triples in order.

    Train keys are coerced as they come but validated together at the end, so
    coupled fields (epochs and the epochs that reference it) may be set in any
    order; they also win over values written by ``experiment.seed`` / ``preset``.
    """
    train_changes = {}
    for section, key, raw in items:
        if section == "train":
            train_changes[key.strip()] = _coerce(TrainConfig, key.strip(), raw)
        else:
            cfg = _apply(cfg, section, key, raw)
    if train_changes:
        cfg = dataclasses.replace(cfg, train=cfg.train.replace(**train_changes))
    return cfg


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from None
    cfg = base or ExperimentConfig()
    # experiment first: seed and preset rewrite other sections, explicit keys then win
    order = ["experiment"] + [s for s in cp.sections() if s != "experiment"]
    triples = []
    for section in order:
        if not cp.has_section(section):
            continue
        items = cp.items(section, raw=True)
        if section == "experiment":
            items = sorted(items, key=lambda kv: kv[0] != "seed")
        triples += [(section, key, raw) for key, raw in items]
    return _apply_all(cfg, triples)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_config(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """``section.key=value`` strings, applied in order (train keys validated together)."""
    triples = []
    for item in overrides or ():
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        triples.append((section.strip(), key, raw))
    return _apply_all(cfg, triples)
