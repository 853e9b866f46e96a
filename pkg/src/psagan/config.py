"""Flat ``key = value`` run configuration with desk and paper presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union


class ConfigError(ValueError):
    """Unknown key or unparsable value in a run configuration."""


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    patch_size: int = 64

    # synthetic corpus
    synth_images: int = 60
    synth_shape: Tuple[int, ...] = (128, 128)
    synth_count: int = 12
    synth_train_fraction: float = 0.8

    # network architecture
    translator_widths: Tuple[int, ...] = (16, 32, 64, 64, 64, 64)
    patchgan_widths: Tuple[int, ...] = (16, 32, 64)
    sr_widths: Tuple[int, ...] = (16,)
    sr_disc_widths: Tuple[int, ...] = (16, 32, 64)
    srpsa_widths: Tuple[int, ...] = (16, 32, 32, 32, 32)
    n_rrdb: int = 4
    rrdb_growth: int = 8
    attention_stages: int = 3
    n_power_iterations: int = 1
    lipschitz_k: float = 1.0

    # shared GAN settings
    lambda_rmse: float = 5.0
    lambda_rel: float = 0.05
    eta_l1: float = 0.01
    label_smooth: float = 0.9
    decay_factor: float = 0.5
    decay_every: int = 10
    augment: bool = True

    # translator
    translator_epochs: int = 30
    translator_batch: int = 4
    translator_lr_g: float = 0.001
    translator_lr_d: float = 0.0002
    translator_beta1: float = 0.5
    translator_beta2: float = 0.999
    translator_switch_epoch: int = -1     # -1: half the epochs

    # super-resolver
    sr_epochs: int = 10
    sr_batch: int = 4
    sr_lr_g: float = 0.003
    sr_lr_d: float = 0.001
    sr_beta1: float = 0.9
    sr_beta2: float = 0.999
    sr_switch_epoch: int = -1
    sr_source: str = "sem"                # or "translated"
    featnet_seed: int = 1234

    # detector
    det_epochs: int = 200
    det_batch: int = 4
    det_lr: float = 0.001
    det_weight_decay: float = 1e-6
    lambda_p: float = 5.0
    max_radius: float = 5.0
    det_min_radius_cells: float = 0.375
    p_thresh: float = 0.5
    scale_factors: Tuple[int, ...] = (4, 8)
    literal_p_mask: bool = False

    # evaluation
    knn_k: int = 5
    embedder_seed: int = 0
    embed_dim: int = 64

    def validate(self) -> "RunConfig":
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.sr_source not in ("sem", "translated"):
            raise ConfigError("sr_source must be 'sem' or 'translated'")
        if self.patch_size % 16:
            raise ConfigError("patch_size must be a multiple of 16")
        if not 0.5 < self.label_smooth <= 1.0:
            raise ConfigError("label_smooth must lie in (0.5, 1]")
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        return self

    def lines(self) -> List[str]:
        """``key = value`` lines in declaration order, parseable by :func:`parse_config`."""
        return [f"{k} = {_format(v)}" for k, v in asdict(self).items()]


PAPER_OVERRIDES: Dict[str, object] = {
    "preset": "paper",
    "patch_size": 512,
    "translator_widths": (64, 128, 256, 512, 512, 512, 512, 512, 512),
    "patchgan_widths": (64, 128, 256, 512),
    "sr_widths": (64,),
    "sr_disc_widths": (64, 128, 256, 512, 512),
    "srpsa_widths": (32, 64, 64, 128, 128),
    "n_rrdb": 23,
    "rrdb_growth": 32,
    "translator_lr_g": 0.005,
    "translator_lr_d": 0.001,
    "sr_epochs": 30,
    "det_lr": 0.0001,
}

PRESETS = {"desk": {}, "paper": PAPER_OVERRIDES}


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        return type(default)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_pairs(text: str) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(pairs: Dict[str, str]) -> RunConfig:
    """Resolve preset first, then apply every other key on top of it."""
    defaults = {f.name: f.default for f in fields(RunConfig)}
    unknown = sorted(set(pairs) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    name = pairs.get("preset", "desk").strip()
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    cfg = replace(RunConfig(), **PRESETS[name])
    values = {k: _parse_value(k, v, defaults[k]) for k, v in pairs.items() if k != "preset"}
    return replace(cfg, **values).validate()


def parse_config(text: str) -> RunConfig:
    return build_config(parse_pairs(text))


def load_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    pairs = parse_pairs(Path(path).read_text()) if path else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return build_config(pairs)
