"""Run configuration: typed sections, flat ``section.key = value`` text
form, presets, and hashing.

Two presets ship with the package.  ``desk`` is the default: synthetic
shapes at a scale a single CPU core trains in minutes.  ``paper`` mirrors
the full-scale hyperparameters (2048-point clouds, 16 part capsules,
1024-D object feature, 100K/500K updates); it defines the reference
configuration, not something the test suite runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_args, get_origin

__all__ = [
    "DataConfig",
    "PartConfig",
    "ObjectConfig",
    "EvalConfig",
    "RunConfig",
    "desk_config",
    "paper_config",
    "preset",
    "config_to_text",
    "apply_overrides",
    "load_config_text",
    "config_hash",
    "arch_hash_parts",
    "arch_hash_objects",
]

ALL_FAMILIES = ("box", "tube", "wedge_chair", "l_bracket", "tee", "step_block")


@dataclass
class DataConfig:
    families: tuple[str, ...] = ALL_FAMILIES
    n_train: int = 512
    n_val: int = 64
    n_test: int = 128
    n_points: int = 256
    binary: bool = False  # text clouds by default; binary container optional


@dataclass
class PartConfig:
    """Points-to-parts layer: sizes, routing, viewpoints, optimizer."""

    n_parts: int = 4
    feature_dim: int = 8
    views: int = 2
    routing_iters: int = 3
    train_routing_warmup: int = 2
    decoder_points: int = 64
    grid_mode: str = "grid"  # "grid" | "random"
    sigma_routing: float = 0.1
    view_angle_deg: float = 45.0
    view_translation: float = 0.1
    net_width: int = 32
    net_res_blocks: int = 1
    fold_width: int = 32
    fold_res_blocks: int = 1
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-3
    lr_decay_steps: tuple[int, ...] = (1000, 5000)
    weight_decay: float = 1e-7
    augment: bool = True
    aug_translation: float = 1.0
    aug_angle_deg: float = 180.0


@dataclass
class ObjectConfig:
    """Parts-to-object layer: sizes, multi-view agreement, optimizer."""

    feature_dim: int = 64
    views: int = 4
    voting_steps: int = 1
    noise_start_deg: float = 45.0
    noise_end_deg: float = 180.0
    noise_ramp: tuple[int, ...] = (200, 1000)
    view_translation: float = 0.1
    net_width: int = 64
    net_res_blocks: int = 2
    decoder_width: int = 64
    decoder_res_blocks: int = 2
    lam_chamfer: float = 0.01
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-4
    lr_decay_steps: tuple[int, ...] = (1000, 2000)
    weight_decay: float = 1e-7
    augment: bool = True
    part_inference: str = "eval"  # part layer mode when feeding this layer


@dataclass
class EvalConfig:
    n_objects: int = 128
    trials: int = 10
    rotation_angle_deg: float = 180.0


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    parts: PartConfig = field(default_factory=PartConfig)
    objects: ObjectConfig = field(default_factory=ObjectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def desk_config() -> RunConfig:
    return RunConfig()


def paper_config() -> RunConfig:
    """Full-scale reference hyperparameters."""
    return RunConfig(
        data=DataConfig(n_train=512, n_val=64, n_test=128, n_points=2048),
        parts=PartConfig(
            n_parts=16,
            feature_dim=8,
            views=4,
            routing_iters=3,
            train_routing_warmup=2,
            decoder_points=256,
            sigma_routing=0.0024787521766663585,  # e**-6
            view_angle_deg=45.0,
            view_translation=0.1,
            net_width=64,
            net_res_blocks=3,
            fold_width=64,
            fold_res_blocks=1,
            steps=100_000,
            batch_size=32,
            lr=1e-3,
            lr_decay_steps=(20_000, 100_000),
            weight_decay=1e-7,
        ),
        objects=ObjectConfig(
            feature_dim=1024,
            views=4,
            voting_steps=1,
            noise_start_deg=45.0,
            noise_end_deg=180.0,
            noise_ramp=(10_000, 50_000),
            net_width=1024,
            net_res_blocks=3,
            decoder_width=256,
            decoder_res_blocks=4,
            lam_chamfer=0.01,
            steps=500_000,
            batch_size=32,
            lr=1e-4,
            lr_decay_steps=(50_000, 100_000),
            weight_decay=1e-7,
            part_inference="train",
        ),
    )


_PRESETS = {"desk": desk_config, "paper": paper_config}


def preset(name: str) -> RunConfig:
    if name not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    return _PRESETS[name]()


# ---------------------------------------------------------------------------
# flat text form


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float, str)):
        return repr(v) if isinstance(v, float) else str(v)
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    raise TypeError(f"cannot serialize config value {v!r}")


def _parse_value(text: str, ftype):
    text = text.strip()
    origin = get_origin(ftype)
    if origin is tuple:
        args = get_args(ftype)
        elem = args[0]
        if text == "":
            return ()
        return tuple(_parse_value(part, elem) for part in text.split(","))
    if ftype is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is str:
        return text
    raise TypeError(f"unsupported config field type {ftype}")


def _walk_fields(cfg: RunConfig):
    yield "seed", int, cfg, "seed"
    for section_name in ("data", "parts", "objects", "eval"):
        section = getattr(cfg, section_name)
        for f in dataclasses.fields(section):
            yield f"{section_name}.{f.name}", f.type, section, f.name


_TYPE_NAMES = {
    "int": int, "float": float, "bool": bool, "str": str,
    "tuple[str, ...]": tuple[str, ...], "tuple[int, ...]": tuple[int, ...],
}


def _resolve_type(t):
    # dataclass fields carry string annotations under `from __future__ import annotations`
    return _TYPE_NAMES[t] if isinstance(t, str) else t


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"{key} = {_format_value(getattr(obj, attr))}" for key, _, obj, attr in _walk_fields(cfg)]
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Set flat ``section.key`` entries from string values, in place."""
    index = {key: (ftype, obj, attr) for key, ftype, obj, attr in _walk_fields(cfg)}
    for key, raw in overrides.items():
        if key not in index:
            raise KeyError(f"unknown config key {key!r}")
        ftype, obj, attr = index[key]
        setattr(obj, attr, _parse_value(raw, _resolve_type(ftype)))
    return cfg


def load_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (#-comments and blank lines ignored)."""
    cfg = base if base is not None else desk_config()
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        overrides[key.strip()] = value.strip()
    return apply_overrides(cfg, overrides)


def load_config_file(path, base: RunConfig | None = None) -> RunConfig:
    return load_config_text(Path(path).read_text(), base)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()


def _hash_fields(pairs: list[tuple[str, object]]) -> str:
    text = "\n".join(f"{k} = {_format_value(v)}" for k, v in pairs)
    return hashlib.sha256(text.encode()).hexdigest()


def arch_hash_parts(cfg: RunConfig) -> str:
    """Hash of everything that fixes part-layer parameter shapes."""
    p = cfg.parts
    return _hash_fields([
        ("parts.feature_dim", p.feature_dim),
        ("parts.net_width", p.net_width),
        ("parts.net_res_blocks", p.net_res_blocks),
        ("parts.fold_width", p.fold_width),
        ("parts.fold_res_blocks", p.fold_res_blocks),
    ])


def arch_hash_objects(cfg: RunConfig) -> str:
    """Hash of everything that fixes object-layer parameter shapes."""
    o = cfg.objects
    return _hash_fields([
        ("parts.n_parts", cfg.parts.n_parts),
        ("parts.feature_dim", cfg.parts.feature_dim),
        ("objects.feature_dim", o.feature_dim),
        ("objects.net_width", o.net_width),
        ("objects.net_res_blocks", o.net_res_blocks),
        ("objects.decoder_width", o.decoder_width),
        ("objects.decoder_res_blocks", o.decoder_res_blocks),
    ])
