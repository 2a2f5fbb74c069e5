"""Model configuration and task kinds."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields, replace


class ConfigError(ValueError):
    pass


class TaskKind(str, enum.Enum):
    BCD = "bcd"
    SCD = "scd"
    BDA = "bda"


CONCAT_MODES = ("horizontal", "channel")


@dataclass(frozen=True)
class ModelConfig:
    task: str = "bcd"
    num_classes: int = 3          # semantic classes K for SCD (plus a no-change class)
    damage_levels: int = 4        # BDA damage grades D (plus a background class)
    in_channels: int = 3
    stage_dims: tuple[int, ...] = (16, 32, 64, 128)
    stage_depths: tuple[int, ...] = (1, 1, 2, 1)
    state_dim: int = 8
    patch_size: int = 4
    mlp_ratio: int = 2
    dec_channels: int = 64
    hid_channels: int = 128
    dropout: float = 0.2
    drop_path: float = 0.1
    fcpg: bool = True
    fcpg_mode: str = "adaptive"
    spm: bool = True
    fcpg_groups: int = 4
    fcpg_tau: float = 0.05
    fcpg_alpha: float = 0.1
    concat: str = "horizontal"
    head_activation: str = "relu"
    suppression_floor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_dims", tuple(self.stage_dims))
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        try:
            TaskKind(self.task)
        except ValueError:
            raise ConfigError(f"unknown task {self.task!r}; expected bcd, scd or bda") from None
        if len(self.stage_dims) != 4 or len(self.stage_depths) != 4:
            raise ConfigError("need exactly four stages")
        if any(b != 2 * a for a, b in zip(self.stage_dims, self.stage_dims[1:])):
            raise ConfigError(f"stage dims must double per stage, got {self.stage_dims}")
        if min(self.stage_depths) < 1:
            raise ConfigError("stage depths must be >= 1")
        if self.num_classes < 2 or self.damage_levels < 2:
            raise ConfigError("need at least two semantic classes and two damage levels")
        if self.concat not in CONCAT_MODES:
            raise ConfigError(f"concat must be one of {CONCAT_MODES}")
        if self.hid_channels % 2:
            raise ConfigError("hid_channels must be even")
        if not 0 <= self.drop_path < 1 or not 0 <= self.dropout < 1:
            raise ConfigError("dropout and drop-path rates must be in [0, 1)")

    @property
    def kind(self) -> TaskKind:
        return TaskKind(self.task)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(stage_dims=(4, 8, 16, 32), stage_depths=(1, 1, 1, 1), state_dim=4,
                    dec_channels=8, hid_channels=8, fcpg_groups=2)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_dims"] = list(self.stage_dims)
        d["stage_depths"] = list(self.stage_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
