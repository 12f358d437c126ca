"""
Configuration Models and Errors
Pydantic configuration records and the exception hierarchy for DCDNet
"""

from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# =============================================================================
# ERRORS
# =============================================================================

class DCDNetError(Exception):
    """Base class for every error the CLI maps to an exit code"""
    exit_code = 1


class ConfigError(DCDNetError):
    exit_code = 1

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RunLockedError(DCDNetError):
    exit_code = 1


class MissingArtifactError(DCDNetError):
    exit_code = 2


class CheckpointError(DCDNetError):
    exit_code = 2


class NumericalAbort(DCDNetError):
    exit_code = 3

    def __init__(self, component: str, detail: str = ""):
        self.component = component
        super().__init__(f"non-finite value in '{component}'" + (f" ({detail})" if detail else ""))


class QueryMaskAccessError(DCDNetError):
    """Target query masks were dereferenced during support-only fine-tuning"""
    exit_code = 3


class InvalidClassError(DCDNetError, ValueError):
    exit_code = 1


class ShapeError(DCDNetError, ValueError):
    exit_code = 1


class EmptyBatchError(DCDNetError, ValueError):
    exit_code = 1


# =============================================================================
# DOMAIN RECORDS
# =============================================================================

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TextureParams(_Strict):
    amplitude: float = Field(ge=0.0, le=1.0)
    frequency: float = Field(gt=0.0)


class IntensityCurve(_Strict):
    """Monotone curve out = gain * in ** gamma + offset, clipped to [0, 1]"""
    gamma: float = Field(gt=0.0)
    gain: float = Field(gt=0.0)
    offset: float = 0.0


class DomainSpec(_Strict):
    domain_id: int = Field(ge=0)
    texture_params: TextureParams
    palette: Dict[int, List[float]]
    background: List[float]
    intensity_transform: IntensityCurve
    class_set: List[int]
    grayscale: bool = False

    @property
    def is_source(self) -> bool:
        return self.domain_id == 0


class GrlConfig(_Strict):
    lambda_grl: float = Field(default=1.0, ge=0.0)


# =============================================================================
# RUN CONFIGURATION
# =============================================================================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataConfig(_Section):
    image_size: int = Field(default=64, ge=16)
    n_source_classes: int = Field(default=12, ge=2)
    n_target_domains: int = Field(default=3, ge=1)
    classes_per_target: int = Field(default=4, ge=1)
    episodes_per_epoch: int = Field(default=200, ge=1)
    eval_episodes: int = Field(default=40, ge=1)
    data_dir: Optional[str] = None

    @field_validator("image_size")
    @classmethod
    def _divisible(cls, value: int) -> int:
        if value % 8:
            raise ValueError("image_size must be a multiple of 8")
        return value


class ModelConfig(_Section):
    c_shared: int = Field(default=32, ge=1)
    c_private: int = Field(default=64, ge=1)
    c_f: int = Field(default=64, ge=1)
    d_proj: int = Field(default=32, ge=1)
    bank_capacity: int = Field(default=2048, ge=1)
    bank_enqueue_cap: int = Field(default=128, ge=1)
    pixels_per_class: int = Field(default=64, ge=1)
    tau: float = Field(default=0.1, gt=0.0)
    lambda_grl: float = Field(default=1.0, ge=0.0)
    grl_warmup_frac: float = Field(default=0.1, ge=0.0, le=1.0)
    disc_hidden: int = Field(default=64, ge=1)
    disc_class_head: bool = False
    ortho_scale_free: bool = True
    fusion_balance: bool = True


class HeadConfig(_Section):
    temperature: float = Field(default=0.1, gt=0.0)
    fg_confidence: float = Field(default=0.7, gt=0.0, lt=1.0)
    bg_confidence: float = Field(default=0.3, gt=0.0, lt=1.0)
    blend: float = Field(default=0.5, ge=0.0, le=1.0)
    bfp_rounds: int = Field(default=3, ge=1)
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    fg_only_miou: bool = False


class TrainConfig(_Section):
    lambda_ce: float = Field(default=1.0, ge=0.0)
    lambda_adv: float = Field(default=0.1, ge=0.0)
    lambda_cont: float = Field(default=0.1, ge=0.0)
    lambda_ortho: float = Field(default=0.01, ge=0.0)
    s_steps: int = Field(default=1, ge=1)
    d_steps: int = Field(default=1, ge=1)
    pretrain_epochs: int = Field(default=5, ge=0)
    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=8, ge=1)
    lr_main: float = Field(default=1e-3, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0)
    lr_disc: float = Field(default=1e-4, gt=0.0)
    weight_decay_disc: float = Field(default=0.01, ge=0.0)
    lr_finetune: float = Field(default=5e-4, gt=0.0)
    cam_lr_scale: float = Field(default=10.0, gt=0.0)
    finetune_epochs: int = Field(default=15, ge=0)
    finetune_lr_overrides: Dict[int, float] = Field(default_factory=dict)
    k_shots: int = Field(default=1, ge=1)
    seed: int = 0

    @field_validator("finetune_lr_overrides", mode="before")
    @classmethod
    def _parse_overrides(cls, value):
        # key=value files carry this as "3:1e-5,2:5e-4"
        if isinstance(value, str):
            parsed = {}
            for item in filter(None, (part.strip() for part in value.split(","))):
                domain, _, lr = item.partition(":")
                parsed[int(domain)] = float(lr)
            return parsed
        return value

    def finetune_lr(self, domain_id: int) -> float:
        return self.finetune_lr_overrides.get(domain_id, self.lr_finetune)

    def full_scale(self) -> "TrainConfig":
        """Full-scale schedule as published; image size lives in DataConfig"""
        return self.model_copy(update={
            "epochs": 20,
            "finetune_epochs": 40,
            "batch_size": 8,
            "finetune_lr_overrides": {3: 1e-5},
        })


class AblationSwitches(_Section):
    use_mgdf: bool = True
    use_acfd: bool = True
    use_cam: bool = True
    use_base: bool = True
    use_private: bool = True
    use_shared: bool = True
    use_adv: bool = True
    use_cont: bool = True
    use_ortho: bool = True

    @model_validator(mode="after")
    def _one_feature(self):
        if self.use_mgdf and not (self.use_base or self.use_private or self.use_shared):
            raise ValueError("MGDF needs at least one of use_base/use_private/use_shared")
        return self

    @property
    def decomposed(self) -> bool:
        """Shared/private branches are part of the forward pass"""
        return self.use_mgdf or self.use_acfd


class RunSettings(_Section):
    run_name: Optional[str] = None
    out_dir: str = "runs"
    shots: List[int] = Field(default_factory=lambda: [1, 5])
    domains: List[int] = Field(default_factory=list)
    ablation_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    device: str = "cpu"

    @field_validator("shots", "domains", "ablation_seeds", mode="before")
    @classmethod
    def _parse_list(cls, value):
        if isinstance(value, str):
            return [int(item) for item in value.split(",") if item.strip()]
        if isinstance(value, int):
            return [value]
        return value

    @field_validator("shots")
    @classmethod
    def _valid_shots(cls, value: List[int]) -> List[int]:
        if any(k < 1 for k in value):
            raise ValueError("shots must be >= 1")
        return value


class RunConfig(DataConfig, ModelConfig, HeadConfig, TrainConfig, AblationSwitches, RunSettings):
    """Flat record behind the key=value run file; every section is a view of it"""

    def section(self, model: type) -> BaseModel:
        return model(**{name: getattr(self, name) for name in model.model_fields})
