"""Declarative pipeline configuration.

Every input of the identification procedure maps to a named field: the
screening threshold ``alpha``, the CCI threshold ``cci_threshold``, the
in-study network (Z), the candidate networks (L) and the subject index (J,
implicit in the dataset layout).
"""

import hashlib
import json
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator

from ml_models.nfivae_model import NfIvaeConfig
from services.kernel_tests import NullConfig, NullMethod

CONFIG_VERSION = 1


class StabilitySettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    n_runs: int = Field(default=30, ge=2)
    k: int = Field(default=5, ge=1)


class SkeletonSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    reference_subject: int = Field(default=0, ge=0)
    max_samples: int = Field(default=300, ge=8)


class PathSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset: Optional[str] = None
    output: str = "results"


class NetworkSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    study: str = "study"
    # empty means every network other than the study network
    candidates: List[str] = Field(default_factory=list)


class PipelineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    cci_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    null_method: NullMethod = NullMethod.SPECTRAL
    n_null_draws: int = Field(default=1000, ge=100)
    fdr: bool = False
    cci_assignment: str = Field(default="independent", pattern="^(independent|one_to_one)$")
    seed: int = 0
    workers: int = Field(default=1, ge=1)
    nfivae: NfIvaeConfig = Field(default_factory=NfIvaeConfig)
    stability: StabilitySettings = Field(default_factory=StabilitySettings)
    skeleton: SkeletonSettings = Field(default_factory=SkeletonSettings)
    paths: PathSettings = Field(default_factory=PathSettings)
    networks: NetworkSettings = Field(default_factory=NetworkSettings)

    @field_validator("null_method")
    @classmethod
    def _conditional_capable(cls, method: NullMethod) -> NullMethod:
        # the permutation oracle has no conditional form
        if method == NullMethod.PERMUTATION:
            raise ValueError("null_method must be spectral or gamma")
        return method

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "PipelineConfig":
        return cls.model_validate_json(Path(path).read_text())

    def null_config(self) -> NullConfig:
        return NullConfig(method=self.null_method, n_draws=self.n_null_draws, seed=self.seed)

    def nfivae_config(self, latent_dim: Optional[int] = None) -> NfIvaeConfig:
        """NF-iVAE settings, sized to ``latent_dim`` when given"""
        if latent_dim is None:
            return self.nfivae.model_copy()
        return NfIvaeConfig.model_validate({**self.nfivae.model_dump(), "latent_dim": latent_dim})

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()
