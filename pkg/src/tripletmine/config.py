"""Run configuration: one flat JSON file plus CLI-flag overrides.

Precedence is flags over file over defaults. Defaults are the reference
pipeline settings: 10 seeds per prompt, 5 retries per instruction, both
score thresholds at 4.7, pixel threshold 40, minimum component fraction
0.005, 4 generator steps, and editor steps drawn from [18, 28].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .augment import AugmentConfig
from .diffgate import DiffGateConfig
from .gateway import EndpointConfig, Role
from .scheduler import PipelineConfig


@dataclass(frozen=True)
class RunConfig:
    seeds_per_prompt: int = 10
    retries_per_edit: int = 5
    t_adherence: float = 4.7
    t_aesthetic: float = 4.7
    t_inv_adherence: float = 4.7
    t_inv_aesthetic: float = 4.7
    master_seed: int = 0
    max_parallel_jobs: int = 1
    budget_gpu_hours: float | None = None
    generator_steps: int = 4
    pixel_threshold: int = 40
    min_component_fraction: float = 0.005
    connectivity: int = 4
    channel_mode: str = "max"
    max_compositions_per_source: int | None = 1
    rewrite_composites: bool = False
    endpoint: str | None = None
    timeout: float = 120.0
    max_retries: int = 2
    estimated_source_cost: float = 0.025
    estimated_job_cost: float = 0.13

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            seeds_per_prompt=self.seeds_per_prompt,
            retries_per_edit=self.retries_per_edit,
            t_adherence=self.t_adherence,
            t_aesthetic=self.t_aesthetic,
            t_inv_adherence=self.t_inv_adherence,
            t_inv_aesthetic=self.t_inv_aesthetic,
            master_seed=self.master_seed,
            max_parallel_jobs=self.max_parallel_jobs,
            budget_gpu_hours=math.inf if self.budget_gpu_hours is None else self.budget_gpu_hours,
            generator_steps=self.generator_steps,
        )

    def diff_config(self) -> DiffGateConfig:
        return DiffGateConfig(
            pixel_threshold=self.pixel_threshold,
            min_component_fraction=self.min_component_fraction,
            connectivity=self.connectivity,
            channel_mode=self.channel_mode,
        )

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            max_compositions_per_source=self.max_compositions_per_source,
            rewrite_composites=self.rewrite_composites,
            seed=self.master_seed,
            t_inv_adherence=self.t_inv_adherence,
            t_inv_aesthetic=self.t_inv_aesthetic,
        )

    def endpoints(self) -> dict[Role, EndpointConfig]:
        if not self.endpoint:
            raise ValueError("no endpoint URL configured (use --endpoint or the config file)")
        temps = {Role.PRE_VALIDATOR: 1e-6, Role.HARD_VALIDATOR: 0.0}
        return {
            role: EndpointConfig(
                role=role,
                base_url=self.endpoint,
                timeout=self.timeout,
                max_retries=self.max_retries,
                temperature=temps.get(role, 0.0),
            )
            for role in Role
        }

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def build_config(file_path: str | Path | None, overrides: Mapping[str, Any]) -> RunConfig:
    """Merge defaults, an optional JSON config file, and explicit overrides.

    Unknown file keys fail loudly; override values of None mean "not set on
    the command line" and are skipped.
    """
    merged: dict[str, Any] = {}
    if file_path is not None:
        raw = json.loads(Path(file_path).read_text(encoding="utf-8"))
        if not isinstance(raw, dict):
            raise ValueError("config file must hold a JSON object")
        unknown = set(raw) - _FIELD_NAMES
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(raw)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELD_NAMES:
            raise ValueError(f"unknown config override {key!r}")
        merged[key] = value
    config = RunConfig(**merged)
    config.pipeline_config()
    config.diff_config()
    config.augment_config()
    return config
