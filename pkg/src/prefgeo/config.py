"""JSON run configuration shared by the command-line tools."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .design import DesignConfig, UtilitySpec
from .inference import ChainConfig, PriorSpec

SECTIONS = ("model", "seed", "prior", "chain", "utility", "design", "grid", "params")


@dataclass
class RunConfig:
    """Everything a run needs besides command-line flags.

    Sections map onto :class:`PriorSpec`, :class:`ChainConfig`,
    :class:`UtilitySpec` and :class:`DesignConfig`; ``grid`` and ``params``
    describe a custom simulation (bounds, cells, model parameters).
    """

    model: str | None = None
    seed: int | None = None
    prior: dict = field(default_factory=dict)
    chain: dict = field(default_factory=dict)
    utility: dict = field(default_factory=dict)
    design: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(**_checked(PriorSpec, self.prior))

    def chain_config(self, **overrides) -> ChainConfig:
        return ChainConfig(**{**_checked(ChainConfig, self.chain), **_drop_none(overrides)})

    def utility_spec(self, **overrides) -> UtilitySpec:
        kw = {**_checked(UtilitySpec, self.utility), **_drop_none(overrides)}
        if "aux_cells" in kw and kw["aux_cells"] is not None:
            kw["aux_cells"] = tuple(kw["aux_cells"])
        return UtilitySpec(**kw)

    def design_config(self, **overrides) -> DesignConfig:
        return DesignConfig(**{**_checked(DesignConfig, self.design), **_drop_none(overrides)})


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def _checked(cls, section: dict) -> dict:
    known = {f.name for f in fields(cls) if not f.name.startswith("_")}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dict(section)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    return RunConfig(**raw)
