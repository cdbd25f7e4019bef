"""
Experiment Schemas - ablation grids and sweeps
"""
from typing import Dict, List

from pydantic import BaseModel, Field, model_validator


class ExperimentRun(BaseModel):
    """One grid row: a run id plus dotted-key overrides"""
    run_id: str = Field(..., min_length=1, pattern=r"^[A-Za-z0-9_.\-]+$")
    overrides: Dict[str, str] = Field(default_factory=dict)


class ExperimentManifest(BaseModel):
    """
    Ablation or sweep grid.

    Text form, one run per line:
        <run_id><TAB>key=value,key=value
    Blank lines and '#' comments are ignored.
    """
    runs: List[ExperimentRun] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_unique_ids(self):
        ids = [run.run_id for run in self.runs]
        if len(set(ids)) != len(ids):
            raise ValueError("Experiment run ids must be unique")
        return self

    @classmethod
    def from_text(cls, text: str) -> "ExperimentManifest":
        runs = []
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            run_id, _, assignments = line.partition("\t")
            overrides = {}
            for item in filter(None, (part.strip() for part in assignments.split(","))):
                key, sep, value = item.partition("=")
                if not sep:
                    raise ValueError(f"Override '{item}' is not key=value")
                overrides[key.strip()] = value.strip()
            runs.append(ExperimentRun(run_id=run_id.strip(), overrides=overrides))
        return cls(runs=runs)
