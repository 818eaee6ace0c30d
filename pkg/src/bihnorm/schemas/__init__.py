"""JSON schemas for the files written by the package."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

NAMES = ("thresholds", "solver_report", "radial_field", "energy", "bubbles", "multiplicity")


@lru_cache(maxsize=None)
def load(name: str) -> dict:
    if name not in NAMES:
        raise KeyError(f"unknown schema {name!r}")
    return json.loads(resources.files(__name__).joinpath(f"{name}.json").read_text())


def validate(payload: dict, name: str) -> None:
    """Raise jsonschema.ValidationError if ``payload`` does not match."""
    jsonschema.validate(payload, load(name))
