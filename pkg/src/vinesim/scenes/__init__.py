"""Shipped example scene files."""

from __future__ import annotations

import json
from importlib import resources

BUILTIN_SCENES = ("circle", "wall", "cluttered", "oscillation")


def builtin_scene_path(name: str):
    if name not in BUILTIN_SCENES:
        raise KeyError(f"unknown built-in scene {name!r}; choose from {BUILTIN_SCENES}")
    return resources.files(__name__).joinpath(f"{name}.json")


def builtin_scene_data(name: str) -> dict:
    return json.loads(builtin_scene_path(name).read_text())
