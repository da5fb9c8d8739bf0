"""Typed save/load on top of the SAMM0001 container."""

from __future__ import annotations

from .model_io import read_model, write_model
from .shape import ShapeModel
from .texture import AppearanceModel, TextureModel

_KINDS = {"shape": ShapeModel, "texture": TextureModel, "appearance": AppearanceModel}


def save_model(model, path) -> None:
    write_model(model, path)


def load_model(path):
    c = read_model(path)
    return _KINDS[c.kind].from_container(c)


def model_kind(model) -> str:
    for kind, cls in _KINDS.items():
        if isinstance(model, cls):
            return kind
    raise TypeError(f"not a samforge model: {type(model).__name__}")
