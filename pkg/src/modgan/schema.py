"""Attribute schemas and one-hot condition vectors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class Attribute:
    name: str
    values: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.name:
            raise SchemaError("attribute name must be non-empty")
        if len(self.values) < 2:
            raise SchemaError(f"attribute {self.name!r} needs at least 2 values")
        if len(set(self.values)) != len(self.values):
            raise SchemaError(f"attribute {self.name!r} has duplicate values")

    @property
    def size(self) -> int:
        return len(self.values)

    def index(self, value: str) -> int:
        try:
            return self.values.index(str(value))
        except ValueError:
            raise SchemaError(
                f"unknown value {value!r} for attribute {self.name!r}; expected one of {list(self.values)}"
            ) from None


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered transformable attributes plus an optional content attribute.

    ``attributes`` are the ones owned by transformer/discriminator pairs.
    ``content`` (e.g. the digit number) conditions the generator only; it is
    condition index 0 when present.
    """

    attributes: tuple[Attribute, ...]
    content: Attribute | None = None
    name: str = field(default="custom", compare=False)

    def __post_init__(self) -> None:
        if not self.attributes:
            raise SchemaError("schema needs at least one attribute")
        names = [a.name for a in self.all_attributes]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names in {names}")

    @property
    def n(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def value_counts(self) -> list[int]:
        return [a.size for a in self.attributes]

    @property
    def all_attributes(self) -> tuple[Attribute, ...]:
        return ((self.content,) if self.content else ()) + self.attributes

    def get(self, name: str) -> Attribute:
        for a in self.all_attributes:
            if a.name == name:
                return a
        raise SchemaError(f"unknown attribute {name!r}; expected one of {[a.name for a in self.all_attributes]}")

    def index_of(self, name: str) -> int:
        """Position of a transformable attribute (the T/D index)."""
        for i, a in enumerate(self.attributes):
            if a.name == name:
                return i
        raise SchemaError(f"{name!r} is not a transformable attribute; expected one of {self.names}")

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "attributes": [{"name": a.name, "values": list(a.values)} for a in self.attributes]}
        if self.content:
            d["content"] = {"name": self.content.name, "values": list(self.content.values)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSchema":
        attrs = tuple(Attribute(a["name"], tuple(str(v) for v in a["values"])) for a in d["attributes"])
        content = d.get("content")
        return cls(
            attrs,
            Attribute(content["name"], tuple(str(v) for v in content["values"])) if content else None,
            name=d.get("name", "custom"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "AttributeSchema":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise SchemaError(f"malformed schema file {path}: {e}") from e


def encode_condition(schema: AttributeSchema, attr: str, value: str) -> np.ndarray:
    """One-hot vector of length ``c_i`` selecting ``value`` of ``attr``."""
    a = schema.get(attr)
    vec = np.zeros(a.size, dtype=np.float32)
    vec[a.index(value)] = 1.0
    return vec


COLORMNIST = AttributeSchema(
    (
        Attribute("color", ("red", "blue", "green", "purple", "brown")),
        Attribute("style", ("flat", "stroke")),
        Attribute("bgcolor", ("cyan", "yellow", "white", "silver", "salmon")),
    ),
    content=Attribute("number", tuple(str(d) for d in range(10))),
    name="colormnist",
)

CELEBA = AttributeSchema(
    (
        Attribute("hair", ("black", "blond", "brown")),
        Attribute("gender", ("male", "female")),
        Attribute("smile", ("smile", "nosmile")),
    ),
    name="celeba",
)

BUILTIN_SCHEMAS = {"colormnist": COLORMNIST, "celeba": CELEBA}


def resolve_schema(name_or_path: str) -> AttributeSchema:
    if name_or_path in BUILTIN_SCHEMAS:
        return BUILTIN_SCHEMAS[name_or_path]
    return AttributeSchema.load(name_or_path)
