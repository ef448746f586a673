"""Rare-token registry, age-group taxonomy, and prompt/caption rendering."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

from .errors import RangeError, UnknownTokenError


class AgeGroup(Enum):
    """Six categorical age buckets partitioning [0, inf) in years.

    Boundary ages belong to the older group (left-closed intervals).
    """

    CHILD = "child"
    TEENAGER = "teenager"
    YOUNGADULTS = "youngadults"
    MIDDLEAGED = "middleaged"
    ELDERLY = "elderly"
    OLD = "old"


# Lower bound (inclusive) of each group, in ascending order.
_GROUP_LOWER_BOUNDS = [
    (AgeGroup.CHILD, 0.0),
    (AgeGroup.TEENAGER, 15.0),
    (AgeGroup.YOUNGADULTS, 30.0),
    (AgeGroup.MIDDLEAGED, 40.0),
    (AgeGroup.ELDERLY, 50.0),
    (AgeGroup.OLD, 65.0),
]

AGE_GROUPS = tuple(g for g, _ in _GROUP_LOWER_BOUNDS)
CAPTION_VOCABULARY = tuple(g.value for g in AGE_GROUPS)

DEFAULT_RARE_TOKENS = ("wzx", "sks", "ams", "ukj")


def bucket_age(age: float) -> AgeGroup:
    """Map an age in years to its categorical group."""
    if age < 0:
        raise RangeError(f"age must be >= 0, got {age}")
    result = AgeGroup.CHILD
    for group, lower in _GROUP_LOWER_BOUNDS:
        if age >= lower:
            result = group
    return result


def render_caption(g: AgeGroup) -> str:
    """The single lowercase caption word for a group."""
    return g.value


def parse_caption(word: str) -> AgeGroup:
    """Inverse of render_caption."""
    try:
        return AgeGroup(word)
    except ValueError:
        raise UnknownTokenError(
            f"caption {word!r} not in vocabulary {CAPTION_VOCABULARY}"
        ) from None


def group_index(g: AgeGroup) -> int:
    """Ordinal position of a group, child=0 ... old=5."""
    return AGE_GROUPS.index(g)


class TokenRegistry:
    """Registry of rare subject-identifier tokens.

    Defaults to the four stock tokens; extensible, with a warning for tokens
    longer than 3 characters (long tokens collide with common vocabulary).
    """

    def __init__(self, tokens=DEFAULT_RARE_TOKENS):
        self._tokens = list(tokens)

    def register(self, token: str) -> None:
        if not token or token != token.lower():
            raise UnknownTokenError(f"rare token must be a nonempty lowercase string, got {token!r}")
        if len(token) > 3:
            warnings.warn(
                f"rare token {token!r} is longer than 3 characters; short tokens are less "
                "likely to collide with existing concepts",
                stacklevel=2,
            )
        if token not in self._tokens:
            self._tokens.append(token)

    def is_registered(self, token: str) -> bool:
        return token in self._tokens

    def require(self, token: str) -> None:
        if not self.is_registered(token):
            raise UnknownTokenError(
                f"rare token {token!r} is not registered (registered: {self._tokens})"
            )

    @property
    def tokens(self) -> tuple:
        return tuple(self._tokens)


DEFAULT_REGISTRY = TokenRegistry()


@dataclass(frozen=True)
class PromptSpec:
    """Token + class label + age group triple behind every inference prompt."""

    token: str
    age_group: AgeGroup
    class_label: str = "person"
    registry: TokenRegistry = field(default=DEFAULT_REGISTRY, compare=False)

    def __post_init__(self):
        if not self.class_label:
            raise UnknownTokenError("class_label must be nonempty")
        self.registry.require(self.token)


def render_prompt(p: PromptSpec) -> str:
    """Render the inference prompt, e.g. 'photo of a sks person as child'."""
    p.registry.require(p.token)
    return f"photo of a {p.token} {p.class_label} as {render_caption(p.age_group)}"


def render_training_prompt(token: str, class_label: str = "person",
                           registry: TokenRegistry = DEFAULT_REGISTRY) -> str:
    """Subject-image training prompt: rare token, no age word."""
    registry.require(token)
    return f"photo of a {token} {class_label}"


def render_class_prompt(caption: str, class_label: str = "person") -> str:
    """Regularization-image prompt: class label plus age caption, no rare token."""
    parse_caption(caption)
    return f"photo of a {class_label} as {caption}"
