"""Hard-prompt templates and hybrid (text + ID reference) prompts.

Template syntax: literal text with the placeholders ``<USER>``, ``<ITEM>`` and
``<USER-ITEM>``. A bracketed segment ``[ ... ]`` is optional and is dropped
when every placeholder inside it renders empty, e.g.::

    Your task is to recommend ...[ based on their purchase history: <USER-ITEM>]
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

SLOTS = ("<USER>", "<ITEM>", "<USER-ITEM>")
_TOKEN_RE = re.compile(r"(<[A-Z][A-Z-]*>|\[|\])")

DEFAULT_USER_TEMPLATE = (
    "Your task is to recommend the next product user may be interested"
    "[ based on their purchase history: <USER-ITEM>]"
)
DEFAULT_ITEM_TEMPLATE = "The product is <ITEM>"
DEFAULT_MAX_HISTORY = 10


class TemplateError(ValueError):
    pass


class UnknownIdError(KeyError):
    pass


@dataclass(frozen=True)
class _Segment:
    parts: tuple[str, ...]  # literal strings and slot names, in order
    optional: bool


@dataclass(frozen=True)
class PromptTemplate:
    source: str
    segments: tuple[_Segment, ...]

    @classmethod
    def parse(cls, source: str) -> PromptTemplate:
        segments: list[_Segment] = []
        current: list[str] = []
        in_optional = False
        for piece in _TOKEN_RE.split(source):
            if not piece:
                continue
            if piece == "[":
                if in_optional:
                    raise TemplateError("nested optional segments are not supported")
                if current:
                    segments.append(_Segment(tuple(current), False))
                current, in_optional = [], True
            elif piece == "]":
                if not in_optional:
                    raise TemplateError("unbalanced ']' in template")
                segments.append(_Segment(tuple(current), True))
                current, in_optional = [], False
            elif piece.startswith("<") and piece.endswith(">"):
                if piece not in SLOTS:
                    raise TemplateError(f"unknown placeholder {piece}")
                current.append(piece)
            else:
                current.append(piece)
        if in_optional:
            raise TemplateError("unterminated '[' in template")
        if current:
            segments.append(_Segment(tuple(current), False))
        return cls(source, tuple(segments))

    @classmethod
    def load(cls, path: str | Path) -> PromptTemplate:
        return cls.parse(Path(path).read_text(encoding="utf-8").rstrip("\n"))

    def serialize(self) -> str:
        out = []
        for seg in self.segments:
            body = "".join(seg.parts)
            out.append(f"[{body}]" if seg.optional else body)
        return "".join(out)

    @property
    def slots(self) -> tuple[str, ...]:
        return tuple(p for seg in self.segments for p in seg.parts if p in SLOTS)

    @property
    def task_description(self) -> str:
        return "".join(p for seg in self.segments if not seg.optional
                       for p in seg.parts if p not in SLOTS).strip()

    def render(self, values: Mapping[str, str]) -> str:
        out = []
        for seg in self.segments:
            slot_values = [values.get(p, "") for p in seg.parts if p in SLOTS]
            if seg.optional and slot_values and not any(slot_values):
                continue
            for p in seg.parts:
                if p in SLOTS:
                    if p not in values:
                        raise TemplateError(f"no value supplied for {p}")
                    out.append(values[p])
                else:
                    out.append(p)
        return "".join(out).strip()


def default_user_template() -> PromptTemplate:
    return PromptTemplate.parse(DEFAULT_USER_TEMPLATE)


def default_item_template() -> PromptTemplate:
    return PromptTemplate.parse(DEFAULT_ITEM_TEMPLATE)


def render_hard_prompt(template: PromptTemplate, history_titles: Sequence[str | None],
                       max_history: int = DEFAULT_MAX_HISTORY, user_profile: str = "") -> str:
    """Render a user prompt from a time-ordered history of titles (most recent last)."""
    if max_history < 0:
        raise TemplateError("max_history must be non-negative")
    shown = list(history_titles)[-max_history:] if max_history else []
    for k, title in enumerate(shown):
        if not title:
            raise TemplateError(f"missing title for history item {k}")
    return template.render({"<USER>": user_profile, "<USER-ITEM>": ", ".join(shown), "<ITEM>": ""})


def render_item_prompt(template: PromptTemplate, title: str) -> str:
    if not title:
        raise TemplateError("item title is empty")
    return template.render({"<ITEM>": title, "<USER>": "", "<USER-ITEM>": ""})


@dataclass(frozen=True)
class HybridPrompt:
    hard_text: str
    user_ref: int | None = None
    item_ref: int | None = None

    def __post_init__(self):
        if not self.hard_text and self.user_ref is None and self.item_ref is None:
            raise TemplateError("a hybrid prompt needs text or an ID reference")


def build_hybrid(text: str, *, user: int | None = None, item: int | None = None,
                 known_users: Iterable[int] | int | None = None,
                 known_items: Iterable[int] | int | None = None) -> HybridPrompt:
    """Pair rendered text with a user or item reference, checking the id exists.

    ``known_*`` may be a collection of ids or a count (ids 0..count-1).
    """
    if (user is None) == (item is None):
        raise TemplateError("exactly one of user / item must be referenced")
    ref, known, kind = (user, known_users, "user") if user is not None else (item, known_items, "item")
    if known is not None:
        ok = 0 <= ref < known if isinstance(known, int) else ref in set(known)
        if not ok:
            raise UnknownIdError(f"unknown {kind} {ref}")
    return HybridPrompt(text, user_ref=user, item_ref=item)
