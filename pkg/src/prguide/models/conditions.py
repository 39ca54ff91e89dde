"""Conditioning signals: unconditional, a prompt label, or a prompt plus subject."""
from dataclasses import dataclass

from prguide.exceptions import ParameterError

__all__ = ["Condition"]


@dataclass(frozen=True)
class Condition:
    """Conditioning signal.

    ``label=None`` is the unconditional (empty prompt) case.  ``subject`` is
    the toy stand-in for a personalized "[V]" token and requires a label.
    """

    label: int | None = None
    subject: int | None = None

    def __post_init__(self):
        if self.subject is not None and self.label is None:
            raise ParameterError("a subject token requires a prompt label")
        for name in ("label", "subject"):
            v = getattr(self, name)
            if v is not None and (int(v) != v or v < 0):
                raise ParameterError(f"{name} must be a non-negative integer, got {v!r}")

    @classmethod
    def unconditional(cls):
        return cls()

    @classmethod
    def prompt(cls, label):
        return cls(label=label)

    @classmethod
    def subject_prompt(cls, label, subject):
        return cls(label=label, subject=subject)

    @property
    def kind(self):
        if self.label is None:
            return "Unconditional"
        return "Prompt" if self.subject is None else "SubjectPrompt"

    def __str__(self):
        if self.label is None:
            return "Unconditional"
        if self.subject is None:
            return f"Prompt({self.label})"
        return f"SubjectPrompt({self.label}, {self.subject})"
