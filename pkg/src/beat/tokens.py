"""Discrete code sequences and their text wire format.

A sequence is rendered as ``<ECG_START>`` followed by one ``<ECG_Index_i>``
per code and a closing ``<ECG_END>``. Level-1 codes use their index
directly; level-2 indices are offset by the size of the first codebook, so
both books share one flat index space.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ParseError

START_MARKER = "<ECG_START>"
END_MARKER = "<ECG_END>"
_INDEX_RE = re.compile(r"<ECG_Index_(\d+)>")


@dataclass
class TokenSequence:
    """Ordered discrete codes, each a (level, index) pair with level 1 or 2."""

    codes: list[tuple[int, int]]

    def __post_init__(self):
        for pos, (level, index) in enumerate(self.codes):
            if level not in (1, 2):
                raise ValueError(f"code {pos}: level must be 1 or 2, got {level}")
            if index < 0:
                raise ValueError(f"code {pos}: index must be >= 0, got {index}")

    def __len__(self) -> int:
        return len(self.codes)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenSequence) and self.codes == other.codes


def serialize_tokens(tokens: TokenSequence, k1: int) -> str:
    """Render to wire text. ``k1`` is the core codebook size used to offset
    level-2 indices."""
    parts = [START_MARKER]
    for level, index in tokens.codes:
        flat = index if level == 1 else k1 + index
        parts.append(f"<ECG_Index_{flat}>")
    parts.append(END_MARKER)
    return "".join(parts)


def parse_tokens(text: str, k1: int, k2: int) -> TokenSequence:
    """Exact inverse of :func:`serialize_tokens`.

    Raises :class:`ParseError` with a character offset on missing markers,
    malformed tokens, or indices outside [0, k1 + k2).
    """
    if not text.startswith(START_MARKER):
        raise ParseError(f"token string must start with {START_MARKER}", position="offset 0")
    pos = len(START_MARKER)
    codes: list[tuple[int, int]] = []
    end = len(text)
    while pos < end:
        if text.startswith(END_MARKER, pos):
            pos += len(END_MARKER)
            if pos != end:
                raise ParseError(
                    f"trailing characters after {END_MARKER}", position=f"offset {pos}"
                )
            return TokenSequence(codes=codes)
        match = _INDEX_RE.match(text, pos)
        if not match:
            raise ParseError("expected <ECG_Index_i> or end marker", position=f"offset {pos}")
        flat = int(match.group(1))
        if flat >= k1 + k2:
            raise ParseError(
                f"token index {flat} out of range for codebooks of size {k1}+{k2}",
                position=f"offset {pos}",
            )
        if flat < k1:
            codes.append((1, flat))
        else:
            codes.append((2, flat - k1))
        pos = match.end()
    raise ParseError(f"token string lacks {END_MARKER}", position=f"offset {end}")
