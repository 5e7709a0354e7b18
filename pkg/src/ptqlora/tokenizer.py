"""Character-level tokenizer over printable ASCII plus newline and three specials."""

from __future__ import annotations

import numpy as np

PAD = 0
EOS = 1
SEP = 2
_SPECIALS = 3
_CHARS = "\n" + "".join(chr(c) for c in range(32, 127))
_INDEX = {ch: i + _SPECIALS for i, ch in enumerate(_CHARS)}
_UNKNOWN = _INDEX["?"]

VOCAB_SIZE = _SPECIALS + len(_CHARS)


def encode(text: str) -> list[int]:
    return [_INDEX.get(ch, _UNKNOWN) for ch in text]


def decode(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i >= _SPECIALS:
            out.append(_CHARS[i - _SPECIALS])
    return "".join(out)


def encode_example(prompt: str, response: str, max_input: int | None = None):
    """Token ids and loss targets for ``prompt SEP response EOS``.

    Returns ``(ids, is_target)`` where ``is_target[i]`` marks positions whose
    *next* token is part of the response (including the final EOS).
    """
    p = truncate_prompt(encode(prompt), max_input)
    r = encode(response)
    ids = p + [SEP] + r + [EOS]
    is_target = np.zeros(len(ids), dtype=bool)
    is_target[len(p) : len(ids) - 1] = True
    return ids, is_target


def truncate_prompt(ids: list[int], max_input: int | None) -> list[int]:
    """Left-truncate so the most recent ``max_input`` tokens survive."""
    if max_input is not None and len(ids) > max_input:
        return ids[len(ids) - max_input :]
    return ids
