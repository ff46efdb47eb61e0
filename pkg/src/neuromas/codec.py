"""Text <-> token stream mapping for toy-policy nodes.

A rendered prompt is reduced to its content fields (the problem text and the
incoming payloads), each encoded character by character and closed by a
separator. Vocabulary characters map to their own token, whitespace is dropped
and every other character falls into one of a few hash buckets.

Incoming payloads are laid out in descending sender position, so the message
from position 1 of the previous layer sits right before the generation point.
Adding senders at higher positions (width growth) therefore leaves the nearest
part of an inherited node's stream unchanged.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass

from neuromas.policy import FeatureConfig, Vocabulary

_SECTION_RE = re.compile(
    r"^(PROBLEM:|PREVIOUS:|ALL OUTPUTS:|Write a private message to each downstream node\.|"
    r"Answer with A, B, C, or D\.|Answer Yes or No\.|Provide the function body:)$",
    re.MULTILINE,
)
_PAYLOAD_RE = re.compile(r"^\[(?:from L\d+P\d+|N\d+)\]: ?", re.MULTILINE)


@dataclass(frozen=True)
class ContextFields:
    question: str
    payloads: tuple[str, ...]


def extract_fields(text: str) -> ContextFields:
    """Recover the problem text and incoming payloads from a rendered prompt."""
    marks = list(_SECTION_RE.finditer(text))
    sections: dict[str, str] = {}
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(text)
        sections.setdefault(m.group(1), text[m.end():end])
    question = sections.get("PROBLEM:", "").strip("\n")
    block = sections.get("PREVIOUS:", sections.get("ALL OUTPUTS:", ""))
    heads = list(_PAYLOAD_RE.finditer(block))
    payloads = []
    for i, h in enumerate(heads):
        end = heads[i + 1].start() if i + 1 < len(heads) else len(block)
        payloads.append(block[h.end():end].strip("\n"))
    return ContextFields(question, tuple(payloads))


class ToyCodec:
    def __init__(self, vocab: Vocabulary, features: FeatureConfig):
        self.vocab = vocab
        self.features = features
        self.sep = features.sep_id(vocab)
        self._ids = {s: i for i, s in enumerate(vocab.symbols)}

    def encode_text(self, text: str) -> list[int]:
        out = []
        for ch in text:
            if ch.isspace():
                continue
            tok = self._ids.get(ch)
            if tok is None:
                tok = self.features.bucket_id(self.vocab, zlib.crc32(ch.encode("utf-8")))
            out.append(tok)
        return out

    def encode_fields(self, fields: ContextFields) -> list[int]:
        stream = self.encode_text(fields.question) + [self.sep]
        for payload in reversed(fields.payloads):
            stream += self.encode_text(payload) + [self.sep]
        return stream

    def encode_context(self, text: str) -> list[int]:
        return self.encode_fields(extract_fields(text))

    def decode(self, tokens) -> str:
        return self.vocab.decode(tokens)
