"""Rule-based sentence segmentation.

The segmenter splits on terminal punctuation followed by whitespace (optionally
after closing quotes or brackets), guarded by per-language abbreviation lists.
Chinese and Japanese split on full-width terminals without requiring
whitespace.  Languages without a rule table fall back to the Latin-script
rules and are flagged via ``SentenceList.fallback``.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

CJK_LANGS = frozenset({"zh", "ja"})

_CLOSERS = "\"'”’»)\\]}」』）】"
_LATIN_BOUNDARY = re.compile(r"([.!?…]+)([" + _CLOSERS + r"]*)(\s+)")
_CJK_BOUNDARY = re.compile(r"([。！？]+)([" + _CLOSERS + r"]*)(\s*)")
_PARAGRAPH = re.compile(r"\n[ \t\r\f\v]*\n\s*")
_LEADING_PUNCT = "\"'“‘«([{¿¡"


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class SentenceList:
    """Ordered, non-empty sentences of one document side.

    ``gaps[i]`` is the whitespace that separated sentence ``i`` from sentence
    ``i + 1`` in the original text, so ``text()`` reproduces the stripped input.
    """

    sentences: tuple[str, ...]
    lang: str
    gaps: tuple[str, ...] = ()
    fallback: bool = False

    def __post_init__(self):
        if any(not s.strip() for s in self.sentences):
            raise SegmentationError("sentences must be non-empty after trimming")
        if not self.gaps and len(self.sentences) > 1:
            object.__setattr__(self, "gaps", (joiner(self.lang),) * (len(self.sentences) - 1))
        if len(self.gaps) != max(len(self.sentences) - 1, 0):
            raise SegmentationError("gaps must have one entry per sentence boundary")

    def __len__(self) -> int:
        return len(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    def __iter__(self):
        return iter(self.sentences)

    def text(self) -> str:
        parts = []
        for i, s in enumerate(self.sentences):
            parts.append(s)
            if i < len(self.gaps):
                parts.append(self.gaps[i])
        return "".join(parts)


def base_lang(tag: str) -> str:
    """Primary subtag of a BCP-47-style tag, lowercased (``"zh-Hans"`` -> ``"zh"``)."""
    return re.split(r"[-_]", tag.strip(), maxsplit=1)[0].lower()


def joiner(lang: str) -> str:
    return "" if base_lang(lang) in CJK_LANGS else " "


def join_sentences(sentences: Iterable[str], lang: str) -> str:
    return joiner(lang).join(sentences)


@functools.lru_cache(maxsize=None)
def abbreviations(lang: str) -> frozenset[str] | None:
    """Abbreviation guard list for ``lang``, or None when no list is shipped."""
    name = base_lang(lang) + ".txt"
    try:
        data = resources.files("segale.data.abbrev").joinpath(name).read_text(encoding="utf-8")
    except FileNotFoundError:
        return None
    entries = (line.strip() for line in data.splitlines())
    return frozenset(e for e in entries if e and not e.startswith("#"))


def supported_languages() -> frozenset[str]:
    langs = set(CJK_LANGS)
    for entry in resources.files("segale.data.abbrev").iterdir():
        if entry.name.endswith(".txt"):
            langs.add(entry.name[:-4])
    return frozenset(langs)


def _is_abbreviation(prefix: str, abbrevs: frozenset[str]) -> bool:
    words = prefix.split()
    if not words:
        return False
    word = words[-1].lstrip(_LEADING_PUNCT)
    return word in abbrevs


def _latin_boundaries(text: str, abbrevs: frozenset[str], start: int, end: int):
    for m in _LATIN_BOUNDARY.finditer(text, start, end):
        prefix = text[max(start, m.start(1) - 64):m.start(1)]
        if m.group(1) == "." and _is_abbreviation(prefix, abbrevs):
            continue
        yield m.end(2), m.end(3)


def _cjk_boundaries(text: str, start: int, end: int):
    for m in _CJK_BOUNDARY.finditer(text, start, end):
        yield m.end(2), m.end(3)
    for m in _LATIN_BOUNDARY.finditer(text, start, end):
        if m.group(1) != "." and "…" not in m.group(1):
            yield m.end(2), m.end(3)


def segment(text: str, lang: str) -> SentenceList:
    """Split ``text`` into sentences using the rule set for ``lang``."""
    lang_key = base_lang(lang)
    fallback = lang_key not in supported_languages()
    abbrevs = frozenset() if lang_key in CJK_LANGS else (abbreviations(lang_key) or frozenset())

    stripped = text.strip()
    if not stripped:
        return SentenceList((), lang, (), fallback)

    # Paragraph breaks are hard boundaries; terminal punctuation is searched within paragraphs.
    cuts: list[tuple[int, int]] = []
    para_start = 0
    paragraphs = []
    for m in _PARAGRAPH.finditer(stripped):
        paragraphs.append((para_start, m.start()))
        cuts.append((m.start(), m.end()))
        para_start = m.end()
    paragraphs.append((para_start, len(stripped)))

    for start, end in paragraphs:
        if lang_key in CJK_LANGS:
            found = _cjk_boundaries(stripped, start, end)
        else:
            found = _latin_boundaries(stripped, abbrevs, start, end)
        cuts.extend((a, b) for a, b in found if a < end)

    sentences: list[str] = []
    gaps: list[str] = []
    pos = 0
    for a, b in sorted(set(cuts)):
        if a <= pos:
            continue
        sentences.append(stripped[pos:a])
        gaps.append(stripped[a:b])
        pos = b
    if pos < len(stripped):
        sentences.append(stripped[pos:])
    else:
        gaps.pop()
    return SentenceList(tuple(sentences), lang, tuple(gaps), fallback)


def ingest_segmentation(lines: Sequence[str], lang: str = "und") -> SentenceList:
    """Build a SentenceList from externally segmented text, one sentence per line."""
    sentences = tuple(line.strip() for line in lines if line.strip())
    if not sentences:
        raise SegmentationError("empty segmentation")
    return SentenceList(sentences, lang)


def read_sentence_file(path, lang: str = "und") -> SentenceList:
    with open(path, encoding="utf-8", newline="\n") as f:
        return ingest_segmentation(f.read().split("\n"), lang)


def write_sentence_file(path, sentences: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in sentences:
            f.write(s.replace("\n", " ") + "\n")


def merge_boundaries(sentences: SentenceList) -> str:
    """Join sentences into one unsegmented string, as a document-level system would emit."""
    if not len(sentences):
        raise SegmentationError("cannot merge an empty sentence list")
    return join_sentences(sentences.sentences, sentences.lang)
