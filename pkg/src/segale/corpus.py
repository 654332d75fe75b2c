"""Corpus container and JSONL I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator

from segale.textseg import SentenceList, base_lang, segment


class CorpusError(ValueError):
    pass


def split_lang_pair(lang_pair: str) -> tuple[str, str]:
    src, sep, tgt = lang_pair.partition("-")
    if not sep:
        return lang_pair, lang_pair
    # Tags like zh-Hans-en would be ambiguous; only the primary subtags matter to the segmenter.
    return base_lang(src), base_lang(tgt)


@dataclass(frozen=True)
class Document:
    doc_id: str
    lang_pair: str
    src: SentenceList
    hyp_text: str | None = None
    hyp: SentenceList | None = None
    ref: SentenceList | None = None
    system_id: str = ""

    def __post_init__(self):
        if self.hyp is None and self.hyp_text is None:
            raise CorpusError(f"document {self.doc_id!r} has neither hyp nor hyp_text")
        if self.ref is not None and len(self.ref) != len(self.src):
            raise CorpusError(f"document {self.doc_id!r}: {len(self.ref)} reference sentences for {len(self.src)} source")

    @property
    def src_lang(self) -> str:
        return split_lang_pair(self.lang_pair)[0]

    @property
    def tgt_lang(self) -> str:
        return split_lang_pair(self.lang_pair)[1]

    def hyp_sentences(self) -> SentenceList:
        """The segmented hypothesis, running the built-in segmenter on raw text when needed."""
        if self.hyp is not None:
            return self.hyp
        return segment(self.hyp_text, self.tgt_lang)

    def to_json(self) -> dict:
        out = {"doc_id": self.doc_id, "lang_pair": self.lang_pair, "system_id": self.system_id, "src": list(self.src)}
        if self.hyp is not None:
            out["hyp"] = list(self.hyp)
        else:
            out["hyp_text"] = self.hyp_text
        if self.ref is not None:
            out["ref"] = list(self.ref)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> Document:
        missing = [k for k in ("doc_id", "lang_pair", "src") if k not in obj]
        if missing:
            raise CorpusError(f"missing field(s) {', '.join(missing)}")
        src_lang, tgt_lang = split_lang_pair(obj["lang_pair"])

        def sent_list(key, lang):
            value = obj.get(key)
            if value is None:
                return None
            if not isinstance(value, list) or not all(isinstance(s, str) for s in value):
                raise CorpusError(f"field {key!r} must be a list of strings")
            if any(not s.strip() for s in value):
                raise CorpusError(f"field {key!r} contains an empty sentence")
            return SentenceList(tuple(value), lang)

        src = sent_list("src", src_lang)
        if not len(src):
            raise CorpusError("source has no sentences")
        hyp_text = obj.get("hyp_text")
        if hyp_text is not None and not isinstance(hyp_text, str):
            raise CorpusError("field 'hyp_text' must be a string")
        return cls(
            doc_id=str(obj["doc_id"]),
            lang_pair=obj["lang_pair"],
            src=src,
            hyp_text=hyp_text,
            hyp=sent_list("hyp", tgt_lang),
            ref=sent_list("ref", tgt_lang),
            system_id=str(obj.get("system_id", "")),
        )


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]

    def __post_init__(self):
        seen = set()
        for d in self.documents:
            key = (d.doc_id, d.system_id)
            if key in seen:
                raise CorpusError(f"duplicate document {d.doc_id!r} for system {d.system_id!r}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)


def read_corpus(path) -> Corpus:
    docs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                docs.append(Document.from_json(json.loads(line)))
            except (json.JSONDecodeError, CorpusError) as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from e
    try:
        return Corpus(tuple(docs))
    except CorpusError as e:
        raise CorpusError(f"{path}: {e}") from e


def write_corpus(path, corpus: Corpus | Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for d in corpus:
            f.write(json.dumps(d.to_json(), ensure_ascii=False) + "\n")
