"""Keyword retrieval over the operations corpus (TF-IDF cosine)."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from importlib import resources

_TOKEN = re.compile(r"[a-z0-9]+")


class EmptyStore(RuntimeError):
    pass


def tokenize(text: str) -> list:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str


@dataclass(frozen=True)
class RetrievedChunk:
    doc_id: str
    span: tuple
    score: float

    def text(self, store: "DocumentStore") -> str:
        body = store.get(self.doc_id).body
        return body[self.span[0]:self.span[1]]


class DocumentStore:
    def __init__(self, documents=()):
        self._docs = {}
        for doc in documents:
            self.add(doc)

    def add(self, doc: Document) -> None:
        if doc.doc_id in self._docs:
            raise ValueError(f"duplicate document id {doc.doc_id!r}")
        self._docs[doc.doc_id] = doc

    def get(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    def __len__(self):
        return len(self._docs)

    def documents(self) -> list:
        return [self._docs[k] for k in sorted(self._docs)]


def builtin_store() -> DocumentStore:
    """The corpus shipped with the package (manuals, datasheets, playbook)."""
    store = DocumentStore()
    root = resources.files("adonsim.agent").joinpath("corpus")
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if not entry.name.endswith(".txt"):
            continue
        body = entry.read_text(encoding="utf-8")
        title = body.splitlines()[0].strip() if body else entry.name
        store.add(Document(doc_id=entry.name[:-4], title=title, body=body))
    return store


def retrieve(store: DocumentStore, query: str, k: int = 3) -> list:
    """Top-k documents by TF-IDF cosine similarity; ties break by doc id.

    Documents with zero overlap are omitted, so an unrelated query yields an
    empty list rather than an error.
    """
    docs = store.documents()
    if not docs:
        raise EmptyStore("document store is empty")
    n = len(docs)
    doc_tokens = {d.doc_id: tokenize(d.title + "\n" + d.body) for d in docs}
    df = {}
    for toks in doc_tokens.values():
        for t in set(toks):
            df[t] = df.get(t, 0) + 1
    idf = {t: math.log(n / c) for t, c in df.items()}

    def vector(tokens) -> dict:
        tf = {}
        for t in tokens:
            tf[t] = tf.get(t, 0) + 1
        return {t: c * idf[t] for t, c in tf.items() if t in idf}

    qv = vector(tokenize(query))
    qnorm = math.sqrt(sum(w * w for w in qv.values()))
    scored = []
    for doc in docs:
        dv = vector(doc_tokens[doc.doc_id])
        dot = sum(w * dv.get(t, 0.0) for t, w in qv.items())
        if dot <= 0.0 or qnorm == 0.0:
            continue
        dnorm = math.sqrt(sum(w * w for w in dv.values()))
        score = dot / (qnorm * dnorm) if dnorm > 0 else 0.0
        if score > 0.0:
            scored.append(RetrievedChunk(doc.doc_id, (0, len(doc.body)), score))
    scored.sort(key=lambda c: (-c.score, c.doc_id))
    return scored[:k]
