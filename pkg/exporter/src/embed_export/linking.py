"""Entity linkers.

A linker turns a token sequence into scored entity mentions. Linker
specs are strings: ``dict`` for the built-in dictionary linker (surface
forms derived from the entity vocabulary itself), ``wat:<endpoint>``
for a WAT-style annotation service. Any exception a linker raises is
treated by the export pipeline as a per-document failure.
"""

from __future__ import annotations

import dataclasses
import json
from collections.abc import Iterable

from .encoders import tokenize
from .errors import ExportError


@dataclasses.dataclass(frozen=True)
class Mention:
    entity_id: str
    score: float
    start: int


class DictionaryLinker:
    """Exact-phrase linking against the entity vocabulary.

    Surface forms come from the entity ids themselves: underscores
    become spaces and the result is tokenized, so ``Neural_network``
    matches the token run ``neural network``. The scan is greedy
    left-to-right, longest match first (up to three tokens), mentions do
    not overlap, and every match scores 1.0. When two ids collapse to
    the same surface the first one registered keeps it.
    """

    max_ngram = 3

    def __init__(self, entity_ids: Iterable[str]):
        self._surfaces: dict[tuple[str, ...], str] = {}
        for eid in entity_ids:
            surface = tuple(tokenize(eid.replace("_", " ")))
            if surface and surface not in self._surfaces:
                self._surfaces[surface] = eid

    def link(self, tokens: list[str]) -> list[Mention]:
        mentions = []
        i, n = 0, len(tokens)
        while i < n:
            for width in range(min(self.max_ngram, n - i), 0, -1):
                eid = self._surfaces.get(tuple(tokens[i : i + width]))
                if eid is not None:
                    mentions.append(Mention(eid, 1.0, i))
                    i += width
                    break
            else:
                i += 1
        return mentions


class WatLinker:
    """Client for a WAT-style annotation endpoint.

    Sends the joined token text and reads ``annotations`` entries of the
    form ``{"id": ..., "rho": ..., "start": ...}``. Transport and
    decoding failures propagate to the caller.
    """

    def __init__(self, endpoint: str):
        self.endpoint = endpoint

    def link(self, tokens: list[str]) -> list[Mention]:
        import urllib.parse
        import urllib.request

        query = urllib.parse.urlencode({"text": " ".join(tokens)})
        with urllib.request.urlopen(f"{self.endpoint}?{query}", timeout=30) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        return [
            Mention(str(ann["id"]), float(ann["rho"]), int(ann.get("start", 0)))
            for ann in payload.get("annotations", [])
        ]


def get_linker(spec: str, entity_ids: Iterable[str]):
    """Build a linker from its spec string.

    The dictionary linker draws its surface forms from ``entity_ids``;
    the WAT client ignores them.
    """
    if spec == "dict":
        return DictionaryLinker(entity_ids)
    if spec.startswith("wat:"):
        return WatLinker(spec.split(":", 1)[1])
    raise ExportError(f"unknown linker {spec!r}")
