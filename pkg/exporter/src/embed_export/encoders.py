"""Token encoders.

An encoder owns its tokenization and produces one vector per token from
the final hidden layer (or the deterministic stand-in below). The
protocol is three members: ``dim``, ``limit`` (the longest token
sequence the encoder accepts), ``tokenize(text)``, and
``embed_batch(token_lists)``.

Encoder specs are strings: ``hash`` or ``hash:<dim>`` for the built-in
stand-in, ``hf:<checkpoint>`` for a transformers checkpoint. The hf
route needs the optional ``transformers`` and ``torch`` packages and is
only imported when asked for.
"""

from __future__ import annotations

import hashlib
import math
import re

import numpy as np

from .errors import ExportError

_WORD = re.compile(r"[0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercased alphanumeric runs, in text order."""
    return _WORD.findall(text.lower())


class HashEncoder:
    """Deterministic encoder: per-token vectors seeded from a hash.

    Each distinct token string maps to a fixed unit-scale vector
    (an 8-byte blake2b digest seeds the generator, so the mapping is
    stable across runs and platforms). Neighbouring tokens are mixed in
    at quarter weight, which makes rows context-dependent the way a real
    contextual encoder's are: the same token gets different vectors in
    different positions.
    """

    limit = 4096

    def __init__(self, dim: int = 32):
        if dim < 1:
            raise ExportError(f"encoder dim must be >= 1, got {dim}")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def tokenize(self, text: str) -> list[str]:
        return tokenize(text)

    def _base(self, token: str) -> np.ndarray:
        cached = self._cache.get(token)
        if cached is None:
            seed = int.from_bytes(
                hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little"
            )
            rng = np.random.default_rng(seed)
            cached = rng.standard_normal(self.dim) / math.sqrt(self.dim)
            self._cache[token] = cached
        return cached

    def embed(self, tokens: list[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        base = np.stack([self._base(t) for t in tokens])
        out = base.copy()
        out[1:] += 0.25 * base[:-1]
        out[:-1] += 0.25 * base[1:]
        return out

    def embed_batch(self, token_lists: list[list[str]]) -> list[np.ndarray]:
        return [self.embed(tokens) for tokens in token_lists]


class HfEncoder:
    """Final-hidden-layer wrapper around a transformers checkpoint."""

    def __init__(self, checkpoint: str):
        try:
            import torch  # noqa: F401
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:
            raise ExportError(
                f"encoder 'hf:{checkpoint}' needs the transformers and torch packages"
            ) from exc
        self._tokenizer = AutoTokenizer.from_pretrained(checkpoint)
        self._model = AutoModel.from_pretrained(checkpoint)
        self._model.eval()
        self.dim = int(self._model.config.hidden_size)
        self.limit = int(self._tokenizer.model_max_length)

    def tokenize(self, text: str) -> list[str]:
        return self._tokenizer.tokenize(text)

    def embed_batch(self, token_lists: list[list[str]]) -> list[np.ndarray]:
        import torch

        out = []
        with torch.no_grad():
            for tokens in token_lists:
                if not tokens:
                    out.append(np.zeros((0, self.dim)))
                    continue
                ids = self._tokenizer.convert_tokens_to_ids(tokens)
                hidden = self._model(torch.tensor([ids])).last_hidden_state[0]
                out.append(hidden.double().numpy())
        return out


def get_encoder(spec: str):
    """Build an encoder from its spec string."""
    if spec == "hash":
        return HashEncoder()
    if spec.startswith("hash:"):
        try:
            dim = int(spec.split(":", 1)[1])
        except ValueError:
            raise ExportError(f"bad encoder spec {spec!r}") from None
        return HashEncoder(dim)
    if spec.startswith("hf:"):
        return HfEncoder(spec.split(":", 1)[1])
    raise ExportError(f"unknown encoder {spec!r}")
