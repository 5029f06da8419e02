"""Label-name prompts: a frozen hashed text embedder and the trainable affine layer."""

from __future__ import annotations

import hashlib
from typing import Dict, Iterable, Sequence

import numpy as np
import torch
from torch import nn


class PromptError(ValueError):
    pass


class TextEmbedder:
    """Deterministic stand-in for a pretrained text encoder.

    Each token's vector is drawn from a generator seeded by the SHA-256 digest
    of the token, so embeddings agree across runs, processes and platforms.
    A label is lowercased, split on whitespace, and embedded as the
    renormalized mean of its token vectors.

    Any object with an ``embed(labels) -> Tensor[n, dim]`` method can replace
    this one; the affine layer and prompt encoder only see the output.
    """

    def __init__(self, dim: int = 64, seed: int = 0, labels: Iterable[str] = ()):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed
        self.vocabulary: Dict[str, int] = {}
        self._rows: list[np.ndarray] = []
        for label in labels:
            for token in self.tokenize(label):
                self._lookup(token)

    @staticmethod
    def tokenize(label: str) -> list[str]:
        tokens = label.lower().split()
        if not tokens:
            raise PromptError("empty prompt")
        return tokens

    def _lookup(self, token: str) -> np.ndarray:
        idx = self.vocabulary.get(token)
        if idx is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))
            row = rng.standard_normal(self.dim)
            row /= np.linalg.norm(row)
            idx = len(self._rows)
            self.vocabulary[token] = idx
            self._rows.append(row)
        return self._rows[idx]

    @property
    def table(self) -> np.ndarray:
        return np.stack(self._rows) if self._rows else np.zeros((0, self.dim))

    def embed_one(self, label: str) -> np.ndarray:
        vecs = [self._lookup(t) for t in self.tokenize(label)]
        mean = np.mean(vecs, axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise PromptError(f"degenerate embedding for prompt {label!r}")
        return mean / norm

    def embed(self, labels: Sequence[str], dtype=torch.float32) -> torch.Tensor:
        if isinstance(labels, str):
            labels = [labels]
        return torch.as_tensor(np.stack([self.embed_one(lbl) for lbl in labels]), dtype=dtype)


def embed_text(label: str, embedder: TextEmbedder | None = None) -> np.ndarray:
    return (embedder or TextEmbedder()).embed_one(label)


class TextAffineLayer(nn.Linear):
    """Single affine map applied to text embeddings; identity at init."""

    def __init__(self, dim: int = 64):
        super().__init__(dim, dim, bias=True)
        self.reset_to_identity()

    def reset_to_identity(self) -> None:
        with torch.no_grad():
            self.weight.copy_(torch.eye(self.in_features))
            self.bias.zero_()


def apply_tal(tal: TextAffineLayer, e: torch.Tensor) -> torch.Tensor:
    return tal(e)
