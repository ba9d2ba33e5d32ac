"""Word-level vocabulary shared by the generator and the evaluators."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

UNCOND, PAD, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<uncond>", "<pad>", "<eos>", "<unk>")


class Vocab:
    def __init__(self, words: Iterable[str]):
        uniq = sorted(set(words) - set(SPECIALS))
        self.itos = list(SPECIALS) + uniq
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids if i not in (PAD, EOS)]

    def batch(self, captions: Sequence[Sequence[str]], max_len: int | None = None,
              eos: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Padded id matrix and validity mask; ``eos`` appends the end token."""
        seqs = [self.encode(c) + ([EOS] if eos else []) for c in captions]
        if max_len is not None:
            seqs = [s[:max_len - 1] + [EOS] if eos and len(s) > max_len else s[:max_len] for s in seqs]
        width = max(1, max(len(s) for s in seqs))
        ids = np.full((len(seqs), width), PAD, dtype=np.int64)
        mask = np.zeros((len(seqs), width), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
            mask[i, :len(s)] = True
        return ids, mask
