"""Thread-safe store for per-chain results produced by worker threads."""

from __future__ import annotations

import threading
from collections.abc import Hashable
from dataclasses import dataclass

import numpy as np

from .estimators import BatchMeansState


@dataclass(frozen=True)
class ChunkResult:
    """Statistics of a contiguous block of chains ``[chain_start, chain_start + n)``.

    All arrays are per chain.  ``batches`` is kept only for the chunk
    holding chain 0 of a batch-means run.
    """

    chain_start: int
    means: np.ndarray
    counts: np.ndarray
    blowup_step: np.ndarray
    accepted: np.ndarray | None
    attempts: int
    gradient_evals: int
    batches: BatchMeansState | None = None

    @property
    def n_chains(self) -> int:
        return self.means.shape[0]


@dataclass(frozen=True)
class CellResult:
    """All chains of one (α, Δt, scheme) cell in chain-index order."""

    means: np.ndarray
    counts: np.ndarray
    blowup_step: np.ndarray
    accepted: np.ndarray | None
    attempts: int
    gradient_evals: int
    batches: BatchMeansState | None = None

    @property
    def blown_up(self) -> np.ndarray:
        return self.blowup_step >= 0

    @property
    def acceptance_rate(self) -> float | None:
        if self.accepted is None or self.attempts == 0:
            return None
        ok = ~self.blown_up
        if not ok.any():
            return None
        return float(np.mean(self.accepted[ok] / self.attempts))


class ResultsStore:
    """Collects ``ChunkResult``s per cell key.

    Worker threads call ``append()``; the orchestrator calls ``merged()``
    once every chunk of a cell is in.  A ``threading.Lock`` protects all
    shared state, and merging sorts by chain index so the outcome does not
    depend on completion order.
    """

    def __init__(self):
        self._chunks: dict[Hashable, list[ChunkResult]] = {}
        self._lock = threading.Lock()

    def append(self, key: Hashable, chunk: ChunkResult) -> None:
        with self._lock:
            self._chunks.setdefault(key, []).append(chunk)

    def get_chunks(self, key: Hashable) -> list[ChunkResult]:
        """Chunks of a cell ordered by first chain index."""
        with self._lock:
            return sorted(self._chunks.get(key, []), key=lambda c: c.chain_start)

    def get_keys(self) -> list[Hashable]:
        with self._lock:
            return list(self._chunks.keys())

    def merged(self, key: Hashable) -> CellResult:
        chunks = self.get_chunks(key)
        if not chunks:
            raise KeyError(key)
        expected = 0
        for c in chunks:
            if c.chain_start != expected:
                raise ValueError(f"cell {key!r} is missing chains from {expected}")
            expected += c.n_chains
        accepted = None
        if chunks[0].accepted is not None:
            accepted = np.concatenate([c.accepted for c in chunks])
        return CellResult(
            means=np.concatenate([c.means for c in chunks]),
            counts=np.concatenate([c.counts for c in chunks]),
            blowup_step=np.concatenate([c.blowup_step for c in chunks]),
            accepted=accepted,
            attempts=chunks[0].attempts,
            gradient_evals=chunks[0].gradient_evals,
            batches=chunks[0].batches,
        )

    def clear(self) -> None:
        with self._lock:
            self._chunks.clear()
