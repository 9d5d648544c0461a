"""Deterministic fixed-width sequence embeddings.

A CDR3 is embedded as an L1-normalised bag of hashed k-mers.  A peptide
gets the same k-mer block followed by a positional one-hot block of
``MAX_POSITIONS x 20`` coordinates: position p (1-based) and residue index
a map to coordinate ``hash_dim + 20 * (p - 1) + a``, zero-padded past the
peptide length.  For a 9-mer the anchors P2 and P9 therefore occupy
``[hash_dim + 20, hash_dim + 40)`` and ``[hash_dim + 160, hash_dim + 180)``.
"""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from cip.seq_core import AA_INDEX, PEPTIDE_MAX_LEN

HASH_SALT = b"cip-kmer-v1"
FEATURE_VERSION = 1
MAX_POSITIONS = PEPTIDE_MAX_LEN
POSITION_BLOCK = MAX_POSITIONS * 20


class SequenceShorterThanK(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    kmer_size: int = 3
    hash_dim: int = 256
    include_position_onehot: bool = True

    def __post_init__(self):
        if self.kmer_size not in (1, 2, 3):
            raise ValueError(f"kmer_size must be 1, 2 or 3, got {self.kmer_size}")
        if self.hash_dim < 16:
            raise ValueError(f"hash_dim must be >= 16, got {self.hash_dim}")

    @property
    def cdr3_dim(self) -> int:
        return self.hash_dim

    @property
    def peptide_dim(self) -> int:
        return self.hash_dim + (POSITION_BLOCK if self.include_position_onehot else 0)

    @property
    def input_dim(self) -> int:
        return self.cdr3_dim + self.peptide_dim

    def fingerprint(self) -> str:
        payload = dict(asdict(self), version=FEATURE_VERSION, salt=HASH_SALT.decode())
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def position_slice(self, position: int) -> slice:
        """Coordinates (within a peptide vector) of the one-hot for ``position``."""
        start = self.hash_dim + 20 * (position - 1)
        return slice(start, start + 20)


@functools.lru_cache(maxsize=None)
def kmer_bucket(kmer: str, hash_dim: int) -> int:
    digest = hashlib.blake2b(kmer.encode(), digest_size=8, key=HASH_SALT).digest()
    return int.from_bytes(digest, "little") % hash_dim


def _kmer_block(seq: str, cfg: FeatureConfig) -> np.ndarray:
    k = cfg.kmer_size
    if len(seq) < k:
        raise SequenceShorterThanK(f"sequence {seq!r} shorter than k={k}")
    out = np.zeros(cfg.hash_dim)
    n = len(seq) - k + 1
    for i in range(n):
        out[kmer_bucket(seq[i : i + k], cfg.hash_dim)] += 1.0
    return out / n


def embed_cdr3(tau: str, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    return _kmer_block(str(tau), cfg)


def embed_peptide(pi: str, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    pi = str(pi)
    block = _kmer_block(pi, cfg)
    if not cfg.include_position_onehot:
        return block
    pos = np.zeros(POSITION_BLOCK)
    for p, aa in enumerate(pi):
        pos[20 * p + AA_INDEX[aa]] = 1.0
    return np.concatenate([block, pos])


class Featurizer:
    """Memoising pair featurizer: ``x = [embed_cdr3(tau); embed_peptide(pi)]``."""

    def __init__(self, cfg: FeatureConfig = FeatureConfig()):
        self.cfg = cfg
        self._cdr3: dict[str, np.ndarray] = {}
        self._pep: dict[str, np.ndarray] = {}

    @property
    def input_dim(self) -> int:
        return self.cfg.input_dim

    def cdr3(self, tau: str) -> np.ndarray:
        v = self._cdr3.get(tau)
        if v is None:
            v = self._cdr3[tau] = embed_cdr3(tau, self.cfg)
        return v

    def peptide(self, pi: str) -> np.ndarray:
        v = self._pep.get(pi)
        if v is None:
            v = self._pep[pi] = embed_peptide(pi, self.cfg)
        return v

    def pairs(self, cdr3s: Sequence[str], peptides: Sequence[str]) -> np.ndarray:
        out = np.empty((len(cdr3s), self.cfg.input_dim))
        h = self.cfg.cdr3_dim
        for row, (tau, pi) in enumerate(zip(cdr3s, peptides)):
            out[row, :h] = self.cdr3(tau)
            out[row, h:] = self.peptide(pi)
        return out
