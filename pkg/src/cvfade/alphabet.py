"""Coherent-state alphabets and their source-replacement purification."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fock import DensityOperator, coherent_amplitudes, coherent_overlap

PRIOR_TOL = 1e-12


@dataclass(frozen=True)
class Alphabet:
    amplitudes: tuple
    priors: tuple

    def __post_init__(self):
        amps = tuple(complex(a) for a in self.amplitudes)
        pri = tuple(float(p) for p in self.priors)
        if len(amps) != len(pri):
            raise ValueError(f"{len(amps)} amplitudes but {len(pri)} priors")
        if not amps:
            raise ValueError("alphabet is empty")
        if any(p < 0 for p in pri):
            raise ValueError("priors must be nonnegative")
        if abs(sum(pri) - 1.0) > PRIOR_TOL:
            raise ValueError(f"priors sum to {sum(pri)!r}, not 1")
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "priors", pri)

    @property
    def size(self) -> int:
        return len(self.amplitudes)

    @property
    def max_amplitude(self) -> float:
        return max(abs(a) for a in self.amplitudes)

    def scaled(self, factor: float) -> "Alphabet":
        return Alphabet(tuple(factor * a for a in self.amplitudes), self.priors)

    def gram(self) -> np.ndarray:
        """G[j, k] = sqrt(p_j p_k) <alpha_k|alpha_j>."""
        k = self.size
        g = np.empty((k, k), dtype=complex)
        for i, (ai, pi) in enumerate(zip(self.amplitudes, self.priors)):
            for j, (aj, pj) in enumerate(zip(self.amplitudes, self.priors)):
                g[i, j] = np.sqrt(pi * pj) * coherent_overlap(aj, ai)
        return g

    def to_dict(self) -> dict:
        return {
            "amplitudes": [[a.real, a.imag] for a in self.amplitudes],
            "priors": list(self.priors),
        }


def two_state(alpha: float) -> Alphabet:
    if alpha < 0:
        raise ValueError("amplitude must be nonnegative")
    return Alphabet((alpha, -alpha), (0.5, 0.5))


def four_state(alpha: float) -> Alphabet:
    """{alpha, i alpha, -alpha, -i alpha} with uniform priors."""
    if alpha < 0:
        raise ValueError("amplitude must be nonnegative")
    return Alphabet((alpha, 1j * alpha, -alpha, -1j * alpha), (0.25,) * 4)


def calibrated(amplitudes: Sequence[complex], priors: Sequence[float] | None = None) -> Alphabet:
    """Alphabet from measured (possibly asymmetric) amplitudes."""
    amplitudes = list(amplitudes)
    if priors is None:
        priors = [1.0 / len(amplitudes)] * len(amplitudes)
    return Alphabet(tuple(amplitudes), tuple(priors))


def build_alphabet(kind: str, amplitude: float) -> Alphabet:
    builders = {"two": two_state, "four": four_state}
    try:
        return builders[kind](amplitude)
    except KeyError:
        raise ValueError(f"unknown alphabet kind {kind!r}; expected one of {sorted(builders)}") from None


@dataclass(frozen=True)
class SourceModel:
    """Alice's fixed marginal and the ideal purification sum_k sqrt(p_k)|k>|alpha_k>.

    ``purification`` is stored as a K x cutoff array of Fock coefficients
    (row k holds sqrt(p_k) times the truncated ket of alpha_k).
    """

    alphabet: Alphabet
    cutoff: int
    gram: np.ndarray
    purification: np.ndarray

    @property
    def dims(self) -> tuple:
        return (self.alphabet.size, self.cutoff)

    def density(self) -> DensityOperator:
        v = self.purification.ravel()
        return DensityOperator(self.dims, np.outer(v, v.conj()))

    def conditional_states(self) -> list[np.ndarray]:
        """Truncated kets of Bob's conditional states (unnormalised by priors)."""
        return [coherent_amplitudes(a, self.cutoff) for a in self.alphabet.amplitudes]


def source_model(alphabet: Alphabet, cutoff: int) -> SourceModel:
    gram = alphabet.gram()
    evals = np.linalg.eigvalsh(gram)
    if evals.min() < -1e-12:
        raise ValueError(f"Gram matrix is not PSD (min eigenvalue {evals.min():.2e})")
    rows = [np.sqrt(p) * coherent_amplitudes(a, cutoff) for a, p in zip(alphabet.amplitudes, alphabet.priors)]
    pur = np.array(rows)
    gram.setflags(write=False)
    pur.setflags(write=False)
    return SourceModel(alphabet, cutoff, gram, pur)
