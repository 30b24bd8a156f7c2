"""Deterministic numerics behind stub mode.

Everything here is a pure function of (seed, request content), which is
what lets two implementations agree byte for byte on the wire.  The
contract, shared with the in-process stub it mirrors:

* random streams seed numpy's default generator with the sha256 digest
  of "xpert-stub:" + signature parts joined by 0x1f, read as four
  little-endian uint64 words
* planted style directions are QR-orthonormalized Gaussian draws with
  the R-diagonal sign fix, one unit row per vocabulary word
* style mixtures serialize as "word:weight" pairs, comma separated,
  sorted by word, weights in repr form; the word "default" is reserved
  for unstyled mass and maps to the zero vector
"""

import hashlib
import math

import numpy as np

STYLE_VOCABULARY = (
    "friendly", "formal", "poetic", "sarcastic", "concise", "verbose",
    "cheerful", "technical", "witty", "solemn", "playful", "academic",
    "dramatic", "blunt", "tender", "brisk", "ornate", "humble", "cryptic",
    "lucid", "breezy", "stern", "lyrical", "dry", "vivid", "mellow",
    "urgent", "earnest", "ironic", "crisp", "florid", "gloomy", "upbeat",
    "casual", "whimsical", "polite",
)

PLAIN_WORD = "default"

SOFTMAX_TEMPERATURE = 4.0


def stream_rng(*signature) -> np.random.Generator:
    joined = "\x1f".join(str(part) for part in signature)
    digest = hashlib.sha256(b"xpert-stub:" + joined.encode("utf-8")).digest()
    return np.random.default_rng(np.frombuffer(digest, dtype="<u8").tolist())


def orthonormal_block(rng: np.random.Generator, rows: int,
                      dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(dim, rows)))
    q = q * np.sign(np.diag(r))
    return q.T.copy()


def parse_mixture(spec, vocabulary=None) -> dict[str, float]:
    """``"poetic"`` or ``"poetic:0.7,default:0.3"`` -> word weights.

    Repeated words accumulate.  None or "" is the empty mixture.
    """
    if spec is None or spec == "":
        return {}
    mixture: dict[str, float] = {}
    for part in spec.split(","):
        word, sep, raw = part.partition(":")
        weight = float(raw) if sep else 1.0
        if not word:
            raise ValueError(f"bad mixture entry {part!r}")
        if not math.isfinite(weight) or weight < 0:
            raise ValueError(f"bad mixture weight {part!r}")
        if vocabulary is not None and word != PLAIN_WORD \
                and word not in vocabulary:
            raise ValueError(f"unknown style word {word!r}")
        mixture[word] = mixture.get(word, 0.0) + weight
    return mixture


def format_mixture(mixture: dict[str, float]) -> str:
    return ",".join(f"{word}:{mixture[word]!r}" for word in sorted(mixture))


class PlantedWorld:
    """Seeded ground truth: orthonormal unit direction per style word."""

    def __init__(self, seed: int, dim: int, n_styles: int,
                 noise_sigma: float = 0.0):
        if not 1 <= n_styles <= dim:
            raise ValueError("need 1 <= n_styles <= dim")
        if noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        self.seed = seed
        self.dim = dim
        self.noise_sigma = noise_sigma
        words = list(STYLE_VOCABULARY[:n_styles])
        for i in range(len(words), n_styles):
            words.append(f"style{i:02d}")
        self.words = tuple(words)
        self.directions = orthonormal_block(
            stream_rng("world", seed, n_styles, dim), n_styles, dim)
        self.linear_map = orthonormal_block(
            stream_rng("linmap", seed, dim), dim, dim)

    def mixture_vector(self, mixture: dict[str, float]) -> np.ndarray:
        total = np.zeros(self.dim)
        for word in sorted(mixture):
            if word in self.words:
                total = total + mixture[word] \
                    * self.directions[self.words.index(word)]
        return total

    def token_embedding(self, word: str) -> np.ndarray:
        if word in self.words:
            return self.directions[self.words.index(word)]
        raw = stream_rng("wordvec", self.seed, word).normal(size=self.dim)
        return raw / np.linalg.norm(raw)

    def generated_text(self, mixture: dict[str, float], prompt: str) -> str:
        tag = format_mixture(mixture)
        digest = hashlib.sha256(
            f"gen\x1f{self.seed}\x1f{tag}\x1f{prompt}"
            .encode("utf-8")).hexdigest()[:8]
        return f"[{tag}] r{digest} :: {prompt}"

    def shift_noise(self, signature_parts: list[str],
                    pair_count: int) -> np.ndarray:
        rng = stream_rng("shift-noise", self.seed,
                         "\x1d".join(signature_parts))
        scale = self.noise_sigma / math.sqrt(pair_count)
        return (rng.normal(size=len(self.words)) * scale) @ self.directions
