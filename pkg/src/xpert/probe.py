"""Probing operations: pair up generator responses, summarize their
difference into one shift embedding, and convert style words into
sub-vectors (slow path via generation, fast path via tuned soft prompts).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from xpert.protocol import BackendError, BackendHandle
from xpert.vectorspace import SubVector, as_vector

# Instruction handed to the summarizer backend together with the paired
# responses.  Hash-versioned: registries refuse to mix embeddings produced
# under different instructions.
INSTRUCTION_TEMPLATE = (
    "Compare each base response with its personalized counterpart and "
    "describe the personalized model's overall change in language style "
    "with exactly one adjective.")

# Hand-written initialization for tunable soft prompts; the marker is
# replaced by the style word under conversion.
SOFT_PROMPT_TEMPLATE = (
    "use one adjective to summarize the meaning of <word>, when it is "
    "used to describe a language style")

DEFAULT_PROBE_VOLUME = 50
DEFAULT_ESTIMATE_TOLERANCE = 0.02
TOKEN_COUNT_GRID = (10, 25, 50)
MAX_SOFT_TOKENS = 64


def instruction_hash(template: str = INSTRUCTION_TEMPLATE) -> str:
    return hashlib.sha256(template.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptSet:
    """Named, de-duplicated probing prompts."""

    prompt_set_id: str
    prompts: tuple[str, ...]

    def __post_init__(self):
        if not self.prompt_set_id:
            raise ValueError("prompt_set_id must be non-empty")
        if not self.prompts:
            raise ValueError("prompt set must contain at least one prompt")
        if any(not isinstance(p, str) or not p for p in self.prompts):
            raise ValueError("prompts must be non-empty strings")
        if len(set(self.prompts)) != len(self.prompts):
            raise ValueError("prompts must be unique")
        object.__setattr__(self, "prompts", tuple(self.prompts))

    @classmethod
    def from_texts(cls, texts: Sequence[str],
                   prompt_set_id: str | None = None) -> "PromptSet":
        if prompt_set_id is None:
            digest = hashlib.sha256(
                "\x1f".join(texts).encode("utf-8")).hexdigest()[:12]
            prompt_set_id = f"ps-{digest}"
        return cls(prompt_set_id=prompt_set_id, prompts=tuple(texts))

    def __len__(self) -> int:
        return len(self.prompts)


@dataclass(frozen=True)
class ResponsePair:
    """One prompt with its base and personalized responses."""

    prompt: str
    base: str
    personalized: str

    def __post_init__(self):
        for name in ("prompt", "base", "personalized"):
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise ValueError(f"{name} must be a non-empty string")

    def to_wire(self) -> dict:
        return {"prompt": self.prompt, "base": self.base,
                "personalized": self.personalized}


def probe_models(base_gen: BackendHandle, pllm_gen: BackendHandle,
                 prompts: PromptSet) -> list[ResponsePair]:
    """Collect one base and one personalized response per prompt.

    Issues one generate call per prompt on each handle, keeping the
    positional alignment the summarizer relies on.  A failure aborts with
    the failing prompt index attached.
    """
    pairs = []
    for index, prompt in enumerate(prompts.prompts):
        try:
            base_text = base_gen.generate([prompt])[0]
            personalized_text = pllm_gen.generate([prompt])[0]
        except BackendError as err:
            raise BackendError(
                err.code, f"{err.message} (prompt index {index})") from err
        if not base_text or not personalized_text:
            raise BackendError("bad_response",
                               f"empty generation at prompt index {index}")
        pairs.append(ResponsePair(prompt=prompt, base=base_text,
                                  personalized=personalized_text))
    return pairs


def extract_shift_embedding(backend: BackendHandle,
                            pairs: Sequence[ResponsePair],
                            instruction: str = INSTRUCTION_TEMPLATE
                            ) -> np.ndarray:
    """Summarize all response pairs into one embedding vector.

    All pairs travel in a single backend call, whatever their count.
    """
    if not pairs:
        raise ValueError("at least one response pair is required")
    vector = backend.shift_embed(instruction, [p.to_wire() for p in pairs])
    return as_vector(vector, dim=backend.embedding_dim)


def cosine_distance(a, b) -> float:
    """1 - cos(a, b); zero vectors compare at distance 0 only to zero."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 and nb == 0.0:
        return 0.0
    if na == 0.0 or nb == 0.0:
        return 1.0
    return 1.0 - float(np.clip(float(va @ vb) / (na * nb), -1.0, 1.0))


class ProbeVolumeEstimate(NamedTuple):
    count: int
    curve: list[tuple[int, float]]
    converged: bool


def estimate_required_prompts(backend: BackendHandle,
                              base_gen: BackendHandle,
                              pllm_gen: BackendHandle,
                              prompt_pool: PromptSet,
                              tolerance: float = DEFAULT_ESTIMATE_TOLERANCE,
                              step: int = 5) -> ProbeVolumeEstimate:
    """Find how many prompts stabilize the shift embedding.

    Probes the whole pool once, then measures the cosine distance between
    prefix embeddings (step, 2*step, ...) and the full-pool embedding.
    Returns the first prefix size below tolerance, the whole curve, and
    whether the tolerance was ever reached (count falls back to the pool
    size when it was not).
    """
    if step < 1:
        raise ValueError("step must be positive")
    if not (0.0 < tolerance < 1.0):
        raise ValueError("tolerance must be in (0, 1)")
    if len(prompt_pool) < 2 * step:
        raise ValueError("prompt pool must hold at least two steps")
    pairs = probe_models(base_gen, pllm_gen, prompt_pool)
    full = extract_shift_embedding(backend, pairs)
    curve: list[tuple[int, float]] = []
    count = len(prompt_pool)
    converged = False
    for n in range(step, len(prompt_pool), step):
        prefix_vector = extract_shift_embedding(backend, pairs[:n])
        distance = cosine_distance(prefix_vector, full)
        curve.append((n, distance))
        if not converged and distance < tolerance:
            count = n
            converged = True
    return ProbeVolumeEstimate(count=count, curve=curve, converged=converged)


def candidate_words(backend: BackendHandle, vector,
                    limit: int) -> list[tuple[str, float]]:
    """Ranked candidate style words for a shift embedding.

    The client re-imposes the contract on whatever the backend returns:
    descending probability with lexicographic tie-breaks, probabilities
    in (0, 1].
    """
    vec = as_vector(vector, dim=backend.embedding_dim)
    if float(np.linalg.norm(vec)) == 0.0:
        raise ValueError("candidate query vector must be nonzero")
    if limit < 1:
        raise ValueError("limit must be positive")
    ranked = backend.candidates(vec.tolist(), limit)
    for word, probability in ranked:
        if not word or not (0.0 < probability <= 1.0):
            raise BackendError("protocol",
                               f"bad candidate entry {(word, probability)!r}")
    ranked.sort(key=lambda item: (-item[1], item[0]))
    return ranked[:limit]


def word_to_subvector(backend: BackendHandle, word: str,
                      base_gen: BackendHandle, prompts: PromptSet,
                      base_texts: Sequence[str] | None = None) -> SubVector:
    """Slow-path conversion of one style word into a unit sub-vector.

    Generates a styled response per prompt on the summarizer backend,
    pairs each with the plain base response, and summarizes the
    difference.  ``base_texts`` lets callers reuse plain responses across
    many words; left unset, they are fetched from ``base_gen`` here.
    """
    if not word:
        raise ValueError("word must be non-empty")
    if base_texts is None:
        base_texts = [base_gen.generate([p])[0] for p in prompts.prompts]
    elif len(base_texts) != len(prompts):
        raise ValueError("base_texts misaligned with prompts")
    pairs = []
    for prompt, base_text in zip(prompts.prompts, base_texts):
        styled = backend.generate([prompt], style_word=word)[0]
        pairs.append(ResponsePair(prompt=prompt, base=base_text,
                                  personalized=styled))
    shift = extract_shift_embedding(backend, pairs)
    norm = float(np.linalg.norm(shift))
    if norm == 0.0:
        raise ValueError(f"word {word!r} produced a degenerate (zero) shift")
    return SubVector(word=word, direction=shift / norm)


# ---------------------------------------------------------------------------
# soft prompts


@dataclass(frozen=True, eq=False)
class SoftPrompt:
    """Trainable token embeddings around the style word slot."""

    prefix: np.ndarray  # (n_prefix, dim)
    suffix: np.ndarray  # (n_suffix, dim)

    def __post_init__(self):
        prefix = np.atleast_2d(np.asarray(self.prefix, dtype=np.float64))
        suffix = np.atleast_2d(np.asarray(self.suffix, dtype=np.float64))
        if prefix.size == 0:
            prefix = prefix.reshape(0, suffix.shape[1])
        if suffix.size == 0:
            suffix = suffix.reshape(0, prefix.shape[1])
        if prefix.shape[1] != suffix.shape[1]:
            raise ValueError("prefix/suffix dimension mismatch")
        total = prefix.shape[0] + suffix.shape[0]
        if not 1 <= total <= MAX_SOFT_TOKENS:
            raise ValueError(f"token count must be in [1, {MAX_SOFT_TOKENS}]")
        object.__setattr__(self, "prefix", prefix)
        object.__setattr__(self, "suffix", suffix)

    @property
    def token_count(self) -> int:
        return self.prefix.shape[0] + self.suffix.shape[0]

    @property
    def dim(self) -> int:
        return self.prefix.shape[1]


@dataclass(frozen=True)
class PromptTuneConfig:
    token_count: int = 25
    learning_rate: float = 1.0
    max_steps: int = 500
    target_error: float = 0.05

    def __post_init__(self):
        if not 1 <= self.token_count <= MAX_SOFT_TOKENS:
            raise ValueError("token_count out of range")
        if self.learning_rate <= 0 or self.max_steps < 1:
            raise ValueError("bad optimizer settings")
        if not (0.0 < self.target_error < 1.0):
            raise ValueError("target_error must be in (0, 1)")


def _template_token_embedding(token: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(
        f"xpert-soft-prompt\x1f{dim}\x1f{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(np.frombuffer(digest, dtype="<u8").tolist())
    raw = rng.normal(size=dim)
    return raw / np.linalg.norm(raw)


def initialize_soft_prompt(dim: int, token_count: int,
                           template: str = SOFT_PROMPT_TEMPLATE) -> SoftPrompt:
    """Seed trainable embeddings from the hand-written template.

    Template tokens around the word marker are tiled or truncated to hit
    the requested count, each mapped to a deterministic unit embedding.
    """
    marker = "<word>"
    if marker not in template:
        raise ValueError("template must contain the word marker")
    before, _, after = template.partition(marker)
    pre_tokens = before.split()
    suf_tokens = after.split()
    share = len(pre_tokens) / max(1, len(pre_tokens) + len(suf_tokens))
    n_prefix = min(token_count, max(0, round(token_count * share)))
    n_suffix = token_count - n_prefix
    prefix = np.array([
        _template_token_embedding(pre_tokens[i % len(pre_tokens)], dim)
        for i in range(n_prefix)]).reshape(n_prefix, dim)
    suffix = np.array([
        _template_token_embedding(suf_tokens[i % len(suf_tokens)], dim)
        for i in range(n_suffix)]).reshape(n_suffix, dim)
    return SoftPrompt(prefix=prefix, suffix=suffix)


def _soft_prompt_loss(backend: BackendHandle, soft: SoftPrompt, word: str,
                      target: np.ndarray) -> float:
    out = backend.word_vector(soft.prefix.tolist(), word,
                              soft.suffix.tolist())
    return cosine_distance(out, target)


def _finite_difference_grads(backend: BackendHandle, soft: SoftPrompt,
                             word: str, target: np.ndarray,
                             step: float = 1e-3) -> tuple[np.ndarray,
                                                          np.ndarray]:
    """Central finite differences for backends without gradient support."""
    grads = []
    for block in (soft.prefix, soft.suffix):
        grad = np.zeros_like(block)
        for t in range(block.shape[0]):
            for j in range(block.shape[1]):
                for sign in (1.0, -1.0):
                    bumped_prefix = soft.prefix.copy()
                    bumped_suffix = soft.suffix.copy()
                    bumped = bumped_prefix if block is soft.prefix \
                        else bumped_suffix
                    bumped[t, j] += sign * step
                    loss = _soft_prompt_loss(
                        backend,
                        SoftPrompt(prefix=bumped_prefix,
                                   suffix=bumped_suffix),
                        word, target)
                    grad[t, j] += sign * loss / (2 * step)
        grads.append(grad)
    return grads[0], grads[1]


def tune_prompt(backend: BackendHandle, word: str, ground_truth,
                config: PromptTuneConfig = PromptTuneConfig()
                ) -> tuple[SoftPrompt, list[float]]:
    """Gradient-descend soft prompt embeddings toward a ground-truth
    sub-vector under the cosine-distance loss.

    Uses backend gradients when advertised, central finite differences
    otherwise.  Each step backtracks (halving the rate) until the loss
    does not increase, so the recorded curve is non-increasing; tuning
    stops at target_error, max_steps, or a dead-end rate.
    """
    if isinstance(ground_truth, SubVector):
        target = ground_truth.direction
    else:
        target = as_vector(ground_truth, dim=backend.embedding_dim)
    if float(np.linalg.norm(target)) == 0.0:
        raise ValueError("ground truth must be nonzero")
    soft = initialize_soft_prompt(backend.embedding_dim, config.token_count)
    analytic = backend.supports("grad_word_vector")
    losses = [_soft_prompt_loss(backend, soft, word, target)]
    rate = config.learning_rate
    for _ in range(config.max_steps):
        if losses[-1] <= config.target_error:
            break
        if analytic:
            reply = backend.grad_word_vector(
                soft.prefix.tolist(), word, soft.suffix.tolist(),
                target.tolist())
            grad_prefix = np.asarray(reply["grad_prefix"],
                                     dtype=np.float64).reshape(
                                         soft.prefix.shape)
            grad_suffix = np.asarray(reply["grad_suffix"],
                                     dtype=np.float64).reshape(
                                         soft.suffix.shape)
        else:
            grad_prefix, grad_suffix = _finite_difference_grads(
                backend, soft, word, target)
        accepted = None
        while rate >= 1e-12:
            trial = SoftPrompt(prefix=soft.prefix - rate * grad_prefix,
                               suffix=soft.suffix - rate * grad_suffix)
            trial_loss = _soft_prompt_loss(backend, trial, word, target)
            if trial_loss <= losses[-1]:
                accepted = (trial, trial_loss)
                break
            rate /= 2.0
        if accepted is None:
            break  # no descent direction left at any usable rate
        soft, new_loss = accepted
        losses.append(new_loss)
        rate = min(rate * 2.0, config.learning_rate)
    return soft, losses


def fast_word_to_subvector(backend: BackendHandle, soft: SoftPrompt,
                           word: str) -> SubVector:
    """Single-call conversion using a tuned soft prompt."""
    vector = np.asarray(
        backend.word_vector(soft.prefix.tolist(), word,
                            soft.suffix.tolist()),
        dtype=np.float64)
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        raise ValueError(f"word {word!r} produced a degenerate (zero) vector")
    return SubVector(word=word, direction=vector / norm)
