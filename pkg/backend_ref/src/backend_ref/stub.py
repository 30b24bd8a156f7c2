"""Stub-mode request handlers: planted numerics, zero model weights."""

import json

import numpy as np

from backend_ref.stubworld import (
    SOFTMAX_TEMPERATURE,
    PlantedWorld,
    format_mixture,
    parse_mixture,
)
from backend_ref.wire import LineResponder, OpError, encode_line


class StubResponder(LineResponder):
    """Speaks the wire protocol against a planted world.

    Stateless: every reply is a function of the request bytes and the
    construction parameters, so transcript replays are byte-identical.
    """

    def __init__(self, seed: int, dim: int, n_styles: int,
                 noise_sigma: float = 0.0):
        self.world = PlantedWorld(seed, dim, n_styles, noise_sigma)
        self.embedding_dim = dim
        self.fingerprint = (
            f"stub:v1:seed={seed}:dim={dim}"
            f":styles={n_styles}:noise={noise_sigma!r}")

    def handler_for(self, op):
        return {
            "generate": self._generate,
            "shift_embed": self._shift_embed,
            "candidates": self._candidates,
            "word_vector": self._word_vector,
            "grad_word_vector": self._grad_word_vector,
        }.get(op)

    # -- ops ---------------------------------------------------------------

    def _generate(self, request: dict) -> dict:
        prompts = request.get("prompts")
        if not isinstance(prompts, list) or not prompts \
                or not all(isinstance(p, str) and p for p in prompts):
            raise OpError("bad_request", "prompts must be non-empty strings")
        try:
            mixture = parse_mixture(request.get("style_word"),
                                    self.world.words)
        except ValueError as err:
            raise OpError("unknown_style", str(err))
        return {"texts": [self.world.generated_text(mixture, prompt)
                          for prompt in prompts]}

    @staticmethod
    def _text_mixture(text: str) -> dict[str, float]:
        # generated texts carry their mixture in a leading bracket tag
        if text.startswith("[") and "]" in text:
            try:
                return parse_mixture(text[1:text.index("]")])
            except ValueError:
                return {}
        return {}

    def _shift_embed(self, request: dict) -> dict:
        instruction = request.get("instruction")
        pairs = request.get("pairs")
        if not isinstance(instruction, str) or not instruction:
            raise OpError("bad_request", "missing instruction")
        if not isinstance(pairs, list) or not pairs:
            raise OpError("bad_request", "pairs must be a non-empty list")
        deltas = np.zeros((len(pairs), self.world.dim))
        signature_parts = []
        for i, pair in enumerate(pairs):
            try:
                prompt = pair["prompt"]
                base_mix = self._text_mixture(pair["base"])
                styled_mix = self._text_mixture(pair["personalized"])
            except (TypeError, KeyError):
                raise OpError("bad_request", f"malformed pair at index {i}")
            delta = dict(styled_mix)
            for word, weight in base_mix.items():
                delta[word] = delta.get(word, 0.0) - weight
            delta = {w: x for w, x in delta.items() if x != 0.0}
            deltas[i] = self.world.mixture_vector(delta)
            signature_parts.append(f"{prompt}\x1e{format_mixture(delta)}")
        vector = deltas.mean(axis=0)
        if self.world.noise_sigma > 0.0:
            vector = vector + self.world.shift_noise(signature_parts,
                                                     len(pairs))
        return {"vector": vector.tolist()}

    def _candidates(self, request: dict) -> dict:
        vector = self._vector(request.get("vector"))
        limit = request.get("limit")
        if not isinstance(limit, int) or limit < 1:
            raise OpError("bad_request", "limit must be a positive integer")
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise OpError("degenerate_vector", "query vector has zero norm")
        cosines = self.world.directions @ vector / norm
        logits = SOFTMAX_TEMPERATURE * cosines
        weights = np.exp(logits - logits.max())
        probabilities = weights / weights.sum()
        words = self.world.words
        order = sorted(range(len(words)),
                       key=lambda i: (-probabilities[i], words[i]))
        return {"words": [{"word": words[i],
                           "probability": float(probabilities[i])}
                          for i in order[:limit]]}

    def _prompt_tokens(self, request: dict) -> tuple[np.ndarray, int]:
        word = request.get("word")
        if not isinstance(word, str) or not word:
            raise OpError("bad_request", "missing word")
        prefix = self._token_rows(request.get("prefix"))
        suffix = self._token_rows(request.get("suffix"))
        tokens = np.vstack([prefix,
                            self.world.token_embedding(word)[None, :],
                            suffix])
        return tokens.mean(axis=0), tokens.shape[0]

    def _word_vector(self, request: dict) -> dict:
        mean, _ = self._prompt_tokens(request)
        return {"vector": (self.world.linear_map @ mean).tolist()}

    def _grad_word_vector(self, request: dict) -> dict:
        mean, token_count = self._prompt_tokens(request)
        target = self._vector(request.get("target"))
        linmap = self.world.linear_map
        out = linmap @ mean
        norm_out = float(np.linalg.norm(out))
        norm_target = float(np.linalg.norm(target))
        if norm_out == 0.0 or norm_target == 0.0:
            raise OpError("degenerate_vector",
                          "cosine loss undefined at zero norm")
        cos = float(out @ target) / (norm_out * norm_target)
        dcos_dout = (target / (norm_out * norm_target)
                     - (out @ target) * out
                     / (norm_out ** 3 * norm_target))
        dloss_dmean = -(linmap.T @ dcos_dout)
        per_token = (dloss_dmean / token_count).tolist()
        n_prefix = len(request.get("prefix") or [])
        n_suffix = len(request.get("suffix") or [])
        return {"loss": 1.0 - cos,
                "grad_prefix": [list(per_token) for _ in range(n_prefix)],
                "grad_suffix": [list(per_token) for _ in range(n_suffix)]}

    # -- request field checks ----------------------------------------------

    def _vector(self, values) -> np.ndarray:
        if not isinstance(values, list) or len(values) != self.world.dim:
            raise OpError("bad_request",
                          f"expected a vector of length {self.world.dim}")
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise OpError("bad_request", "vector entries must be finite")
        return arr

    def _token_rows(self, rows) -> np.ndarray:
        if rows is None:
            return np.zeros((0, self.world.dim))
        if not isinstance(rows, list):
            raise OpError("bad_request", "token rows must be a list")
        out = np.zeros((len(rows), self.world.dim))
        for i, row in enumerate(rows):
            out[i] = self._vector(row)
        return out


class PersonalizedResponder:
    """Wraps a responder so it answers generate requests in a fixed style.

    Generate requests that already carry a style_word pass through
    untouched; everything else is delegated verbatim.  This is how one
    stub process stands in for a whole personalized model: the style
    mixture is the personality.
    """

    def __init__(self, inner: StubResponder, style_word: str):
        # fail here, not mid-stream
        parse_mixture(style_word, inner.world.words)
        self.inner = inner
        self.style_word = style_word

    def reply_line(self, line: str) -> str:
        try:
            request = json.loads(line)
        except ValueError:
            return self.inner.reply_line(line)
        if (isinstance(request, dict)
                and request.get("op") == "generate"
                and "style_word" not in request):
            request["style_word"] = self.style_word
            line = encode_line(request)
        return self.inner.reply_line(line)
