"""Real-model mode: wrap a small causal LM behind the wire protocol.

Implementation choices, fixed here and reflected in the fingerprint:

* embeddings are the final-position hidden state of the model's last
  layer (no pooling across positions)
* shift_embed packs the instruction and all response pairs into one
  context by default; --per-pair switches to averaging one embedding
  per pair
* candidates projects the query vector through the output embedding
  matrix and keeps alphabetic single-token words, at most 300, with a
  softmax over the kept logits
* the only cross-request state is a cache of word token embeddings used
  by the soft-prompt ops; everything else is stateless

torch and transformers load lazily so stub mode never pays for them.
"""

import numpy as np

from backend_ref.wire import LineResponder, OpError

GENERATE_TOKENS = 48
CANDIDATE_CAP = 300


class RealResponder(LineResponder):
    def __init__(self, model_name: str, per_pair: bool = False):
        try:
            import torch
            from transformers import AutoModelForCausalLM, AutoTokenizer
        except ImportError as err:
            raise RuntimeError(
                "real mode needs the optional [real] dependencies "
                f"(torch, transformers): {err}")
        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(model_name)
        self.model = AutoModelForCausalLM.from_pretrained(
            model_name, torch_dtype=torch.float32)
        self.model.eval()
        self.per_pair = per_pair
        self.embedding_dim = int(self.model.config.hidden_size)
        mode = "per-pair" if per_pair else "single-context"
        self.fingerprint = (f"real:v1:model={model_name}"
                            f":pool=last-token:pairs={mode}")
        self._word_embedding_cache: dict[str, "torch.Tensor"] = {}

    def handler_for(self, op):
        return {
            "generate": self._generate,
            "shift_embed": self._shift_embed,
            "candidates": self._candidates,
            "word_vector": self._word_vector,
            "grad_word_vector": self._grad_word_vector,
        }.get(op)

    # -- text --------------------------------------------------------------

    def _generate(self, request: dict) -> dict:
        prompts = request.get("prompts")
        if not isinstance(prompts, list) or not prompts \
                or not all(isinstance(p, str) and p for p in prompts):
            raise OpError("bad_request", "prompts must be non-empty strings")
        style = request.get("style_word")
        texts = []
        for prompt in prompts:
            text = prompt if not style \
                else f"Respond in a {style} style.\n{prompt}"
            ids = self.tokenizer(text, return_tensors="pt").input_ids
            with self._torch.no_grad():
                out = self.model.generate(
                    ids, max_new_tokens=GENERATE_TOKENS, do_sample=False,
                    pad_token_id=self.tokenizer.eos_token_id)
            texts.append(self.tokenizer.decode(out[0, ids.shape[1]:],
                                               skip_special_tokens=True))
        return {"texts": texts}

    # -- embeddings ----------------------------------------------------------

    def _context_embedding(self, text: str) -> np.ndarray:
        ids = self.tokenizer(text, return_tensors="pt").input_ids
        with self._torch.no_grad():
            states = self.model(ids, output_hidden_states=True).hidden_states
        return states[-1][0, -1].numpy().astype(np.float64)

    def _shift_embed(self, request: dict) -> dict:
        instruction = request.get("instruction")
        pairs = request.get("pairs")
        if not isinstance(instruction, str) or not instruction:
            raise OpError("bad_request", "missing instruction")
        if not isinstance(pairs, list) or not pairs:
            raise OpError("bad_request", "pairs must be a non-empty list")
        try:
            blocks = [f"Prompt: {p['prompt']}\nBase: {p['base']}\n"
                      f"Personalized: {p['personalized']}" for p in pairs]
        except (TypeError, KeyError):
            raise OpError("bad_request", "malformed pair")
        if self.per_pair:
            rows = np.stack([
                self._context_embedding(f"{instruction}\n\n{block}")
                for block in blocks])
            vector = rows.mean(axis=0)
        else:
            vector = self._context_embedding(
                instruction + "\n\n" + "\n\n".join(blocks))
        return {"vector": vector.tolist()}

    def _candidates(self, request: dict) -> dict:
        vector = request.get("vector")
        if not isinstance(vector, list) or len(vector) != self.embedding_dim:
            raise OpError("bad_request",
                          f"expected a vector of length {self.embedding_dim}")
        limit = request.get("limit")
        if not isinstance(limit, int) or limit < 1:
            raise OpError("bad_request", "limit must be a positive integer")
        query = self._torch.tensor(vector, dtype=self._torch.float32)
        if float(query.norm()) == 0.0:
            raise OpError("degenerate_vector", "query vector has zero norm")
        with self._torch.no_grad():
            logits = self.model.get_output_embeddings().weight @ query
        scored = []
        for token_id, logit in enumerate(logits.tolist()):
            word = self.tokenizer.decode([token_id]).strip()
            if word.isalpha():
                scored.append((word.lower(), logit))
        scored.sort(key=lambda item: (-item[1], item[0]))
        scored = scored[:CANDIDATE_CAP]
        if not scored:
            return {"words": []}
        peak = max(logit for _, logit in scored)
        weights = [np.exp(logit - peak) for _, logit in scored]
        total = float(sum(weights))
        return {"words": [{"word": word, "probability": float(w / total)}
                          for (word, _), w in zip(scored, weights)][:limit]}

    # -- soft prompts --------------------------------------------------------

    def _word_rows(self, word: str):
        if word not in self._word_embedding_cache:
            ids = self.tokenizer(word, add_special_tokens=False).input_ids
            table = self.model.get_input_embeddings().weight
            self._word_embedding_cache[word] = table[ids].detach()
        return self._word_embedding_cache[word]

    def _soft_forward(self, request: dict, needs_grad: bool):
        word = request.get("word")
        if not isinstance(word, str) or not word:
            raise OpError("bad_request", "missing word")
        torch = self._torch

        def rows(key):
            raw = request.get(key)
            if raw is None:
                raw = []
            if not isinstance(raw, list):
                raise OpError("bad_request", "token rows must be a list")
            try:
                out = torch.tensor(raw, dtype=torch.float32).reshape(
                    len(raw), self.embedding_dim)
            except (ValueError, TypeError, RuntimeError):
                raise OpError("bad_request",
                              f"expected rows of length {self.embedding_dim}")
            return out.requires_grad_(needs_grad)

        prefix, suffix = rows("prefix"), rows("suffix")
        embeds = torch.cat([prefix, self._word_rows(word), suffix])
        states = self.model(inputs_embeds=embeds[None],
                            output_hidden_states=True).hidden_states
        return prefix, suffix, states[-1][0, -1]

    def _word_vector(self, request: dict) -> dict:
        with self._torch.no_grad():
            _, _, out = self._soft_forward(request, needs_grad=False)
        return {"vector": out.double().tolist()}

    def _grad_word_vector(self, request: dict) -> dict:
        torch = self._torch
        target = request.get("target")
        if not isinstance(target, list) or len(target) != self.embedding_dim:
            raise OpError("bad_request",
                          f"expected a vector of length {self.embedding_dim}")
        prefix, suffix, out = self._soft_forward(request, needs_grad=True)
        goal = torch.tensor(target, dtype=torch.float32)
        if float(out.detach().norm()) == 0.0 or float(goal.norm()) == 0.0:
            raise OpError("degenerate_vector",
                          "cosine loss undefined at zero norm")
        loss = 1.0 - torch.nn.functional.cosine_similarity(
            out[None], goal[None]).squeeze()
        tunable = [t for t in (prefix, suffix)
                   if t.requires_grad and t.numel()]
        grads = torch.autograd.grad(loss, tunable) if tunable else ()
        grad_iter = iter(grads)
        grad_prefix = next(grad_iter).tolist() if prefix.numel() else \
            [[] for _ in range(prefix.shape[0])]
        grad_suffix = next(grad_iter).tolist() if suffix.numel() else \
            [[] for _ in range(suffix.shape[0])]
        return {"loss": float(loss),
                "grad_prefix": grad_prefix,
                "grad_suffix": grad_suffix}
