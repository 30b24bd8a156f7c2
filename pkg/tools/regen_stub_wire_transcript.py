#!/usr/bin/env python3
"""Regenerate the frozen wire transcript for the stub backend.

The transcript is a plain text file of strictly alternating lines:
request line, then the reply the stub must produce, byte for byte.  It
pins the protocol surface for every conforming backend implementation,
including the standalone one under backend_ref/.  Regenerate only when
the wire behavior intentionally changes, and review the diff.

World parameters are frozen here and mirrored by the conformance tests:
seed 7, dim 16, 6 styles, noise 0.3.
"""

import json
from pathlib import Path

from xpert.protocol import encode_message
from xpert.simharness import StubServer, generate_world

OUT = Path(__file__).resolve().parents[1] / "tests" / "data" / \
    "stub_wire_transcript.txt"

SEED, DIM, STYLES, NOISE = 7, 16, 6, 0.3


def main():
    world = generate_world(seed=SEED, n_styles=STYLES, dim=DIM,
                           noise_sigma=NOISE)
    server = StubServer(world)
    lines = []

    def exchange(request) -> dict | list | None:
        if isinstance(request, str):
            line = request if request.endswith("\n") else request + "\n"
        else:
            line = encode_message(request)
        reply = server.handle_line(line)
        lines.append(line)
        lines.append(reply)
        try:
            return json.loads(reply)
        except ValueError:
            return None

    exchange({"op": "hello", "proto": 1})
    exchange({"op": "hello", "proto": 2})  # wrong version, id-less error

    plain = exchange({"id": 1, "op": "generate",
                      "prompts": ["morning brief", "storm warning"]})
    poetic = exchange({"id": 2, "op": "generate",
                       "prompts": ["morning brief"],
                       "style_word": "poetic"})
    blended = exchange({"id": 3, "op": "generate",
                        "prompts": ["storm warning"],
                        "style_word": "formal:0.7,default:0.3"})
    exchange({"id": 4, "op": "generate", "prompts": ["storm warning"],
              "style_word": "velvet"})  # unknown style word
    exchange({"id": 5, "op": "generate", "prompts": [],
              "style_word": "poetic"})  # empty prompt list
    repeated = exchange({"id": 6, "op": "generate", "prompts": ["x"],
                         "style_word": "poetic:0.25,poetic:0.25"})
    assert repeated["texts"][0].startswith("[poetic:0.5]")

    shift = exchange({
        "id": 7, "op": "shift_embed",
        "instruction": "Describe how the second response differs.",
        "pairs": [
            {"prompt": "morning brief", "base": plain["texts"][0],
             "personalized": poetic["texts"][0]},
            {"prompt": "storm warning", "base": plain["texts"][1],
             "personalized": blended["texts"][0]},
        ]})
    exchange({"id": 8, "op": "shift_embed", "instruction": "Describe.",
              "pairs": [{"prompt": "p", "base": "b"}]})  # missing key

    exchange({"id": 9, "op": "candidates", "vector": shift["vector"],
              "limit": 4})
    exchange({"id": 10, "op": "candidates", "vector": [0.0] * DIM,
              "limit": 3})  # zero norm
    exchange({"id": 11, "op": "candidates", "vector": [0.5] * (DIM - 1),
              "limit": 3})  # wrong length

    prefix_row = [round(0.05 * (i + 1), 2) for i in range(DIM)]
    suffix_row = [round(0.1 - 0.01 * i, 2) for i in range(DIM)]
    target = [1.0 if i % 3 == 0 else -0.25 for i in range(DIM)]
    exchange({"id": 12, "op": "word_vector", "word": "poetic",
              "prefix": [prefix_row], "suffix": [suffix_row]})
    exchange({"id": 13, "op": "word_vector", "word": "zephyr"})
    exchange({"id": 14, "op": "grad_word_vector", "word": "poetic",
              "prefix": [prefix_row], "suffix": [suffix_row, suffix_row],
              "target": target})

    exchange({"id": 15, "op": "renovate"})  # unknown op
    exchange('{"op": broken')  # unparseable line
    exchange({"op": "generate", "prompts": ["x"]})  # id missing entirely

    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text("".join(lines), encoding="utf-8")
    print(f"wrote {OUT} ({len(lines) // 2} exchanges)")


if __name__ == "__main__":
    main()
