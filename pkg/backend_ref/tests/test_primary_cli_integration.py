"""The installed xpert CLI drives this backend over real pipes.

Everything crosses a process boundary: xpert spawns us per model via a
cmd: descriptor, artifacts are written in the registry's weight-file
layout by a local writer, and the device texts come from our own stub.
"""

import json
import os
import shlex
import shutil
import struct
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from backend_ref.stub import StubResponder

SRC = str(Path(__file__).resolve().parents[1] / "src")
XPERT = shutil.which("xpert")

pytestmark = pytest.mark.skipif(
    XPERT is None, reason="xpert CLI is not on PATH")

SEED, DIM, STYLES = 13, 24, 5

# --model={model} so the flag templates away cleanly for the shared
# summarizer connections (--model= parses as an empty value)
DESCRIPTOR = ("cmd:" + shlex.quote(sys.executable)
              + " -m backend_ref --mode stub"
              + f" --seed {SEED} --dim {DIM} --styles {STYLES}"
              + " --model={model}")


# -- weight files, written without importing the primary ------------------

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a_64(data: bytes) -> int:
    value = FNV_OFFSET
    for byte in data:
        value = ((value ^ byte) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return value


def write_weight_file(path: Path, tensors: dict) -> None:
    entries, chunks, offset = {}, [], 0
    for name, array in tensors.items():
        raw = np.asarray(array, dtype="<f4").tobytes(order="C")
        entries[name] = {"dtype": "f4", "shape": list(np.shape(array)),
                         "offset": offset, "byte_len": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(entries, separators=(",", ":")).encode("ascii")
    payload = b"".join(chunks)
    path.write_bytes(b"XPERTSNAP\0" + struct.pack("<II", 1, len(header))
                     + header + payload
                     + struct.pack("<Q", fnv1a_64(header + payload)))


def run_xpert(*argv: str) -> str:
    env = dict(os.environ)
    env["PYTHONPATH"] = SRC + os.pathsep + env.get("PYTHONPATH", "")
    proc = subprocess.run([XPERT, *argv], capture_output=True, text=True,
                          env=env, timeout=300)
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


def styled_texts(prompts: list, style: str) -> list:
    responder = StubResponder(seed=SEED, dim=DIM, n_styles=STYLES)
    line = json.dumps({"id": 1, "op": "generate", "prompts": prompts,
                       "style_word": style}) + "\n"
    return json.loads(responder.reply_line(line))["texts"]


def test_register_explain_select_round_trip(tmp_path):
    registry = tmp_path / "registry"
    prompts = ["Summarize the minutes.", "Summarize the trip notes."]
    prompts_file = tmp_path / "prompts.txt"
    prompts_file.write_text("\n".join(prompts) + "\n")

    rng = np.random.default_rng(99)
    by_name = {}
    for word in ("formal", "poetic"):
        artifact = tmp_path / f"{word}.weights"
        write_weight_file(artifact, {"w": rng.normal(size=(4, 3)),
                                     "b": rng.normal(size=3)})
        record = json.loads(run_xpert(
            "register", "--registry-dir", str(registry),
            "--backend", DESCRIPTOR, "--artifact", str(artifact),
            "--display-name", word))
        assert record["display_name"] == word
        by_name[word] = record["model_id"]

    manifest_text = run_xpert(
        "explain", "--registry-dir", str(registry),
        "--backend", DESCRIPTOR, "--prompts", str(prompts_file))
    manifest = json.loads(manifest_text)
    index_to_word = {row["index"]: row["word"]
                     for row in manifest["basis"]}
    assert set(index_to_word.values()) == {"formal", "poetic"}

    # noise-free worlds put each model squarely on its own word
    for row in manifest["models"]:
        coordinate = {index_to_word[int(i)]: v
                      for i, v in row["coordinate"].items()}
        assert coordinate[row["display_name"]] == pytest.approx(1.0)
        off_axis = [v for w, v in coordinate.items()
                    if w != row["display_name"]]
        assert all(abs(v) < 1e-6 for v in off_axis)

    manifest_file = tmp_path / "manifest.json"
    manifest_file.write_text(manifest_text)
    local_file = tmp_path / "local.txt"
    local_file.write_text("\n".join(styled_texts(prompts, "poetic")) + "\n")

    selection = json.loads(run_xpert(
        "select", "--manifest", str(manifest_file),
        "--local", str(local_file), "--prompts", str(prompts_file),
        "--backend", DESCRIPTOR))
    assert selection["model_id"] == by_name["poetic"]
    assert selection["distance"] == pytest.approx(0.0, abs=1e-6)
    ranked = dict(selection["ranking"])
    assert ranked[by_name["formal"]] > 1.0
    assert selection["sample_count"] == len(prompts)
