"""Newline-delimited JSON protocol between probing code and backends.

One request per line, one reply per line.  The client opens with an
id-less hello and the backend answers with its embedding dimension,
capability list, and fingerprint.  Every later request carries a
monotonically increasing integer ``id`` that the reply must echo.

Message shapes (fields in canonical order, compact separators):

    client  {"op":"hello","proto":1}
    backend {"op":"hello","embedding_dim":D,"capabilities":[..],"fingerprint":S}

    {"id":N,"op":"generate","prompts":[..]}            -> {"id":N,"texts":[..]}
    {"id":N,"op":"generate","prompts":[..],"style_word":W}
    {"id":N,"op":"shift_embed","instruction":T,"pairs":[{"prompt":..,
        "base":..,"personalized":..},..]}              -> {"id":N,"vector":[..]}
    {"id":N,"op":"candidates","vector":[..],"limit":K} -> {"id":N,"words":
        [{"word":W,"probability":P},..]}
    {"id":N,"op":"word_vector","prefix":[[..]],"word":W,"suffix":[[..]]}
                                                       -> {"id":N,"vector":[..]}
    {"id":N,"op":"grad_word_vector",...,"target":[..]} -> {"id":N,"loss":L,
        "grad_prefix":[[..]],"grad_suffix":[[..]]}

    {"id":N,"error":{"code":C,"message":M}}

Reals are serialized as JSON numbers with round-trip-exact decimal
formatting (Python's shortest repr), so a vector survives a round trip
bit-for-bit.
"""

from __future__ import annotations

import collections
import json
import shlex
import socket
import subprocess
import threading
from typing import Iterable, Protocol

PROTOCOL_VERSION = 1

KNOWN_OPS = ("generate", "shift_embed", "candidates", "word_vector",
             "grad_word_vector")


class BackendError(Exception):
    """A backend-side failure or a protocol violation."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


def encode_message(obj: dict) -> str:
    """Serialize one message to its canonical single-line form."""
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True) + "\n"


def decode_message(line: str) -> dict:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise BackendError("protocol", "message is not a JSON object")
    return obj


class Transport(Protocol):
    def exchange(self, line: str) -> str: ...

    def close(self) -> None: ...


class LoopbackTransport:
    """Drives an in-process server object through the same serialized
    line format a remote backend would see."""

    def __init__(self, server):
        self._server = server

    def exchange(self, line: str) -> str:
        return self._server.handle_line(line)

    def close(self) -> None:
        pass


class StdioTransport:
    """Talks to a child process over its stdin/stdout, line-buffered.

    Stderr is drained by a daemon thread into a bounded ring so a chatty
    backend cannot deadlock the pipe; the tail is attached to failures.
    """

    def __init__(self, argv: list[str]):
        self._proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._stderr_tail: collections.deque[str] = collections.deque(maxlen=50)
        self._drain = threading.Thread(target=self._drain_stderr, daemon=True)
        self._drain.start()

    def _drain_stderr(self):
        assert self._proc.stderr is not None
        for line in self._proc.stderr:
            self._stderr_tail.append(line.rstrip("\n"))

    def exchange(self, line: str) -> str:
        if self._proc.poll() is not None:
            raise BackendError("backend_closed", self._failure_detail())
        assert self._proc.stdin is not None and self._proc.stdout is not None
        try:
            self._proc.stdin.write(line)
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError):
            raise BackendError("backend_closed", self._failure_detail())
        reply = self._proc.stdout.readline()
        if reply == "":
            raise BackendError("backend_closed", self._failure_detail())
        return reply

    def _failure_detail(self) -> str:
        tail = " | ".join(self._stderr_tail)
        code = self._proc.poll()
        return f"backend exited (returncode={code}) stderr: {tail}"

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                if self._proc.stdin is not None:
                    self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()


class TcpTransport:
    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port))
        self._file = self._sock.makefile("rw", encoding="utf-8", newline="\n")

    def exchange(self, line: str) -> str:
        self._file.write(line)
        self._file.flush()
        reply = self._file.readline()
        if reply == "":
            raise BackendError("backend_closed", "connection closed by peer")
        return reply

    def close(self) -> None:
        try:
            self._file.close()
        finally:
            self._sock.close()


class BackendHandle:
    """A connected backend with its negotiated facts and call accounting.

    ``call_counts`` tracks how many requests of each op this handle has
    issued; harness sweeps read it to compare against exhaustive baselines.
    """

    def __init__(self, transport: Transport, endpoint: str = ""):
        self._transport = transport
        self.endpoint = endpoint
        self._next_id = 0
        self.call_counts: collections.Counter[str] = collections.Counter()
        hello = decode_message(
            transport.exchange(encode_message(
                {"op": "hello", "proto": PROTOCOL_VERSION})))
        if "error" in hello:
            err = hello["error"]
            raise BackendError(str(err.get("code", "error")),
                               str(err.get("message", "")))
        if hello.get("op") != "hello":
            raise BackendError("protocol", "handshake reply missing op=hello")
        dim = hello.get("embedding_dim")
        if not isinstance(dim, int) or dim < 1:
            raise BackendError("protocol", f"bad embedding_dim {dim!r}")
        self.embedding_dim: int = dim
        self.capabilities: tuple[str, ...] = tuple(
            hello.get("capabilities", ()))
        self.fingerprint: str = str(hello.get("fingerprint", ""))

    def supports(self, op: str) -> bool:
        return op in self.capabilities

    def call(self, op: str, params: dict) -> dict:
        """Issue one request and return the reply payload.

        Raises BackendError when the backend reports an error or when the
        reply violates the protocol (bad JSON, wrong id echo).
        """
        self._next_id += 1
        request: dict = {"id": self._next_id, "op": op}
        request.update(params)
        self.call_counts[op] += 1
        reply = decode_message(self._transport.exchange(
            encode_message(request)))
        if "error" in reply:
            err = reply["error"]
            raise BackendError(str(err.get("code", "error")),
                               str(err.get("message", "")))
        if reply.get("id") != self._next_id:
            raise BackendError(
                "protocol",
                f"reply id {reply.get('id')!r} does not echo {self._next_id}")
        return reply

    # -- typed op helpers ---------------------------------------------------

    def generate(self, prompts: list[str],
                 style_word: str | None = None) -> list[str]:
        params: dict = {"prompts": list(prompts)}
        if style_word is not None:
            params["style_word"] = style_word
        reply = self.call("generate", params)
        texts = reply.get("texts")
        if not isinstance(texts, list) or len(texts) != len(prompts):
            raise BackendError("protocol", "generate reply misaligned")
        return [str(t) for t in texts]

    def shift_embed(self, instruction: str,
                    pairs: Iterable[dict]) -> list[float]:
        reply = self.call("shift_embed", {
            "instruction": instruction,
            "pairs": list(pairs),
        })
        vector = reply.get("vector")
        if not isinstance(vector, list) or len(vector) != self.embedding_dim:
            raise BackendError("protocol", "shift_embed reply misaligned")
        return [float(x) for x in vector]

    def candidates(self, vector: list[float],
                   limit: int) -> list[tuple[str, float]]:
        reply = self.call("candidates", {
            "vector": [float(x) for x in vector],
            "limit": int(limit),
        })
        words = reply.get("words")
        if not isinstance(words, list):
            raise BackendError("protocol", "candidates reply misaligned")
        return [(str(w["word"]), float(w["probability"])) for w in words]

    def word_vector(self, prefix: list[list[float]], word: str,
                    suffix: list[list[float]]) -> list[float]:
        reply = self.call("word_vector", {
            "prefix": prefix,
            "word": word,
            "suffix": suffix,
        })
        vector = reply.get("vector")
        if not isinstance(vector, list) or len(vector) != self.embedding_dim:
            raise BackendError("protocol", "word_vector reply misaligned")
        return [float(x) for x in vector]

    def grad_word_vector(self, prefix: list[list[float]], word: str,
                         suffix: list[list[float]],
                         target: list[float]) -> dict:
        reply = self.call("grad_word_vector", {
            "prefix": prefix,
            "word": word,
            "suffix": suffix,
            "target": [float(x) for x in target],
        })
        for key in ("loss", "grad_prefix", "grad_suffix"):
            if key not in reply:
                raise BackendError("protocol",
                                   f"grad_word_vector reply missing {key}")
        return reply

    def close(self) -> None:
        self._transport.close()

    def __enter__(self) -> "BackendHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def connect_backend(descriptor: str) -> BackendHandle:
    """Open a backend from a descriptor string.

    Grammar: ``cmd:<shell command>`` spawns a child speaking the protocol
    on stdio; ``tcp:<host>:<port>`` dials a listening backend.
    """
    if descriptor.startswith("cmd:"):
        argv = shlex.split(descriptor[len("cmd:"):])
        if not argv:
            raise ValueError("empty backend command")
        return BackendHandle(StdioTransport(argv), endpoint=descriptor)
    if descriptor.startswith("tcp:"):
        rest = descriptor[len("tcp:"):]
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ValueError(f"bad tcp descriptor {descriptor!r}")
        return BackendHandle(TcpTransport(host, int(port)), endpoint=descriptor)
    raise ValueError(f"unknown backend descriptor {descriptor!r}")
