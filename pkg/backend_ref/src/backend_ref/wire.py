"""Request/reply envelope shared by both backend modes.

One JSON object per line.  An id-less hello opens the session; every
other request carries an integer id echoed in the reply.  Errors travel
as {"id": ..., "error": {"code", "message"}}.
"""

import json

PROTOCOL_VERSION = 1

CAPABILITIES = ("generate", "shift_embed", "candidates", "word_vector",
                "grad_word_vector")


class OpError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message


def encode_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True) + "\n"


class LineResponder:
    """Dispatch loop body: subclasses provide handlers and a hello."""

    embedding_dim: int
    fingerprint: str

    def hello_payload(self) -> dict:
        return {"op": "hello",
                "embedding_dim": self.embedding_dim,
                "capabilities": list(CAPABILITIES),
                "fingerprint": self.fingerprint}

    def handler_for(self, op):
        raise NotImplementedError

    def reply_line(self, line: str) -> str:
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("not an object")
        except ValueError:
            return encode_line(
                {"id": None,
                 "error": {"code": "bad_json",
                           "message": "unparseable request line"}})
        if request.get("op") == "hello":
            if request.get("proto") != PROTOCOL_VERSION:
                return encode_line(
                    {"id": None,
                     "error": {"code": "unsupported_proto",
                               "message": f"want proto {PROTOCOL_VERSION}"}})
            return encode_line(self.hello_payload())
        request_id = request.get("id")
        if not isinstance(request_id, int):
            return encode_line(
                {"id": None,
                 "error": {"code": "bad_request",
                           "message": "missing integer id"}})
        try:
            op = request.get("op")
            handler = self.handler_for(op)
            if handler is None:
                raise OpError("unsupported", f"unknown op {op!r}")
            reply = handler(request)
        except OpError as err:
            return encode_line(
                {"id": request_id,
                 "error": {"code": err.code, "message": err.message}})
        return encode_line({"id": request_id, **reply})
