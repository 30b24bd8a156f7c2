"""Standalone summarizer backend for the xpert wire protocol."""

from backend_ref.stub import PersonalizedResponder, StubResponder
from backend_ref.server import main, serve_stdio

__all__ = ["PersonalizedResponder", "StubResponder", "main", "serve_stdio"]
