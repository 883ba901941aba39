"""Python bindings for keyfield: answer questions about an image and highlight
the part that matters."""

import json

from . import _core
from ._core import (
    KeyfieldError,
    build_stage1_prompt,
    build_stage2_prompt,
    downscale_label_map,
    needs_red_box,
    parse_matrix,
    render_overlay,
    resolve_overlaps,
    serialize_matrix,
)

__all__ = [
    "KeyfieldError",
    "Pipeline",
    "Session",
    "build_stage1_prompt",
    "build_stage2_prompt",
    "downscale_label_map",
    "needs_red_box",
    "parse_matrix",
    "parse_stage1",
    "parse_stage2",
    "render_overlay",
    "resolve_overlaps",
    "serialize_matrix",
]

Session = _core.Session


def parse_stage1(text):
    return json.loads(_core.parse_stage1(text))


def parse_stage2(text):
    return json.loads(_core.parse_stage2(text))


class Pipeline:
    """Wraps the native pipeline. ``backend`` is "mock" or "live"; live mode
    reads endpoints from the environment."""

    def __init__(self, backend="mock", fixtures=""):
        self._native = _core.Pipeline(backend, str(fixtures))

    def detect_objects(self, image: bytes) -> Session:
        return self._native.detect_objects(image)

    def answer_query(self, session: Session, question: str):
        """Returns (query dict, overlay PNG bytes or b"")."""
        text, overlay = self._native.answer_query(session, question)
        return json.loads(text), overlay
