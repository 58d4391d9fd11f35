import os
from datetime import timedelta

import numpy as np
import pytest
from hypothesis import settings

from videoekg.config import PromptLibrary
from videoekg.gateway import MockGateway, hash_unit_vector
from videoekg.graph import EventGraph, EventRecord, FrameRef

settings.register_profile("ci", deadline=timedelta(seconds=2))
settings.register_profile("dev", max_examples=25)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))

DIM = 8


def unit(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    v = v / np.linalg.norm(v)
    return v.astype(np.float32).astype(np.float64)


def make_event(event_id: str, stream_id: str = "s", start: float = 0.0,
               end: float = 1.0, dim: int = DIM, embedding=None,
               description: str = "", summary: str = "",
               with_frame: bool = False) -> EventRecord:
    if embedding is None:
        embedding = hash_unit_vector(f"text of {event_id}", dim)
    frames = []
    if with_frame:
        frames = [FrameRef(stream_id, (start + end) / 2,
                           hash_unit_vector(f"frame of {event_id}", dim),
                           f"synthetic://{stream_id}/{event_id}")]
    return EventRecord(
        event_id=event_id, stream_id=stream_id, start_time=start, end_time=end,
        description=description or f"description of {event_id}",
        summary=summary or f"summary of {event_id}",
        text_embedding=np.asarray(embedding, dtype=np.float64),
        frame_refs=frames)


def build_chain(n: int, stream_id: str = "s", dim: int = DIM,
                with_frames: bool = False) -> tuple[EventGraph, list[EventRecord]]:
    """Graph with events e1..en spanning [0,1), [1,2), ... on one stream."""
    graph = EventGraph()
    events = [make_event(f"e{i + 1}", stream_id, float(i), float(i + 1), dim,
                         with_frame=with_frames) for i in range(n)]
    for event in events:
        graph.add_event(event)
    return graph, events


@pytest.fixture
def prompts() -> PromptLibrary:
    return PromptLibrary()


@pytest.fixture
def mock_gateway() -> MockGateway:
    return MockGateway(dim=DIM)
