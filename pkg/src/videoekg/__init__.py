"""Event-knowledge-graph indexing and agentic retrieval for long video streams."""

from .graph import (EntityCluster, EntityMention, EventGraph, EventRecord,
                    FrameRef, Relation)

__all__ = ["EventGraph", "EventRecord", "EntityMention", "EntityCluster",
           "FrameRef", "Relation"]

__version__ = "0.1.0"
