"""Two-party protocol state machines, wire format and socket transport."""

from .engine import (Dave, DaveBehaviour, Phase, ProtocolParams, QueryResult, Session,
                     SessionState, Ursula, required_raw_length, tile_key)
from .messages import AbortReason, Message, MessageType, SessionAborted

__all__ = ["AbortReason", "Dave", "DaveBehaviour", "Message", "MessageType", "Phase",
           "ProtocolParams", "QueryResult", "Session", "SessionAborted", "SessionState",
           "Ursula", "required_raw_length", "tile_key"]
