"""Emulated network: framing, links and scheduler, switch."""

from .wire import HEADER_LEN, MAGIC, Flags, MsgType, WireFrame  # noqa: F401
