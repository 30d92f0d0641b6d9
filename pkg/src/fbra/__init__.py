"""FEC-based rate adaptation for conversational media, with a deterministic
packet-level simulator to exercise it."""

__version__ = "0.1.0"
