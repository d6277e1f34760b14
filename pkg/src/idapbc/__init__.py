"""Energy-shaping (IDA-PBC) controller synthesis and verification toolkit."""

__version__ = "0.1.0"
