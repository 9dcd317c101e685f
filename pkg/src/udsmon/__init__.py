"""UDS security event logging and detection."""

__version__ = "0.1.0"
