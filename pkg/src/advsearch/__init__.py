"""Desk-scale platform for searching composite adversarial attack schedules
and robust neural cell architectures, plus the closed loop between the two."""

__version__ = "0.1.0"
