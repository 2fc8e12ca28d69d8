"""Outcome of each acceptance criterion, printed at the end of the pytest run."""

CRITERIA: dict[int, tuple[bool, str]] = {}
