"""Allocation audit for code buffers.

The interpreter never allocates translated code.  The only code buffers the
engine creates are probe copies; each one is reported here so tests can
assert that plain runs allocate none.
"""

from __future__ import annotations

from contextlib import contextmanager

_hooks: list = []


def record(kind: str, nbytes: int) -> None:
    for hook in _hooks:
        hook(kind, nbytes)


@contextmanager
def watch():
    """Collect ``(kind, nbytes)`` events raised inside the block."""
    events: list = []
    hook = lambda kind, nbytes: events.append((kind, nbytes))  # noqa: E731
    _hooks.append(hook)
    try:
        yield events
    finally:
        _hooks.remove(hook)
