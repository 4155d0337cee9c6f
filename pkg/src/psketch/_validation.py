"""Argument checks shared by the estimator, generator and CLI."""

from __future__ import annotations

import numbers
from collections.abc import Iterable, Iterator
from itertools import chain

from .flow_model import PacketRecord


def check_int(name: str, value, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {type(value).__name__}")
    value = int(value)
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_fraction(name: str, value, *, open_right: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise TypeError(f"{name} must be a number, got {type(value).__name__}")
    value = float(value)
    hi_ok = value < 1.0 if open_right else value <= 1.0
    if not (0.0 <= value and hi_ok):
        interval = "[0, 1)" if open_right else "[0, 1]"
        raise ValueError(f"{name} must lie in {interval}, got {value}")
    return value


def check_seed32(name: str, value) -> int:
    value = check_int(name, value, 0)
    if value > 0xFFFFFFFF:
        raise ValueError(f"{name} must fit in 32 bits, got {value}")
    return value


def check_packets(X) -> Iterator[PacketRecord]:
    """Return an iterator over ``X`` after checking that it yields packet records.

    Only the first element is inspected; the stream is not materialized.
    """
    if isinstance(X, PacketRecord) or not isinstance(X, Iterable):
        raise TypeError("expected an iterable of PacketRecord")
    it = iter(X)
    for first in it:
        if not isinstance(first, PacketRecord):
            raise TypeError(f"expected PacketRecord items, got {type(first).__name__}")
        return chain((first,), it)
    return iter(())
