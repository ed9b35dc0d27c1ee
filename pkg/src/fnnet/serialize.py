"""Float formatting helpers for the on-disk JSON formats.

All persisted reals use 17 significant digits, which round-trips IEEE
double exactly.
"""

from __future__ import annotations

__all__ = ["fmt_float", "fmt_float_list"]


def fmt_float(x):
    s = format(float(x), ".17g")
    # keep the token a JSON number even for integral values
    return s


def fmt_float_list(xs):
    return "[" + ", ".join(fmt_float(x) for x in xs) + "]"
