"""UTC timestamp coercion helpers."""

from datetime import datetime, timezone

import numpy as np

HOUR = 3600


def to_datetime(ts):
    """Coerce ``ts`` to a timezone-aware UTC ``datetime``.

    Accepts ``datetime`` (naive values are taken as UTC), ``numpy.datetime64``,
    ISO-8601 strings and integer epoch seconds.
    """
    if isinstance(ts, datetime):
        if ts.tzinfo is None:
            return ts.replace(tzinfo=timezone.utc)
        return ts.astimezone(timezone.utc)
    if isinstance(ts, np.datetime64):
        return datetime.fromtimestamp(int(ts.astype("datetime64[s]").astype(np.int64)), timezone.utc)
    if isinstance(ts, str):
        s = ts.strip()
        if s.endswith("Z"):
            s = s[:-1] + "+00:00"
        return to_datetime(datetime.fromisoformat(s))
    if isinstance(ts, (int, np.integer)):
        return datetime.fromtimestamp(int(ts), timezone.utc)
    raise TypeError(f"cannot interpret {ts!r} as a UTC timestamp")


def to_epoch(ts):
    return int(to_datetime(ts).timestamp())


def from_epoch(seconds):
    return datetime.fromtimestamp(int(seconds), timezone.utc)


def hourly(start, hours):
    """List of ``hours`` consecutive hourly UTC datetimes beginning at ``start``."""
    t0 = to_epoch(start)
    return [from_epoch(t0 + HOUR * k) for k in range(hours)]
