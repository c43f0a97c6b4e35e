"""Allocation ledger: named allocations and frees with peak tracking.

The ledger doubles as the allocator for instrumented code paths. Buffers
obtained through :meth:`AllocationLedger.alloc` are recorded at the byte width
of their *modeled* numeric format, so an emulated bf16 buffer counts two bytes
per element even though the host holds float64.

A ``spill_dir`` makes large buffers file-backed (``np.memmap``) so naive
attention can be materialized at sizes that exceed host RAM; the recorded
bytes are the same either way.
"""

from __future__ import annotations

import contextlib
import os
import tempfile
import threading
import weakref
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from memlab.errors import IntegrityError, UsageError, ValidationError
from memlab.tensor import NumericFormat

ALLOC = "alloc"
FREE = "free"


@dataclass(frozen=True)
class Event:
    label: str
    kind: str
    nbytes: int


class AllocationLedger:
    """Thread-safe event log of allocations; concurrent work units share one ledger.

    Live bytes are global, so allocations that overlap in time across threads
    add up in ``peak`` exactly as concurrently live buffers would.
    """

    def __init__(self, spill_dir: str | os.PathLike | None = None, spill_threshold: int = 1 << 26):
        self.events: list[Event] = []
        self.live = 0
        self.peak = 0
        self.closed = False
        self.spill_dir = spill_dir
        self.spill_threshold = spill_threshold
        self._scopes = threading.local()
        self._lock = threading.Lock()
        self._handles: dict[int, tuple[str, int, str | None]] = {}
        self._live_by_label: Counter = Counter()

    # attribution scopes are per-thread so concurrent units don't interleave prefixes
    @property
    def scopes(self) -> list[str]:
        if not hasattr(self._scopes, "stack"):
            self._scopes.stack = []
        return self._scopes.stack

    @contextlib.contextmanager
    def scope(self, label: str):
        self.scopes.append(label)
        try:
            yield self
        finally:
            self.scopes.pop()

    def _qualify(self, label: str) -> str:
        return "/".join([*self.scopes, label])

    def close(self):
        self.closed = True

    def _check_open(self):
        if self.closed:
            raise UsageError("ledger is closed")

    def record_alloc(self, label: str, nbytes: int, qualify: bool = True) -> str:
        self._check_open()
        if nbytes < 0:
            raise ValidationError(f"negative allocation for {label!r}")
        label = self._qualify(label) if qualify else label
        with self._lock:
            self.events.append(Event(label, ALLOC, int(nbytes)))
            self._live_by_label[(label, int(nbytes))] += 1
            self.live += int(nbytes)
            self.peak = max(self.peak, self.live)
        return label

    def record_free(self, label: str, nbytes: int, qualify: bool = True):
        label = self._qualify(label) if qualify else label
        with self._lock:
            key = (label, int(nbytes))
            if self._live_by_label[key] <= 0:
                raise IntegrityError(f"free of {nbytes} bytes under {label!r} has no matching alloc")
            self._live_by_label[key] -= 1
            self.events.append(Event(label, FREE, int(nbytes)))
            self.live -= int(nbytes)

    def alloc(self, label: str, shape, fmt: NumericFormat, fill: float | None = None) -> np.ndarray:
        """Allocate a buffer of ``shape`` in ``fmt``'s storage dtype and record it."""
        shape = tuple(int(n) for n in shape)
        nbytes = int(np.prod(shape, dtype=np.int64)) * fmt.itemsize
        qualified = self.record_alloc(label, nbytes)
        path = None
        host_bytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(fmt.storage_dtype).itemsize
        if self.spill_dir is not None and host_bytes >= self.spill_threshold:
            fd, path = tempfile.mkstemp(prefix="memlab-", suffix=".buf", dir=self.spill_dir)
            os.close(fd)
            arr = np.memmap(path, dtype=fmt.storage_dtype, mode="w+", shape=shape)
        else:
            arr = np.empty(shape, dtype=fmt.storage_dtype)
        if fill is not None:
            arr.fill(fill)
        with self._lock:
            self._handles[id(arr)] = (weakref.ref(arr), qualified, nbytes, path)
        return arr

    def _resolve(self, arr):
        # accept views (e.g. a Tensor's read-only view) of an owned buffer
        while arr is not None:
            entry = self._handles.get(id(arr))
            if entry is not None and entry[0]() is arr:
                return arr
            arr = getattr(arr, "base", None)
        return None

    def free(self, arr: np.ndarray):
        with self._lock:
            owner = self._resolve(arr)
            if owner is None:
                raise IntegrityError("free of a buffer this ledger did not allocate")
            _, label, nbytes, path = self._handles.pop(id(owner))
        self.record_free(label, nbytes, qualify=False)
        if path is not None:
            # the mapping stays valid for any remaining references
            os.unlink(path)

    def owns(self, arr: np.ndarray) -> bool:
        return self._resolve(arr) is not None

    def free_all(self):
        for key in list(self._handles):
            _, label, nbytes, path = self._handles.pop(key)
            self.record_free(label, nbytes, qualify=False)
            if path is not None:
                os.unlink(path)

    def dump(self, fh):
        """Write events as ``label<TAB>alloc|free<TAB>bytes`` lines."""
        for ev in self.events:
            fh.write(f"{ev.label}\t{ev.kind}\t{ev.nbytes}\n")

    def dumps(self) -> str:
        return "".join(f"{ev.label}\t{ev.kind}\t{ev.nbytes}\n" for ev in self.events)

    @classmethod
    def loads(cls, text: str) -> "AllocationLedger":
        """Rebuild a (closed) ledger from its text dump; balance is checked by :func:`measure_peak`."""
        led = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[1] not in (ALLOC, FREE):
                raise ValidationError(f"line {lineno}: expected label<TAB>alloc|free<TAB>bytes")
            try:
                nbytes = int(parts[2])
            except ValueError:
                raise ValidationError(f"line {lineno}: byte count {parts[2]!r} is not an integer") from None
            led.events.append(Event(parts[0], parts[1], nbytes))
        led.closed = True
        return led


def measure_peak(ledger: AllocationLedger | list[Event]) -> tuple[int, dict[str, int]]:
    """Replay the events and return ``(peak_bytes, live bytes per label at the peak)``.

    Ties are attributed to the first time the peak value is reached.
    """
    events = ledger.events if isinstance(ledger, AllocationLedger) else ledger
    live = 0
    peak = 0
    by_label: dict[str, int] = defaultdict(int)
    outstanding: Counter = Counter()
    snapshot: dict[str, int] = {}
    for ev in events:
        if ev.kind == ALLOC:
            outstanding[(ev.label, ev.nbytes)] += 1
            by_label[ev.label] += ev.nbytes
            live += ev.nbytes
            if live > peak:
                peak = live
                snapshot = {k: v for k, v in by_label.items() if v}
        else:
            if outstanding[(ev.label, ev.nbytes)] <= 0:
                raise IntegrityError(f"unbalanced free of {ev.nbytes} bytes under label {ev.label!r}")
            outstanding[(ev.label, ev.nbytes)] -= 1
            by_label[ev.label] -= ev.nbytes
            live -= ev.nbytes
    return peak, snapshot


def merge_ledgers(parts: list[AllocationLedger]) -> AllocationLedger:
    """Merge per-unit sub-ledgers that ran concurrently from a common start.

    Each sub-ledger's live-bytes curve is sampled at its own event index and
    the curves are summed index-wise, i.e. the owner assumes event ``k`` of
    every unit happened at the same time. This gives an upper bound on the
    combined peak for units that run in lock-step.
    """
    merged = AllocationLedger()
    n = max((len(p.events) for p in parts), default=0)
    for k in range(n):
        for p in parts:
            if k < len(p.events):
                ev = p.events[k]
                if ev.kind == ALLOC:
                    merged.record_alloc(ev.label, ev.nbytes, qualify=False)
                else:
                    merged.record_free(ev.label, ev.nbytes, qualify=False)
    merged.close()
    return merged
