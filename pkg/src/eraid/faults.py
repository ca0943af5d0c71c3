"""Fault injection hooks for crash-safety testing.

A hook is any callable ``hook(kind, device_id, lba)`` invoked immediately
before a device mutation (write or trim) is applied.  Raising from the hook
abandons the operation, so devices are left exactly as they were after the
previous mutation -- the state a real machine would recover from after
losing power between two drive commands.
"""


class SimulatedCrash(Exception):
    """Raised by an injector to emulate a power loss between device ops."""


class CrashInjector:
    """Raises :class:`SimulatedCrash` before the N-th observed mutation."""

    def __init__(self, fire_before: int):
        self.fire_before = fire_before
        self.seen = 0
        self.fired = False

    def __call__(self, kind: str, device_id: int, lba: int) -> None:
        if self.seen == self.fire_before:
            self.fired = True
            raise SimulatedCrash(f"crash before {kind} #{self.seen} dev={device_id} lba={lba}")
        self.seen += 1


class MutationCounter:
    """Counts mutations without interfering; used to size crash sweeps."""

    def __init__(self):
        self.count = 0

    def __call__(self, kind: str, device_id: int, lba: int) -> None:
        self.count += 1
