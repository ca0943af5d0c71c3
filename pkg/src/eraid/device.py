"""Simulated SSD with built-in transparent per-4KB compression.

The device exposes a logical block space larger than its physical flash
budget.  Every 4KB write is "compressed" -- either by running it through
zlib (``real`` mode) or by charging ``ceil(4096 / target_ratio)`` bytes
(``modeled`` mode, used when experiments need exact, controllable ratios).
Logical content is always retained verbatim so reads are byte-exact in
both modes; compression only drives the physical-usage accounting.
"""

import math
import struct
import threading
import zlib
from dataclasses import dataclass

from .errors import ConfigInvalid, DeviceOffline, EmptyRange, OutOfSpace, OutOfRange
from .util import BLOCK_SIZE, ZERO_BLOCK

MODE_REAL = "real"
MODE_MODELED = "modeled"

_IMAGE_MAGIC = b"ECZD"
_IMAGE_HEADER = struct.Struct("<4sHBBQQdQ")
_IMAGE_RECORD = struct.Struct("<QI")


@dataclass(frozen=True)
class DeviceConfig:
    """Static parameters of one simulated drive.

    Exactly one of ``expansion_factor`` / ``logical_capacity_bytes`` selects
    the advertised logical size; the resolved capacity is always a whole
    number of 4KB blocks.
    """

    flash_capacity_bytes: int
    expansion_factor: float | None = None
    logical_capacity_bytes: int | None = None
    compress_mode: str = MODE_REAL
    compress_level: int = 6
    modeled_ratio: float = 1.0

    def __post_init__(self):
        if self.flash_capacity_bytes <= 0:
            raise ConfigInvalid("flash capacity must be positive")
        if (self.expansion_factor is None) == (self.logical_capacity_bytes is None):
            raise ConfigInvalid("give exactly one of expansion_factor / logical_capacity_bytes")
        if self.expansion_factor is not None and self.expansion_factor < 1.0:
            raise ConfigInvalid("expansion factor must be >= 1")
        if self.compress_mode not in (MODE_REAL, MODE_MODELED):
            raise ConfigInvalid(f"unknown compress mode {self.compress_mode!r}")
        if self.modeled_ratio < 1.0:
            raise ConfigInvalid("modeled ratio must be >= 1")

    @property
    def logical_capacity(self) -> int:
        if self.logical_capacity_bytes is not None:
            cap = self.logical_capacity_bytes
        else:
            cap = int(self.flash_capacity_bytes * self.expansion_factor)
        return cap - (cap % BLOCK_SIZE)

    @property
    def logical_blocks(self) -> int:
        return self.logical_capacity // BLOCK_SIZE


@dataclass(slots=True)
class BlockRecord:
    """One mapped logical block: post-compression length plus content."""

    stored_len: int
    payload: bytes


@dataclass(frozen=True)
class DeviceStats:
    physical_used_bytes: int
    logical_mapped_blocks: int
    read_ops: int
    write_ops: int
    trim_ops: int


class CompressingDevice:
    """In-memory drive model with trim, failure injection and usage accounting."""

    def __init__(self, config: DeviceConfig, device_id: int = 0, op_hook=None):
        self.config = config
        self.device_id = device_id
        self.op_hook = op_hook
        self.online = True
        self._blocks: dict[int, BlockRecord] = {}
        self._physical_used = 0
        self._read_ops = 0
        self._write_ops = 0
        self._trim_ops = 0
        self._lock = threading.Lock()

    # -- basic block I/O ---------------------------------------------------

    def write(self, lba: int, data: bytes, ratio_hint: float | None = None) -> int:
        """Store 4KB at ``lba``; returns the post-compression length charged."""
        if self.op_hook is not None:
            self.op_hook("write", self.device_id, lba)
        self._check_lba(lba)
        if not self.online:
            raise DeviceOffline(f"device {self.device_id} is offline")
        if len(data) != BLOCK_SIZE:
            raise ValueError(f"writes must be exactly {BLOCK_SIZE} bytes")
        stored_len = self._compressed_len(data, ratio_hint)
        with self._lock:
            old = self._blocks.get(lba)
            delta = stored_len - (old.stored_len if old else 0)
            if self._physical_used + delta > self.config.flash_capacity_bytes:
                raise OutOfSpace(
                    f"device {self.device_id}: write of {stored_len}B would exceed "
                    f"flash capacity ({self._physical_used + delta} > "
                    f"{self.config.flash_capacity_bytes})"
                )
            self._blocks[lba] = BlockRecord(stored_len, bytes(data))
            self._physical_used += delta
            self._write_ops += 1
        return stored_len

    def read(self, lba: int) -> bytes:
        """Return the last written content; trimmed/unwritten blocks read as zeros."""
        self._check_lba(lba)
        if not self.online:
            raise DeviceOffline(f"device {self.device_id} is offline")
        with self._lock:
            self._read_ops += 1
            rec = self._blocks.get(lba)
        return rec.payload if rec is not None else ZERO_BLOCK

    def trim(self, start_lba: int, count: int = 1) -> int:
        """Unmap ``count`` blocks; returns the physical bytes freed."""
        if self.op_hook is not None:
            self.op_hook("trim", self.device_id, start_lba)
        self._check_lba(start_lba)
        if count < 0 or start_lba + count > self.config.logical_blocks:
            raise OutOfRange(f"trim range [{start_lba}, +{count}) outside logical space")
        if not self.online:
            raise DeviceOffline(f"device {self.device_id} is offline")
        freed = 0
        with self._lock:
            for lba in range(start_lba, start_lba + count):
                rec = self._blocks.pop(lba, None)
                if rec is not None:
                    freed += rec.stored_len
            self._physical_used -= freed
            self._trim_ops += 1
        return freed

    def query_ratio(self, start_lba: int, count: int = 1) -> float:
        """Average compression ratio over the mapped blocks of a range."""
        self._check_lba(start_lba)
        if not self.online:
            raise DeviceOffline(f"device {self.device_id} is offline")
        mapped = 0
        stored = 0
        with self._lock:
            for lba in range(start_lba, start_lba + count):
                rec = self._blocks.get(lba)
                if rec is not None:
                    mapped += 1
                    stored += rec.stored_len
        if mapped == 0:
            raise EmptyRange(f"no mapped blocks in [{start_lba}, +{count})")
        return (mapped * BLOCK_SIZE) / stored

    def set_state(self, online: bool) -> None:
        self.online = online

    # -- introspection -----------------------------------------------------

    def block_stored_len(self, lba: int) -> int | None:
        """FTL-map probe: stored length of a block, or None if unmapped."""
        rec = self._blocks.get(lba)
        return rec.stored_len if rec is not None else None

    def is_mapped(self, lba: int) -> bool:
        return lba in self._blocks

    @property
    def physical_used_bytes(self) -> int:
        return self._physical_used

    def stats(self) -> DeviceStats:
        with self._lock:
            return DeviceStats(
                physical_used_bytes=self._physical_used,
                logical_mapped_blocks=len(self._blocks),
                read_ops=self._read_ops,
                write_ops=self._write_ops,
                trim_ops=self._trim_ops,
            )

    def recomputed_physical_used(self) -> int:
        """Full-scan recomputation of usage, for invariant checks."""
        with self._lock:
            return sum(rec.stored_len for rec in self._blocks.values())

    # -- persistence --------------------------------------------------------

    def save_image(self, path) -> None:
        cfg = self.config
        mode = 0 if cfg.compress_mode == MODE_REAL else 1
        with open(path, "wb") as fh:
            fh.write(
                _IMAGE_HEADER.pack(
                    _IMAGE_MAGIC,
                    1,
                    mode,
                    cfg.compress_level,
                    cfg.flash_capacity_bytes,
                    cfg.logical_capacity,
                    cfg.modeled_ratio,
                    len(self._blocks),
                )
            )
            for lba in sorted(self._blocks):
                rec = self._blocks[lba]
                fh.write(_IMAGE_RECORD.pack(lba, rec.stored_len))
                fh.write(rec.payload)

    @classmethod
    def load_image(cls, path, device_id: int = 0) -> "CompressingDevice":
        with open(path, "rb") as fh:
            hdr = fh.read(_IMAGE_HEADER.size)
            magic, version, mode, level, flash, logical, ratio, count = _IMAGE_HEADER.unpack(hdr)
            if magic != _IMAGE_MAGIC or version != 1:
                raise ConfigInvalid(f"{path}: not a device image")
            cfg = DeviceConfig(
                flash_capacity_bytes=flash,
                logical_capacity_bytes=logical,
                compress_mode=MODE_REAL if mode == 0 else MODE_MODELED,
                compress_level=level,
                modeled_ratio=ratio,
            )
            dev = cls(cfg, device_id=device_id)
            for _ in range(count):
                lba, stored_len = _IMAGE_RECORD.unpack(fh.read(_IMAGE_RECORD.size))
                payload = fh.read(BLOCK_SIZE)
                dev._blocks[lba] = BlockRecord(stored_len, payload)
                dev._physical_used += stored_len
        return dev

    # -- internals -----------------------------------------------------------

    def _check_lba(self, lba: int) -> None:
        if lba < 0 or lba >= self.config.logical_blocks:
            raise OutOfRange(
                f"lba {lba} outside logical space of {self.config.logical_blocks} blocks"
            )

    def _compressed_len(self, data: bytes, ratio_hint: float | None) -> int:
        if self.config.compress_mode == MODE_MODELED:
            ratio = ratio_hint if ratio_hint is not None else self.config.modeled_ratio
            if ratio < 1.0:
                ratio = 1.0
            return min(BLOCK_SIZE, math.ceil(BLOCK_SIZE / ratio))
        return min(len(zlib.compress(data, self.config.compress_level)), BLOCK_SIZE)
