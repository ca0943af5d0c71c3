"""Bloated-segment layout: geometry, per-segment placement, level bitmap.

Each segment reserves logical space for two stripes ("slot 1" and
"slot 2") on every device, so one stripe's worth of user data can live
there under either protection level:

* RAID 5: slot 1 holds the n data strips plus the rotating parity strip;
  slot 2 is fully trimmed.  Logical-space utilization is 1/2.
* RAID 10: slot 1 holds copy A of the data strips (the parity position is
  trimmed); slot 2 holds copy B rotated right by one device so no device
  carries both copies of a strip.  Utilization is n/(n+1).

The whole user-LBA mapping decomposes into independent per-segment
functions of (segment index, level, geometry), so converting one segment
never touches any other.
"""

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .errors import ConfigInvalid, OutOfRange
from .util import BLOCK_SIZE, ceil_div, crc32


class Level(IntEnum):
    R5 = 0
    R10 = 1


def parity_device_for(seg_index: int, device_count: int) -> int:
    """Rotating parity position; adjacent segments use different devices."""
    n = device_count - 1
    return (n - (seg_index % device_count)) % device_count


@dataclass(frozen=True)
class ArrayGeometry:
    """Immutable shape of the array's logical space.

    Per-device logical layout, in blocks:
    ``[segment space | journal rows | journal checkpoint | level bitmap]``.
    """

    data_strips: int                 # n; the array has n+1 devices
    segment_count: int
    strip_size: int = BLOCK_SIZE
    journal_rows: int = 0

    def __post_init__(self):
        if self.data_strips < 2:
            raise ConfigInvalid("need at least 2 data strips (3 devices)")
        if self.segment_count < 1:
            raise ConfigInvalid("need at least one segment")
        if self.strip_size % BLOCK_SIZE != 0 or self.strip_size <= 0:
            raise ConfigInvalid("strip size must be a positive multiple of 4096")
        if self.journal_rows < 0:
            raise ConfigInvalid("journal rows must be >= 0")

    # -- derived sizes ------------------------------------------------------

    @property
    def device_count(self) -> int:
        return self.data_strips + 1

    @property
    def blocks_per_strip(self) -> int:
        return self.strip_size // BLOCK_SIZE

    @property
    def user_blocks_per_segment(self) -> int:
        return self.data_strips * self.blocks_per_strip

    @property
    def user_blocks(self) -> int:
        return self.segment_count * self.user_blocks_per_segment

    @property
    def user_capacity_bytes(self) -> int:
        return self.user_blocks * BLOCK_SIZE

    @property
    def segment_space_blocks(self) -> int:
        return self.segment_count * 2 * self.blocks_per_strip

    @property
    def journal_base(self) -> int:
        return self.segment_space_blocks

    @property
    def journal_checkpoint_lba(self) -> int | None:
        if self.journal_rows == 0:
            return None
        return self.journal_base + self.journal_rows

    @property
    def bitmap_base(self) -> int:
        extra = self.journal_rows + (1 if self.journal_rows else 0)
        return self.journal_base + extra

    @property
    def bitmap_blocks(self) -> int:
        return ceil_div(_BITMAP_HEADER.size + ceil_div(self.segment_count, 8) + 4, BLOCK_SIZE)

    @property
    def device_logical_blocks(self) -> int:
        return self.bitmap_base + self.bitmap_blocks

    @property
    def device_logical_bytes(self) -> int:
        return self.device_logical_blocks * BLOCK_SIZE

    # -- block addressing ---------------------------------------------------

    def slot_lba(self, seg_index: int, slot: int, offset: int = 0) -> int:
        """Device LBA of block ``offset`` within slot 1 or 2 of a segment."""
        return (seg_index * 2 + (slot - 1)) * self.blocks_per_strip + offset


def geometry_for_capacity(data_strips: int, flash_capacity_bytes: int,
                          expansion_target: float, strip_size: int = BLOCK_SIZE,
                          journal_rows: int = 0) -> ArrayGeometry:
    """Size the segment space so user capacity = expansion_target * n * flash,
    rounded down to whole stripes (the remainder is never exposed)."""
    if expansion_target < 1.0:
        raise ConfigInvalid("capacity expansion target must be >= 1")
    segments = int(expansion_target * flash_capacity_bytes + 1e-6) // strip_size
    if segments < 1:
        raise ConfigInvalid("flash capacity too small for one stripe")
    return ArrayGeometry(
        data_strips=data_strips,
        segment_count=segments,
        strip_size=strip_size,
        journal_rows=journal_rows,
    )


@dataclass(frozen=True)
class SegmentPlacement:
    """Full placement plan of one segment at one level.

    ``copy_a[i]`` / ``copy_b[i]`` give the device holding strip i in
    slot 1 / slot 2; ``trimmed`` lists the (device, slot) positions that
    hold no live data at this level.
    """

    seg_index: int
    level: Level
    parity_device: int | None
    copy_a: tuple[int, ...]
    copy_b: tuple[int, ...] | None
    trimmed: tuple[tuple[int, int], ...]


def segment_placement(geometry: ArrayGeometry, seg_index: int, level: Level) -> SegmentPlacement:
    """Pure placement function of (segment, level, geometry)."""
    if not 0 <= seg_index < geometry.segment_count:
        raise OutOfRange(f"segment {seg_index} out of range")
    dc = geometry.device_count
    pdev = parity_device_for(seg_index, dc)
    data_devices = tuple(d for d in range(dc) if d != pdev)
    if level == Level.R5:
        trimmed = tuple((d, 2) for d in range(dc))
        return SegmentPlacement(seg_index, level, pdev, data_devices, None, trimmed)
    copy_b = tuple((d + 1) % dc for d in data_devices)
    trimmed = ((pdev, 1), ((pdev + 1) % dc, 2))
    return SegmentPlacement(seg_index, level, None, data_devices, copy_b, trimmed)


@dataclass(frozen=True)
class MappedBlock:
    """Resolution of one user LBA against the current level bitmap."""

    seg_index: int
    strip_index: int
    block_offset: int
    level: Level
    loc_a: tuple[int, int]              # (device, device_lba) primary copy
    loc_b: tuple[int, int] | None       # mirror copy when RAID 10
    parity: tuple[int, int] | None      # parity location when RAID 5


# -- persistent level bitmap --------------------------------------------------

_BITMAP_MAGIC = b"EBMP"
_BITMAP_HEADER = struct.Struct("<4sHHQQ")   # magic, version, pad, seq, segment_count


class LevelBitmap:
    """One bit per segment (0 = RAID 5, 1 = RAID 10).

    A checksummed replica is kept on every device together with a monotone
    sequence number; flipping a bit and persisting the record is the atomic
    commit point of a level conversion.  Recovery picks the
    highest-sequence replica whose checksum validates.
    """

    def __init__(self, segment_count: int, bits: bytearray | None = None, seq: int = 0):
        self.segment_count = segment_count
        self.bits = bits if bits is not None else bytearray(ceil_div(segment_count, 8))
        self.seq = seq

    def level(self, seg_index: int) -> Level:
        return Level((self.bits[seg_index >> 3] >> (seg_index & 7)) & 1)

    def set_level(self, seg_index: int, level: Level) -> None:
        mask = 1 << (seg_index & 7)
        if level == Level.R10:
            self.bits[seg_index >> 3] |= mask
        else:
            self.bits[seg_index >> 3] &= ~mask

    def raid10_count(self) -> int:
        return sum((self.bits[i >> 3] >> (i & 7)) & 1 for i in range(self.segment_count))

    def raid10_fraction(self) -> float:
        return self.raid10_count() / self.segment_count

    def segments_at(self, level: Level):
        for seg in range(self.segment_count):
            if self.level(seg) == level:
                yield seg

    # -- replica encoding ----------------------------------------------------

    def encode(self) -> bytes:
        body = _BITMAP_HEADER.pack(_BITMAP_MAGIC, 1, 0, self.seq, self.segment_count)
        body += bytes(self.bits)
        return body + struct.pack("<I", crc32(body))

    @classmethod
    def decode(cls, blob: bytes) -> "LevelBitmap | None":
        if len(blob) < _BITMAP_HEADER.size + 4:
            return None
        magic, version, _, seq, segment_count = _BITMAP_HEADER.unpack_from(blob)
        if magic != _BITMAP_MAGIC or version != 1:
            return None
        nbytes = ceil_div(segment_count, 8)
        end = _BITMAP_HEADER.size + nbytes
        if len(blob) < end + 4:
            return None
        (stored_crc,) = struct.unpack_from("<I", blob, end)
        if crc32(blob[:end]) != stored_crc:
            return None
        return cls(segment_count, bytearray(blob[_BITMAP_HEADER.size:end]), seq)

    def persist(self, devices, geometry: ArrayGeometry) -> None:
        """Bump the sequence number and rewrite the replica on every online device."""
        self.seq += 1
        record = self.encode()
        nblocks = geometry.bitmap_blocks
        padded = record.ljust(nblocks * BLOCK_SIZE, b"\0")
        for dev in devices:
            if not dev.online:
                continue
            for i in range(nblocks):
                dev.write(geometry.bitmap_base + i,
                          padded[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE])

    @classmethod
    def load(cls, devices, geometry: ArrayGeometry, segment_count: int) -> "LevelBitmap":
        """Best replica across devices; a fresh all-RAID-5 map if none decodes."""
        best: LevelBitmap | None = None
        for dev in devices:
            if not dev.online:
                continue
            blob = b"".join(dev.read(geometry.bitmap_base + i)
                            for i in range(geometry.bitmap_blocks))
            cand = cls.decode(blob)
            if cand is not None and cand.segment_count == segment_count:
                if best is None or cand.seq > best.seq:
                    best = cand
        return best if best is not None else cls(segment_count)


class LayoutMap:
    """Resolves user LBAs through the geometry and the live level bitmap."""

    def __init__(self, geometry: ArrayGeometry, bitmap: LevelBitmap):
        if bitmap.segment_count != geometry.segment_count:
            raise ConfigInvalid("bitmap does not match geometry")
        self.geometry = geometry
        self.bitmap = bitmap

    def placement(self, seg_index: int, level: Level | None = None) -> SegmentPlacement:
        if level is None:
            level = self.bitmap.level(seg_index)
        return segment_placement(self.geometry, seg_index, level)

    def map_user_lba(self, user_lba: int) -> MappedBlock:
        geo = self.geometry
        if not 0 <= user_lba < geo.user_blocks:
            raise OutOfRange(f"user lba {user_lba} beyond capacity of {geo.user_blocks} blocks")
        seg, within = divmod(user_lba, geo.user_blocks_per_segment)
        strip, offset = divmod(within, geo.blocks_per_strip)
        level = self.bitmap.level(seg)
        plan = segment_placement(geo, seg, level)
        lba_a = geo.slot_lba(seg, 1, offset)
        loc_a = (plan.copy_a[strip], lba_a)
        if level == Level.R5:
            parity = (plan.parity_device, lba_a)
            return MappedBlock(seg, strip, offset, level, loc_a, None, parity)
        loc_b = (plan.copy_b[strip], geo.slot_lba(seg, 2, offset))
        return MappedBlock(seg, strip, offset, level, loc_a, loc_b, None)
