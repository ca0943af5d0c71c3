"""Append-only write journal spanning all devices, itself RAID-5 protected.

Region layout (tail of every device's logical space, outside segment
space): ``journal_rows`` rows, where row r holds n data blocks plus one
parity block on the rotating parity device.  The linear data-slot space is
carved into fixed-size chunks that own whole rows; each chunk stores one
descriptor block (sequence numbers, user LBAs, payload checksums of its
records) followed by its payload blocks.

Durability protocol:

* A record's payload block is written immediately on append; its header
  sits in memory until the chunk's descriptor flushes (when the chunk
  fills, on an explicit ``flush()``, or when migration needs the records).
  A crash before the descriptor flush discards those tail records.
* Row parity is accumulated in memory and written once the row's last
  slot is consumed, keeping journal write amplification at (n+1)/n plus a
  ~1/records_per_chunk descriptor term.
* Reclaim is checkpoint-then-trim: the migrated tail sequence is made
  durable before any freed block is trimmed, so a trimmed block can never
  be mistaken for a live record during replay.

Pending payloads are also cached in memory (the stripe-cache role), so
serving reads and migrating records costs no journal-region device reads.
"""

import struct
from dataclasses import dataclass

from .errors import ConfigInvalid, DeviceOffline, JournalFull
from .layout import ArrayGeometry, parity_device_for
from .util import BLOCK_SIZE, crc32

_DESC_MAGIC = b"EJDC"
_DESC_HEADER = struct.Struct("<4sHHQQI")      # magic, version, pad, chunk_index, first_seq, count
_REC_HEADER = struct.Struct("<QQIHH")         # seq, user_lba, payload_crc, slot, flags
_CKPT_MAGIC = b"EJCP"
_CKPT = struct.Struct("<4sHHQQI")             # magic, version, pad, tail_seq, chunk_hint, crc


@dataclass(frozen=True)
class JournalConfig:
    rows: int
    chunk_rows: int | None = None       # rows per chunk; None picks ~128 records/chunk
    checkpoint_interval: int = 256      # records migrated between checkpoint writes

    def resolved_chunk_rows(self, data_strips: int) -> int:
        if self.chunk_rows is not None:
            if self.chunk_rows < 1:
                raise ConfigInvalid("chunk_rows must be >= 1")
            return self.chunk_rows
        return max(1, 129 // data_strips)


def align_journal_rows(rows: int, data_strips: int, config: JournalConfig) -> int:
    """Round a requested row count up to a whole number of chunks."""
    if rows <= 0:
        return 0
    m = config.resolved_chunk_rows(data_strips)
    return ((rows + m - 1) // m) * m


@dataclass(frozen=True)
class JournalRecord:
    seq: int
    user_lba: int
    payload: bytes
    checksum: int


@dataclass
class _ChunkMeta:
    first_seq: int
    last_seq: int
    sealed: bool


def _record_crc(seq: int, user_lba: int, payload: bytes) -> int:
    return crc32(payload, crc32(struct.pack("<QQ", seq, user_lba)))


class Journal:
    """Write journal with asynchronous batched migration.

    ``apply_fn(user_lba, payload, ratio_hint, seq)`` is supplied per
    migration call and performs the destined-stripe update.
    """

    def __init__(self, devices, geometry: ArrayGeometry, config: JournalConfig):
        if geometry.journal_rows <= 0:
            raise ConfigInvalid("journal requires journal_rows > 0 in the geometry")
        self.devices = devices
        self.geometry = geometry
        self.config = config
        self.n = geometry.data_strips
        self.device_count = geometry.device_count
        self.rows = geometry.journal_rows
        self.base = geometry.journal_base
        self.ckpt_lba = geometry.journal_checkpoint_lba
        m = config.resolved_chunk_rows(self.n)
        if self.rows % m != 0:
            raise ConfigInvalid(f"journal rows ({self.rows}) must be a multiple of {m}")
        self.chunk_rows = m
        self.slots_per_chunk = m * self.n
        self.records_per_chunk = self.slots_per_chunk - 1
        self.chunk_count = self.rows // m
        if self.records_per_chunk < 1 or self.chunk_count < 1:
            raise ConfigInvalid("journal region too small for one chunk")
        desc_size = _DESC_HEADER.size + self.records_per_chunk * _REC_HEADER.size + 4
        if desc_size > BLOCK_SIZE:
            raise ConfigInvalid("records per chunk too large for a descriptor block")

        # append cursor
        self.next_seq = 1
        self.cur_chunk = 0
        self.cur_used = 0
        self._pending: list[tuple[int, int, int, int]] = []   # (seq, lba, crc, slot)
        # record state
        self._cache: dict[int, tuple[bytes, float | None]] = {}
        self._seq_info: dict[int, tuple[int, int, int, int]] = {}  # seq -> (chunk, slot, lba, crc)
        self.redirect: dict[int, int] = {}
        self._chunk_meta: dict[int, _ChunkMeta] = {}
        self._live: dict[int, int] = {}
        self._occupied: dict[int, int] = {}                   # physical slot -> chunk index
        # migration state
        self.tail_seq = 0
        self.durable_tail = 0
        self._since_ckpt = 0
        self._ckpt_rotor = 0
        # row state
        self._row_acc: dict[int, int] = {}
        self._row_consumed: dict[int, int] = {}
        self._row_parity_done: set[int] = set()
        # counters
        self.data_writes = 0
        self.parity_writes = 0
        self.meta_writes = 0
        self.replay_reads = 0
        self.appends = 0

    # -- addressing ----------------------------------------------------------

    def _row_devices(self, row: int) -> list[int]:
        pdev = parity_device_for(row, self.device_count)
        return [d for d in range(self.device_count) if d != pdev]

    def _slot_addr(self, phys_slot: int, within: int) -> tuple[int, int, int]:
        """(device, device_lba, row) of one linear journal slot."""
        j = phys_slot * self.slots_per_chunk + within
        row, col = divmod(j, self.n)
        return self._row_devices(row)[col], self.base + row, row

    def _extent_rows(self, phys_slot: int) -> range:
        start = phys_slot * self.chunk_rows
        return range(start, start + self.chunk_rows)

    # -- capacity ------------------------------------------------------------

    @property
    def record_capacity(self) -> int:
        return self.chunk_count * self.records_per_chunk

    def pending_count(self) -> int:
        return (self.next_seq - 1) - self.tail_seq

    # -- append path ---------------------------------------------------------

    def append(self, user_lba: int, payload: bytes, ratio_hint: float | None = None) -> int:
        if len(payload) != BLOCK_SIZE:
            raise ValueError(f"journal payloads must be {BLOCK_SIZE} bytes")
        if not any(dev.online for dev in self.devices):
            raise DeviceOffline("no online devices")
        while True:
            if self.cur_used == self.records_per_chunk:
                self._seal_chunk()
            phys = self.cur_chunk % self.chunk_count
            holder = self._occupied.get(phys)
            if holder is not None and holder != self.cur_chunk:
                raise JournalFull(
                    f"journal ring full ({self.pending_count()} records pending migration)"
                )
            within = 1 + self.cur_used
            dev_idx, lba, row = self._slot_addr(phys, within)
            if self.devices[dev_idx].online:
                break
            # slot lands on an offline device: burn the slot and move on
            self._claim(phys)
            self.cur_used += 1
            self._consume_row(row)
        seq = self.next_seq
        checksum = _record_crc(seq, user_lba, payload)
        self.devices[dev_idx].write(lba, payload, ratio_hint)
        self.data_writes += 1
        self.appends += 1
        self._claim(phys)
        self._row_acc[row] = self._row_acc.get(row, 0) ^ int.from_bytes(payload, "little")
        self._consume_row(row)
        self._pending.append((seq, user_lba, checksum, within))
        self._cache[seq] = (bytes(payload), ratio_hint)
        self._seq_info[seq] = (self.cur_chunk, within, user_lba, checksum)
        self.redirect[user_lba] = seq
        self._live[self.cur_chunk] = self._live.get(self.cur_chunk, 0) + 1
        meta = self._chunk_meta.get(self.cur_chunk)
        if meta is None:
            self._chunk_meta[self.cur_chunk] = _ChunkMeta(seq, seq, False)
        else:
            meta.last_seq = seq
        self.cur_used += 1
        self.next_seq += 1
        if self.cur_used == self.records_per_chunk:
            self._seal_chunk()
        return seq

    def _claim(self, phys_slot: int) -> None:
        if phys_slot not in self._occupied:
            self._occupied[phys_slot] = self.cur_chunk

    def _consume_row(self, row: int) -> None:
        used = self._row_consumed.get(row, 0) + 1
        self._row_consumed[row] = used
        if used == self.n and row not in self._row_parity_done:
            pdev = parity_device_for(row, self.device_count)
            dev = self.devices[pdev]
            if dev.online:
                acc = self._row_acc.get(row, 0)
                dev.write(self.base + row, acc.to_bytes(BLOCK_SIZE, "little"))
                self.parity_writes += 1
                self._row_parity_done.add(row)

    def _seal_chunk(self) -> None:
        """Flush the current chunk's descriptor and advance the append cursor."""
        if self.cur_used == 0 and not self._pending:
            return
        if not self._pending:
            # only skipped slots were consumed; nothing durable to keep
            self._occupied.pop(self.cur_chunk % self.chunk_count, None)
        else:
            phys = self.cur_chunk % self.chunk_count
            body = _DESC_HEADER.pack(_DESC_MAGIC, 1, 0, self.cur_chunk,
                                     self._pending[0][0], len(self._pending))
            for seq, lba, checksum, slot in self._pending:
                body += _REC_HEADER.pack(seq, lba, checksum, slot, 0)
            block = (body + struct.pack("<I", crc32(body))).ljust(BLOCK_SIZE, b"\0")
            written = False
            for within in (0, *range(1 + self.cur_used, self.slots_per_chunk)):
                dev_idx, lba, row = self._slot_addr(phys, within)
                if not self.devices[dev_idx].online:
                    continue
                self.devices[dev_idx].write(lba, block)
                self.meta_writes += 1
                self._consume_row(row)
                written = True
                break
            if not written:
                raise DeviceOffline("no online device for journal descriptor")
            self._chunk_meta[self.cur_chunk].sealed = True
        self.cur_chunk += 1
        self.cur_used = 0
        self._pending = []

    def flush(self) -> None:
        """Durability barrier: make every appended record replayable."""
        self._seal_chunk()

    # -- reads ---------------------------------------------------------------

    def lookup(self, user_lba: int) -> int | None:
        return self.redirect.get(user_lba)

    def read_payload(self, seq: int) -> bytes:
        return self._cache[seq][0]

    # -- migration -----------------------------------------------------------

    def migrate(self, max_records: int, apply_fn) -> int:
        """Apply up to ``max_records`` journal records to their stripes, in
        sequence order.  Superseded records are skipped without stripe I/O.
        A failing record stays in the journal and stops the batch."""
        done = 0
        while done < max_records and self.tail_seq < self.next_seq - 1:
            seq = self.tail_seq + 1
            info = self._seq_info.get(seq)
            if info is None:
                # no surviving record for this sequence number (post-replay gap)
                self.tail_seq = seq
                continue
            chunk, slot, user_lba, checksum = info
            meta = self._chunk_meta[chunk]
            if not meta.sealed:
                self._seal_chunk()
            if self.redirect.get(user_lba) == seq:
                payload, hint = self._cache[seq]
                apply_fn(user_lba, payload, hint, seq)
                del self.redirect[user_lba]
            self._live[chunk] -= 1
            del self._cache[seq]
            del self._seq_info[seq]
            self.tail_seq = seq
            self._since_ckpt += 1
            done += 1
        if done and (self._since_ckpt >= self.config.checkpoint_interval
                     or self.pending_count() == 0):
            self._checkpoint_and_reclaim()
        return done

    def drain(self, apply_fn) -> int:
        total = 0
        while self.pending_count() > 0:
            moved = self.migrate(self.pending_count(), apply_fn)
            total += moved
            if moved == 0:
                break
        return total

    def _checkpoint_and_reclaim(self) -> None:
        body = _CKPT.pack(_CKPT_MAGIC, 1, 0, self.tail_seq, self.cur_chunk, 0)[:-4]
        block = (body + struct.pack("<I", crc32(body))).ljust(BLOCK_SIZE, b"\0")
        for attempt in range(self.device_count):
            dev = self.devices[(self._ckpt_rotor + attempt) % self.device_count]
            if dev.online:
                dev.write(self.ckpt_lba, block)
                self.meta_writes += 1
                break
        else:
            return  # nothing online: defer reclaim entirely
        self._ckpt_rotor += 1
        self.durable_tail = self.tail_seq
        self._since_ckpt = 0
        for chunk in sorted(self._chunk_meta):
            meta = self._chunk_meta[chunk]
            live = self._live.get(chunk, 0)
            if chunk == self.cur_chunk or not meta.sealed:
                continue
            if live == 0 and meta.last_seq <= self.durable_tail:
                self._trim_extent(chunk % self.chunk_count)
                del self._chunk_meta[chunk]
                self._live.pop(chunk, None)
                self._occupied.pop(chunk % self.chunk_count, None)

    def _trim_extent(self, phys_slot: int) -> None:
        for row in self._extent_rows(phys_slot):
            for dev in self.devices:
                if dev.online:
                    dev.trim(self.base + row, 1)
            self._row_acc.pop(row, None)
            self._row_consumed.pop(row, None)
            self._row_parity_done.discard(row)

    # -- crash recovery --------------------------------------------------------

    def replay(self) -> int:
        """Rebuild the redirect index from descriptors and checkpoints on the
        devices.  Records whose payload checksum no longer validates (torn
        writes, trimmed blocks) are discarded.  Returns the number of live
        records restored."""
        tail = 0
        chunk_hint = 0
        for dev in self.devices:
            if not dev.online or not dev.is_mapped(self.ckpt_lba):
                continue
            blob = dev.read(self.ckpt_lba)
            self.replay_reads += 1
            parsed = self._parse_checkpoint(blob)
            if parsed is not None:
                tail = max(tail, parsed[0])
                chunk_hint = max(chunk_hint, parsed[1])
        self.tail_seq = tail
        self.durable_tail = tail

        descs: dict[int, tuple[int, int, int, list]] = {}  # phys -> (chunk, first, count, headers)
        for phys in range(self.chunk_count):
            found = self._scan_extent_descriptor(phys)
            if found is not None:
                prev = descs.get(phys)
                if prev is None or found[0] > prev[0]:
                    descs[phys] = found

        head = tail
        max_chunk = chunk_hint - 1
        for phys, (chunk, first_seq, count, headers) in sorted(descs.items(),
                                                               key=lambda kv: kv[1][0]):
            max_chunk = max(max_chunk, chunk)
            live_headers = [h for h in headers if h[0] > tail]
            restored = 0
            for seq, user_lba, checksum, slot, _flags in live_headers:
                payload = self._read_slot(phys, slot)
                if payload is None or _record_crc(seq, user_lba, payload) != checksum:
                    continue
                self._cache[seq] = (payload, None)
                self._seq_info[seq] = (chunk, slot, user_lba, checksum)
                self._live[chunk] = self._live.get(chunk, 0) + 1
                head = max(head, seq)
                restored += 1
            if restored:
                self._occupied[phys] = chunk
                self._chunk_meta[chunk] = _ChunkMeta(first_seq, max(h[0] for h in headers), True)
            else:
                self._trim_extent(phys)
        self.next_seq = head + 1
        self.cur_chunk = max_chunk + 1
        self.cur_used = 0
        self._pending = []
        for seq in sorted(self._cache):
            self.redirect[self._seq_info[seq][2]] = seq
        fresh = self.cur_chunk % self.chunk_count
        if fresh not in self._occupied:
            self._trim_extent(fresh)      # purge torn appends that never got a descriptor
        self._rebuild_row_state()
        return len(self._cache)

    def _parse_checkpoint(self, blob: bytes):
        if len(blob) < _CKPT.size:
            return None
        magic, version, _, tail_seq, chunk_hint, stored = _CKPT.unpack_from(blob)
        if magic != _CKPT_MAGIC or version != 1:
            return None
        if crc32(blob[:_CKPT.size - 4]) != stored:
            return None
        return tail_seq, chunk_hint

    def _scan_extent_descriptor(self, phys: int):
        for within in range(self.slots_per_chunk):
            dev_idx, lba, _row = self._slot_addr(phys, within)
            dev = self.devices[dev_idx]
            if not dev.online or not dev.is_mapped(lba):
                continue
            blob = dev.read(lba)
            self.replay_reads += 1
            parsed = self._parse_descriptor(blob, phys)
            if parsed is not None:
                return parsed
        return None

    def _parse_descriptor(self, blob: bytes, phys: int):
        magic, version, _, chunk_index, first_seq, count = _DESC_HEADER.unpack_from(blob)
        if magic != _DESC_MAGIC or version != 1 or count > self.records_per_chunk:
            return None
        end = _DESC_HEADER.size + count * _REC_HEADER.size
        (stored,) = struct.unpack_from("<I", blob, end)
        if crc32(blob[:end]) != stored:
            return None
        if chunk_index % self.chunk_count != phys:
            return None
        headers = [_REC_HEADER.unpack_from(blob, _DESC_HEADER.size + i * _REC_HEADER.size)
                   for i in range(count)]
        return chunk_index, first_seq, count, headers

    def _read_slot(self, phys: int, within: int) -> bytes | None:
        dev_idx, lba, row = self._slot_addr(phys, within)
        dev = self.devices[dev_idx]
        if dev.online:
            self.replay_reads += 1
            return dev.read(lba)
        # single-device failure during replay: rebuild from the row's parity
        pdev = self.devices[parity_device_for(row, self.device_count)]
        if not pdev.online or not pdev.is_mapped(self.base + row):
            return None
        acc = int.from_bytes(pdev.read(self.base + row), "little")
        self.replay_reads += 1
        for other in self._row_devices(row):
            if other == dev_idx:
                continue
            odev = self.devices[other]
            if not odev.online:
                return None
            acc ^= int.from_bytes(odev.read(self.base + row), "little")
            self.replay_reads += 1
        return acc.to_bytes(BLOCK_SIZE, "little")

    def _rebuild_row_state(self) -> None:
        for phys in self._occupied:
            for row in self._extent_rows(phys):
                acc = 0
                for dev_idx in self._row_devices(row):
                    dev = self.devices[dev_idx]
                    if dev.online and dev.is_mapped(self.base + row):
                        acc ^= int.from_bytes(dev.read(self.base + row), "little")
                        self.replay_reads += 1
                if acc:
                    self._row_acc[row] = acc
                pdev = self.devices[parity_device_for(row, self.device_count)]
                if pdev.online and pdev.is_mapped(self.base + row):
                    self._row_parity_done.add(row)
                self._row_consumed[row] = self.n  # sealed chunks take no more appends
