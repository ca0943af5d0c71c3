"""User read/write service over the segment layout, with amplification accounting.

Writes are acknowledged once journaled (or applied directly when the array
runs without a journal); migration later lands them in their stripes:
RAID 5 with a read-modify-write parity delta, RAID 10 by writing both
copies.  Reads consult the journal redirect index first, then the layout.
In degraded mode RAID 5 strips on the failed device are rebuilt by XOR
over the surviving slot-1 strips, and RAID 10 reads the surviving copy.
"""

import threading
from dataclasses import dataclass

from .device import CompressingDevice
from .errors import (DataLoss, DegradedReject, DeviceOffline, RatioUnavailable)
from .journal import Journal, JournalConfig
from .layout import ArrayGeometry, LayoutMap, Level, LevelBitmap
from .util import BLOCK_SIZE, xor_many


@dataclass(frozen=True)
class CounterSnapshot:
    """Cumulative operation counters; subtract two snapshots to measure a run."""

    user_reads: int = 0
    user_writes: int = 0
    device_reads: int = 0
    device_writes: int = 0
    device_trims: int = 0
    journal_writes: int = 0
    convert_reads: int = 0
    convert_writes: int = 0

    def __sub__(self, other: "CounterSnapshot") -> "CounterSnapshot":
        return CounterSnapshot(*(a - b for a, b in
                                 zip(self._astuple(), other._astuple())))

    def _astuple(self):
        return (self.user_reads, self.user_writes, self.device_reads,
                self.device_writes, self.device_trims, self.journal_writes,
                self.convert_reads, self.convert_writes)

    @property
    def write_amplification(self) -> float:
        return self.device_writes / self.user_writes if self.user_writes else 0.0

    @property
    def read_amplification(self) -> float:
        """Backend reads per user op; under a pure-write workload the
        denominator is the write count (parity-update reads)."""
        denom = self.user_reads if self.user_reads else self.user_writes
        return self.device_reads / denom if denom else 0.0


class ElasticArray:
    """An elastic RAID array over simulated compressing devices."""

    def __init__(self, devices: list[CompressingDevice], geometry: ArrayGeometry,
                 bitmap: LevelBitmap, journal_config: JournalConfig | None = None,
                 parity_ratio_hint: float | None = None):
        if len(devices) != geometry.device_count:
            raise ValueError(f"geometry wants {geometry.device_count} devices, "
                             f"got {len(devices)}")
        for dev in devices:
            if dev.config.logical_blocks < geometry.device_logical_blocks:
                raise ValueError(
                    f"device {dev.device_id} logical space too small for geometry "
                    f"({dev.config.logical_blocks} < {geometry.device_logical_blocks} blocks)"
                )
        self.devices = devices
        self.geometry = geometry
        self.bitmap = bitmap
        self.layout = LayoutMap(geometry, bitmap)
        self.parity_ratio_hint = parity_ratio_hint
        self.journal = (Journal(devices, geometry, journal_config)
                        if journal_config is not None and geometry.journal_rows > 0
                        else None)
        self.seg_locks = [threading.Lock() for _ in range(geometry.segment_count)]
        self.degraded_device: int | None = None
        self.scheduler = None
        self.in_flight = [0] * geometry.device_count
        self.user_reads = 0
        self.user_writes = 0
        self.convert_reads = 0
        self.convert_writes = 0
        self.recovery_rebuild_until = 0   # records at or below use full parity rebuild
        self._stale_mirrors: list[tuple[int, int, int, int]] = []  # (dst_dev, dst_lba, src_dev, src_lba)

    # -- user-facing I/O -------------------------------------------------------

    def user_write(self, user_lba: int, payload: bytes, ratio_hint: float | None = None) -> None:
        if len(payload) != BLOCK_SIZE:
            raise ValueError(f"payload must be {BLOCK_SIZE} bytes")
        mapped = self.layout.map_user_lba(user_lba)
        if self.degraded_device is not None and mapped.level == Level.R5:
            raise DegradedReject(
                f"segment {mapped.seg_index} is RAID 5 and device "
                f"{self.degraded_device} is offline"
            )
        if self.journal is not None:
            self.journal.append(user_lba, payload, ratio_hint)
        else:
            self._apply_stripe_write(user_lba, payload, ratio_hint, rebuild=False)
        self.user_writes += 1
        if self.scheduler is not None:
            self.scheduler.record_access(mapped.seg_index, mapped.level == Level.R10)

    def user_read(self, user_lba: int) -> bytes:
        mapped = self.layout.map_user_lba(user_lba)
        self.user_reads += 1
        if self.scheduler is not None:
            self.scheduler.record_access(mapped.seg_index, mapped.level == Level.R10)
        if self.journal is not None:
            seq = self.journal.lookup(user_lba)
            if seq is not None:
                return self.journal.read_payload(seq)
        if mapped.level == Level.R5:
            dev_idx, lba = mapped.loc_a
            if self.devices[dev_idx].online:
                return self._tracked_read(dev_idx, lba)
            return self.reconstruct_strip(mapped.seg_index, mapped.strip_index,
                                          mapped.block_offset)
        dev_idx, lba = self.mirror_read_select(mapped.seg_index, mapped.strip_index,
                                               mapped.block_offset)
        return self._tracked_read(dev_idx, lba)

    def _tracked_read(self, dev_idx: int, lba: int) -> bytes:
        self.in_flight[dev_idx] += 1
        try:
            return self.devices[dev_idx].read(lba)
        finally:
            self.in_flight[dev_idx] -= 1

    def mirror_read_select(self, seg_index: int, strip_index: int,
                           block_offset: int = 0) -> tuple[int, int]:
        """Pick the less busy replica of a RAID 10 strip (ties: lower device id)."""
        plan = self.layout.placement(seg_index, Level.R10)
        lba_a = self.geometry.slot_lba(seg_index, 1, block_offset)
        lba_b = self.geometry.slot_lba(seg_index, 2, block_offset)
        a = (plan.copy_a[strip_index], lba_a)
        b = (plan.copy_b[strip_index], lba_b)
        a_ok = self.devices[a[0]].online
        b_ok = self.devices[b[0]].online
        if not a_ok and not b_ok:
            raise DataLoss(f"both copies of segment {seg_index} strip {strip_index} offline")
        if not a_ok:
            return b
        if not b_ok:
            return a
        if self.in_flight[b[0]] < self.in_flight[a[0]]:
            return b
        if self.in_flight[a[0]] < self.in_flight[b[0]]:
            return a
        return a if a[0] <= b[0] else b

    def reconstruct_strip(self, seg_index: int, strip_index: int,
                          block_offset: int = 0) -> bytes:
        """Rebuild a RAID 5 strip on the failed device: XOR of the n
        surviving slot-1 strips (data plus parity)."""
        plan = self.layout.placement(seg_index, Level.R5)
        lba = self.geometry.slot_lba(seg_index, 1, block_offset)
        target = plan.copy_a[strip_index]
        pieces = []
        for dev_idx in (*plan.copy_a, plan.parity_device):
            if dev_idx == target:
                continue
            if not self.devices[dev_idx].online:
                raise DataLoss("second device failure during reconstruction")
            pieces.append(self._tracked_read(dev_idx, lba))
        return xor_many(pieces)

    # -- stripe update (migration target) ---------------------------------------

    def _apply_stripe_write(self, user_lba: int, payload: bytes,
                            ratio_hint: float | None, rebuild: bool) -> None:
        mapped = self.layout.map_user_lba(user_lba)
        geo = self.geometry
        with self.seg_locks[mapped.seg_index]:
            if mapped.level == Level.R5:
                dev_idx, lba = mapped.loc_a
                pdev_idx, plba = mapped.parity
                dev = self.devices[dev_idx]
                pdev = self.devices[pdev_idx]
                if rebuild:
                    # crash-safe landing: recompute parity from the whole stripe
                    dev.write(lba, payload, ratio_hint)
                    plan = self.layout.placement(mapped.seg_index, Level.R5)
                    pieces = [payload]
                    for strip, d in enumerate(plan.copy_a):
                        if strip != mapped.strip_index:
                            pieces.append(self.devices[d].read(lba))
                    pdev.write(plba, xor_many(pieces), self.parity_ratio_hint)
                else:
                    old = dev.read(lba)
                    old_parity = pdev.read(plba)
                    dev.write(lba, payload, ratio_hint)
                    new_parity = xor_many((old_parity, old, payload))
                    pdev.write(plba, new_parity, self.parity_ratio_hint)
            else:
                a_idx, a_lba = mapped.loc_a
                b_idx, b_lba = mapped.loc_b
                wrote = []
                for dev_idx, lba in ((a_idx, a_lba), (b_idx, b_lba)):
                    if self.devices[dev_idx].online:
                        self.devices[dev_idx].write(lba, payload, ratio_hint)
                        wrote.append((dev_idx, lba))
                if len(wrote) == 1:
                    # degraded mirror write: remember the copy to resync on restore
                    missed = (a_idx, a_lba) if wrote[0] != (a_idx, a_lba) else (b_idx, b_lba)
                    self._stale_mirrors.append((*missed, *wrote[0]))
                elif not wrote:
                    raise DataLoss("both mirror devices offline")

    def _migration_apply(self, user_lba: int, payload: bytes,
                         ratio_hint: float | None, seq: int) -> None:
        rebuild = seq <= self.recovery_rebuild_until
        self._apply_stripe_write(user_lba, payload, ratio_hint, rebuild)

    def pump_migration(self, max_records: int) -> int:
        if self.journal is None:
            return 0
        return self.journal.migrate(max_records, self._migration_apply)

    def drain_journal(self) -> int:
        if self.journal is None:
            return 0
        return self.journal.drain(self._migration_apply)

    # -- degraded mode -----------------------------------------------------------

    def degrade(self, device_id: int) -> None:
        if self.degraded_device is not None:
            raise DataLoss("a device is already offline (single-failure model)")
        self.devices[device_id].set_state(False)
        self.degraded_device = device_id

    def restore(self) -> None:
        if self.degraded_device is None:
            return
        self.devices[self.degraded_device].set_state(True)
        self.degraded_device = None
        for dst_dev, dst_lba, src_dev, src_lba in self._stale_mirrors:
            payload = self.devices[src_dev].read(src_lba)
            stored = self.devices[src_dev].block_stored_len(src_lba)
            hint = BLOCK_SIZE / stored if stored else None
            self.devices[dst_dev].write(dst_lba, payload, hint)
            self.convert_reads += 1
            self.convert_writes += 1
        self._stale_mirrors.clear()

    # -- consistency --------------------------------------------------------------

    def scrub(self) -> list[str]:
        """Full-array consistency check.  Segments with journal-pending
        writes are exempt (the journal is authoritative for them)."""
        if self.degraded_device is not None:
            raise DeviceOffline("scrub requires all devices online")
        geo = self.geometry
        exempt = set()
        if self.journal is not None:
            for lba in self.journal.redirect:
                exempt.add(lba // geo.user_blocks_per_segment)
        violations = []
        for seg in range(geo.segment_count):
            if seg in exempt:
                continue
            level = self.bitmap.level(seg)
            plan = self.layout.placement(seg, level)
            for offset in range(geo.blocks_per_strip):
                lba1 = geo.slot_lba(seg, 1, offset)
                if level == Level.R5:
                    mapped_any = any(self.devices[d].is_mapped(lba1)
                                     for d in (*plan.copy_a, plan.parity_device))
                    if not mapped_any:
                        continue
                    data = [self.devices[d].read(lba1) for d in plan.copy_a]
                    parity = self.devices[plan.parity_device].read(lba1)
                    if xor_many(data) != parity:
                        violations.append(f"seg {seg} offset {offset}: parity mismatch")
                else:
                    lba2 = geo.slot_lba(seg, 2, offset)
                    for strip in range(geo.data_strips):
                        a = self.devices[plan.copy_a[strip]]
                        b = self.devices[plan.copy_b[strip]]
                        if not a.is_mapped(lba1) and not b.is_mapped(lba2):
                            continue
                        if a.read(lba1) != b.read(lba2):
                            violations.append(
                                f"seg {seg} strip {strip} offset {offset}: mirror mismatch")
        return violations

    # -- compressibility queries ---------------------------------------------------

    def segment_data_ratio(self, seg_index: int) -> float:
        """Aggregate compression ratio over the segment's mapped data strips."""
        plan = self.layout.placement(seg_index)
        geo = self.geometry
        logical = stored = 0
        for strip, dev_idx in enumerate(plan.copy_a):
            for offset in range(geo.blocks_per_strip):
                sl = self.devices[dev_idx].block_stored_len(geo.slot_lba(seg_index, 1, offset))
                if sl is not None:
                    logical += BLOCK_SIZE
                    stored += sl
        if stored == 0:
            raise RatioUnavailable(f"segment {seg_index} has no mapped data blocks")
        return logical / stored

    def segment_parity_ratio(self, seg_index: int) -> float:
        plan = self.layout.placement(seg_index, Level.R5)
        geo = self.geometry
        logical = stored = 0
        for offset in range(geo.blocks_per_strip):
            sl = self.devices[plan.parity_device].block_stored_len(
                geo.slot_lba(seg_index, 1, offset))
            if sl is not None:
                logical += BLOCK_SIZE
                stored += sl
        if stored == 0:
            raise RatioUnavailable(f"segment {seg_index} has no mapped parity block")
        return logical / stored

    def promote_deltas(self, seg_index: int) -> dict[int, int]:
        """Per-device physical-byte deltas a promotion of this segment would
        cause: each data strip is duplicated onto its mirror device and the
        parity strip is freed."""
        plan = self.layout.placement(seg_index, Level.R10)
        r5 = self.layout.placement(seg_index, Level.R5)
        geo = self.geometry
        deltas: dict[int, int] = {}
        for strip, src_dev in enumerate(plan.copy_a):
            dst = plan.copy_b[strip]
            for offset in range(geo.blocks_per_strip):
                sl = self.devices[src_dev].block_stored_len(geo.slot_lba(seg_index, 1, offset))
                if sl is not None:
                    deltas[dst] = deltas.get(dst, 0) + sl
        for offset in range(geo.blocks_per_strip):
            sl = self.devices[r5.parity_device].block_stored_len(
                geo.slot_lba(seg_index, 1, offset))
            if sl is not None:
                deltas[r5.parity_device] = deltas.get(r5.parity_device, 0) - sl
        return deltas

    # -- accounting -----------------------------------------------------------------

    def snapshot(self) -> CounterSnapshot:
        reads = writes = trims = 0
        for dev in self.devices:
            st = dev.stats()
            reads += st.read_ops
            writes += st.write_ops
            trims += st.trim_ops
        jw = 0
        if self.journal is not None:
            j = self.journal
            jw = j.data_writes + j.parity_writes + j.meta_writes
        return CounterSnapshot(
            user_reads=self.user_reads,
            user_writes=self.user_writes,
            device_reads=reads,
            device_writes=writes,
            device_trims=trims,
            journal_writes=jw,
            convert_reads=self.convert_reads,
            convert_writes=self.convert_writes,
        )

    def stats(self) -> dict:
        snap = self.snapshot()
        per_device = []
        for dev in self.devices:
            st = dev.stats()
            per_device.append({
                "device": dev.device_id,
                "online": dev.online,
                "physical_used_bytes": st.physical_used_bytes,
                "flash_capacity_bytes": dev.config.flash_capacity_bytes,
                "reads": st.read_ops,
                "writes": st.write_ops,
                "trims": st.trim_ops,
            })
        out = {
            "user_reads": snap.user_reads,
            "user_writes": snap.user_writes,
            "device_reads": snap.device_reads,
            "device_writes": snap.device_writes,
            "wa": snap.write_amplification,
            "ra": snap.read_amplification,
            "journal_pending": self.journal.pending_count() if self.journal else 0,
            "raid10_fraction": self.bitmap.raid10_fraction(),
            "per_device": per_device,
        }
        if self.scheduler is not None:
            out.update(self.scheduler.stats())
        return out

    # -- fault injection ---------------------------------------------------------------

    def install_fault_hook(self, hook) -> None:
        for dev in self.devices:
            dev.op_hook = hook

    def clear_fault_hook(self) -> None:
        for dev in self.devices:
            dev.op_hook = None
