"""Exception types shared across the elastic RAID engine."""


class ElasticRaidError(Exception):
    """Base class for all engine errors."""


class OutOfSpace(ElasticRaidError):
    """A write would push physical usage past the device's flash capacity."""


class DeviceOffline(ElasticRaidError):
    """I/O issued to a device that is currently offline."""


class OutOfRange(ElasticRaidError):
    """Block address outside the advertised logical space."""


class EmptyRange(ElasticRaidError):
    """Compression-ratio query over a range with no mapped blocks."""


class JournalFull(ElasticRaidError):
    """Write journal has no free space; caller must let migration drain."""


class DegradedReject(ElasticRaidError):
    """Write rejected because the target segment is RAID 5 and a device is offline."""


class DataLoss(ElasticRaidError):
    """More devices offline than the single-failure model tolerates."""


class RatioUnavailable(ElasticRaidError):
    """Per-stripe compression ratio cannot be queried."""


class CorpusTooSmall(ElasticRaidError):
    """Corpus does not contain enough bytes for the requested stripe count."""


class UnreachableRatio(ElasticRaidError):
    """Requested compression ratio exceeds what the synthesizer can achieve."""


class ConfigInvalid(ElasticRaidError):
    """Array configuration violates an invariant of a downstream module."""


class Infeasible(ElasticRaidError):
    """Capacity model: even the cheapest RAID mix exceeds the physical budget."""


class ConversionError(ElasticRaidError):
    """Segment is not in the level required by the requested conversion."""
