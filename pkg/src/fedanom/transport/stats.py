"""Training-cost instrumentation.

A client's round has two measured intervals: local training
(train_start..train_end) and communication (upload_start..receipt of the
next global model). Server-side aggregation time falls inside the
communication interval as observed by a client; when the server reports it,
it is subtracted from communication and tracked as its own category.
"""

from dataclasses import dataclass, field, replace


@dataclass(frozen=True)
class RoundMarks:
    """Monotonic-clock timestamps from one completed client round."""

    train_start: float
    train_end: float
    upload_start: float
    receipt: float

    def __post_init__(self):
        order = (self.train_start, self.train_end, self.upload_start,
                 self.receipt)
        if any(b < a for a, b in zip(order, order[1:])):
            raise ValueError(f"marks must be non-decreasing, got {order}")


@dataclass(frozen=True)
class RoundCost:
    round: int
    compute_seconds: float
    comm_seconds: float
    agg_seconds: float
    bytes_up: int
    bytes_down: int


@dataclass(frozen=True)
class CommStats:
    """Accumulated cost split: computation, communication, aggregation."""

    bytes_up: int = 0
    bytes_down: int = 0
    comm_seconds: float = 0.0
    compute_seconds: float = 0.0
    agg_seconds: float = 0.0
    per_round: tuple = ()

    def ratios(self):
        """(comm, compute, agg) as fractions of the measured total."""
        total = self.comm_seconds + self.compute_seconds + self.agg_seconds
        if total <= 0.0:
            return 0.0, 0.0, 0.0
        return (self.comm_seconds / total, self.compute_seconds / total,
                self.agg_seconds / total)


def measure_round(stats: CommStats, marks: RoundMarks, round_index: int,
                  agg_seconds: float = 0.0, bytes_up: int = 0,
                  bytes_down: int = 0) -> CommStats:
    """Fold one round's marks into the running totals.

    The communication interval is (receipt - upload_start) minus the
    server-reported aggregation time; if aggregation is not reported it
    stays attributed to communication.
    """
    if agg_seconds < 0.0:
        raise ValueError("agg_seconds must be non-negative")
    compute = marks.train_end - marks.train_start
    window = marks.receipt - marks.upload_start
    agg = min(agg_seconds, window)
    comm = window - agg
    entry = RoundCost(round=round_index, compute_seconds=compute,
                      comm_seconds=comm, agg_seconds=agg,
                      bytes_up=bytes_up, bytes_down=bytes_down)
    return replace(
        stats,
        bytes_up=stats.bytes_up + bytes_up,
        bytes_down=stats.bytes_down + bytes_down,
        comm_seconds=stats.comm_seconds + comm,
        compute_seconds=stats.compute_seconds + compute,
        agg_seconds=stats.agg_seconds + agg,
        per_round=stats.per_round + (entry,),
    )
