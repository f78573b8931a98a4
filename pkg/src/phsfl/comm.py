"""Bit-exact communication accounting for split (PHSFL/HSFL) and full-model (HFL) training.

All quantities are Python ints. With ``omega`` bits per float, ``omega + 1`` bits are charged
per transmitted value.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

U64_MAX = 2**64 - 1

ACTIVATION = "activation"
INDICES = "indices"
GRADIENT = "gradient"
BROADCAST = "broadcast"
OFFLOAD = "offload"


def _u64(bits: int) -> int:
    if bits > U64_MAX:
        raise OverflowError(f"{bits} bits does not fit in an unsigned 64-bit counter")
    return bits


@dataclass(frozen=True)
class OverheadParams:
    batch_size: int         # N
    batches_per_epoch: int  # N-bar
    cut_width: int          # Z_c
    client_params: int      # Z_0
    total_params: int       # Z
    client_samples: int     # |D_u|
    local_epochs: int       # kappa_0
    omega: int = 64

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a non-negative int, got {value!r}")


def index_bits(num_samples: int) -> int:
    """``ceil(log2(num_samples)) + 1`` bits to address one sample."""
    if num_samples < 1:
        raise ValueError("need at least one sample")
    return (num_samples - 1).bit_length() + 1


def activation_bits(batch_size: int, cut_width: int, omega: int) -> int:
    return _u64(batch_size * cut_width * (omega + 1))


def phi_local(p: OverheadParams) -> int:
    per_batch = 2 * (p.batch_size * p.cut_width) * (p.omega + 1) + p.batch_size * index_bits(p.client_samples)
    return _u64(p.batches_per_epoch * per_batch)


def phi_off(client_params: int, omega: int) -> int:
    return _u64(client_params * (omega + 1))


def phi_phsfl_bound(p: OverheadParams) -> int:
    return _u64(p.local_epochs * phi_local(p) + 2 * phi_off(p.client_params, p.omega))


def phi_hfl(total_params: int, omega: int) -> int:
    return _u64(2 * total_params * (omega + 1))


def is_efficient(p: OverheadParams) -> bool:
    return phi_hfl(p.total_params, p.omega) > phi_phsfl_bound(p)


@dataclass(frozen=True)
class CommRecord:
    global_round: int
    edge_round: int
    client: int
    kind: str
    bits: int


@dataclass
class CommLedger:
    """Append-only log of client <-> edge-server transmissions."""

    omega: int = 64
    records: list[CommRecord] = field(default_factory=list)

    def record(self, global_round: int, edge_round: int, client: int, kind: str, bits: int) -> None:
        self.records.append(CommRecord(global_round, edge_round, client, kind, _u64(int(bits))))

    def snapshot(self) -> tuple[CommRecord, ...]:
        return tuple(self.records)

    def total(self) -> int:
        return _u64(sum(r.bits for r in self.records))

    def total_through(self, global_round: int) -> int:
        return sum(r.bits for r in self.records if r.global_round <= global_round)

    def per_client_edge_round(self) -> dict[tuple[int, int, int], int]:
        out: dict[tuple[int, int, int], int] = defaultdict(int)
        for r in self.records:
            out[(r.global_round, r.edge_round, r.client)] += r.bits
        return dict(out)


@dataclass
class LedgerCheck:
    rows: list[tuple[tuple[int, int, int], int, int]]  # (key, measured, bound)

    @property
    def ok(self) -> bool:
        return all(measured <= bound for _, measured, bound in self.rows)

    @property
    def min_slack(self) -> int | None:
        return min((bound - m for _, m, bound in self.rows), default=None)

    @property
    def measured_total(self) -> int:
        return sum(m for _, m, _ in self.rows)


def measured_vs_formula(ledger: CommLedger, params: dict[int, OverheadParams], hfl: bool = False) -> LedgerCheck:
    """Compare each (global round, edge round, client) bit count with its per-edge-round bound.

    ``params`` maps client id to that client's overhead parameters. With ``hfl=True`` the
    reference is the full-model exchange ``phi_hfl`` instead of the split-protocol bound.
    """
    rows = []
    for key, measured in sorted(ledger.per_client_edge_round().items()):
        p = params[key[2]]
        bound = phi_hfl(p.total_params, p.omega) if hfl else phi_phsfl_bound(p)
        rows.append((key, measured, bound))
    return LedgerCheck(rows)
