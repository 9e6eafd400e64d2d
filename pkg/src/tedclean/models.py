"""Domain records shared by the pipeline stages."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum


class ConfigError(Exception):
    """Bad or inconsistent configuration (exit code 2)."""


class InputError(Exception):
    """Unreadable or structurally invalid input data (exit code 3)."""


class InvariantError(Exception):
    """A pipeline invariant was violated; names the failed assertion (exit code 4)."""


class Role(str, Enum):
    BUYER = "buyer"
    WINNER = "winner"


class ContractType(str, Enum):
    GOODS = "goods"
    SERVICES = "services"
    WORKS = "works"


class CriterionClass(str, Enum):
    PRICE = "PRICE"
    DEADLINE = "DEADLINE"
    TECHNICAL = "TECHNICAL"
    ENVIRONMENTAL = "ENVIRONMENTAL"
    SOCIAL = "SOCIAL"
    OTHERS = "OTHERS"


class IdentifierKind(str, Enum):
    FULL_SIRET = "siret"
    SIREN_ONLY = "siren"
    INTERNAL = "internal"


class CaseKind(str, Enum):
    SINGLETON = "SINGLETON"
    CONFLICTING_IDS = "CONFLICTING_IDS"
    ALL_UNIDENTIFIED = "ALL_UNIDENTIFIED"
    SINGLE_IDENTIFIED = "SINGLE_IDENTIFIED"


class MatchOutcome(str, Enum):
    FULL = "FULL"
    PARTIAL = "PARTIAL"
    INCORRECT = "INCORRECT"
    NONE = "NONE"


INTERNAL_CODE_PREFIX = "U"


@dataclass(frozen=True, order=True)
class Identifier:
    """National identifier of an agent, or an internal fallback code.

    Internal codes are prefixed with a letter so they can never collide
    with the all-digit 9/14 formats.
    """

    kind: IdentifierKind
    value: str

    def __post_init__(self) -> None:
        if self.kind is IdentifierKind.FULL_SIRET:
            if not (len(self.value) == 14 and self.value.isdigit()):
                raise ValueError(f"full identifier must be 14 digits: {self.value!r}")
        elif self.kind is IdentifierKind.SIREN_ONLY:
            if not (len(self.value) == 9 and self.value.isdigit()):
                raise ValueError(f"entity identifier must be 9 digits: {self.value!r}")
        else:
            if not self.value.startswith(INTERNAL_CODE_PREFIX):
                raise ValueError(f"internal code must start with {INTERNAL_CODE_PREFIX!r}")

    @property
    def siren(self) -> str | None:
        """9-digit entity prefix, when the identifier carries one."""
        if self.kind is IdentifierKind.FULL_SIRET:
            return self.value[:9]
        if self.kind is IdentifierKind.SIREN_ONLY:
            return self.value
        return None

    def render(self) -> str:
        return self.value


def full_siret(value: str) -> Identifier:
    return Identifier(IdentifierKind.FULL_SIRET, value)


def siren_only(value: str) -> Identifier:
    return Identifier(IdentifierKind.SIREN_ONLY, value)


def internal_code(sequence: int) -> Identifier:
    return Identifier(IdentifierKind.INTERNAL, f"{INTERNAL_CODE_PREFIX}{sequence:06d}")


@dataclass
class RawLotRow:
    """One data line of a source table, cells kept verbatim."""

    cells: dict[str, str]
    source_file: str
    source_line: int


@dataclass
class LotRecord:
    lot_id: int
    notice_id: str
    lot_number: str
    publication_date: dt.date
    award_date: dt.date | None = None
    contract_type: ContractType | None = None
    activity_code: str | None = None
    number_of_offers: int | None = None
    awarded_value: Decimal | None = None
    currency: str | None = None
    cancelled: bool = False
    contract_notice_ref: str | None = None
    source_file: str = ""
    source_line: int = 0


@dataclass
class RowRejection:
    """A source row build_lot refused, with the reason code."""

    source_file: str
    source_line: int
    reason: str


@dataclass
class AgentOccurrence:
    occurrence_id: int
    lot_id: int
    role: Role
    raw_name: str
    street: str | None = None
    zipcode: str | None = None
    city: str | None = None
    country: str | None = None
    declared_siret: str | None = None
    normalized_name: str | None = None
    department: str | None = None
    identifier: Identifier | None = None
    identifier_source: str | None = None
    split_conflict: bool = False


@dataclass
class CriteriaRaw:
    """Unrepaired criterion fields of one lot, as ingested."""

    lot_id: int
    names_field: str
    weights_field: str
    price_field: str


@dataclass
class Criterion:
    lot_id: int
    raw_name: str
    criterion_class: CriterionClass
    weight: Decimal | None
    weight_is_normalized: bool = False


@dataclass
class RegistryEntity:
    siren: str
    legal_names: list[str]
    creation_date: dt.date | None = None
    closure_date: dt.date | None = None
    activity_code: str | None = None


@dataclass
class RegistryFacility:
    siret: str
    names: list[str] = field(default_factory=list)
    street: str | None = None
    zipcode: str | None = None
    city: str | None = None
    department: str | None = None
    activity_code: str | None = None
    open_date: dt.date | None = None
    close_date: dt.date | None = None
    orphan: bool = False

    @property
    def parent_siren(self) -> str:
        return self.siret[:9]

    @property
    def nic(self) -> str:
        return self.siret[9:]


@dataclass
class AgentCluster:
    cluster_id: int
    member_occurrence_ids: list[int]
    case_kind: CaseKind
    resolved_identifier: Identifier


@dataclass
class CanonicalAgent:
    agent_id: Identifier
    names: list[str]
    street: str | None = None
    zipcode: str | None = None
    city: str | None = None
    department: str | None = None
    country: str | None = None
    case_kinds: list[CaseKind] = field(default_factory=list)
    member_occurrence_ids: list[int] = field(default_factory=list)
