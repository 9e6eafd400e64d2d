"""The national registry of entities and facilities matched against.

Loaded once from delimiter-separated extracts, then read-only. Facilities
carry back-references to their parent entity; three indexes (department,
activity prefix, name token) support candidate blocking.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field

from .models import (
    Identifier,
    IdentifierKind,
    InputError,
    RegistryEntity,
    RegistryFacility,
    full_siret,
    siren_only,
)
from .normalize import department_of, normalize_name

log = logging.getLogger(__name__)


def validate_siret(raw: str | None) -> Identifier | None:
    """Parse a declared identifier: 14 digits -> full, 9 -> entity-only.

    Spaces are stripped first. Anything else is invalid and yields None;
    there is no checksum validation, the registry match is the check.
    """
    if not raw:
        return None
    digits = "".join(raw.split())
    if len(digits) == 14 and digits.isdigit():
        return full_siret(digits)
    if len(digits) == 9 and digits.isdigit():
        return siren_only(digits)
    return None


def split_siret(siret: str) -> tuple[str, str]:
    """(entity prefix, facility suffix) of a 14-digit identifier."""
    return siret[:9], siret[9:]


@dataclass
class Registry:
    entities: dict[str, RegistryEntity] = field(default_factory=dict)
    facilities: dict[str, RegistryFacility] = field(default_factory=dict)
    activity_prefix_length: int = 2
    by_department: dict[str, set[str]] = field(default_factory=dict)
    by_activity_prefix: dict[str, set[str]] = field(default_factory=dict)
    by_name_token: dict[str, set[str]] = field(default_factory=dict)

    def add_entity(self, entity: RegistryEntity) -> None:
        self.entities[entity.siren] = entity

    def add_facility(self, facility: RegistryFacility) -> None:
        if facility.parent_siren not in self.entities:
            facility.orphan = True
        self.facilities[facility.siret] = facility
        if facility.department:
            self.by_department.setdefault(facility.department, set()).add(facility.siret)
        code = self.effective_activity(facility)
        if code:
            prefix = code[: self.activity_prefix_length]
            self.by_activity_prefix.setdefault(prefix, set()).add(facility.siret)
        for name in self.candidate_names(facility):
            for token in name.split():
                self.by_name_token.setdefault(token, set()).add(facility.siret)

    def parent_entity(self, facility: RegistryFacility) -> RegistryEntity | None:
        return self.entities.get(facility.parent_siren)

    def effective_activity(self, facility: RegistryFacility) -> str | None:
        """Facility activity code when present, else the parent entity's."""
        if facility.activity_code:
            return facility.activity_code
        parent = self.parent_entity(facility)
        return parent.activity_code if parent else None

    def candidate_names(self, facility: RegistryFacility) -> list[str]:
        """Folded names to compare against: the facility's own, else its parent's."""
        if facility.names:
            return facility.names
        parent = self.parent_entity(facility)
        return parent.legal_names if parent else []


def temporally_valid(facility: RegistryFacility, date: dt.date) -> bool:
    """True when the facility could exist on the date; absent dates are lenient."""
    if facility.open_date is not None and date < facility.open_date:
        return False
    if facility.close_date is not None and date > facility.close_date:
        return False
    return True


def _parse_date(value: str, formats: list[str]) -> dt.date | None:
    value = value.strip()
    if not value:
        return None
    for fmt in formats:
        try:
            return dt.datetime.strptime(value, fmt).date()
        except ValueError:
            continue
    return None


def _read_rows(path: str, delimiter: str) -> list[dict[str, str]]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return list(csv.DictReader(fh, delimiter=delimiter))
    except OSError as exc:
        raise InputError(f"cannot read registry file {path}: {exc}") from exc


def load_registry(
    entity_path: str,
    facility_path: str,
    entity_map: dict[str, str],
    facility_map: dict[str, str],
    delimiter: str = ",",
    date_formats: list[str] | None = None,
    activity_prefix_length: int = 2,
    name_list_separator: str = "|",
) -> Registry:
    """Build the in-memory registry with its three lookup indexes.

    Facilities whose parent entity is missing are kept and flagged orphan.
    Names are folded at load so every later comparison is fold-to-fold.
    """
    formats = date_formats or ["%Y-%m-%d", "%d/%m/%Y"]
    registry = Registry(activity_prefix_length=activity_prefix_length)

    for row in _read_rows(entity_path, delimiter):
        siren = (row.get(entity_map["siren"]) or "").strip()
        if not (len(siren) == 9 and siren.isdigit()):
            log.warning("skipping entity row with bad identifier %r", siren)
            continue
        names = [normalize_name(row.get(entity_map["legal_name"]) or "")]
        former = (row.get(entity_map.get("former_names", ""), "") or "").strip()
        if former:
            names.extend(
                normalize_name(part) for part in former.split(name_list_separator)
            )
        names = [n for n in names if n]
        if not names:
            log.warning("skipping entity %s without any legal name", siren)
            continue
        registry.add_entity(
            RegistryEntity(
                siren=siren,
                legal_names=names,
                creation_date=_parse_date(row.get(entity_map.get("creation_date", ""), "") or "", formats),
                closure_date=_parse_date(row.get(entity_map.get("closure_date", ""), "") or "", formats),
                activity_code=(row.get(entity_map.get("activity_code", ""), "") or "").strip() or None,
            )
        )

    for row in _read_rows(facility_path, delimiter):
        siret = (row.get(facility_map["siret"]) or "").strip()
        if not (len(siret) == 14 and siret.isdigit()):
            log.warning("skipping facility row with bad identifier %r", siret)
            continue
        raw_names = (row.get(facility_map.get("names", ""), "") or "").strip()
        names = [
            folded
            for part in raw_names.split(name_list_separator)
            if (folded := normalize_name(part))
        ]
        street, zipcode, city = (
            normalize_name(row.get(facility_map.get("street", ""), "") or "") or None,
            (row.get(facility_map.get("zipcode", ""), "") or "").strip() or None,
            normalize_name(row.get(facility_map.get("city", ""), "") or "") or None,
        )
        if zipcode is not None and not (len(zipcode) == 5 and zipcode.isdigit()):
            zipcode = None
        facility = RegistryFacility(
            siret=siret,
            names=names,
            street=street,
            zipcode=zipcode,
            city=city,
            department=department_of(zipcode),
            activity_code=(row.get(facility_map.get("activity_code", ""), "") or "").strip() or None,
            open_date=_parse_date(row.get(facility_map.get("open_date", ""), "") or "", formats),
            close_date=_parse_date(row.get(facility_map.get("close_date", ""), "") or "", formats),
        )
        registry.add_facility(facility)
        if facility.orphan:
            log.warning("facility %s has no parent entity", siret)

    return registry
