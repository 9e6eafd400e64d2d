"""Recover missing identifiers by successive filtering against the registry.

Three phases per occurrence: block candidates on department, validity date
and activity domain; keep candidates whose name is close enough; rank the
rest by address score and take the best. Each failure records which phase
emptied the pool, so the corpus-level failure attribution is measurable.
"""
from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass
from typing import NamedTuple

from .config import MatchConfig, PipelineConfig
from .models import (
    AgentOccurrence,
    Identifier,
    InvariantError,
    LotRecord,
    full_siret,
)
from .normalize import department_of
from .registry import Registry, temporally_valid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CandidateScore:
    """Scores of one surviving candidate facility."""

    siret: str
    name_similarity: float
    address_score: float
    presence_mask: tuple[str, ...]

REASON_NO_NAME = "no-name"
REASON_UNBLOCKABLE = "unblockable"
REASON_BLOCKING = "blocking"
REASON_NAME = "name"
REASON_ADDRESS = "address"


def levenshtein(a: str, b: str) -> int:
    """Plain edit distance, two-row dynamic program."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    if len(a) < len(b):
        a, b = b, a
    previous = list(range(len(b) + 1))
    for i, char_a in enumerate(a, 1):
        current = [i]
        for j, char_b in enumerate(b, 1):
            cost = 0 if char_a == char_b else 1
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + cost))
        previous = current
    return previous[-1]


def name_similarity(a: str, b: str) -> float:
    """Similarity in [0,1] of two folded names.

    Max of the token-multiset overlap coefficient and 1 minus the
    normalized edit distance, so both word reorderings and misspellings
    score high. 1.0 exactly when one token multiset contains the other or
    the strings are equal.
    """
    if not a.strip() or not b.strip():
        return 0.0
    if a == b:
        return 1.0
    tokens_a, tokens_b = Counter(a.split()), Counter(b.split())
    shared = sum((tokens_a & tokens_b).values())
    overlap = shared / min(sum(tokens_a.values()), sum(tokens_b.values()))
    if overlap >= 1.0:
        return 1.0
    longest = max(len(a), len(b))
    # the length gap bounds edit similarity; skip the DP when it cannot win
    if 1.0 - abs(len(a) - len(b)) / longest <= overlap:
        return overlap
    return max(overlap, 1.0 - levenshtein(a, b) / longest)


class Payload(NamedTuple):
    """The inputs of one identification, hashable so repeats are cached."""

    name: str
    street: str | None
    zipcode: str | None
    city: str | None
    department: str | None
    date: object
    activity: str | None


def payload_of(occurrence: AgentOccurrence, lot: LotRecord) -> Payload:
    return Payload(
        name=occurrence.normalized_name or "",
        street=occurrence.street,
        zipcode=occurrence.zipcode,
        city=occurrence.city,
        department=occurrence.department,
        date=lot.award_date or lot.publication_date,
        activity=lot.activity_code,
    )


def _activity_prefixes(
    activity: str | None,
    cpv_map: dict[str, list[str]] | None,
    prefix_length: int,
) -> list[str] | None:
    """Registry activity prefixes acceptable for a lot's CPV, None = skip."""
    if not activity or not cpv_map:
        return None
    code = activity.strip()
    for length in range(len(code), 0, -1):
        allowed = cpv_map.get(code[:length])
        if allowed is not None:
            return [p[:prefix_length] for p in allowed]
    return None


def _block_payload(
    payload: Payload,
    registry: Registry,
    config: MatchConfig,
    cpv_map: dict[str, list[str]] | None,
) -> tuple[set[str], bool]:
    restricted = False
    pool: set[str] | None = None
    if payload.department:
        restricted = True
        pool = registry.by_department.get(payload.department, set())
    prefixes = _activity_prefixes(payload.activity, cpv_map, registry.activity_prefix_length)
    if prefixes is not None:
        restricted = True
        allowed: set[str] = set()
        for prefix in prefixes:
            allowed |= registry.by_activity_prefix.get(prefix, set())
        pool = allowed if pool is None else pool & allowed
    if not restricted:
        # the date alone never justifies scanning the whole registry
        if not config.allow_unblocked:
            return set(), True
        pool = set(registry.facilities)
    assert pool is not None
    if payload.date is not None:
        pool = {s for s in pool if temporally_valid(registry.facilities[s], payload.date)}
    return pool, False


def candidate_block(
    occurrence: AgentOccurrence,
    lot: LotRecord,
    registry: Registry,
    config: MatchConfig,
    cpv_map: dict[str, list[str]] | None = None,
) -> set[str]:
    """Facilities consistent with department, lot date, and activity domain.

    A filter whose input is absent on the occurrence/lot side is skipped.
    With no department and no usable activity the search is refused (empty
    set) unless the config allows unblocked scans.
    """
    pool, _ = _block_payload(payload_of(occurrence, lot), registry, config, cpv_map)
    return pool


_ADDRESS_FIELDS = ("street", "zipcode", "city")


def _zipcode_similarity(a: str, b: str) -> float:
    if a == b:
        return 1.0
    dept_a = department_of(a)
    if dept_a is not None and dept_a == department_of(b):
        return 0.5
    return 0.0


def _address_score_parts(
    street_pair: tuple[str | None, str | None],
    zipcode_pair: tuple[str | None, str | None],
    city_pair: tuple[str | None, str | None],
    config: MatchConfig,
) -> tuple[float, tuple[str, ...]]:
    weights = {
        "street": config.street_weight,
        "zipcode": config.zipcode_weight,
        "city": config.city_weight,
    }
    pairs = {"street": street_pair, "zipcode": zipcode_pair, "city": city_pair}
    present = [f for f in _ADDRESS_FIELDS if pairs[f][0] and pairs[f][1]]
    if not present:
        return 0.0, ()
    total_weight = sum(weights[f] for f in present)
    score = 0.0
    for field_name in present:
        a, b = pairs[field_name]
        if field_name == "zipcode":
            sim = _zipcode_similarity(a, b)
        else:
            sim = name_similarity(a, b)
        score += weights[field_name] * sim
    return score / total_weight, tuple(present)


def address_score(
    occurrence: AgentOccurrence, facility, config: MatchConfig
) -> tuple[float, tuple[str, ...]]:
    """Weighted address agreement, weights redistributed over the fields
    present on both sides. Returns (score, presence mask)."""
    return _address_score_parts(
        (occurrence.street, facility.street),
        (occurrence.zipcode, facility.zipcode),
        (occurrence.city, facility.city),
        config,
    )


@dataclass
class MatchResult:
    occurrence_id: int
    source: str  # declared | matched | none
    identifier: Identifier | None = None
    reason: str | None = None
    best: CandidateScore | None = None
    block_size: int = 0
    name_survivors: int = 0


def _identify_payload(
    payload: Payload,
    registry: Registry,
    config: MatchConfig,
    cpv_map: dict[str, list[str]] | None,
) -> tuple[CandidateScore | None, str | None, int, int]:
    if not payload.name:
        return None, REASON_NO_NAME, 0, 0
    pool, unblockable = _block_payload(payload, registry, config, cpv_map)
    if unblockable:
        return None, REASON_UNBLOCKABLE, 0, 0
    if not pool:
        return None, REASON_BLOCKING, 0, 0

    by_name: list[tuple[str, float]] = []
    for siret in pool:
        facility = registry.facilities[siret]
        best_sim = 0.0
        for candidate_name in registry.candidate_names(facility):
            sim = name_similarity(payload.name, candidate_name)
            if sim > best_sim:
                best_sim = sim
                if best_sim >= 1.0:
                    break
        if best_sim >= config.name_threshold:
            by_name.append((siret, best_sim))
    if not by_name:
        return None, REASON_NAME, len(pool), 0

    candidates: list[CandidateScore] = []
    for siret, sim in by_name:
        facility = registry.facilities[siret]
        score, mask = _address_score_parts(
            (payload.street, facility.street),
            (payload.zipcode, facility.zipcode),
            (payload.city, facility.city),
            config,
        )
        # an empty mask means the address gives no evidence either way
        if mask and score < config.min_address_score:
            continue
        candidates.append(CandidateScore(siret, sim, score, mask))
    if not candidates:
        return None, REASON_ADDRESS, len(pool), len(by_name)

    best = min(
        candidates,
        key=lambda c: (-c.address_score, -c.name_similarity, c.siret),
    )
    return best, None, len(pool), len(by_name)


def identify_occurrence(
    occurrence: AgentOccurrence,
    lot: LotRecord,
    registry: Registry,
    config: MatchConfig,
    cpv_map: dict[str, list[str]] | None = None,
) -> MatchResult:
    """Run the full filter pipeline for one occurrence."""
    best, reason, block_size, survivors = _identify_payload(
        payload_of(occurrence, lot), registry, config, cpv_map
    )
    return MatchResult(
        occurrence_id=occurrence.occurrence_id,
        source="matched" if best else "none",
        identifier=full_siret(best.siret) if best else None,
        reason=reason,
        best=best,
        block_size=block_size,
        name_survivors=survivors,
    )


def identify_all(
    occurrences: list[AgentOccurrence],
    lots: list[LotRecord],
    registry: Registry,
    config: PipelineConfig,
) -> list[MatchResult]:
    """Identify every occurrence without an identifier, in occurrence order.

    Repeated payloads (same name, address, lot date, activity) are solved
    once; repeats of one agent dominate real corpora. Side effect: sets
    occ.identifier / occ.identifier_source on successful matches.
    """
    lots_by_id = {lot.lot_id: lot for lot in lots}
    cache: dict[Payload, tuple[CandidateScore | None, str | None, int, int]] = {}
    results: list[MatchResult] = []
    for occ in sorted(occurrences, key=lambda o: o.occurrence_id):
        if occ.identifier is not None:
            results.append(
                MatchResult(occ.occurrence_id, source="declared", identifier=occ.identifier)
            )
            continue
        lot = lots_by_id.get(occ.lot_id)
        if lot is None:
            raise InvariantError(f"occurrence {occ.occurrence_id} references unknown lot {occ.lot_id}")
        payload = payload_of(occ, lot)
        if payload not in cache:
            cache[payload] = _identify_payload(payload, registry, config.match, config.cpv_activity_map)
        best, reason, block_size, survivors = cache[payload]
        if best is not None:
            occ.identifier = full_siret(best.siret)
            occ.identifier_source = "matched"
        results.append(
            MatchResult(
                occurrence_id=occ.occurrence_id,
                source="matched" if best else "none",
                identifier=occ.identifier if best else None,
                reason=reason,
                best=best,
                block_size=block_size,
                name_survivors=survivors,
            )
        )
    return results


def write_match_log(results: list[MatchResult], path: str, delimiter: str = ",") -> None:
    """Audit log, one line per occurrence, in occurrence order."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter)
        writer.writerow(
            [
                "occurrenceId", "outcome", "reason", "siret",
                "nameSimilarity", "addressScore", "presence",
                "blockSize", "nameSurvivors",
            ]
        )
        for r in sorted(results, key=lambda r: r.occurrence_id):
            writer.writerow(
                [
                    r.occurrence_id,
                    r.source,
                    r.reason or "",
                    r.identifier.render() if r.identifier else "",
                    f"{r.best.name_similarity:.4f}" if r.best else "",
                    f"{r.best.address_score:.4f}" if r.best else "",
                    "+".join(r.best.presence_mask) if r.best else "",
                    r.block_size,
                    r.name_survivors,
                ]
            )
