"""Quantitative validation: masked re-identification, clustering quality,
stage accounting, and corpus statistics.

The headline protocol hides known identifiers, reruns the pipeline, and
classifies what it recovers into four outcomes (FULL, PARTIAL, INCORRECT,
NONE). Clustering quality is measured per agent by how concentrated its
occurrences are in clusters; stage accounting snapshots correctness after
each pipeline step.
"""
from __future__ import annotations

import copy
import csv
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .config import PipelineConfig
from .identify import identify_all
from .merge import merge_all
from .models import (
    AgentCluster,
    AgentOccurrence,
    Identifier,
    IdentifierKind,
    InvariantError,
    LotRecord,
    MatchOutcome,
    Role,
)
from .normalize import PostalTable, merge_by_declared_siret, normalize_occurrence
from .registry import Registry, validate_siret

log = logging.getLogger(__name__)

STAGES = ("separation", "normalization", "identification", "clustering")


def classify_outcome(predicted: Identifier | None, truth: Identifier) -> MatchOutcome:
    """One of four outcomes against a known 14-digit identifier.

    An internal code is a declared failure to identify, so it counts as
    NONE, not as INCORRECT.
    """
    if predicted is None or predicted.kind is IdentifierKind.INTERNAL:
        return MatchOutcome.NONE
    if predicted == truth:
        return MatchOutcome.FULL
    if predicted.siren == truth.siren:
        return MatchOutcome.PARTIAL
    return MatchOutcome.INCORRECT


@dataclass
class Clustering:
    """Occurrence -> cluster assignment with cluster sizes."""

    cluster_of: dict[int, int] = field(default_factory=dict)
    sizes: dict[int, int] = field(default_factory=dict)

    @classmethod
    def from_clusters(cls, clusters: list[AgentCluster]) -> "Clustering":
        out = cls()
        for cluster in clusters:
            out.sizes[cluster.cluster_id] = len(cluster.member_occurrence_ids)
            for occ_id in cluster.member_occurrence_ids:
                out.cluster_of[occ_id] = cluster.cluster_id
        return out


def concentration_ratio(occurrence_ids: list[int], clustering: Clustering) -> float | None:
    """Largest share of one agent's occurrences found in a single cluster."""
    if not occurrence_ids:
        return None
    counts = Counter(clustering.cluster_of[i] for i in occurrence_ids)
    return max(counts.values()) / len(occurrence_ids)


def singleton_ratio(occurrence_ids: list[int], clustering: Clustering) -> float | None:
    """Share of one agent's occurrences that sit in singleton clusters."""
    if not occurrence_ids:
        return None
    alone = sum(
        1 for i in occurrence_ids if clustering.sizes[clustering.cluster_of[i]] == 1
    )
    return alone / len(occurrence_ids)


def sample_ground_truth(
    occurrences: list[AgentOccurrence], per_role: int, seed: int
) -> list[int]:
    """Seeded stratified sample of occurrence ids, one per apparent agent.

    Eligible occurrences have both a name and a city; within a role, only
    one occurrence per distinct (name, city) pair enters the draw.
    """
    rng = random.Random(seed)
    sampled: list[int] = []
    for role in (Role.BUYER, Role.WINNER):
        eligible: dict[tuple[str, str], int] = {}
        for occ in sorted(occurrences, key=lambda o: o.occurrence_id):
            if occ.role is not role or not occ.normalized_name or not occ.city:
                continue
            eligible.setdefault((occ.normalized_name, occ.city), occ.occurrence_id)
        pool = sorted(eligible.values())
        if len(pool) <= per_role:
            if len(pool) < per_role:
                log.warning(
                    "only %d eligible %s occurrences for a sample of %d",
                    len(pool), role.value, per_role,
                )
            sampled.extend(pool)
        else:
            sampled.extend(rng.sample(pool, per_role))
    return sorted(sampled)


@dataclass
class StageRow:
    stage: str
    total: int
    correct_strict: int
    incorrect_strict: int
    correct_entity: int
    incorrect_entity: int
    missing: int


def stage_accounting(
    snapshots: dict[str, dict[int, Identifier | None]],
    truth: dict[int, Identifier],
) -> list[StageRow]:
    """Correct/incorrect/missing counts per pipeline stage.

    Both success notions are reported: strict counts only FULL as correct,
    entity-level counts FULL and PARTIAL together.
    """
    rows = []
    for stage in STAGES:
        snapshot = snapshots[stage]
        outcomes = Counter(
            classify_outcome(snapshot.get(occ_id), expected)
            for occ_id, expected in truth.items()
        )
        full = outcomes[MatchOutcome.FULL]
        partial = outcomes[MatchOutcome.PARTIAL]
        incorrect = outcomes[MatchOutcome.INCORRECT]
        missing = outcomes[MatchOutcome.NONE]
        rows.append(
            StageRow(
                stage=stage,
                total=len(truth),
                correct_strict=full,
                incorrect_strict=partial + incorrect,
                correct_entity=full + partial,
                incorrect_entity=incorrect,
                missing=missing,
            )
        )
    return rows


def notice_coverage(
    contract_notice_ids: set[str], lots: list[LotRecord]
) -> tuple[float | None, float | None]:
    """(unmatched contract notices %, unmatched award notices %)."""
    award_refs: dict[str, set[str]] = defaultdict(set)
    for lot in lots:
        if lot.contract_notice_ref:
            award_refs[lot.notice_id].add(lot.contract_notice_ref)
        else:
            award_refs[lot.notice_id]  # the notice exists even without a ref
    if not contract_notice_ids or not award_refs:
        return None, None
    referenced = {ref for refs in award_refs.values() for ref in refs}
    unmatched_contracts = len(contract_notice_ids - referenced) / len(contract_notice_ids)
    unmatched_awards = sum(
        1 for refs in award_refs.values() if not (refs & contract_notice_ids)
    ) / len(award_refs)
    return 100.0 * unmatched_contracts, 100.0 * unmatched_awards


_SIZE_BINS = ("1", "2", "3", "4", "5", "6+")
_IDENT_BINS = ("0", "1", "2", "3", "4", "5+")


def _binned(counts: Counter, labels: tuple[str, ...]) -> list[tuple[str, int, float]]:
    total = sum(counts.values())
    rows = []
    for label in labels:
        if label.endswith("+"):
            floor = int(label[:-1])
            n = sum(c for v, c in counts.items() if v >= floor)
        else:
            n = counts.get(int(label), 0)
        rows.append((label, n, 100.0 * n / total if total else 0.0))
    return rows


def distribution_tables(
    clusters: list[AgentCluster],
    identifier_of: dict[int, Identifier | None],
) -> tuple[list[tuple[str, int, float]], list[tuple[str, int, float]]]:
    """Cluster-size and distinct-identifier histograms.

    identifier_of must hold the pre-merge identifiers: the point of the
    second table is how many distinct identifiers each cluster contained
    before resolution.
    """
    size_counts = Counter(len(c.member_occurrence_ids) for c in clusters)
    ident_counts: Counter = Counter()
    for cluster in clusters:
        distinct = {
            identifier_of[i]
            for i in cluster.member_occurrence_ids
            if identifier_of.get(i) is not None
        }
        ident_counts[len(distinct)] += 1
    return _binned(size_counts, _SIZE_BINS), _binned(ident_counts, _IDENT_BINS)


def truth_from_declared(occurrences: list[AgentOccurrence]) -> dict[int, Identifier]:
    """Known identifiers: occurrences declaring a valid 14-digit value."""
    truth = {}
    for occ in occurrences:
        ident = validate_siret(occ.declared_siret)
        if ident is not None and ident.kind is IdentifierKind.FULL_SIRET:
            truth[occ.occurrence_id] = ident
    return truth


def load_ground_truth(path: str, delimiter: str = ",") -> dict[int, Identifier]:
    """Read (occurrenceId, siret) labels from a delimiter-separated file."""
    truth = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh, delimiter=delimiter):
            ident = validate_siret(row.get("siret", ""))
            if ident is None or ident.kind is not IdentifierKind.FULL_SIRET:
                continue
            truth[int(row["occurrenceId"])] = ident
    return truth


@dataclass
class MaskReport:
    truth_size: int
    outcomes: dict[int, MatchOutcome]
    stage_rows: list[StageRow]
    outcome_by_role_occurrences: dict[str, dict[str, float]]
    outcome_by_role_agents: dict[str, dict[str, float]]
    concentration: list[float]
    singleton: list[float]


def _outcome_distribution(
    outcome_of: dict[int, MatchOutcome], groups: dict[str, list[int]]
) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for label, ids in groups.items():
        counts = Counter(outcome_of[i] for i in ids)
        total = len(ids)
        out[label] = {
            outcome.value: 100.0 * counts[outcome] / total if total else 0.0
            for outcome in MatchOutcome
        }
    return out


def mask_and_rerun(
    occurrences: list[AgentOccurrence],
    lots: list[LotRecord],
    registry: Registry,
    postal: PostalTable | None,
    config: PipelineConfig,
    truth: dict[int, Identifier],
) -> MaskReport:
    """Hide the known identifiers, rerun the pipeline, classify recovery.

    The originals are untouched: everything runs on copies whose declared
    identifiers in the truth set are removed before any stage sees them.
    """
    if not truth:
        raise InvariantError("mask_and_rerun requires a non-empty ground-truth set")
    masked = copy.deepcopy(occurrences)
    by_id = {occ.occurrence_id: occ for occ in masked}
    for occ_id in truth:
        occ = by_id[occ_id]
        occ.declared_siret = None
        occ.identifier = None
        occ.identifier_source = None

    snapshots: dict[str, dict[int, Identifier | None]] = {}
    snapshots["separation"] = {
        occ.occurrence_id: validate_siret(occ.declared_siret) for occ in masked
    }

    for occ in masked:
        normalize_occurrence(occ, postal, config.postal_tokens)
    merge_by_declared_siret(masked)
    snapshots["normalization"] = {occ.occurrence_id: occ.identifier for occ in masked}

    results = identify_all(masked, lots, registry, config)
    leaked = [
        r.occurrence_id
        for r in results
        if r.occurrence_id in truth and r.source == "declared"
    ]
    if leaked:
        raise InvariantError(
            f"masked identifiers leaked into identification: {leaked[:5]}"
        )
    snapshots["identification"] = {occ.occurrence_id: occ.identifier for occ in masked}

    merged = merge_all(masked, config)
    snapshots["clustering"] = {occ.occurrence_id: occ.identifier for occ in masked}

    outcomes = {
        occ_id: classify_outcome(snapshots["clustering"][occ_id], expected)
        for occ_id, expected in truth.items()
    }

    role_of = {occ.occurrence_id: occ.role for occ in masked}
    by_role_occ = {
        role.value: [i for i in truth if role_of[i] is role]
        for role in (Role.BUYER, Role.WINNER)
    }
    # agent base: one vote per distinct true identifier, majority outcome
    # is too lenient, so take the best outcome any occurrence achieved
    agents: dict[tuple[str, str], list[int]] = defaultdict(list)
    for occ_id, expected in truth.items():
        agents[(role_of[occ_id].value, expected.value)].append(occ_id)
    order = [MatchOutcome.FULL, MatchOutcome.PARTIAL, MatchOutcome.INCORRECT, MatchOutcome.NONE]
    agent_outcome: dict[int, MatchOutcome] = {}
    by_role_agent: dict[str, list[int]] = {r.value: [] for r in (Role.BUYER, Role.WINNER)}
    for (role_value, _), ids in sorted(agents.items()):
        best = min((outcomes[i] for i in ids), key=order.index)
        representative = min(ids)
        agent_outcome[representative] = best
        by_role_agent[role_value].append(representative)

    clustering = Clustering.from_clusters(merged.clusters)
    truth_groups: dict[str, list[int]] = defaultdict(list)
    for occ_id, expected in truth.items():
        truth_groups[expected.value].append(occ_id)
    concentration = [
        concentration_ratio(ids, clustering) for ids in truth_groups.values()
    ]
    singleton = [singleton_ratio(ids, clustering) for ids in truth_groups.values()]

    return MaskReport(
        truth_size=len(truth),
        outcomes=outcomes,
        stage_rows=stage_accounting(snapshots, truth),
        outcome_by_role_occurrences=_outcome_distribution(outcomes, by_role_occ),
        outcome_by_role_agents=_outcome_distribution(agent_outcome, by_role_agent),
        concentration=sorted(c for c in concentration if c is not None),
        singleton=sorted(s for s in singleton if s is not None),
    )


@dataclass
class EvaluationReport:
    cluster_sizes: list[tuple[str, int, float]]
    cluster_identifiers: list[tuple[str, int, float]]
    coverage: tuple[float | None, float | None]
    mask: MaskReport | None = None

    def render_text(self) -> str:
        lines = ["EVALUATION REPORT", ""]
        lines.append("Cluster size distribution")
        lines.append(f"  {'size':>6} {'clusters':>10} {'share':>8}")
        for label, n, pct in self.cluster_sizes:
            lines.append(f"  {label:>6} {n:>10} {pct:>7.2f}%")
        lines.append("")
        lines.append("Distinct identifiers per cluster")
        lines.append(f"  {'ids':>6} {'clusters':>10} {'share':>8}")
        for label, n, pct in self.cluster_identifiers:
            lines.append(f"  {label:>6} {n:>10} {pct:>7.2f}%")
        lines.append("")
        unmatched_contracts, unmatched_awards = self.coverage
        lines.append("Notice coverage")
        if unmatched_contracts is None:
            lines.append("  no contract notice ids supplied")
        else:
            lines.append(f"  unmatched contract notices: {unmatched_contracts:.2f}%")
            lines.append(f"  unmatched award notices:    {unmatched_awards:.2f}%")
        if self.mask is not None:
            lines.append("")
            lines.append(f"Masked re-identification ({self.mask.truth_size} known identifiers)")
            for base, table in (
                ("occurrences", self.mask.outcome_by_role_occurrences),
                ("agents", self.mask.outcome_by_role_agents),
            ):
                lines.append(f"  outcome shares by role, per {base}:")
                for role, dist in sorted(table.items()):
                    cells = "  ".join(
                        f"{outcome}={dist[outcome]:.2f}%" for outcome in
                        ("FULL", "PARTIAL", "INCORRECT", "NONE")
                    )
                    lines.append(f"    {role:<8} {cells}")
            lines.append("  stage accounting (strict | entity-level):")
            lines.append(
                f"    {'stage':<16} {'total':>6} {'correct':>16} {'incorrect':>16} {'missing':>8}"
            )
            for row in self.mask.stage_rows:
                correct = f"{row.correct_strict:>7} |{row.correct_entity:>7}"
                incorrect = f"{row.incorrect_strict:>7} |{row.incorrect_entity:>7}"
                lines.append(
                    f"    {row.stage:<16} {row.total:>6} {correct} {incorrect} {row.missing:>8}"
                )
            if self.mask.concentration:
                mean_c = sum(self.mask.concentration) / len(self.mask.concentration)
                mean_s = sum(self.mask.singleton) / len(self.mask.singleton)
                lines.append(f"  mean concentration ratio: {mean_c:.4f}")
                lines.append(f"  mean singleton ratio:     {mean_s:.4f}")
        return "\n".join(lines) + "\n"


def write_report_files(report: EvaluationReport, directory: str, delimiter: str = ",") -> None:
    """Machine-readable companions to the text report."""
    from pathlib import Path

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cluster_sizes.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["bin", "clusters", "share"])
        for label, n, pct in report.cluster_sizes:
            writer.writerow([label, n, f"{pct:.2f}"])
    with open(out / "cluster_identifiers.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["bin", "clusters", "share"])
        for label, n, pct in report.cluster_identifiers:
            writer.writerow([label, n, f"{pct:.2f}"])
    if report.mask is not None:
        with open(out / "stage_accounting.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            writer.writerow(
                [
                    "stage", "total", "correctStrict", "incorrectStrict",
                    "correctEntity", "incorrectEntity", "missing",
                ]
            )
            for row in report.mask.stage_rows:
                writer.writerow(
                    [
                        row.stage, row.total, row.correct_strict, row.incorrect_strict,
                        row.correct_entity, row.incorrect_entity, row.missing,
                    ]
                )
        with open(out / "mask_outcomes.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
            writer.writerow(["occurrenceId", "outcome"])
            for occ_id in sorted(report.mask.outcomes):
                writer.writerow([occ_id, report.mask.outcomes[occ_id].value])
