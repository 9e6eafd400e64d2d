"""Stage orchestration over resumable delimiter-separated checkpoints.

Every stage reads the previous stage's checkpoint files from disk and
writes its own under <out>/checkpoints/<stage>/, so running `pipeline` is
the same computation as running the stages one by one, and any stage can
be rerun in isolation. Checkpoint serialization is lossless: absent values
are empty cells, and no pipeline value is an empty string.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from decimal import Decimal
from pathlib import Path

from . import emit as emit_mod
from . import evaluate as evaluate_mod
from .config import PipelineConfig
from .criteria import repair_criteria
from .identify import MatchResult, identify_all, write_match_log
from .ingest import run_ingest
from .merge import MergeResult, merge_all, write_merge_log
from .models import (
    AgentCluster,
    AgentOccurrence,
    CanonicalAgent,
    CaseKind,
    ConfigError,
    ContractType,
    CriteriaRaw,
    Criterion,
    CriterionClass,
    Identifier,
    IdentifierKind,
    InputError,
    InvariantError,
    LotRecord,
    Role,
)
from .normalize import (
    PostalTable,
    load_postal_table,
    merge_by_declared_siret,
    normalize_occurrence,
)
from .registry import Registry, load_registry

log = logging.getLogger(__name__)

STAGE_ORDER = ("ingest", "criteria", "normalize", "identify", "merge", "emit", "evaluate")


class Checkpoints:
    """Path bookkeeping for stage checkpoint files."""

    def __init__(self, output_dir: str) -> None:
        self.root = Path(output_dir) / "checkpoints"

    def stage_dir(self, stage: str) -> Path:
        path = self.root / stage
        path.mkdir(parents=True, exist_ok=True)
        return path

    def path(self, stage: str, name: str) -> Path:
        return self.root / stage / name

    def require(self, stage: str, *names: str) -> None:
        missing = [str(self.path(stage, n)) for n in names if not self.path(stage, n).exists()]
        if missing:
            raise ConfigError(
                f"stage depends on the '{stage}' checkpoint; missing: {', '.join(missing)}"
            )


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_table(path: Path) -> list[dict[str, str]]:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc


def _opt(value: str) -> str | None:
    return value if value else None


def _date(value: str) -> dt.date | None:
    return dt.date.fromisoformat(value) if value else None


# ---------------------------------------------------------------- lots

_LOT_HEADER = [
    "lotId", "noticeId", "lotNumber", "publicationDate", "awardDate",
    "contractType", "activityCode", "numberOffers", "awardedValue",
    "currency", "cancelled", "contractNoticeRef", "sourceFile", "sourceLine",
]


def _lot_to_row(lot: LotRecord) -> list:
    return [
        lot.lot_id, lot.notice_id, lot.lot_number,
        lot.publication_date.isoformat(),
        lot.award_date.isoformat() if lot.award_date else "",
        lot.contract_type.value if lot.contract_type else "",
        lot.activity_code or "",
        "" if lot.number_of_offers is None else lot.number_of_offers,
        "" if lot.awarded_value is None else str(lot.awarded_value),
        lot.currency or "",
        1 if lot.cancelled else 0,
        lot.contract_notice_ref or "",
        lot.source_file, lot.source_line,
    ]


def _lot_from_row(row: dict[str, str]) -> LotRecord:
    return LotRecord(
        lot_id=int(row["lotId"]),
        notice_id=row["noticeId"],
        lot_number=row["lotNumber"],
        publication_date=dt.date.fromisoformat(row["publicationDate"]),
        award_date=_date(row["awardDate"]),
        contract_type=ContractType(row["contractType"]) if row["contractType"] else None,
        activity_code=_opt(row["activityCode"]),
        number_of_offers=int(row["numberOffers"]) if row["numberOffers"] else None,
        awarded_value=Decimal(row["awardedValue"]) if row["awardedValue"] else None,
        currency=_opt(row["currency"]),
        cancelled=row["cancelled"] == "1",
        contract_notice_ref=_opt(row["contractNoticeRef"]),
        source_file=row["sourceFile"],
        source_line=int(row["sourceLine"]),
    )


# ---------------------------------------------------------------- occurrences

_OCC_HEADER = [
    "occurrenceId", "lotId", "role", "rawName", "street", "zipcode", "city",
    "country", "declaredSiret", "normalizedName", "department",
    "identifierKind", "identifierValue", "identifierSource", "splitConflict",
]


def _occ_to_row(occ: AgentOccurrence) -> list:
    return [
        occ.occurrence_id, occ.lot_id, occ.role.value, occ.raw_name,
        occ.street or "", occ.zipcode or "", occ.city or "", occ.country or "",
        occ.declared_siret or "", occ.normalized_name or "", occ.department or "",
        occ.identifier.kind.value if occ.identifier else "",
        occ.identifier.value if occ.identifier else "",
        occ.identifier_source or "",
        1 if occ.split_conflict else 0,
    ]


def _occ_from_row(row: dict[str, str]) -> AgentOccurrence:
    identifier = None
    if row["identifierKind"]:
        identifier = Identifier(IdentifierKind(row["identifierKind"]), row["identifierValue"])
    return AgentOccurrence(
        occurrence_id=int(row["occurrenceId"]),
        lot_id=int(row["lotId"]),
        role=Role(row["role"]),
        raw_name=row["rawName"],
        street=_opt(row["street"]),
        zipcode=_opt(row["zipcode"]),
        city=_opt(row["city"]),
        country=_opt(row["country"]),
        declared_siret=_opt(row["declaredSiret"]),
        normalized_name=_opt(row["normalizedName"]),
        department=_opt(row["department"]),
        identifier=identifier,
        identifier_source=_opt(row["identifierSource"]),
        split_conflict=row["splitConflict"] == "1",
    )


# ---------------------------------------------------------------- criteria

_CRITERIA_RAW_HEADER = ["lotId", "namesField", "weightsField", "priceField"]
_CRITERION_HEADER = ["lotId", "rawName", "class", "weight", "weightIsNormalized"]


def _criterion_to_row(c: Criterion) -> list:
    return [
        c.lot_id, c.raw_name, c.criterion_class.value,
        "" if c.weight is None else str(c.weight),
        1 if c.weight_is_normalized else 0,
    ]


def _criterion_from_row(row: dict[str, str]) -> Criterion:
    return Criterion(
        lot_id=int(row["lotId"]),
        raw_name=row["rawName"],
        criterion_class=CriterionClass(row["class"]),
        weight=Decimal(row["weight"]) if row["weight"] else None,
        weight_is_normalized=row["weightIsNormalized"] == "1",
    )


# ---------------------------------------------------------------- clusters / agents

_CLUSTER_HEADER = ["clusterId", "memberIds", "caseKind", "identifierKind", "identifierValue"]
_AGENT_HEADER = [
    "identifierKind", "identifierValue", "street", "zipcode", "city",
    "department", "country", "caseKinds", "memberIds",
]


def _cluster_to_row(c: AgentCluster) -> list:
    return [
        c.cluster_id,
        " ".join(str(i) for i in c.member_occurrence_ids),
        c.case_kind.value,
        c.resolved_identifier.kind.value,
        c.resolved_identifier.value,
    ]


def _cluster_from_row(row: dict[str, str]) -> AgentCluster:
    return AgentCluster(
        cluster_id=int(row["clusterId"]),
        member_occurrence_ids=[int(i) for i in row["memberIds"].split()],
        case_kind=CaseKind(row["caseKind"]),
        resolved_identifier=Identifier(
            IdentifierKind(row["identifierKind"]), row["identifierValue"]
        ),
    )


def _agent_to_row(a: CanonicalAgent) -> list:
    return [
        a.agent_id.kind.value, a.agent_id.value,
        a.street or "", a.zipcode or "", a.city or "",
        a.department or "", a.country or "",
        "+".join(k.value for k in a.case_kinds),
        " ".join(str(i) for i in a.member_occurrence_ids),
    ]


def _agent_from_row(row: dict[str, str], names: list[str]) -> CanonicalAgent:
    return CanonicalAgent(
        agent_id=Identifier(IdentifierKind(row["identifierKind"]), row["identifierValue"]),
        names=names,
        street=_opt(row["street"]),
        zipcode=_opt(row["zipcode"]),
        city=_opt(row["city"]),
        department=_opt(row["department"]),
        country=_opt(row["country"]),
        case_kinds=[CaseKind(k) for k in row["caseKinds"].split("+") if k],
        member_occurrence_ids=[int(i) for i in row["memberIds"].split()],
    )


# ---------------------------------------------------------------- stage runners


def _load_lots(checkpoints: Checkpoints) -> list[LotRecord]:
    checkpoints.require("ingest", "lots.csv")
    return [_lot_from_row(r) for r in _read_table(checkpoints.path("ingest", "lots.csv"))]


def _load_occurrences(checkpoints: Checkpoints, stage: str) -> list[AgentOccurrence]:
    checkpoints.require(stage, "occurrences.csv")
    return [
        _occ_from_row(r)
        for r in _read_table(checkpoints.path(stage, "occurrences.csv"))
    ]


def _load_registry_from_config(config: PipelineConfig) -> Registry:
    if not config.registry_entity_file or not config.registry_facility_file:
        raise ConfigError(
            "identification requires registry_entities and registry_facilities inputs"
        )
    return load_registry(
        config.registry_entity_file,
        config.registry_facility_file,
        config.registry_entity_map,
        config.registry_facility_map,
        delimiter=config.delimiter,
        date_formats=config.date_formats,
        activity_prefix_length=config.match.activity_prefix_length,
    )


def stage_ingest(config: PipelineConfig) -> None:
    checkpoints = Checkpoints(config.output_dir)
    result = run_ingest(config)
    out = checkpoints.stage_dir("ingest")
    _write_table(out / "lots.csv", _LOT_HEADER, [_lot_to_row(l) for l in result.lots])
    _write_table(
        out / "occurrences.csv", _OCC_HEADER, [_occ_to_row(o) for o in result.occurrences]
    )
    _write_table(
        out / "criteria_raw.csv",
        _CRITERIA_RAW_HEADER,
        [[c.lot_id, c.names_field, c.weights_field, c.price_field] for c in result.criteria_raw],
    )
    _write_table(
        out / "rejections.csv",
        ["sourceFile", "sourceLine", "reason"],
        [[r.source_file, r.source_line, r.reason] for r in result.rejections],
    )
    stats = {
        "lots": len(result.lots),
        "occurrences": len(result.occurrences),
        "rejections": len(result.rejections),
        "skipped_lines": result.skipped_lines,
        "duplicate_identities": result.duplicate_identities,
        "descriptions_before_split": result.descriptions_before_split,
    }
    (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n", encoding="utf-8")
    log.info("ingest: %(lots)d lots, %(occurrences)d occurrences", stats)


def stage_criteria(config: PipelineConfig) -> None:
    checkpoints = Checkpoints(config.output_dir)
    checkpoints.require("ingest", "criteria_raw.csv")
    raw = [
        CriteriaRaw(
            lot_id=int(r["lotId"]),
            names_field=r["namesField"],
            weights_field=r["weightsField"],
            price_field=r["priceField"],
        )
        for r in _read_table(checkpoints.path("ingest", "criteria_raw.csv"))
    ]
    result = repair_criteria(raw, config)
    out = checkpoints.stage_dir("criteria")
    _write_table(
        out / "criteria.csv", _CRITERION_HEADER, [_criterion_to_row(c) for c in result.criteria]
    )
    flags = {
        "misaligned_lots": sorted(result.misaligned_lots),
        "conflict_lots": sorted(result.conflict_lots),
        "unnormalized_lots": sorted(result.unnormalized_lots),
    }
    (out / "flags.json").write_text(json.dumps(flags, indent=2) + "\n", encoding="utf-8")
    log.info("criteria: %d rows repaired", len(result.criteria))


def _load_postal(config: PipelineConfig) -> PostalTable | None:
    if not config.postal_file:
        return None
    return load_postal_table(config.postal_file, config.delimiter)


def stage_normalize(config: PipelineConfig) -> None:
    checkpoints = Checkpoints(config.output_dir)
    occurrences = _load_occurrences(checkpoints, "ingest")
    postal = _load_postal(config)
    for occ in occurrences:
        normalize_occurrence(occ, postal, config.postal_tokens)
    merge_by_declared_siret(occurrences)
    out = checkpoints.stage_dir("normalize")
    _write_table(out / "occurrences.csv", _OCC_HEADER, [_occ_to_row(o) for o in occurrences])
    log.info("normalize: %d occurrences", len(occurrences))


def _identify_chunk(args: tuple) -> list[MatchResult]:
    occurrences, lots, registry, config = args
    return identify_all(occurrences, lots, registry, config)


def _apply_match_results(
    occurrences: list[AgentOccurrence], results: list[MatchResult]
) -> None:
    by_id = {occ.occurrence_id: occ for occ in occurrences}
    for result in results:
        if result.source == "matched":
            occ = by_id[result.occurrence_id]
            occ.identifier = result.identifier
            occ.identifier_source = "matched"


def stage_identify(config: PipelineConfig) -> None:
    checkpoints = Checkpoints(config.output_dir)
    occurrences = _load_occurrences(checkpoints, "normalize")
    lots = _load_lots(checkpoints)
    registry = _load_registry_from_config(config)

    if config.jobs <= 1 or len(occurrences) < 2 * config.jobs:
        results = identify_all(occurrences, lots, registry, config)
    else:
        # fixed-size chunks in occurrence order; collection re-sorts, so
        # the schedule cannot change the output
        ordered = sorted(occurrences, key=lambda o: o.occurrence_id)
        step = (len(ordered) + config.jobs - 1) // config.jobs
        chunks = [ordered[i : i + step] for i in range(0, len(ordered), step)]
        lots_by_id = {lot.lot_id: lot for lot in lots}
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            parts = pool.map(
                _identify_chunk,
                [
                    (
                        chunk,
                        [lots_by_id[i] for i in sorted({o.lot_id for o in chunk})],
                        registry,
                        config,
                    )
                    for chunk in chunks
                ],
            )
        results = sorted(
            (r for part in parts for r in part), key=lambda r: r.occurrence_id
        )
        _apply_match_results(occurrences, results)

    out = checkpoints.stage_dir("identify")
    _write_table(out / "occurrences.csv", _OCC_HEADER, [_occ_to_row(o) for o in occurrences])
    write_match_log(results, str(out / "match_log.csv"), config.delimiter)
    matched = sum(1 for r in results if r.source == "matched")
    log.info("identify: %d matched of %d", matched, len(results))


def stage_merge(config: PipelineConfig) -> None:
    checkpoints = Checkpoints(config.output_dir)
    occurrences = _load_occurrences(checkpoints, "identify")
    result: MergeResult = merge_all(occurrences, config)
    out = checkpoints.stage_dir("merge")
    _write_table(out / "occurrences.csv", _OCC_HEADER, [_occ_to_row(o) for o in occurrences])
    _write_table(out / "clusters.csv", _CLUSTER_HEADER, [_cluster_to_row(c) for c in result.clusters])
    _write_table(out / "agents.csv", _AGENT_HEADER, [_agent_to_row(a) for a in result.agents])
    _write_table(
        out / "agent_names.csv",
        ["identifierKind", "identifierValue", "name"],
        [[a.agent_id.kind.value, a.agent_id.value, n] for a in result.agents for n in a.names],
    )
    write_merge_log(result.clusters, str(out / "merge_log.csv"), config.delimiter)
    log.info("merge: %d clusters, %d agents", len(result.clusters), len(result.agents))


def _load_merge_outputs(
    checkpoints: Checkpoints,
) -> tuple[list[AgentOccurrence], list[AgentCluster], list[CanonicalAgent]]:
    checkpoints.require("merge", "occurrences.csv", "clusters.csv", "agents.csv", "agent_names.csv")
    occurrences = _load_occurrences(checkpoints, "merge")
    clusters = [
        _cluster_from_row(r) for r in _read_table(checkpoints.path("merge", "clusters.csv"))
    ]
    names: dict[tuple[str, str], list[str]] = {}
    for row in _read_table(checkpoints.path("merge", "agent_names.csv")):
        names.setdefault((row["identifierKind"], row["identifierValue"]), []).append(row["name"])
    agents = [
        _agent_from_row(r, names.get((r["identifierKind"], r["identifierValue"]), []))
        for r in _read_table(checkpoints.path("merge", "agents.csv"))
    ]
    return occurrences, clusters, agents


def stage_emit(config: PipelineConfig) -> None:
    checkpoints = Checkpoints(config.output_dir)
    lots = _load_lots(checkpoints)
    checkpoints.require("criteria", "criteria.csv")
    criteria = [
        _criterion_from_row(r)
        for r in _read_table(checkpoints.path("criteria", "criteria.csv"))
    ]
    occurrences, _, agents = _load_merge_outputs(checkpoints)
    occurrence_to_agent = {
        occ.occurrence_id: occ.identifier for occ in occurrences if occ.identifier
    }
    schema = emit_mod.build_tables(lots, agents, occurrences, occurrence_to_agent, criteria)
    emit_mod.write_csv(schema, config.output_dir)
    emit_mod.write_sql_dump(schema, str(Path(config.output_dir) / "foppa.sql"))
    problems = emit_mod.verify_roundtrip(schema, config.output_dir)
    if problems:
        raise InvariantError("emitted files failed read-back:\n" + "\n".join(problems))
    log.info("emit: tables written to %s", config.output_dir)


def _load_contract_ids(config: PipelineConfig) -> set[str]:
    if not config.contract_notice_file:
        return set()
    with open(config.contract_notice_file, encoding="utf-8") as fh:
        return {line.strip() for line in fh if line.strip()}


def stage_evaluate(config: PipelineConfig, mask: bool = False) -> evaluate_mod.EvaluationReport:
    checkpoints = Checkpoints(config.output_dir)
    lots = _load_lots(checkpoints)
    _, clusters, _ = _load_merge_outputs(checkpoints)
    identified = _load_occurrences(checkpoints, "identify")
    pre_merge = {occ.occurrence_id: occ.identifier for occ in identified}
    sizes, idents = evaluate_mod.distribution_tables(clusters, pre_merge)
    coverage = evaluate_mod.notice_coverage(_load_contract_ids(config), lots)

    mask_report = None
    if mask:
        raw_occurrences = _load_occurrences(checkpoints, "ingest")
        if config.ground_truth_file:
            truth = evaluate_mod.load_ground_truth(config.ground_truth_file, config.delimiter)
        else:
            truth = evaluate_mod.truth_from_declared(raw_occurrences)
        if not truth:
            raise InputError("masked evaluation needs known identifiers and found none")
        registry = _load_registry_from_config(config)
        postal = _load_postal(config)
        mask_report = evaluate_mod.mask_and_rerun(
            raw_occurrences, lots, registry, postal, config, truth
        )

    report = evaluate_mod.EvaluationReport(
        cluster_sizes=sizes,
        cluster_identifiers=idents,
        coverage=coverage,
        mask=mask_report,
    )
    out = checkpoints.stage_dir("evaluate")
    (out / "report.txt").write_text(report.render_text(), encoding="utf-8")
    evaluate_mod.write_report_files(report, str(out), config.delimiter)
    log.info("evaluate: report written to %s", out)
    return report


def run_stage(stage: str, config: PipelineConfig, mask: bool = False) -> None:
    runners = {
        "ingest": stage_ingest,
        "criteria": stage_criteria,
        "normalize": stage_normalize,
        "identify": stage_identify,
        "merge": stage_merge,
        "emit": stage_emit,
    }
    if stage == "evaluate":
        stage_evaluate(config, mask=mask)
    elif stage in runners:
        runners[stage](config)
    else:
        raise ConfigError(f"unknown stage {stage!r}")


def _stage_index(name: str) -> int:
    try:
        return STAGE_ORDER.index(name)
    except ValueError:
        raise ConfigError(
            f"unknown stage {name!r}; stages are {', '.join(STAGE_ORDER)}"
        ) from None


def run_pipeline(
    config: PipelineConfig,
    stage_from: str | None = None,
    stage_to: str | None = None,
    mask: bool = False,
) -> None:
    """Run the stages in order, each through its on-disk checkpoint."""
    start = _stage_index(stage_from) if stage_from else 0
    stop = _stage_index(stage_to) if stage_to else len(STAGE_ORDER) - 1
    if start > stop:
        raise ConfigError(f"--stage-from {stage_from!r} is after --stage-to {stage_to!r}")
    for stage in STAGE_ORDER[start : stop + 1]:
        log.info("stage %s", stage)
        run_stage(stage, config, mask=mask)
