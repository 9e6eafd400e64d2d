"""Materialize the six-table output schema as CSV files and an SQL dump.

Tables: Lots, Agents, Names, LotBuyers, LotSuppliers, Criteria. Rows are
sorted by primary key before writing so two runs on the same input produce
byte-identical files. The SQL dump re-creates the same schema with primary
and foreign keys and reloads into any stock SQL engine.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .models import (
    AgentOccurrence,
    CanonicalAgent,
    Criterion,
    Identifier,
    InvariantError,
    LotRecord,
    Role,
)

log = logging.getLogger(__name__)


@dataclass
class Table:
    name: str
    columns: list[str]
    key: list[str]
    types: list[str]  # SQL type per column
    rows: list[tuple] = field(default_factory=list)
    foreign: list[tuple[str, str, str]] = field(default_factory=list)

    def key_of(self, row: tuple) -> tuple:
        indices = [self.columns.index(k) for k in self.key]
        return tuple(row[i] for i in indices)


@dataclass
class OutputSchema:
    tables: dict[str, Table] = field(default_factory=dict)

    def add(self, table: Table) -> None:
        self.tables[table.name] = table

    def __getitem__(self, name: str) -> Table:
        return self.tables[name]


TABLE_ORDER = ("Lots", "Agents", "Names", "LotBuyers", "LotSuppliers", "Criteria")


def _lot_row(lot: LotRecord) -> tuple:
    return (
        lot.lot_id,
        lot.notice_id,
        lot.lot_number,
        lot.publication_date.isoformat(),
        lot.award_date.isoformat() if lot.award_date else None,
        lot.contract_type.value if lot.contract_type else None,
        lot.activity_code,
        lot.number_of_offers,
        str(lot.awarded_value) if lot.awarded_value is not None else None,
        lot.currency,
        1 if lot.cancelled else 0,
        lot.contract_notice_ref,
    )


def build_tables(
    lots: list[LotRecord],
    agents: list[CanonicalAgent],
    occurrences: list[AgentOccurrence],
    occurrence_to_agent: dict[int, Identifier],
    criteria: list[Criterion],
) -> OutputSchema:
    """Assemble all six tables; any dangling reference is fatal."""
    schema = OutputSchema()

    lots_table = Table(
        name="Lots",
        columns=[
            "lotId", "noticeId", "lotNumber", "publicationDate", "awardDate",
            "contractType", "cpv", "numberOffers", "awardedValue", "currency",
            "cancelled", "contractNoticeRef",
        ],
        key=["lotId"],
        types=[
            "INTEGER", "TEXT", "TEXT", "TEXT", "TEXT", "TEXT", "TEXT",
            "INTEGER", "NUMERIC", "TEXT", "INTEGER", "TEXT",
        ],
        rows=[_lot_row(lot) for lot in sorted(lots, key=lambda l: l.lot_id)],
    )
    schema.add(lots_table)

    agents_table = Table(
        name="Agents",
        columns=[
            "agentId", "idKind", "name", "street", "zipcode", "city",
            "department", "country", "caseKinds",
        ],
        key=["agentId"],
        types=["TEXT"] * 9,
        rows=[
            (
                agent.agent_id.render(),
                agent.agent_id.kind.value,
                agent.names[0] if agent.names else None,
                agent.street,
                agent.zipcode,
                agent.city,
                agent.department,
                agent.country,
                "+".join(sorted({k.value for k in agent.case_kinds})),
            )
            for agent in sorted(agents, key=lambda a: a.agent_id.render())
        ],
    )
    schema.add(agents_table)

    names_rows = sorted(
        {(agent.agent_id.render(), name) for agent in agents for name in agent.names}
    )
    schema.add(
        Table(
            name="Names",
            columns=["agentId", "name"],
            key=["agentId", "name"],
            types=["TEXT", "TEXT"],
            rows=names_rows,
            foreign=[("agentId", "Agents", "agentId")],
        )
    )

    links: dict[Role, dict[tuple[int, str], dict]] = {Role.BUYER: {}, Role.WINNER: {}}
    for occ in occurrences:
        ident = occurrence_to_agent.get(occ.occurrence_id)
        if ident is None:
            raise InvariantError(
                f"occurrence {occ.occurrence_id} has no agent assignment"
            )
        key = (occ.lot_id, ident.render())
        entry = links[occ.role].setdefault(key, {"sources": set(), "conflict": False})
        entry["sources"].add(occ.identifier_source or "none")
        entry["conflict"] = entry["conflict"] or occ.split_conflict

    for role, table_name in ((Role.BUYER, "LotBuyers"), (Role.WINNER, "LotSuppliers")):
        rows = [
            (
                lot_id,
                agent_id,
                "+".join(sorted(entry["sources"])),
                1 if entry["conflict"] else 0,
            )
            for (lot_id, agent_id), entry in sorted(links[role].items())
        ]
        schema.add(
            Table(
                name=table_name,
                columns=["lotId", "agentId", "identifierSources", "splitConflict"],
                key=["lotId", "agentId"],
                types=["INTEGER", "TEXT", "TEXT", "INTEGER"],
                rows=rows,
                foreign=[
                    ("lotId", "Lots", "lotId"),
                    ("agentId", "Agents", "agentId"),
                ],
            )
        )

    criteria_rows = []
    ordinals: dict[int, int] = {}
    for criterion in criteria:
        ordinal = ordinals.get(criterion.lot_id, 0) + 1
        ordinals[criterion.lot_id] = ordinal
        criteria_rows.append(
            (
                criterion.lot_id,
                ordinal,
                criterion.raw_name,
                criterion.criterion_class.value,
                str(criterion.weight) if criterion.weight is not None else None,
                1 if criterion.weight_is_normalized else 0,
            )
        )
    criteria_rows.sort(key=lambda r: (r[0], r[1]))
    schema.add(
        Table(
            name="Criteria",
            columns=["lotId", "ordinal", "rawName", "class", "weight", "weightIsNormalized"],
            key=["lotId", "ordinal"],
            types=["INTEGER", "INTEGER", "TEXT", "TEXT", "NUMERIC", "INTEGER"],
            rows=criteria_rows,
            foreign=[("lotId", "Lots", "lotId")],
        )
    )

    violations = verify_integrity(schema)
    if violations:
        raise InvariantError("output integrity violated:\n" + "\n".join(violations))
    return schema


def verify_integrity(schema: OutputSchema) -> list[str]:
    """Primary-key uniqueness and referential containment across tables."""
    problems: list[str] = []
    keys: dict[str, set] = {}
    for table in schema.tables.values():
        seen = set()
        for row in table.rows:
            k = table.key_of(row)
            if k in seen:
                problems.append(f"{table.name}: duplicate primary key {k}")
            seen.add(k)
        keys[table.name] = seen

    for table in schema.tables.values():
        for column, ref_table, ref_column in table.foreign:
            ref = schema.tables.get(ref_table)
            if ref is None:
                problems.append(f"{table.name}: reference to unknown table {ref_table}")
                continue
            ref_index = ref.columns.index(ref_column)
            known = {row[ref_index] for row in ref.rows}
            col_index = table.columns.index(column)
            dangling = sorted(
                {row[col_index] for row in table.rows} - known, key=str
            )
            if dangling:
                shown = ", ".join(str(d) for d in dangling[:5])
                problems.append(
                    f"{table.name}.{column}: {len(dangling)} dangling value(s): {shown}"
                )
    return problems


def render_value(value) -> str:
    if value is None:
        return ""
    return str(value)


def render_rows(table: Table) -> list[list[str]]:
    return [[render_value(v) for v in row] for row in table.rows]


def write_csv(schema: OutputSchema, directory: str) -> list[str]:
    """One file per table, header row, rows already primary-key sorted."""
    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in TABLE_ORDER:
        table = schema.tables[name]
        path = out_dir / f"{name}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(table.columns)
            writer.writerows(render_rows(table))
        written.append(str(path))
    return written


def _sql_literal(value) -> str:
    if value is None:
        return "NULL"
    if isinstance(value, int):
        return str(value)
    text = str(value)
    return "'" + text.replace("'", "''") + "'"


def write_sql_dump(schema: OutputSchema, path: str) -> None:
    """Schema plus inserts, reloadable into a stock SQL engine."""
    lines = ["BEGIN TRANSACTION;"]
    for name in TABLE_ORDER:
        table = schema.tables[name]
        column_defs = [
            f"  {col} {typ}" for col, typ in zip(table.columns, table.types)
        ]
        column_defs.append(f"  PRIMARY KEY ({', '.join(table.key)})")
        for column, ref_table, ref_column in table.foreign:
            column_defs.append(
                f"  FOREIGN KEY ({column}) REFERENCES {ref_table}({ref_column})"
            )
        lines.append(f"CREATE TABLE {name} (")
        lines.append(",\n".join(column_defs))
        lines.append(");")
    for name in TABLE_ORDER:
        table = schema.tables[name]
        for row in table.rows:
            values = ", ".join(_sql_literal(v) for v in row)
            lines.append(f"INSERT INTO {name} VALUES ({values});")
    lines.append("COMMIT;")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def verify_roundtrip(schema: OutputSchema, directory: str) -> list[str]:
    """Re-read the emitted CSVs and compare cell-for-cell with memory."""
    problems = []
    for name in TABLE_ORDER:
        table = schema.tables[name]
        path = Path(directory) / f"{name}.csv"
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [list(r) for r in reader]
        if header != table.columns:
            problems.append(f"{name}: header mismatch after round-trip")
        if rows != render_rows(table):
            problems.append(f"{name}: rows differ after round-trip")
    return problems
