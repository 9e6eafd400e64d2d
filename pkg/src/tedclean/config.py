"""Pipeline configuration: defaults, file loading, validation.

Config files are JSON. Anything not overridden falls back to the defaults
below, so a minimal config only names its input files and output directory.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .models import ConfigError, CriterionClass

# Header names of the award-notice table, semantic field -> source column.
# TED-2010+ style names; real corpora override this in the config file.
DEFAULT_COLUMN_MAP: dict[str, str] = {
    "notice_id": "ID_NOTICE_CAN",
    "lot_number": "ID_LOT",
    "publication_date": "DT_DISPATCH",
    "award_date": "DT_AWARD",
    "contract_type": "TYPE_OF_CONTRACT",
    "activity_code": "CPV",
    "number_of_offers": "NUMBER_OFFERS",
    "awarded_value": "AWARD_VALUE_EURO",
    "currency": "CURRENCY",
    "cancelled": "CANCELLED",
    "contract_notice_ref": "ID_NOTICE_CN",
    "buyer_name": "CAE_NAME",
    "buyer_street": "CAE_ADDRESS",
    "buyer_zipcode": "CAE_POSTAL_CODE",
    "buyer_city": "CAE_TOWN",
    "buyer_country": "CAE_COUNTRY",
    "buyer_siret": "CAE_NATIONALID",
    "winner_name": "WIN_NAME",
    "winner_street": "WIN_ADDRESS",
    "winner_zipcode": "WIN_POSTAL_CODE",
    "winner_city": "WIN_TOWN",
    "winner_country": "WIN_COUNTRY",
    "winner_siret": "WIN_NATIONALID",
    "criteria_names": "CRIT_CRITERIA",
    "criteria_weights": "CRIT_WEIGHTS",
    "price_weight": "CRIT_PRICE_WEIGHT",
}

# Semantic fields that must exist in the header (cells may still be empty).
MANDATORY_FIELDS = (
    "notice_id",
    "lot_number",
    "publication_date",
    "buyer_name",
    "winner_name",
)

DEFAULT_REGISTRY_ENTITY_MAP: dict[str, str] = {
    "siren": "SIREN",
    "legal_name": "LEGAL_NAME",
    "former_names": "FORMER_NAMES",
    "creation_date": "CREATED",
    "closure_date": "CLOSED",
    "activity_code": "ACTIVITY",
}

DEFAULT_REGISTRY_FACILITY_MAP: dict[str, str] = {
    "siret": "SIRET",
    "names": "NAMES",
    "street": "STREET",
    "zipcode": "POSTAL_CODE",
    "city": "CITY",
    "activity_code": "ACTIVITY",
    "open_date": "OPENED",
    "close_date": "CLOSED",
}

# Separator strings seen in joint agent / criterion fields. A separator made
# of one repeated character also matches longer runs of that character.
DEFAULT_SEPARATORS = ["---", "///", " // ", " / ", ";"]

# Tokens that mark postal (not geographic) address parts; stripped together
# with any digits that follow them.
DEFAULT_POSTAL_TOKENS = ["BP", "CS", "CEDEX", "TSA"]

# Winner-name values that mean the award failed, after name normalization.
DEFAULT_UNSUCCESSFUL_MARKERS = [
    "INFRUCTUEUX",
    "INFRUCTEUX",
    "SANS SUITE",
    "ANNULE",
    "LOT INFRUCTUEUX",
]

# Keyword stem (folded) -> criterion class. Stems match as substrings of the
# folded criterion name; class priority is fixed in criteria.classify_criterion.
DEFAULT_CRITERION_LEXICON: dict[str, CriterionClass] = {
    "PRIX": CriterionClass.PRICE,
    "COUT": CriterionClass.PRICE,
    "TARIF": CriterionClass.PRICE,
    "MONTANT": CriterionClass.PRICE,
    "FINANCI": CriterionClass.PRICE,
    "PRICE": CriterionClass.PRICE,
    "DELAI": CriterionClass.DEADLINE,
    "DUREE": CriterionClass.DEADLINE,
    "CALENDRIER": CriterionClass.DEADLINE,
    "PLANNING": CriterionClass.DEADLINE,
    "RAPIDITE": CriterionClass.DEADLINE,
    "ENVIRONNEMENT": CriterionClass.ENVIRONMENTAL,
    "ECOLOG": CriterionClass.ENVIRONMENTAL,
    "DURABLE": CriterionClass.ENVIRONMENTAL,
    "DECHET": CriterionClass.ENVIRONMENTAL,
    "CARBONE": CriterionClass.ENVIRONMENTAL,
    "SOCIAL": CriterionClass.SOCIAL,
    "INSERTION": CriterionClass.SOCIAL,
    "EMPLOI": CriterionClass.SOCIAL,
    "HANDICAP": CriterionClass.SOCIAL,
    "SOLIDAIRE": CriterionClass.SOCIAL,
    "ETHIQUE": CriterionClass.SOCIAL,
    "TECHNIQUE": CriterionClass.TECHNICAL,
    "TECHNIC": CriterionClass.TECHNICAL,
    "QUALITE": CriterionClass.TECHNICAL,
    "METHODOLOG": CriterionClass.TECHNICAL,
    "MOYENS": CriterionClass.TECHNICAL,
    "COMPETENCE": CriterionClass.TECHNICAL,
    "EXPERIENCE": CriterionClass.TECHNICAL,
    "FONCTIONNEL": CriterionClass.TECHNICAL,
    "PERFORMANCE": CriterionClass.TECHNICAL,
    "ORGANISATION": CriterionClass.TECHNICAL,
    "MAINTENANCE": CriterionClass.TECHNICAL,
    "GARANTIE": CriterionClass.TECHNICAL,
    "SECURITE": CriterionClass.TECHNICAL,
    "INNOVATION": CriterionClass.TECHNICAL,
    "ESTHETIQUE": CriterionClass.TECHNICAL,
}

DEFAULT_CONTRACT_TYPE_VALUES: dict[str, str] = {
    "SUPPLIES": "goods",
    "FOURNITURES": "goods",
    "GOODS": "goods",
    "SERVICES": "services",
    "WORKS": "works",
    "TRAVAUX": "works",
}

DEFAULT_DATE_FORMATS = ["%Y-%m-%d", "%d/%m/%Y"]

DEFAULT_PERIOD = ("2010-01-01", "2020-12-31")


@dataclass(frozen=True)
class MatchConfig:
    """Thresholds and weights of the identification pipeline."""

    name_threshold: float = 0.80
    street_weight: float = 0.40
    zipcode_weight: float = 0.35
    city_weight: float = 0.25
    min_address_score: float = 0.30
    activity_prefix_length: int = 2
    allow_unblocked: bool = False

    def validate(self) -> list[str]:
        errors = []
        for name in ("name_threshold", "min_address_score"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                errors.append(f"match.{name} must be in [0, 1], got {v}")
        total = self.street_weight + self.zipcode_weight + self.city_weight
        if abs(total - 1.0) > 1e-9:
            errors.append(f"match address weights must sum to 1.0, got {total}")
        if self.activity_prefix_length < 1:
            errors.append("match.activity_prefix_length must be >= 1")
        return errors


@dataclass
class PipelineConfig:
    lot_files: list[str] = field(default_factory=list)
    registry_entity_file: str | None = None
    registry_facility_file: str | None = None
    postal_file: str | None = None
    contract_notice_file: str | None = None
    ground_truth_file: str | None = None
    output_dir: str = "out"
    delimiter: str = ","
    column_map: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_COLUMN_MAP))
    registry_entity_map: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_REGISTRY_ENTITY_MAP)
    )
    registry_facility_map: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_REGISTRY_FACILITY_MAP)
    )
    separators: list[str] = field(default_factory=lambda: list(DEFAULT_SEPARATORS))
    postal_tokens: list[str] = field(default_factory=lambda: list(DEFAULT_POSTAL_TOKENS))
    unsuccessful_markers: list[str] = field(
        default_factory=lambda: list(DEFAULT_UNSUCCESSFUL_MARKERS)
    )
    criterion_lexicon: dict[str, CriterionClass] = field(
        default_factory=lambda: dict(DEFAULT_CRITERION_LEXICON)
    )
    contract_type_values: dict[str, str] = field(
        default_factory=lambda: dict(DEFAULT_CONTRACT_TYPE_VALUES)
    )
    date_formats: list[str] = field(default_factory=lambda: list(DEFAULT_DATE_FORMATS))
    period_start: str = DEFAULT_PERIOD[0]
    period_end: str = DEFAULT_PERIOD[1]
    match: MatchConfig = field(default_factory=MatchConfig)
    merge_threshold: float = 0.85
    # CPV prefix -> acceptable registry activity prefixes; None disables the
    # activity filter entirely.
    cpv_activity_map: dict[str, list[str]] | None = None
    seed: int = 0
    jobs: int = 1

    def validate(self, check_paths: bool = True) -> list[str]:
        """Collect every problem instead of failing on the first."""
        errors: list[str] = []
        errors.extend(self.match.validate())
        if not 0.0 <= self.merge_threshold <= 1.0:
            errors.append(f"merge_threshold must be in [0, 1], got {self.merge_threshold}")
        if self.jobs < 1:
            errors.append(f"jobs must be >= 1, got {self.jobs}")
        if len(self.delimiter) != 1:
            errors.append(f"delimiter must be a single character, got {self.delimiter!r}")
        for sem in MANDATORY_FIELDS:
            if sem not in self.column_map:
                errors.append(f"column_map is missing the mandatory field {sem!r}")
        if not self.separators:
            errors.append("separators must not be empty")
        if self.period_start > self.period_end:
            errors.append("period_start is after period_end")
        if check_paths:
            for path in self.lot_files:
                if not Path(path).exists():
                    errors.append(f"lot file does not exist: {path}")
            for label, path in [
                ("registry entity file", self.registry_entity_file),
                ("registry facility file", self.registry_facility_file),
                ("postal file", self.postal_file),
                ("contract notice file", self.contract_notice_file),
                ("ground truth file", self.ground_truth_file),
            ]:
                if path is not None and not Path(path).exists():
                    errors.append(f"{label} does not exist: {path}")
        return errors

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        return replace(self, **kwargs)


def _match_from_dict(data: dict) -> MatchConfig:
    weights = data.get("address_weights", {})
    return MatchConfig(
        name_threshold=data.get("name_threshold", 0.80),
        street_weight=weights.get("street", 0.40),
        zipcode_weight=weights.get("zipcode", 0.35),
        city_weight=weights.get("city", 0.25),
        min_address_score=data.get("min_address_score", 0.30),
        activity_prefix_length=data.get("activity_prefix_length", 2),
        allow_unblocked=data.get("allow_unblocked", False),
    )


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    inputs = data.get("inputs", {})
    cfg.lot_files = list(inputs.get("lots", []))
    cfg.registry_entity_file = inputs.get("registry_entities")
    cfg.registry_facility_file = inputs.get("registry_facilities")
    cfg.postal_file = inputs.get("postal")
    cfg.contract_notice_file = inputs.get("contract_notice_ids")
    cfg.ground_truth_file = inputs.get("ground_truth")
    cfg.output_dir = data.get("output_dir", cfg.output_dir)
    cfg.delimiter = data.get("delimiter", cfg.delimiter)
    cfg.column_map.update(data.get("column_map", {}))
    cfg.registry_entity_map.update(data.get("registry_entity_map", {}))
    cfg.registry_facility_map.update(data.get("registry_facility_map", {}))
    if "separators" in data:
        cfg.separators = list(data["separators"])
    if "postal_tokens" in data:
        cfg.postal_tokens = list(data["postal_tokens"])
    if "unsuccessful_markers" in data:
        cfg.unsuccessful_markers = list(data["unsuccessful_markers"])
    if "criterion_lexicon" in data:
        cfg.criterion_lexicon = {
            k: CriterionClass(v) for k, v in data["criterion_lexicon"].items()
        }
    if "contract_type_values" in data:
        cfg.contract_type_values = dict(data["contract_type_values"])
    if "date_formats" in data:
        cfg.date_formats = list(data["date_formats"])
    period = data.get("period")
    if period:
        cfg.period_start, cfg.period_end = period[0], period[1]
    cfg.match = _match_from_dict(data.get("match", {}))
    cfg.merge_threshold = data.get("merge_threshold", cfg.merge_threshold)
    if data.get("cpv_activity_map") is not None:
        cfg.cpv_activity_map = {
            k: list(v) for k, v in data["cpv_activity_map"].items()
        }
    cfg.seed = data.get("seed", cfg.seed)
    cfg.jobs = data.get("jobs", cfg.jobs)
    return cfg


def load_lexicon(path: str) -> dict[str, CriterionClass]:
    """Read a keyword -> class lexicon file (JSON object)."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    try:
        return {k: CriterionClass(v) for k, v in raw.items()}
    except ValueError as exc:
        raise ConfigError(f"bad criterion class in lexicon {path}: {exc}") from exc


def validate_config(path: str) -> PipelineConfig:
    """Load and validate a config file; raises ConfigError listing every issue."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if "criterion_lexicon_path" in data and data["criterion_lexicon_path"]:
        data["criterion_lexicon"] = {
            k: v.value if isinstance(v, CriterionClass) else v
            for k, v in load_lexicon(data["criterion_lexicon_path"]).items()
        }
    cfg = config_from_dict(data)
    errors = cfg.validate()
    if errors:
        raise ConfigError("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))
    return cfg
