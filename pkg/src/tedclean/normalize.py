"""Name and address normalization, zipcode repair, department derivation.

All matching downstream happens on the folded forms produced here, so the
fold must be deterministic and idempotent: the output alphabet is exactly
[A-Z0-9 ] with single spaces and no leading/trailing blanks.
"""
from __future__ import annotations

import csv
import re
import unicodedata
from dataclasses import dataclass, field

from .models import AgentOccurrence, Identifier, IdentifierKind

# Ligatures and letters NFKD leaves alone.
_FOLD_TABLE = str.maketrans(
    {
        "Œ": "OE", "œ": "oe", "Æ": "AE", "æ": "ae",
        "ß": "SS", "ẞ": "SS",
        "Ø": "O", "ø": "o",
        "Đ": "D", "đ": "d", "Ð": "D", "ð": "d",
        "Þ": "TH", "þ": "th",
        "Ł": "L", "ł": "l",
        "Ĳ": "IJ", "ĳ": "ij",
    }
)

_PARENS_RE = re.compile(r"\([^()]*\)")
_NON_ALNUM_RE = re.compile(r"[^A-Z0-9]+")
_SPACES_RE = re.compile(r"\s+")
_FIVE_DIGITS_RE = re.compile(r"\d{5}")


def _strip_parens(text: str) -> str:
    # innermost-out, so nesting unwinds completely
    while True:
        stripped = _PARENS_RE.sub(" ", text)
        if stripped == text:
            return text
        text = stripped


def _fold_ascii(text: str) -> str:
    text = text.translate(_FOLD_TABLE)
    decomposed = unicodedata.normalize("NFKD", text)
    return "".join(c for c in decomposed if not unicodedata.combining(c))


def normalize_name(raw: str) -> str:
    """Fold a free-text agent name to its canonical comparable form.

    Parenthesized segments go first (they carry superfluous indications),
    then "&" becomes " ET ", diacritics fold to base letters, punctuation
    becomes spaces, runs of blanks collapse, and the result is upper-cased.
    An empty result is allowed.
    """
    if not raw:
        return ""
    text = _strip_parens(raw)
    text = text.replace("&", " ET ")
    text = _fold_ascii(text).upper()
    text = _NON_ALNUM_RE.sub(" ", text)
    return _SPACES_RE.sub(" ", text).strip()


def _postal_token_re(tokens: list[str]) -> re.Pattern:
    alts = "|".join(re.escape(t) for t in tokens)
    return re.compile(rf"\b(?:{alts})\b(?:\s+\d+)?")


def normalize_address(
    street: str | None,
    zipcode: str | None,
    city: str | None,
    postal_tokens: list[str] | None = None,
) -> tuple[str | None, str | None, str | None]:
    """Clean an address triple.

    Streets and cities get the name fold; postal-only tokens (BP, CS,
    CEDEX... plus trailing digits) are stripped from all three fields; the
    zipcode is reduced to its 5-digit run or dropped; cities lose digits.
    """
    tokens = postal_tokens if postal_tokens is not None else ["BP", "CS", "CEDEX", "TSA"]
    token_re = _postal_token_re(tokens)

    def clean(value: str | None) -> str | None:
        if not value:
            return None
        folded = normalize_name(value)
        folded = token_re.sub(" ", folded)
        folded = _SPACES_RE.sub(" ", folded).strip()
        return folded or None

    out_street = clean(street)
    out_zip = None
    if zipcode:
        cleaned = clean(zipcode)
        if cleaned:
            run = _FIVE_DIGITS_RE.search(cleaned)
            out_zip = run.group(0) if run else None
    out_city = clean(city)
    if out_city:
        out_city = _SPACES_RE.sub(" ", re.sub(r"\d+", " ", out_city)).strip() or None
    return out_street, out_zip, out_city


@dataclass
class PostalTable:
    """folded city name -> set of zipcodes, loaded from a Hexaposte-style file."""

    city_to_zipcodes: dict[str, set[str]] = field(default_factory=dict)

    def add(self, city: str, zipcode: str) -> None:
        folded = normalize_name(city)
        if not folded or not zipcode:
            return
        self.city_to_zipcodes.setdefault(folded, set()).add(zipcode)

    def __len__(self) -> int:
        return len(self.city_to_zipcodes)


def load_postal_table(path: str, delimiter: str = ",") -> PostalTable:
    """Read (city, zipcode) lines; header optional (detected on the zipcode cell)."""
    table = PostalTable()
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.reader(fh, delimiter=delimiter):
            if len(row) < 2:
                continue
            city, zipcode = row[0].strip(), row[1].strip()
            if not zipcode.isdigit():
                continue
            table.add(city, zipcode)
    return table


def fill_zipcode(city: str, table: PostalTable) -> str | None:
    """Zipcode for a folded city name, only when the mapping is unambiguous."""
    zips = table.city_to_zipcodes.get(city)
    if zips and len(zips) == 1:
        return next(iter(zips))
    return None


def department_of(zipcode: str | None) -> str | None:
    """French department code of a 5-digit zipcode.

    Overseas (97x/98x) keeps three digits; Corsica stays "20" (2A/2B are
    not distinguishable from the zipcode alone).
    """
    if not zipcode or len(zipcode) != 5 or not zipcode.isdigit():
        return None
    if zipcode[:2] in ("97", "98"):
        return zipcode[:3]
    return zipcode[:2]


def normalize_occurrence(
    occ: AgentOccurrence,
    postal: PostalTable | None,
    postal_tokens: list[str],
) -> None:
    """Fill normalized_name, clean the address in place, derive department.

    A missing zipcode is filled from the postal table only when the city
    maps to exactly one zipcode; a present zipcode is never overwritten.
    """
    occ.normalized_name = normalize_name(occ.raw_name) or None
    street, zipcode, city = normalize_address(
        occ.street, occ.zipcode, occ.city, postal_tokens
    )
    occ.street, occ.zipcode, occ.city = street, zipcode, city
    if occ.country:
        occ.country = normalize_name(occ.country) or None
    if occ.zipcode is None and occ.city and postal is not None:
        occ.zipcode = fill_zipcode(occ.city, postal)
    occ.department = department_of(occ.zipcode)


def merge_by_declared_siret(occurrences: list[AgentOccurrence]) -> dict[int, str]:
    """Group occurrences that already share a valid declared 14-digit SIRET.

    Side effect: sets occ.identifier from the declared value (full SIRET or
    bare SIREN); malformed declarations are treated as absent. Returns
    occurrence_id -> pre-merge agent key; only full SIRETs form keys.
    """
    from .registry import validate_siret  # local import: registry folds names via this module

    keys: dict[int, str] = {}
    for occ in occurrences:
        if occ.identifier is not None:
            continue
        if not occ.declared_siret:
            continue
        ident: Identifier | None = validate_siret(occ.declared_siret)
        if ident is None:
            continue
        occ.identifier = ident
        occ.identifier_source = "declared"
        if ident.kind is IdentifierKind.FULL_SIRET:
            keys[occ.occurrence_id] = ident.value
    return keys
