import datetime as dt

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tedclean.config import MatchConfig, PipelineConfig
from tedclean.identify import (
    REASON_ADDRESS,
    REASON_BLOCKING,
    REASON_NAME,
    REASON_NO_NAME,
    REASON_UNBLOCKABLE,
    address_score,
    candidate_block,
    identify_all,
    identify_occurrence,
    levenshtein,
    name_similarity,
    payload_of,
    write_match_log,
)
from tedclean.models import InvariantError, RegistryEntity, RegistryFacility, full_siret
from tedclean.registry import Registry, temporally_valid

from conftest import make_lot, make_occurrence

FOLDED = st.text(alphabet="ABCDE ", max_size=12)


def oracle_levenshtein(a: str, b: str) -> int:
    m, n = len(a), len(b)
    d = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        d[i][0] = i
    for j in range(n + 1):
        d[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost)
    return d[m][n]


def oracle_name_similarity(a: str, b: str) -> float:
    if not a.strip() or not b.strip():
        return 0.0
    if a == b:
        return 1.0
    tokens_a, tokens_b = a.split(), b.split()
    remaining = list(tokens_b)
    shared = 0
    for token in tokens_a:
        if token in remaining:
            shared += 1
            remaining.remove(token)
    overlap = shared / min(len(tokens_a), len(tokens_b))
    if overlap >= 1.0:
        return 1.0
    longest = max(len(a), len(b))
    return max(overlap, 1.0 - oracle_levenshtein(a, b) / longest)


class TestLevenshtein:
    @pytest.mark.parametrize(
        "a,b,expected",
        [("", "", 0), ("abc", "abc", 0), ("abc", "abd", 1), ("abc", "", 3),
         ("kitten", "sitting", 3), ("flaw", "lawn", 2)],
    )
    def test_examples(self, a, b, expected):
        assert levenshtein(a, b) == expected

    @given(FOLDED, FOLDED)
    @settings(max_examples=300)
    def test_matches_oracle(self, a, b):
        assert levenshtein(a, b) == oracle_levenshtein(a, b)


class TestNameSimilarity:
    def test_equal(self):
        assert name_similarity("MAIRIE DE LYON", "MAIRIE DE LYON") == 1.0

    def test_containment_is_exact_one(self):
        assert name_similarity("COMMUNE DE LYON", "COMMUNE DE LYON ANNEXE 3") == 1.0
        assert name_similarity("LYON", "VILLE DE LYON") == 1.0

    def test_shared_tokens(self):
        # 2 shared tokens of min(3, 3)
        assert name_similarity("COMMUNE DE LYON", "MAIRIE DE LYON") == pytest.approx(2 / 3)

    def test_typo_uses_edit_distance(self):
        a, b = "ENTREPRISE DURAND", "ENTREPRISE DURAN"
        assert name_similarity(a, b) == pytest.approx(1.0 - 1 / len(a))

    def test_empty_is_zero(self):
        assert name_similarity("", "X") == 0.0
        assert name_similarity("X", "") == 0.0

    def test_disjoint(self):
        assert name_similarity("AAAA BBBB", "CCCC DDDD") < 0.5

    @given(FOLDED, FOLDED)
    @settings(max_examples=400)
    def test_matches_oracle(self, a, b):
        a, b = " ".join(a.split()), " ".join(b.split())
        assert name_similarity(a, b) == oracle_name_similarity(a, b)

    @given(FOLDED, FOLDED)
    @settings(max_examples=200)
    def test_symmetric_and_bounded(self, a, b):
        s = name_similarity(a, b)
        assert s == name_similarity(b, a)
        assert 0.0 <= s <= 1.0


def fac(siret, names, street=None, zipcode=None, city=None, activity=None,
        opened=None, closed=None):
    return RegistryFacility(
        siret=siret, names=names, street=street, zipcode=zipcode, city=city,
        department=zipcode[:2] if zipcode else None, activity_code=activity,
        open_date=opened, close_date=closed,
    )


def build_registry():
    reg = Registry(activity_prefix_length=2)
    reg.add_entity(RegistryEntity(siren="111111111", legal_names=["COMMUNE DE LYON"],
                                  activity_code="8411Z"))
    reg.add_entity(RegistryEntity(siren="222222222", legal_names=["TRAVAUX DURAND"],
                                  activity_code="4399C"))
    reg.add_entity(RegistryEntity(siren="333333333", legal_names=["DURAND BTP PARIS"],
                                  activity_code="4399C"))
    reg.add_facility(fac("11111111100011", ["MAIRIE DE LYON", "COMMUNE DE LYON"],
                         "1 PLACE DE LA COMEDIE", "69001", "LYON"))
    reg.add_facility(fac("11111111100022", ["COMMUNE DE LYON ANNEXE"],
                         "2 RUE GARIBALDI", "69003", "LYON"))
    reg.add_facility(fac("22222222200011", ["ENTREPRISE DURAND"],
                         "5 RUE DES ACACIAS", "69100", "VILLEURBANNE",
                         opened=dt.date(2012, 1, 1), closed=dt.date(2016, 12, 31)))
    reg.add_facility(fac("33333333300011", ["ENTREPRISE DURAND"],
                         "9 AVENUE DE LA REPUBLIQUE", "75011", "PARIS"))
    return reg


# read-only, shared by the property tests below
_REGISTRY = build_registry()


@pytest.fixture
def registry():
    return build_registry()


MATCH = MatchConfig()


class TestAddressScore:
    def test_all_fields_match(self):
        occ = make_occurrence(street="1 PLACE DE LA COMEDIE", zipcode="69001", city="LYON")
        facility = fac("x" * 14, [], "1 PLACE DE LA COMEDIE", "69001", "LYON")
        score, mask = address_score(occ, facility, MATCH)
        assert score == pytest.approx(1.0)
        assert mask == ("street", "zipcode", "city")

    def test_zipcode_same_department_half(self):
        occ = make_occurrence(street=None, zipcode="69001", city=None)
        facility = fac("x" * 14, [], None, "69003", None)
        score, mask = address_score(occ, facility, MATCH)
        assert score == pytest.approx(0.5)
        assert mask == ("zipcode",)

    def test_weight_redistribution(self):
        # street missing on the facility side: weights over zipcode+city
        occ = make_occurrence(street="5 RUE X", zipcode="69001", city="LYON")
        facility = fac("x" * 14, [], None, "69003", "LYON")
        score, mask = address_score(occ, facility, MATCH)
        expected = (0.35 * 0.5 + 0.25 * 1.0) / (0.35 + 0.25)
        assert score == pytest.approx(expected)
        assert mask == ("zipcode", "city")

    def test_nothing_shared(self):
        occ = make_occurrence(street=None, zipcode=None, city="LYON")
        facility = fac("x" * 14, [], "1 RUE Y", "69001", None)
        score, mask = address_score(occ, facility, MATCH)
        assert score == 0.0
        assert mask == ()


class TestCandidateBlock:
    def oracle(self, payload, registry, config, cpv_map):
        prefixes = None
        if payload.activity and cpv_map:
            code = payload.activity.strip()
            for length in range(len(code), 0, -1):
                allowed = cpv_map.get(code[:length])
                if allowed is not None:
                    plen = registry.activity_prefix_length
                    prefixes = {p[:plen] for p in allowed}
                    break
        if not payload.department and prefixes is None:
            if not config.allow_unblocked:
                return set()
            pool = set(registry.facilities)
        else:
            pool = set()
            for siret, facility in registry.facilities.items():
                if payload.department and facility.department != payload.department:
                    continue
                if prefixes is not None:
                    code = registry.effective_activity(facility)
                    plen = registry.activity_prefix_length
                    if code is None or code[:plen] not in prefixes:
                        continue
                pool.add(siret)
        if payload.date is not None:
            pool = {
                s for s in pool
                if temporally_valid(registry.facilities[s], payload.date)
            }
        return pool

    def test_department_block(self, registry):
        occ = make_occurrence(zipcode="69001", department="69")
        lot = make_lot()
        block = candidate_block(occ, lot, registry, MATCH)
        assert block == {"11111111100011", "11111111100022", "22222222200011"}

    def test_date_filters_block(self, registry):
        occ = make_occurrence(department="69")
        lot = make_lot(publication_date=dt.date(2018, 5, 1))
        block = candidate_block(occ, lot, registry, MATCH)
        assert "22222222200011" not in block

    def test_activity_intersection(self, registry):
        occ = make_occurrence(department="69")
        lot = make_lot(activity_code="45210000")
        cpv_map = {"45": ["43"]}
        block = candidate_block(occ, lot, registry, MATCH, cpv_map)
        assert block == {"22222222200011"}

    def test_activity_alone_blocks(self, registry):
        occ = make_occurrence()
        lot = make_lot(activity_code="45210000")
        cpv_map = {"45": ["43"]}
        block = candidate_block(occ, lot, registry, MATCH, cpv_map)
        assert block == {"22222222200011", "33333333300011"}

    def test_unblockable_refused(self, registry):
        occ = make_occurrence()
        lot = make_lot()
        assert candidate_block(occ, lot, registry, MATCH) == set()

    def test_allow_unblocked_scans_all(self, registry):
        occ = make_occurrence()
        lot = make_lot()
        config = MatchConfig(allow_unblocked=True)
        block = candidate_block(occ, lot, registry, config)
        assert block == set(registry.facilities)

    @given(
        department=st.sampled_from([None, "69", "75", "29"]),
        activity=st.sampled_from([None, "45210000", "03110000"]),
        year=st.sampled_from([2011, 2015, 2018]),
        allow=st.booleans(),
    )
    @settings(max_examples=100)
    def test_matches_full_scan_oracle(self, department, activity, year, allow):
        occ = make_occurrence(department=department)
        lot = make_lot(publication_date=dt.date(year, 6, 1), activity_code=activity)
        config = MatchConfig(allow_unblocked=allow)
        cpv_map = {"45": ["43"], "03": []}
        payload = payload_of(occ, lot)
        assert candidate_block(occ, lot, _REGISTRY, config, cpv_map) == self.oracle(
            payload, _REGISTRY, config, cpv_map
        )


class TestIdentifyOccurrence:
    def test_clean_match(self, registry):
        occ = make_occurrence(
            normalized_name="MAIRIE DE LYON", street="1 PLACE DE LA COMEDIE",
            zipcode="69001", city="LYON", department="69",
        )
        result = identify_occurrence(occ, make_lot(), registry, MATCH)
        assert result.source == "matched"
        assert result.identifier == full_siret("11111111100011")
        assert result.best.address_score == pytest.approx(1.0)

    def test_no_name(self, registry):
        occ = make_occurrence(normalized_name=None, department="69")
        result = identify_occurrence(occ, make_lot(), registry, MATCH)
        assert result.source == "none"
        assert result.reason == REASON_NO_NAME

    def test_unblockable(self, registry):
        occ = make_occurrence(normalized_name="MAIRIE DE LYON")
        result = identify_occurrence(occ, make_lot(), registry, MATCH)
        assert result.reason == REASON_UNBLOCKABLE

    def test_blocking_empties(self, registry):
        occ = make_occurrence(normalized_name="MAIRIE DE BREST", department="29")
        result = identify_occurrence(occ, make_lot(), registry, MATCH)
        assert result.reason == REASON_BLOCKING
        assert result.block_size == 0

    def test_name_filter_empties(self, registry):
        occ = make_occurrence(normalized_name="BOULANGERIE MARTIN", department="69")
        result = identify_occurrence(occ, make_lot(), registry, MATCH)
        assert result.reason == REASON_NAME
        assert result.block_size == 3

    def test_address_filter_empties(self, registry):
        occ = make_occurrence(
            normalized_name="ENTREPRISE DURAND", department="69",
            street="99 CHEMIN VERT", zipcode="13001", city="MARSEILLE",
        )
        result = identify_occurrence(occ, make_lot(publication_date=dt.date(2014, 1, 1)),
                                     registry, MATCH)
        assert result.reason == REASON_ADDRESS
        assert result.name_survivors == 1

    def test_empty_address_mask_survives(self, registry):
        occ = make_occurrence(normalized_name="ENTREPRISE DURAND", department="69")
        result = identify_occurrence(occ, make_lot(publication_date=dt.date(2014, 1, 1)),
                                     registry, MATCH)
        assert result.source == "matched"
        assert result.identifier == full_siret("22222222200011")
        assert result.best.presence_mask == ()

    def test_argmax_prefers_address(self, registry):
        # both Lyon facilities pass the name filter; the street decides
        occ = make_occurrence(
            normalized_name="COMMUNE DE LYON", street="2 RUE GARIBALDI",
            zipcode="69003", city="LYON", department="69",
        )
        result = identify_occurrence(occ, make_lot(), registry, MATCH)
        assert result.identifier == full_siret("11111111100022")

    def test_tie_breaks_on_smaller_siret(self):
        reg = Registry()
        reg.add_entity(RegistryEntity(siren="444444444", legal_names=["X"]))
        for siret in ("44444444400022", "44444444400011"):
            reg.add_facility(fac(siret, ["AGENCE DE L EAU"], None, "69001", None))
        occ = make_occurrence(normalized_name="AGENCE DE L EAU", department="69")
        result = identify_occurrence(occ, make_lot(), reg, MATCH)
        assert result.best.siret == "44444444400011"


class TestIdentifyAll:
    def test_cache_equals_individual(self, registry):
        lots = [make_lot(1), make_lot(2)]
        occs = [
            make_occurrence(1, 1, normalized_name="MAIRIE DE LYON",
                            street="1 PLACE DE LA COMEDIE", zipcode="69001",
                            city="LYON", department="69"),
            make_occurrence(2, 2, normalized_name="MAIRIE DE LYON",
                            street="1 PLACE DE LA COMEDIE", zipcode="69001",
                            city="LYON", department="69"),
            make_occurrence(3, 1, normalized_name="NOBODY KNOWN", department="69"),
        ]
        individual = [
            identify_occurrence(o, lots[o.lot_id - 1], registry, MATCH) for o in occs
        ]
        results = identify_all(occs, lots, registry, PipelineConfig())
        assert [r.identifier for r in results] == [r.identifier for r in individual]
        assert [r.reason for r in results] == [r.reason for r in individual]
        assert occs[0].identifier == full_siret("11111111100011")
        assert occs[0].identifier_source == "matched"
        assert occs[2].identifier is None

    def test_declared_skipped(self, registry):
        occ = make_occurrence(1, 1, normalized_name="MAIRIE DE LYON", department="69")
        occ.identifier = full_siret("99999999900011")
        results = identify_all([occ], [make_lot(1)], registry, PipelineConfig())
        assert results[0].source == "declared"
        assert occ.identifier == full_siret("99999999900011")

    def test_unknown_lot_raises(self, registry):
        occ = make_occurrence(1, 42, normalized_name="X", department="69")
        with pytest.raises(InvariantError):
            identify_all([occ], [make_lot(1)], registry, PipelineConfig())

    def test_results_in_occurrence_order(self, registry):
        occs = [
            make_occurrence(3, 1, normalized_name="MAIRIE DE LYON", department="69"),
            make_occurrence(1, 1, normalized_name="MAIRIE DE LYON", department="69"),
            make_occurrence(2, 1, normalized_name="MAIRIE DE LYON", department="69"),
        ]
        results = identify_all(occs, [make_lot(1)], registry, PipelineConfig())
        assert [r.occurrence_id for r in results] == [1, 2, 3]


class TestWriteMatchLog:
    def test_shape(self, registry, tmp_path):
        occ = make_occurrence(1, 1, normalized_name="MAIRIE DE LYON",
                              street="1 PLACE DE LA COMEDIE", zipcode="69001",
                              city="LYON", department="69")
        results = identify_all([occ], [make_lot(1)], registry, PipelineConfig())
        path = tmp_path / "log.csv"
        write_match_log(results, str(path))
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("occurrenceId,outcome,reason,siret")
        assert lines[1].split(",")[0:2] == ["1", "matched"]
        assert "11111111100011" in lines[1]
