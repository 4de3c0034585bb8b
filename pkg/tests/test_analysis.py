import json

import pytest
from hypothesis import given, settings, strategies as st

from core.errors import ConfigError
from core.models import DnsObservation, DnsOutcome, ProbeVerdict, Technique, Verdict
from core.records import JsonLinesWriter
from analysis.blocklists import (
    Blocklist,
    assemble_blocklist,
    common_domains,
    exclusive_domains,
    jaccard,
    mrf_frequency_table,
    overlap_matrix,
    technique_matrix,
    technique_venn,
    verdict_counts,
)
from analysis.report import (
    SUMMARY_HEADER,
    IspRunData,
    RunData,
    build_report,
    emit_report,
    load_run,
    report_to_csv,
    verdicts_file,
    write_report,
)

DNS, HTTP, TCPIP, SNI = Technique.DNS, Technique.HTTP, Technique.TCPIP, Technique.SNI


def censored(domain, technique=HTTP, signature=None, **kwargs):
    return ProbeVerdict(domain, technique, Verdict.CENSORED, matched_signature=signature, **kwargs)


def blocklist(isp, *domains, technique=HTTP):
    return Blocklist(isp, {technique: set(domains)})


domains = st.sets(st.sampled_from([f"d{i}.example.com" for i in range(30)]), max_size=30)


class TestJaccard:
    def test_examples(self):
        assert jaccard({"a", "b", "c"}, {"b", "c", "d"}) == 0.5
        assert jaccard({"a"}, {"b"}) == 0.0
        assert jaccard(set(), set()) == 1.0
        assert jaccard(blocklist("x", "a", "b"), {"a", "b"}) == 1.0

    @given(domains, domains)
    def test_bounded_and_symmetric(self, a, b):
        assert 0.0 <= jaccard(a, b) <= 1.0
        assert jaccard(a, b) == jaccard(b, a)
        assert jaccard(a, a) == 1.0

    @given(domains, domains)
    def test_matches_brute_force(self, a, b):
        union = [d for d in sorted(a) + sorted(b) if d in a or d in b]
        union = list(dict.fromkeys(union))
        shared = [d for d in union if d in a and d in b]
        expected = len(shared) / len(union) if union else 1.0
        assert jaccard(a, b) == pytest.approx(expected)


class TestOverlapMatrix:
    def test_cells(self):
        matrix = overlap_matrix([blocklist("a", "x", "y"), blocklist("b", "y", "z"), blocklist("c")])
        assert matrix.cell("a", "b") == pytest.approx(1 / 3)
        assert matrix.cell("b", "a") == matrix.cell("a", "b")
        assert matrix.cell("a", "a") == 1.0
        assert matrix.cell("a", "c") == 0.0
        assert ("c", "c") in matrix.degenerate

    def test_both_empty_pair_is_degenerate(self):
        matrix = overlap_matrix([blocklist("a"), blocklist("b")])
        assert matrix.cell("a", "b") == 1.0
        assert ("a", "b") in matrix.degenerate

    def test_needs_two_lists(self):
        with pytest.raises(ValueError):
            overlap_matrix([blocklist("a", "x")])

    @settings(max_examples=50)
    @given(st.lists(domains, min_size=2, max_size=5))
    def test_symmetric_unit_diagonal(self, sets):
        matrix = overlap_matrix([blocklist(f"isp{i}", *s) for i, s in enumerate(sets)])
        n = len(sets)
        for i in range(n):
            assert matrix.cells[i][i] == 1.0
            for j in range(n):
                assert matrix.cells[i][j] == matrix.cells[j][i]
                assert 0.0 <= matrix.cells[i][j] <= 1.0


class TestVenn:
    def test_two_techniques(self):
        dns_only = {f"dnsonly-{i}" for i in range(23)}
        http_only = {f"httponly-{i}" for i in range(187)}
        both = {f"both-{i}" for i in range(161)}
        regions = technique_venn({DNS: dns_only | both, HTTP: http_only | both})
        assert regions == {"dns_only": 23, "http_only": 187, "both": 161}

    def test_three_techniques_include_empty_regions(self):
        regions = technique_venn({DNS: {"a", "b"}, TCPIP: {"b"}, HTTP: {"c"}})
        assert regions["dns_only"] == 1
        assert regions["dns+tcpip"] == 1
        assert regions["http_only"] == 1
        assert regions["dns+tcpip+http"] == 0
        assert len(regions) == 7

    @given(domains, domains, domains)
    def test_regions_partition_the_union(self, a, b, c):
        regions = technique_venn({DNS: a, HTTP: b, SNI: c})
        assert sum(regions.values()) == len(a | b | c)
        assert regions["dns+http+sni"] == len(a & b & c)
        assert regions["dns_only"] == len(a - b - c)


class TestAssembly:
    def test_foreign_signature_is_collateral(self):
        verdicts = [
            censored("own.example.com", signature="isp-b"),
            censored("leak.example.com", signature="act"),
            censored("dns.example.com", DNS),
            ProbeVerdict("clean.example.com", HTTP, Verdict.UNCENSORED),
            ProbeVerdict("unknown.example.com", HTTP, Verdict.UNTESTABLE),
        ]
        result = assemble_blocklist("isp-b", verdicts)
        assert result.domains == {"own.example.com", "dns.example.com"}
        assert result.collateral == {"leak.example.com": ["act"]}

    def test_collateral_excludes_every_technique(self):
        verdicts = [censored("leak.example.com", DNS), censored("leak.example.com", HTTP)]
        result = assemble_blocklist("bsnl", verdicts, {"leak.example.com": ["airtel"]})
        assert result.domains == set()
        assert "leak.example.com" in result.collateral

    @given(domains, domains, st.sampled_from(["own", "other"]))
    def test_blocklist_is_censored_minus_foreign(self, blocked, foreign, sig):
        verdicts = [censored(d) for d in sorted(blocked)]
        signatures = {d: [sig if d in foreign else "own"] for d in blocked}
        result = assemble_blocklist("own", verdicts, signatures)
        expected = blocked - foreign if sig == "other" else blocked
        assert result.domains == expected
        assert result.domains.isdisjoint(result.collateral)

    @given(domains, domains)
    def test_more_censored_verdicts_never_shrink_the_list(self, base, extra):
        small = assemble_blocklist("x", [censored(d) for d in base])
        large = assemble_blocklist("x", [censored(d) for d in base | extra])
        assert small.domains <= large.domains


def test_common_and_exclusive():
    lists = [blocklist("a", "x", "y"), blocklist("b", "y", "z")]
    assert common_domains(lists) == {"domains": ["y"], "count": 1, "union_count": 3, "share": pytest.approx(1 / 3)}
    assert exclusive_domains(lists) == {"a": ["x"], "b": ["z"]}
    matrix = technique_matrix(lists)
    assert matrix["a"] == {"dns": False, "tcpip": False, "http": True, "sni": False}


def test_mrf_frequency_table_orders_by_count_then_ip():
    observations = [
        DnsObservation(f"d{i}.example.com", "test", DnsOutcome.answers([ip]))
        for i, ip in enumerate(["103.87.12.240"] * 3 + ["9.9.9.9", "1.1.1.1"])
    ] + [DnsObservation("gone.example.com", "test", DnsOutcome.timeout())]
    assert mrf_frequency_table(observations) == [("103.87.12.240", 3), ("1.1.1.1", 1), ("9.9.9.9", 1)]


def test_verdict_counts():
    counts = verdict_counts([censored("a"), censored("b", DNS),
                             ProbeVerdict("c", DNS, Verdict.UNTESTABLE)])
    assert counts["http"] == {"censored": 1, "uncensored": 0, "untestable": 0}
    assert counts["dns"] == {"censored": 1, "uncensored": 0, "untestable": 1}


def act_run():
    verdicts = [censored(f"dnsonly-{i:02d}.example.in", DNS, evidence="fixed_ip") for i in range(23)]
    verdicts += [censored(f"httponly-{i:03d}.example.in", HTTP, "act", evidence="length_inconsistent",
                          details={"rule_fired": "length_inconsistent"}) for i in range(187)]
    for i in range(161):
        verdicts.append(censored(f"both-{i:03d}.example.in", DNS, evidence="fixed_ip"))
        verdicts.append(censored(f"both-{i:03d}.example.in", HTTP, "act"))
    verdicts.append(ProbeVerdict("clean.example.in", DNS, Verdict.UNCENSORED))
    return IspRunData("act", verdicts, [DNS, HTTP], domains_probed=400)


class TestReport:
    def test_act_section(self):
        report = build_report(RunData([act_run()]))
        section = report["isps"][0]
        assert section["venn"] == {"dns_only": 23, "http_only": 187, "both": 161}
        assert section["blocked_count"] == 371
        assert section["counts"]["dns"]["censored"] == 184
        assert section["counts"]["http"]["censored"] == 348
        assert report["total_blocked"] == 371
        assert report["overlap"] is None
        evidence = [e for e in section["evidence"] if e["domain"] == "httponly-000.example.in"]
        assert evidence == [{"domain": "httponly-000.example.in", "technique": "http",
                             "evidence": "length_inconsistent", "rule_fired": "length_inconsistent",
                             "ip": None, "signature": "act"}]

    def test_collateral_across_isps(self):
        bsnl = IspRunData("bsnl", [censored("leak.example.com", signature="act"),
                                   censored("own.example.com", DNS)], [DNS, HTTP])
        act = IspRunData("act", [censored("leak.example.com", signature="act")], [HTTP])
        report = build_report(RunData([bsnl, act]))
        by_isp = {s["isp"]: s for s in report["isps"]}
        assert by_isp["bsnl"]["blocklist"] == ["own.example.com"]
        assert by_isp["bsnl"]["collateral"] == {"leak.example.com": ["act"]}
        assert by_isp["act"]["blocklist"] == ["leak.example.com"]
        assert report["overlap"]["cells"] == [[1.0, 0.0], [0.0, 1.0]]
        assert [s["isp"] for s in report["isps"]] == ["act", "bsnl"]

    def test_empty_run_has_every_key(self):
        report = json.loads(emit_report(RunData([]), "json"))
        assert report["isps"] == []
        assert report["total_blocked"] == 0
        assert report["overlap"] is None
        assert report["common"]["count"] == 0
        assert set(report) == {"schema_version", "isps", "total_blocked", "overlap",
                               "common", "exclusive", "technique_matrix"}

    def test_csv_summary(self):
        lines = emit_report(RunData([act_run()]), "csv").decode().splitlines()
        assert lines[0] == ",".join(SUMMARY_HEADER)
        assert lines[1:] == ["act,dns,184,0", "act,http,348,0"]

    def test_csv_counts_leave_collateral_out(self):
        bsnl = IspRunData("bsnl", [censored("leak.example.com", signature="act"),
                                   censored("own.example.com", signature="bsnl"),
                                   ProbeVerdict("slow.example.com", HTTP, Verdict.UNTESTABLE)], [HTTP])
        report = build_report(RunData([bsnl]))
        assert report["isps"][0]["counts"]["http"]["censored"] == 2
        lines = report_to_csv(report).decode().splitlines()
        assert lines[1:] == ["bsnl,http,1,1"]
        assert report["isps"][0]["blocked_count"] == 1

    def test_unknown_format(self):
        with pytest.raises(ConfigError):
            emit_report(RunData([]), "xml")

    def test_json_is_byte_stable(self):
        assert emit_report(RunData([act_run()])) == emit_report(RunData([act_run()]))


class TestStoredRuns:
    def write_isp(self, root, isp, verdicts):
        isp_dir = root / isp
        isp_dir.mkdir(parents=True)
        by_technique = {}
        for verdict in verdicts:
            by_technique.setdefault(verdict.technique, []).append(verdict)
        for technique, items in by_technique.items():
            writer = JsonLinesWriter(str(isp_dir / verdicts_file(technique)))
            for verdict in items:
                writer.append(verdict.to_dict())
        (isp_dir / "domains.txt").write_text("a.example.com\nb.example.com\n")
        observations = JsonLinesWriter(str(isp_dir / "dns_observations.jsonl"))
        observations.append(DnsObservation("a.example.com", "test", DnsOutcome.answers(["103.87.12.240"])).to_dict())
        return isp_dir

    def test_load_and_write(self, tmp_path):
        self.write_isp(tmp_path, "isp-a", [censored("a.example.com"), censored("b.example.com", DNS)])
        self.write_isp(tmp_path, "isp-b", [censored("a.example.com")])
        (tmp_path / "stray").mkdir()

        run = load_run(str(tmp_path))
        assert [d.isp for d in run.isps] == ["isp-a", "isp-b"]
        assert run.isps[0].domains_probed == 2
        assert run.isps[0].techniques == [DNS, HTTP]

        paths = write_report(run, str(tmp_path))
        with open(paths["report"], "rb") as f:
            first = f.read()
        report = json.loads(first)
        assert report["common"]["domains"] == ["a.example.com"]
        assert report["overlap"]["cells"][0][1] == pytest.approx(0.5)
        with open(paths["frequencies"], encoding="utf-8") as f:
            assert f.read().splitlines() == ["channel,ip,count", "test,103.87.12.240,1", "test,103.87.12.240,1"]

        write_report(load_run(str(tmp_path)), str(tmp_path))
        with open(paths["report"], "rb") as f:
            assert f.read() == first

    def test_missing_output_dir(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run(str(tmp_path / "nope"))
