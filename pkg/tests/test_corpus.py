import json

from hypothesis import given, strategies as st

from conftest import fixture_path
from core.models import DnsErrorCode, DnsOutcome, Verdict
from probes.corpus import (
    CorpusIngestor,
    SourceEntry,
    SourceKind,
    extract_domains,
    extract_domains_detailed,
    filter_live,
    normalize_domain,
    parse_source_list,
    read_domain_list,
)

SAMPLE_DOMAINS = {
    "www.example.com",
    "example.com",
    "example.org",
    "news.example.net",
    "xn--bcher-kva.example",
    "tracker.example.info",
    "forum.example.co.in",
    "files.example.co.in",
}


def test_plain_list_skips_blank_and_comment_lines():
    entries = parse_source_list(b"# header\n\nhttp://a.example.com/\n  b.example.org  \n")
    assert [e.raw_url for e in entries] == ["http://a.example.com/", "b.example.org"]
    assert all(e.source_kind == SourceKind.OTHER for e in entries)


def test_csv_rows_with_errors_are_reported_and_skipped():
    raw = "url,source_kind,source_id\nhttp://a.example.com/,court_order,C-1\nhttp://b.example.com/,rumour,x\n"
    errors = []
    entries = parse_source_list(raw, "csv", errors)
    assert len(entries) == 1
    assert entries[0].source_kind == SourceKind.COURT_ORDER
    assert entries[0].source_id == "C-1"
    assert len(errors) == 1
    assert errors[0].line == 3
    assert "rumour" in errors[0].message


def test_sample_corpus_extracts_expected_domains():
    with open(fixture_path("corpus_sample.txt"), "rb") as f:
        entries = parse_source_list(f)
    assert len(entries) == 12
    result = extract_domains_detailed(entries)
    assert result.domains == SAMPLE_DOMAINS
    assert [raw for _, raw in result.untestable] == ["http://192.0.2.44/files"]


def test_csv_corpus_keeps_source_references():
    with open(fixture_path("corpus_sample.csv"), "rb") as f:
        entries = parse_source_list(f, "csv")
    result = extract_domains_detailed(entries)
    assert result.domains == SAMPLE_DOMAINS
    assert result.sources["www.example.com"] == ["government_order:GO-2017-001"]
    assert result.sources["example.org"] == ["government_order:GO-2017-002", "user_report"]


def test_normalization_strips_scheme_port_path_and_case():
    domains = extract_domains([
        SourceEntry("HTTPS://Sub.Example.COM:8080/a/b?q=1"),
        SourceEntry("sub.example.com."),
        SourceEntry("//sub.example.com/path"),
    ])
    assert domains == {"sub.example.com"}


def test_invalid_hosts_are_not_domains():
    assert normalize_domain("localhost") is None
    assert normalize_domain("-bad-.example.com") is None
    assert normalize_domain("a" * 64 + ".example.com") is None
    assert normalize_domain("München.example") == "xn--mnchen-3ya.example"


def test_punycode_labels_must_decode():
    assert normalize_domain("xn--p1ai.example") == "xn--p1ai.example"
    assert normalize_domain("XN--MNCHEN-3YA.example") == "xn--mnchen-3ya.example"
    assert normalize_domain("xn--a.example") is None
    assert normalize_domain("shop.xn--a.example") is None


def test_bare_ip_urls_become_untestable_verdicts(logger):
    ingestor = CorpusIngestor(logger)
    ingestor.ingest_entries([SourceEntry("http://198.51.100.7/x"), SourceEntry("ok.example.com")])
    assert ingestor.stats['untestable_ip_urls'] == 1
    assert ingestor.stats['domains'] == 1
    assert ingestor.untestable[0].verdict == Verdict.UNTESTABLE
    assert ingestor.untestable[0].note == "bare_ip_url"


def test_filter_live_keeps_domains_with_a_resolving_control():
    control = {
        "a.example.com": [DnsOutcome.error(DnsErrorCode.NXDOMAIN), DnsOutcome.answers(["93.184.216.34"])],
        "b.example.com": [DnsOutcome.error(DnsErrorCode.NXDOMAIN), DnsOutcome.timeout()],
    }
    untestable = []
    live = filter_live(["a.example.com", "b.example.com", "c.example.com"], control, untestable)
    assert live == {"a.example.com"}
    assert [v.domain for v in untestable] == ["c.example.com"]


def test_ingest_file_writes_domain_list_and_sidecar(logger, tmp_path):
    ingestor = CorpusIngestor(logger)
    result = ingestor.ingest_file(fixture_path("corpus_sample.csv"), "csv")
    live = {"example.com", "example.org"}
    path = ingestor.write_domain_list(result, str(tmp_path), live)

    assert read_domain_list(path) == ["example.com", "example.org"]
    with open(tmp_path / "domains.json", encoding="utf-8") as f:
        sidecar = json.load(f)
    assert sidecar[0] == {"domain": "example.com", "sources": ["court_order:WP-1234/2016"]}
    assert ingestor.stats['entries'] == 12
    assert ingestor.stats['entries_by_kind']['government_order'] == 4


def test_check_liveness_records_failed_control_resolution(logger):
    ingestor = CorpusIngestor(logger)

    def resolve(domain):
        if domain == "down.example.com":
            raise OSError("network unreachable")
        return [DnsOutcome.answers(["203.0.113.80"])]

    live = ingestor.check_liveness(["up.example.com", "down.example.com"], resolve)
    assert live == {"up.example.com"}
    assert ingestor.stats['live_domains'] == 1
    assert any(v.domain == "down.example.com" for v in ingestor.untestable)


labels = st.from_regex(r"[a-z][a-z0-9]{0,10}", fullmatch=True)
hostnames = st.builds(lambda a, b: f"{a}.{b}.com", labels, labels)


@given(st.lists(hostnames, max_size=20))
def test_extraction_is_a_fixed_point(hosts):
    once = extract_domains(SourceEntry(f"http://{h}/path") for h in hosts)
    twice = extract_domains(SourceEntry(d) for d in once)
    assert once == twice
    assert len(once) <= len(hosts)


@given(st.sets(hostnames, max_size=10), st.sets(hostnames, max_size=10))
def test_filter_live_is_monotone_in_control_results(domains, extra):
    base = {d: [DnsOutcome.error(DnsErrorCode.NXDOMAIN)] for d in domains}
    more = {d: list(outcomes) for d, outcomes in base.items()}
    for d in extra & domains:
        more[d].append(DnsOutcome.answers(["198.18.0.1"]))
    assert filter_live(domains, base) <= filter_live(domains, more) <= set(domains)
