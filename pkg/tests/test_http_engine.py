import socket
import threading

import pytest
import requests
from hypothesis import given, settings, strategies as st
from urllib3.exceptions import ReadTimeoutError

from conftest import fixture_path
from core.errors import InsufficientControlsError, SignatureError
from core.models import Technique, Verdict
from probes.http_engine import (
    HttpProber,
    HttpResponseRecord,
    Terminal,
    body_inconsistent,
    classify_http,
    consensus_status,
    cosine_similarity,
    fetch,
    header_keys_mismatch,
    html_tag_tf,
    length_inconsistent,
    load_signatures,
    match_signature,
    parse_signatures,
    registrable_domain,
)
from simulator.scenario import DEFAULT_BLOCKPAGE, default_origin_body, expected_censored

ARTICLE = default_origin_body("news.example.com").encode("utf-8")
BLOCKPAGE = DEFAULT_BLOCKPAGE.encode("utf-8")
ORIGIN_KEYS = ("content-type", "server", "date", "content-length")


def ok(status=200, body=ARTICLE, keys=ORIGIN_KEYS, location=None, vantage="c"):
    return HttpResponseRecord("news.example.com", "93.184.216.34", vantage, Terminal.OK,
                              status, tuple(keys), body, location)


def failed(terminal, vantage="t"):
    return HttpResponseRecord("news.example.com", "93.184.216.34", vantage, terminal)


def controls(n=5, **kwargs):
    return [ok(vantage=f"c{i}", **kwargs) for i in range(n)]


class TestLengths:
    def test_zero_deviation(self):
        assert not length_inconsistent(100, [100, 100, 100])

    def test_far_outlier(self):
        assert length_inconsistent(5000, [100, 110, 105, 95, 101])

    def test_within_three_sigma(self):
        assert not length_inconsistent(103, [100, 110, 105, 95, 101])
        # mean 102.2, sigma 5.04
        assert not length_inconsistent(117, [100, 110, 105, 95, 101])
        assert length_inconsistent(118, [100, 110, 105, 95, 101])

    def test_sigma_floor_is_one_byte(self):
        assert not length_inconsistent(103, [100, 100])
        assert length_inconsistent(104, [100, 100])

    def test_needs_two_controls(self):
        with pytest.raises(InsufficientControlsError):
            length_inconsistent(100, [100])


class TestTagVectors:
    def test_counts_start_tags(self):
        assert html_tag_tf(b"<html><body><p>x</p><p>y</p></body></html>") == {"html": 1, "body": 1, "p": 2}

    def test_empty_and_truncated(self):
        assert html_tag_tf(b"") == {}
        assert html_tag_tf(b"<div><div><p>") == {"div": 2, "p": 1}
        assert html_tag_tf(b"plain text, no markup") == {}

    def test_tags_are_lowercased(self):
        assert html_tag_tf(b"<DIV><Span></span></DIV>") == {"div": 1, "span": 1}

    def test_cosine_examples(self):
        assert cosine_similarity({"p": 2, "a": 1}, {"p": 2, "a": 1}) == pytest.approx(1.0)
        assert cosine_similarity({"p": 1}, {"div": 3}) == 0.0
        assert cosine_similarity({"p": 1, "div": 1}, {"p": 1}) == pytest.approx(0.7071, abs=1e-4)
        assert cosine_similarity({}, {}) == 1.0
        assert cosine_similarity({}, {"p": 1}) == 0.0


tag_vectors = st.dictionaries(st.sampled_from(["p", "div", "a", "span", "li", "h1"]),
                              st.integers(min_value=1, max_value=50), max_size=6)


@given(tag_vectors, tag_vectors)
def test_cosine_is_symmetric_and_bounded(a, b):
    assert cosine_similarity(a, b) == pytest.approx(cosine_similarity(b, a), abs=1e-12)
    assert -1e-9 <= cosine_similarity(a, b) <= 1 + 1e-9


class TestBodies:
    def test_identical_bodies_are_consistent(self):
        vec = html_tag_tf(ARTICLE)
        assert not body_inconsistent(vec, [vec, vec, vec])

    def test_disjoint_blockpage_is_inconsistent(self):
        vec = html_tag_tf(ARTICLE)
        assert body_inconsistent(html_tag_tf(b"<center><b>x</b></center>"), [vec] * 3)

    def test_small_drift_stays_within_floor(self):
        # cosine 5/sqrt(26) = 0.981 against identical controls, threshold 0.03
        assert not body_inconsistent({"p": 5, "div": 1}, [{"p": 5}] * 4)
        # cosine 3/sqrt(10) = 0.949
        assert body_inconsistent({"p": 3, "div": 1}, [{"p": 3}] * 4)

    def test_needs_three_controls(self):
        with pytest.raises(InsufficientControlsError):
            body_inconsistent({"p": 1}, [{"p": 1}, {"p": 1}])


def test_registrable_domain():
    assert registrable_domain("www.site.com") == "site.com"
    assert registrable_domain("news.bbc.co.uk") == "bbc.co.uk"
    assert registrable_domain("Blocked.ISP.example.") == "isp.example"
    assert registrable_domain("203.0.113.9") == "203.0.113.9"


def test_header_key_rule():
    controls_keys = [{"server", "content-type"}, {"server", "content-type", "x-cache"}]
    assert header_keys_mismatch({"server", "x-censor"}, controls_keys)
    assert not header_keys_mismatch({"server", "content-type"}, controls_keys)
    assert not header_keys_mismatch({"server", "content-type", "x-cache"}, controls_keys)
    assert header_keys_mismatch({"server", "content-type", "x-injected"}, controls_keys)


def test_consensus_needs_strict_majority():
    assert consensus_status(controls(3)) == 200
    assert consensus_status([ok(200), ok(200), ok(301)]) == 200
    assert consensus_status([ok(200), ok(301)]) is None
    assert consensus_status([ok(200), ok(301), ok(302), ok(302)]) is None


class TestClassify:
    def test_blockpage_with_same_status_is_censored(self):
        verdict = classify_http(ok(body=BLOCKPAGE, keys=("content-type", "content-length"), vantage="t"), controls())
        assert verdict.censored
        assert verdict.details["rule_fired"] in ("length_inconsistent", "body_inconsistent")

    def test_identical_response_is_uncensored(self):
        verdict = classify_http(ok(vantage="t"), controls())
        assert verdict.verdict == Verdict.UNCENSORED
        assert not verdict.details.get("degraded")

    def test_reset(self):
        verdict = classify_http(failed(Terminal.RESET), controls())
        assert verdict.censored
        assert verdict.evidence == "reset"

    def test_control_reset_is_untestable(self):
        verdict = classify_http(failed(Terminal.RESET), controls(4) + [failed(Terminal.RESET, "c9")])
        assert verdict.verdict == Verdict.UNTESTABLE
        assert verdict.note == "control_reset"

    def test_test_timeout_is_untestable(self):
        verdict = classify_http(failed(Terminal.TIMEOUT), controls())
        assert verdict.verdict == Verdict.UNTESTABLE
        assert verdict.note == "test_timeout"

    def test_status_mismatch_fires_before_redirect_rule(self):
        test = ok(302, b"", location="http://blocked.isp.example/", vantage="t")
        verdict = classify_http(test, controls(3, status=301, body=b"", location="https://www.site.com/"))
        assert verdict.censored
        assert verdict.evidence == "status_mismatch"
        assert verdict.details["consensus_status"] == 301
        assert verdict.details["test_status"] == 302

    def test_redirect_host_comparison_uses_registrable_domain(self):
        control_set = controls(3, status=301, body=b"", location="https://www.site.com/")
        same_site = ok(301, b"", location="https://site.com/home", vantage="t")
        assert classify_http(same_site, control_set).verdict == Verdict.UNCENSORED
        elsewhere = ok(301, b"", location="http://blocked.isp.example/", vantage="t")
        verdict = classify_http(elsewhere, control_set)
        assert verdict.evidence == "redirect_host_mismatch"
        assert verdict.details["redirect_host"] == "blocked.isp.example"

    def test_relative_location_resolves_against_request_domain(self):
        control_set = controls(3, status=302, body=b"", location="/login")
        test = ok(302, b"", location="http://www.example.com/login", vantage="t")
        assert classify_http(test, control_set).verdict == Verdict.UNCENSORED

    def test_redirect_without_location_on_either_side(self):
        verdict = classify_http(ok(302, b"", vantage="t"), controls(status=302, body=b""))
        assert verdict.verdict == Verdict.UNCENSORED
        assert verdict.note == "no_location"

    def test_missing_location_against_controls_that_send_one(self):
        verdict = classify_http(ok(302, b"", vantage="t"),
                                controls(status=302, body=b"", location="http://www.example.com/"))
        assert verdict.censored
        assert verdict.evidence == "redirect_host_mismatch"

    def test_error_with_injected_header_keys(self):
        test = ok(403, b"", keys=("server", "x-censor"), vantage="t")
        verdict = classify_http(test, controls(3, status=403, body=b"", keys=("server", "content-type")))
        assert verdict.censored
        assert verdict.evidence == "header_keys_mismatch"

    def test_two_controls_skip_the_body_test(self):
        verdict = classify_http(ok(vantage="t"), controls(2))
        assert verdict.verdict == Verdict.UNCENSORED
        assert verdict.details["degraded"] is True

    def test_insufficient_or_split_controls(self):
        assert classify_http(ok(vantage="t"), controls(1)).note == "insufficient_controls"
        split = [ok(200, vantage="a"), ok(404, vantage="b")]
        assert classify_http(ok(vantage="t"), split).note == "no_control_consensus"

    def test_classification_is_pure(self):
        test = ok(body=BLOCKPAGE, vantage="t")
        assert classify_http(test, controls()) == classify_http(test, controls())


responses = st.sampled_from([
    ok(vantage="c0"),
    ok(body=ARTICLE + b"<!-- xxxxxxxx -->", vantage="c1"),
    ok(body=ARTICLE + b"<!-- xx -->", vantage="c2"),
    ok(body=BLOCKPAGE, vantage="c3"),
    ok(301, b"", location="https://www.site.com/", vantage="c4"),
    failed(Terminal.TIMEOUT, "c5"),
])


@settings(max_examples=60)
@given(st.lists(responses, min_size=2, max_size=6), st.randoms())
def test_control_order_never_changes_the_verdict(control_list, rnd):
    shuffled = list(control_list)
    rnd.shuffle(shuffled)
    test = ok(body=BLOCKPAGE, vantage="t")
    assert classify_http(test, control_list) == classify_http(test, shuffled)


class TestFetchTerminals:
    def test_wrapped_read_timeout(self, monkeypatch):
        def get(*args, **kwargs):
            raise requests.ConnectionError(ReadTimeoutError(None, "http://93.184.216.34/", "Read timed out."))

        monkeypatch.setattr("probes.http_engine.requests.get", get)
        assert fetch("news.example.com", "93.184.216.34").terminal == Terminal.TIMEOUT

    def test_wrapped_reset(self, monkeypatch):
        def get(*args, **kwargs):
            raise requests.ConnectionError(ConnectionResetError(104, "Connection reset by peer"))

        monkeypatch.setattr("probes.http_engine.requests.get", get)
        assert fetch("news.example.com", "93.184.216.34").terminal == Terminal.RESET

    def test_stalled_body_is_a_timeout(self):
        server = socket.socket()
        server.bind(("127.0.0.1", 0))
        server.listen(1)
        release = threading.Event()

        def serve():
            conn, _ = server.accept()
            with conn:
                conn.recv(4096)
                conn.sendall(b"HTTP/1.1 200 OK\r\nContent-Length: 1000\r\n\r\n<html><body>")
                release.wait(5)

        thread = threading.Thread(target=serve, daemon=True)
        thread.start()
        try:
            record = fetch("news.example.com", "127.0.0.1", timeout=0.5, port=server.getsockname()[1])
        finally:
            release.set()
            thread.join(timeout=5)
            server.close()
        assert record.terminal == Terminal.TIMEOUT
        assert record.status is None


class TestSignatures:
    def test_fixture_file(self):
        signatures = load_signatures(fixture_path("signatures.json"))
        assert [s.id for s in signatures] == ["act", "isp-b", "isp-b"]
        assert match_signature(ok(body=BLOCKPAGE), signatures) == "act"
        redirect = ok(302, b"", location="http://blocked.isp-b.example/", vantage="t")
        assert match_signature(redirect, signatures) == "isp-b"

    def test_reset_record_matches_no_body_signature(self):
        signatures = parse_signatures([{"id": "ISP-A", "body_pattern": "blocked"}])
        assert match_signature(failed(Terminal.RESET), signatures) is None

    def test_first_match_in_file_order_wins(self):
        signatures = parse_signatures([
            {"id": "first", "body_pattern": "blocked as per"},
            {"id": "second", "matcher": {"status": 200}},
        ])
        assert match_signature(ok(body=BLOCKPAGE), signatures) == "first"

    def test_all_present_matchers_must_match(self):
        signatures = parse_signatures([{"id": "x", "status": 451, "body_pattern": "blocked"}])
        assert match_signature(ok(body=BLOCKPAGE), signatures) is None

    @pytest.mark.parametrize("data", [
        {"id": "x"},
        [{"id": "x", "body_pattern": "(unclosed"}],
        [{"id": "x"}],
        [{"matcher": {"status": 200}}],
    ])
    def test_invalid_signature_files(self, data):
        with pytest.raises(SignatureError):
            parse_signatures(data)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(SignatureError):
            load_signatures(str(tmp_path / "missing.json"))


class TestThroughSimulator:
    @pytest.fixture
    def network(self, make_scenario, sim_network):
        http_rules = {}
        for i in range(8):
            http_rules[f"rst-{i}.example.com"] = "rst"
            http_rules[f"page-{i}.example.com"] = {"action": "blockpage"}
            http_rules[f"moved-{i}.example.com"] = {"action": "redirect", "location": "http://blocked.isp.example/"}
            http_rules[f"denied-{i}.example.com"] = {"action": "error", "status": 403,
                                                     "headers": {"x-censor": "1"}}
        origins = {f"site-{i:02d}.example.org": {"length_jitter": 40} for i in range(50)}
        return sim_network(make_scenario(seed=7, http_rules=http_rules, origins=origins), control_count=5)

    def test_fetch_terminals(self, network):
        relay = network.test_vantage()
        clean = fetch("site-00.example.org", "45.1.1.1", relay, timeout=5)
        assert (clean.terminal, clean.status) == (Terminal.OK, 200)
        assert "server" in clean.header_keys
        assert fetch("rst-0.example.com", "45.1.1.1", relay, timeout=5).terminal == Terminal.RESET
        page = fetch("page-0.example.com", "45.1.1.1", relay, timeout=5)
        assert page.status == 200
        assert b"blocked as per orders" in page.body
        moved = fetch("moved-0.example.com", "45.1.1.1", relay, timeout=5)
        assert (moved.status, moved.location) == (302, "http://blocked.isp.example/")

    def test_prober_matches_scenario_oracle(self, network, logger):
        scenario = network.scenario
        prober = HttpProber(network.test_vantage(), network.control_vantages(),
                            signatures=load_signatures(fixture_path("signatures.json")),
                            timeout=5, parallelism=8, logger=logger)
        control_ips = {d: scenario.zone_ips(d) for d in scenario.domains()}
        verdicts, pair_verdicts = prober.probe_domains(control_ips)

        assert prober.stats['fetches'] >= 200
        assert len(pair_verdicts) == len(control_ips)
        censored = {v.domain for v in verdicts if v.censored}
        expected = expected_censored(scenario, control_ips)[Technique.HTTP]
        assert len(expected) == 32
        assert censored == expected

        jittered = [v for v in verdicts if v.domain.startswith("site-")]
        assert len(jittered) == 50
        assert all(v.verdict == Verdict.UNCENSORED for v in jittered)

        by_domain = {v.domain: v for v in verdicts}
        assert by_domain["rst-3.example.com"].evidence == "reset"
        assert by_domain["moved-3.example.com"].evidence == "status_mismatch"
        assert by_domain["denied-3.example.com"].evidence == "status_mismatch"
        assert by_domain["page-3.example.com"].matched_signature == "act"
        assert prober.stats['attributed'] == 8
