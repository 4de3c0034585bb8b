import time
from collections import Counter

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from core.config import DnsChannel
from core.errors import EmptySampleError, InsufficientControlsError
from core.models import (
    DnsErrorCode, DnsObservation, DnsOutcome, OutcomeKind, Technique, Verdict,
)
from probes.dns_engine import (
    BogonList,
    ControlCache,
    ControlIpSet,
    DnsCensorshipDetector,
    DnsProber,
    MrfStat,
    classify_direct,
    compute_mrf,
    detect_tampering,
    is_bogon,
    load_bogons,
    mark_tampered_domains,
    resolve_via_channel,
    tampering_threshold,
)
from simulator.dns_sim import spawn_dns_sim
from simulator.endpoint import CONTROL
from simulator.scenario import expected_censored

BOGONS = load_bogons()


def obs(domain, ips=None, channel="test", error=None):
    if error:
        outcome = DnsOutcome.error(error)
    elif ips is None:
        outcome = DnsOutcome.timeout()
    else:
        outcome = DnsOutcome.answers(ips)
    return DnsObservation(domain, channel, outcome)


def control(domain, *ips):
    return ControlIpSet(domain, frozenset(ips))


def mrf(value, channel="c", size=100):
    return MrfStat(channel, "203.0.113.1", value, size)


class TestClassifyDirect:
    def test_overlap_with_control_is_uncensored(self):
        verdict = classify_direct("a.com", obs("a.com", ["93.184.216.34", "1.2.3.4"]),
                                  control("a.com", "1.2.3.4"), BOGONS)
        assert verdict.verdict == Verdict.UNCENSORED

    def test_nxdomain_is_censored_with_error_evidence(self):
        verdict = classify_direct("a.com", obs("a.com", error=DnsErrorCode.NXDOMAIN),
                                  control("a.com", "1.2.3.4"), BOGONS)
        assert verdict.censored
        assert verdict.evidence == "error"
        assert verdict.details["error_code"] == "NXDOMAIN"

    def test_bogon_answer_is_censored(self):
        verdict = classify_direct("a.com", obs("a.com", ["10.10.34.36"]),
                                  control("a.com", "93.184.216.34"), BOGONS)
        assert verdict.censored
        assert verdict.evidence == "bogon"
        assert verdict.ip == "10.10.34.36"

    def test_unknown_public_answer_is_a_mismatch(self):
        verdict = classify_direct("a.com", obs("a.com", ["8.8.4.4"]),
                                  control("a.com", "93.184.216.34"), BOGONS)
        assert verdict.verdict == Verdict.MISMATCH

    def test_timeout_is_untestable(self):
        verdict = classify_direct("a.com", obs("a.com"), control("a.com", "1.2.3.4"), BOGONS)
        assert verdict.verdict == Verdict.UNTESTABLE

    def test_empty_control_set_is_rejected(self):
        with pytest.raises(ValueError):
            classify_direct("a.com", obs("a.com", ["1.2.3.4"]), control("a.com"), BOGONS)


def test_bogon_list_membership():
    assert is_bogon("192.168.4.1", BOGONS)
    assert is_bogon("100.64.0.9", BOGONS)
    assert not is_bogon("93.184.216.34", BOGONS)
    assert not is_bogon("not-an-ip", BOGONS)
    extra = BOGONS.extend(BogonList(["45.0.0.0/8"]))
    assert "45.1.2.3" in extra and "45.1.2.3" not in BOGONS


class TestMrf:
    def test_modal_ip_and_relative_frequency(self):
        sample = [obs(f"d{i}.com", [ip]) for i, ip in enumerate(["A", "A", "B", "C"])]
        stat = compute_mrf(sample, "test")
        assert stat.most_frequent_ip == "A"
        assert stat.mrf == 0.5
        assert stat.sample_size == 4

    def test_ties_break_lexicographically(self):
        sample = [obs("x.com", ["9.9.9.9"]), obs("y.com", ["1.1.1.1"])]
        assert compute_mrf(sample, "test").most_frequent_ip == "1.1.1.1"

    def test_only_first_listed_ip_of_answers_on_the_channel_counts(self):
        sample = [
            obs("a.com", ["1.1.1.1", "2.2.2.2"]),
            obs("b.com", ["2.2.2.2"]),
            obs("c.com", ["2.2.2.2"], channel="other"),
            obs("d.com", error=DnsErrorCode.NXDOMAIN),
        ]
        stat = compute_mrf(sample, "test")
        assert stat.sample_size == 2
        assert stat.mrf == 0.5

    def test_empty_sample_raises(self):
        with pytest.raises(EmptySampleError):
            compute_mrf([obs("a.com", error=DnsErrorCode.SERVFAIL)], "test")


@settings(max_examples=100, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large])
@given(st.lists(st.sampled_from([f"198.18.0.{i}" for i in range(12)]), min_size=1, max_size=1000))
def test_mrf_matches_brute_force_counter(ips):
    sample = [obs(f"d{i}.com", [ip]) for i, ip in enumerate(ips)]
    stat = compute_mrf(sample, "test")

    counts = {}
    for ip in ips:
        counts[ip] = counts.get(ip, 0) + 1
    best = max(counts.values())
    assert stat.mrf == best / len(ips)
    assert stat.most_frequent_ip == sorted(ip for ip, n in counts.items() if n == best)[0]


class TestTamperingThreshold:
    def test_high_test_mrf_fires(self):
        controls = [mrf(v, f"c{i}") for i, v in enumerate([0.05, 0.06, 0.05, 0.04, 0.05])]
        assert detect_tampering(mrf(0.30, "test"), controls) is True

    def test_sigma_floor_prevents_firing_on_identical_controls(self):
        controls = [mrf(0.05, f"c{i}") for i in range(5)]
        mean, sigma, threshold = tampering_threshold(controls)
        assert mean == pytest.approx(0.05)
        assert sigma == 0.01
        assert threshold == pytest.approx(0.08)
        assert detect_tampering(mrf(0.06, "test"), controls) is False

    def test_small_sample_never_fires(self):
        controls = [mrf(0.05, f"c{i}") for i in range(5)]
        assert detect_tampering(mrf(1.0, "test", size=19), controls) is False

    def test_one_control_is_insufficient(self):
        with pytest.raises(InsufficientControlsError):
            detect_tampering(mrf(0.9, "test"), [mrf(0.1)])

    @given(st.floats(0.01, 1.0), st.floats(0.0, 0.5))
    def test_monotone_in_test_mrf(self, value, bump):
        controls = [mrf(v, f"c{i}") for i, v in enumerate([0.05, 0.07, 0.06])]
        higher = min(1.0, value + bump)
        if detect_tampering(mrf(value, "test"), controls):
            assert detect_tampering(mrf(higher, "test"), controls)


def test_mark_tampered_domains_only_flags_modal_ip_answers():
    test_obs = [obs("a.com", ["6.6.6.6"]), obs("b.com", ["7.7.7.7"])]
    marked = {v.domain: v for v in mark_tampered_domains(["a.com", "b.com"], test_obs, True, "6.6.6.6")}
    assert marked["a.com"].censored and marked["a.com"].evidence == "tampered_ip"
    assert marked["b.com"].verdict == Verdict.UNCENSORED
    assert marked["b.com"].note == "unconfirmed_mismatch"

    untouched = mark_tampered_domains(["a.com"], test_obs, False, "6.6.6.6")
    assert all(not v.censored for v in untouched)


def test_detector_marks_no_control_answer_untestable():
    detector = DnsCensorshipDetector(BOGONS)
    verdicts, report = detector.classify(
        {"a.com": obs("a.com", ["1.2.3.4"])},
        {"a.com": [obs("a.com", error=DnsErrorCode.NXDOMAIN, channel="c1")]},
    )
    assert verdicts[0].verdict == Verdict.UNTESTABLE
    assert verdicts[0].note == "no_control_answer"
    assert report.fired is False


def test_control_cache_expires():
    cache = ControlCache(ttl=0.05)
    observation = obs("a.com", ["1.2.3.4"], channel="c1")
    cache.put(observation)
    assert cache.get("a.com", "c1") is observation
    time.sleep(0.1)
    assert cache.get("a.com", "c1") is None


class TestResolveViaSimulator:
    @pytest.fixture
    def resolver(self, make_scenario):
        scenario = make_scenario(
            zone={"zoned.example.com": ["93.184.216.34", "93.184.216.35"]},
            dns_rules={
                "gone.example.com": "nxdomain",
                "broken.example.com": "servfail",
                "quiet.example.com": "drop",
                "poisoned.example.com": {"action": "fixed_ip", "ip": "103.87.12.240"},
            },
        )
        endpoint = spawn_dns_sim(scenario)
        yield endpoint
        endpoint.stop()

    @pytest.mark.parametrize("kind", ["udp53", "tcp53", "doh"])
    def test_every_transport_returns_zone_answers(self, resolver, kind):
        if kind == "doh":
            channel = DnsChannel("sim", kind, url=resolver.doh_url)
        else:
            host, port = resolver.udp_address if kind == "udp53" else resolver.tcp_address
            channel = DnsChannel("sim", kind, host=host, port=port)
        result = resolve_via_channel("zoned.example.com", channel, timeout=2)
        assert result.outcome.ips == ("93.184.216.34", "93.184.216.35")
        assert resolver.transcript.filter("dns", "query", transport=kind.replace("53", ""))

    def test_error_rules_map_to_error_codes(self, resolver):
        host, port = resolver.udp_address
        channel = DnsChannel("sim", "udp53", host=host, port=port)
        gone = resolve_via_channel("gone.example.com", channel, timeout=2)
        broken = resolve_via_channel("broken.example.com", channel, timeout=2)
        assert gone.outcome.error_code == DnsErrorCode.NXDOMAIN
        assert broken.outcome.error_code == DnsErrorCode.SERVFAIL

    def test_dropped_query_is_a_timeout(self, resolver):
        host, port = resolver.udp_address
        channel = DnsChannel("sim", "udp53", host=host, port=port)
        result = resolve_via_channel("quiet.example.com", channel, timeout=0.3)
        assert result.outcome.kind == OutcomeKind.TIMEOUT


def test_dns_oracle_equivalence(make_scenario, sim_network, logger):
    fixed = "103.87.12.240"
    rules = {}
    for i in range(150):
        rules[f"poisoned-{i:03d}.example.in"] = {"action": "fixed_ip", "ip": fixed}
    for i in range(50):
        rules[f"nx-{i:03d}.example.in"] = "nxdomain"
    for i in range(30):
        rules[f"bogon-{i:03d}.example.in"] = {"action": "bogon", "ip": f"10.10.34.{i + 1}"}
    clean = [f"clean-{i:03d}.example.in" for i in range(270)]
    scenario = make_scenario(dns_rules=rules, origins={d: {} for d in clean})
    domains = sorted(scenario.domains())
    assert len(domains) == 500

    started = time.monotonic()
    network = sim_network(scenario, control_count=5)
    prober = DnsProber(network.test_channel(), network.control_channels(), timeout=2,
                       logger=logger, parallelism=16)
    test_obs, control_obs = prober.collect(domains)
    verdicts, report = DnsCensorshipDetector(load_bogons()).classify(test_obs, control_obs)

    censored = {v.domain for v in verdicts if v.censored}
    assert report.fired
    assert report.test.most_frequent_ip == fixed
    assert censored == set(rules)
    assert censored == expected_censored(scenario, domains)[Technique.DNS]
    assert not censored & set(clean)
    assert time.monotonic() - started < 60


def test_control_resolver_ignores_rules(make_scenario):
    scenario = make_scenario(dns_rules={"gone.example.com": "nxdomain"})
    endpoint = spawn_dns_sim(scenario, role=CONTROL, label="control-0")
    try:
        host, port = endpoint.udp_address
        result = resolve_via_channel("gone.example.com", DnsChannel("c", "udp53", host=host, port=port), 2)
        assert result.outcome.resolved
    finally:
        endpoint.stop()


def test_prober_counts_queries_and_uses_cache(make_scenario, sim_network, logger):
    network = sim_network(make_scenario(origins={"a.example.com": {}}), control_count=3)
    prober = DnsProber(network.test_channel(), network.control_channels(), timeout=2, logger=logger)
    prober.resolve_controls("a.example.com")
    prober.resolve_controls("a.example.com")
    assert prober.stats['queries'] == 3
    assert prober.stats['cache_hits'] == 3
    assert Counter(o.outcome.kind for o in prober.resolve_controls("a.example.com"))[OutcomeKind.ANSWERS] == 3
