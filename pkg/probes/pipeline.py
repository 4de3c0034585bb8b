"""
Blockprobe - Measurement Pipeline

Chains the probe modules for one ISP: corpus ingestion with liveness
filtering, then DNS, TCP/IP, HTTP and SNI probing. Every stage persists its
outputs under <output_dir>/<isp>/ as it goes, so a later stage (or the
offline analyze step) can pick up from what is on disk.
"""

import json
import os
from typing import Dict, Iterable, List, Optional, Sequence, Set

from core.config import RunConfig
from core.diagnostics import ProbeLogger
from core.errors import ConfigError
from core.models import Domain, ProbeVerdict, Technique
from core.records import JsonLinesWriter
from probes.corpus import CorpusIngestor, SourceEntry, read_domain_list
from probes.dns_engine import DnsCensorshipDetector, DnsProber, load_bogons
from probes.http_engine import HttpProber, load_signatures
from probes.sni_probe import SniProber
from probes.tcp_probe import TcpProber
from analysis.report import (
    DNS_OBSERVATIONS_FILE,
    DOMAINS_FILE,
    HTTP_RESPONSES_FILE,
    SNI_OUTCOMES_FILE,
    TAMPERING_FILE,
    TCP_RESULTS_FILE,
    IspRunData,
    load_isp_run,
    verdicts_file,
)

STAGES = ("ingest", "dns", "tcpip", "http", "sni")
INPUT_UNTESTABLE_FILE = "input_untestable.jsonl"


def pair_verdicts_file(technique: Technique) -> str:
    return f"pair_verdicts_{technique.value}.jsonl"


class MeasurementPipeline:
    """Runs the requested probe stages for the ISP named in the config"""

    def __init__(self, config: RunConfig, logger: Optional[ProbeLogger] = None):
        self.config = config
        self.logger = logger or ProbeLogger()
        self.isp_dir = os.path.join(config.output_dir, config.isp)
        self._dns_prober: Optional[DnsProber] = None
        self._control_ips: Optional[Dict[Domain, Set[str]]] = None
        self.stats: Dict[str, Dict] = {}

    def path(self, name: str) -> str:
        return os.path.join(self.isp_dir, name)

    @property
    def dns_prober(self) -> DnsProber:
        """One prober per pipeline so control answers are cached across stages"""
        if self._dns_prober is None:
            self._dns_prober = DnsProber(
                self.config.test_channel,
                self.config.control_channels,
                timeout=self.config.dns_timeout,
                logger=self.logger,
                parallelism=self.config.parallelism,
                channel_rate=self.config.channel_rate,
                cache_ttl=self.config.control_cache_ttl,
            )
        return self._dns_prober

    def run(self, stages: Sequence[str], corpus_entries: Optional[List[SourceEntry]] = None) -> IspRunData:
        """
        Run stages in pipeline order.

        Args:
            stages: subset of STAGES
            corpus_entries: source entries to ingest instead of the corpus file

        Returns:
            IspRunData loaded back from the ISP's output directory
        """
        unknown = set(stages) - set(STAGES)
        if unknown:
            raise ConfigError(f"unknown stage(s): {', '.join(sorted(unknown))}")
        os.makedirs(self.isp_dir, exist_ok=True)
        self.logger.log_info(f"Measuring {self.config.isp} -> {self.isp_dir}")

        domains: Optional[List[Domain]] = None
        if "ingest" in stages:
            domains = self.ingest(corpus_entries)
        for stage in STAGES[1:]:
            if stage not in stages:
                continue
            if domains is None:
                domains = self.load_domains()
            getattr(self, f"probe_{stage}")(domains)

        return load_isp_run(self.isp_dir, self.config.isp)

    def load_domains(self) -> List[Domain]:
        path = self.path(DOMAINS_FILE)
        if not os.path.exists(path):
            raise ConfigError(f"no domain list at {path}; run ingest first")
        return read_domain_list(path)

    def ingest(self, corpus_entries: Optional[List[SourceEntry]] = None) -> List[Domain]:
        ingestor = CorpusIngestor(self.logger)
        if corpus_entries is not None:
            self.logger.start_operation("Corpus Ingestion")
            result = ingestor.ingest_entries(corpus_entries)
            self.logger.complete_operation()
        elif self.config.corpus_path:
            result = ingestor.ingest_file(self.config.corpus_path, self.config.corpus_format)
        else:
            raise ConfigError("ingest needs a corpus file or scenario corpus")

        live = ingestor.check_liveness(result.domains, self.dns_prober.control_outcomes)
        ingestor.write_domain_list(result, self.isp_dir, live)

        writer = JsonLinesWriter(self.path(INPUT_UNTESTABLE_FILE), truncate=True)
        writer.extend(v.to_dict() for v in sorted(ingestor.untestable, key=ProbeVerdict.sort_key))
        self.stats['ingest'] = dict(ingestor.stats)
        return sorted(live)

    def control_ips(self, domains: Iterable[Domain]) -> Dict[Domain, Set[str]]:
        if self._control_ips is None:
            self._control_ips = {}
        for domain in domains:
            if domain not in self._control_ips:
                self._control_ips[domain] = set(self.dns_prober.control_ip_set(domain).ips)
        return self._control_ips

    def _write_verdicts(self, technique: Technique, verdicts: Sequence[ProbeVerdict],
                        pair_verdicts: Sequence[ProbeVerdict] = ()):
        writer = JsonLinesWriter(self.path(verdicts_file(technique)), truncate=True)
        writer.extend(v.to_dict() for v in sorted(verdicts, key=ProbeVerdict.sort_key))
        if pair_verdicts:
            writer = JsonLinesWriter(self.path(pair_verdicts_file(technique)), truncate=True)
            writer.extend(v.to_dict() for v in pair_verdicts)

        counts: Dict[str, int] = {}
        for verdict in verdicts:
            counts[verdict.verdict.value] = counts.get(verdict.verdict.value, 0) + 1
        self.stats.setdefault(technique.value, {}).update(counts)
        self.logger.log_info(f"{technique.value} verdicts: {dict(sorted(counts.items()))}")

    def probe_dns(self, domains: List[Domain]) -> List[ProbeVerdict]:
        if self.config.test_channel is None:
            raise ConfigError("DNS probing needs a test channel")
        bogons = load_bogons(self.config.bogons_path)

        test_obs, control_obs = self.dns_prober.collect(domains)
        writer = JsonLinesWriter(self.path(DNS_OBSERVATIONS_FILE), truncate=True)
        for domain in sorted(test_obs):
            writer.append(test_obs[domain].to_dict())
            writer.extend(obs.to_dict() for obs in control_obs[domain])

        thresholds = self.config.thresholds
        detector = DnsCensorshipDetector(bogons, thresholds.sigma_mult,
                                         thresholds.sigma_floor_dns, thresholds.min_dprime)
        verdicts, report = detector.classify(test_obs, control_obs)
        with open(self.path(TAMPERING_FILE), "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)

        self.logger.log_info(f"Tampering analysis: {report.reason}")
        for verdict in verdicts:
            self.logger.log_probe("dns", verdict.domain, verdict.verdict.value, verdict.evidence or verdict.note or "")
        self.stats['dns'] = dict(self.dns_prober.stats)
        self._write_verdicts(Technique.DNS, verdicts)
        return verdicts

    def probe_tcpip(self, domains: List[Domain]) -> List[ProbeVerdict]:
        if not self.config.control_vantages:
            raise ConfigError("TCP probing needs a control vantage")
        prober = TcpProber(
            self.config.test_vantage,
            self.config.control_vantages,
            ports=self.config.tcp_ports,
            retries=self.config.tcp_retries,
            retry_delay=self.config.tcp_retry_delay,
            timeout=self.config.tcp_timeout,
            ping_count=self.config.ping_count,
            ping_timeout=self.config.ping_timeout,
            max_ips_per_domain=self.config.max_ips_per_domain,
            parallelism=self.config.parallelism,
            logger=self.logger,
            writer=JsonLinesWriter(self.path(TCP_RESULTS_FILE), truncate=True),
        )
        verdicts, pair_verdicts = prober.probe_domains(self.control_ips(domains))
        self.stats['tcpip'] = dict(prober.stats)
        self._write_verdicts(Technique.TCPIP, verdicts, pair_verdicts)
        return verdicts

    def http_prober(self) -> HttpProber:
        signatures = load_signatures(self.config.signatures_path) if self.config.signatures_path else []
        thresholds = self.config.thresholds
        return HttpProber(
            self.config.test_vantage,
            self.config.control_vantages,
            signatures=signatures,
            timeout=self.config.http_timeout,
            port=self.config.http_port,
            sigma_mult=thresholds.sigma_mult,
            sigma_floor_len=thresholds.sigma_floor_len,
            sigma_floor_cos=thresholds.sigma_floor_cos,
            max_ips_per_domain=self.config.max_ips_per_domain,
            parallelism=self.config.parallelism,
            host_rate=self.config.host_rate,
            logger=self.logger,
            writer=JsonLinesWriter(self.path(HTTP_RESPONSES_FILE), truncate=True),
        )

    def probe_http(self, domains: List[Domain]) -> List[ProbeVerdict]:
        prober = self.http_prober()
        verdicts, pair_verdicts = prober.probe_domains(self.control_ips(domains))
        self.stats['http'] = dict(prober.stats)
        self._write_verdicts(Technique.HTTP, verdicts, pair_verdicts)
        return verdicts

    def probe_sni(self, domains: List[Domain]) -> List[ProbeVerdict]:
        if self.config.test_reflector is None:
            raise ConfigError("SNI probing needs a reflector")
        prober = SniProber(
            self.config.test_reflector,
            self.config.control_reflector,
            control_vantage=self.config.sni_control_vantage(),
            timeout=self.config.sni_timeout,
            retries=self.config.sni_retries,
            parallelism=self.config.sni_parallelism,
            logger=self.logger,
            writer=JsonLinesWriter(self.path(SNI_OUTCOMES_FILE), truncate=True),
        )
        verdicts = prober.probe_domains(domains)
        self.stats['sni'] = dict(prober.stats)
        self._write_verdicts(Technique.SNI, verdicts)
        return verdicts


def scenario_corpus_entries(urls: Iterable[str]) -> List[SourceEntry]:
    return [SourceEntry(url, source_id="scenario") for url in urls]
