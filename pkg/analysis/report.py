"""
Blockprobe - Report Emission

Turns the stored outputs of one or more per-ISP runs into the JSON report and
the CSV summary. Reports carry no timestamps and every collection is sorted,
so re-running analyze over the same stored outputs gives identical bytes.
"""

import csv
import io
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from core.errors import ConfigError
from core.models import DnsObservation, ProbeVerdict, Technique, Verdict
from core.records import load_records
from analysis.blocklists import (
    Blocklist,
    assemble_blocklist,
    common_domains,
    exclusive_domains,
    mrf_frequency_table,
    overlap_matrix,
    technique_matrix,
    technique_venn,
    verdict_counts,
)
from version import REPORT_SCHEMA_VERSION

REPORT_FORMATS = ("json", "csv")
SUMMARY_HEADER = ["isp", "technique", "censored_count", "untestable_count"]
FREQUENCY_HEADER = ["channel", "ip", "count"]

# File names inside <output_dir>/<isp>/
DOMAINS_FILE = "domains.txt"
DNS_OBSERVATIONS_FILE = "dns_observations.jsonl"
HTTP_RESPONSES_FILE = "http_responses.jsonl"
TCP_RESULTS_FILE = "tcp_results.jsonl"
SNI_OUTCOMES_FILE = "sni_outcomes.jsonl"
TAMPERING_FILE = "tampering.json"


def verdicts_file(technique: Technique) -> str:
    return f"verdicts_{technique.value}.jsonl"


@dataclass
class IspRunData:
    """Everything one ISP's measurement left behind"""

    isp: str
    verdicts: List[ProbeVerdict] = field(default_factory=list)
    techniques: List[Technique] = field(default_factory=list)
    dns_observations: List[DnsObservation] = field(default_factory=list)
    tampering: Optional[Dict[str, Any]] = None
    domains_probed: int = 0

    def verdicts_for(self, technique: Technique) -> List[ProbeVerdict]:
        return [v for v in self.verdicts if v.technique == technique]

    @property
    def untestable_count(self) -> int:
        return sum(v.verdict == Verdict.UNTESTABLE for v in self.verdicts)


@dataclass
class RunData:
    isps: List[IspRunData] = field(default_factory=list)

    @property
    def untestable_count(self) -> int:
        return sum(isp.untestable_count for isp in self.isps)


def _evidence(verdicts: Iterable[ProbeVerdict], blocklist: Blocklist) -> List[Dict[str, Any]]:
    """Per blocklisted (domain, technique): what fired and where"""
    entries = []
    for verdict in sorted(verdicts, key=ProbeVerdict.sort_key):
        if not verdict.censored or verdict.domain not in blocklist.per_technique.get(verdict.technique, ()):
            continue
        entries.append({
            "domain": verdict.domain,
            "technique": verdict.technique.value,
            "evidence": verdict.evidence,
            "rule_fired": verdict.details.get("rule_fired"),
            "ip": verdict.ip,
            "signature": verdict.matched_signature,
        })
    return entries


def _isp_section(data: IspRunData) -> Tuple[Blocklist, Dict[str, Any]]:
    blocklist = assemble_blocklist(data.isp, data.verdicts)
    counts = verdict_counts(data.verdicts)
    techniques = data.techniques or sorted({v.technique for v in data.verdicts}, key=list(Technique).index)
    venn_sets = {t: blocklist.per_technique.get(t, set()) for t in techniques}

    section = {
        "isp": data.isp,
        "domains_probed": data.domains_probed,
        "techniques": [t.value for t in techniques],
        "blocked_count": len(blocklist),
        "blocklist": sorted(blocklist.domains),
        "per_technique": {t.value: sorted(blocklist.per_technique.get(t, ())) for t in techniques},
        "counts": {t.value: counts[t.value] for t in techniques},
        "untestable_count": data.untestable_count,
        "venn": technique_venn(venn_sets) if techniques else {},
        "tampering": data.tampering,
        "collateral": {d: ids for d, ids in sorted(blocklist.collateral.items())},
        "evidence": _evidence(data.verdicts, blocklist),
    }
    return blocklist, section


def build_report(run: RunData) -> Dict[str, Any]:
    """Report dict with a stable key order"""
    blocklists: List[Blocklist] = []
    sections = []
    for data in sorted(run.isps, key=lambda d: d.isp):
        blocklist, section = _isp_section(data)
        blocklists.append(blocklist)
        sections.append(section)

    report: Dict[str, Any] = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "isps": sections,
        "total_blocked": len(set().union(*(b.domains for b in blocklists))) if blocklists else 0,
        "overlap": overlap_matrix(blocklists).to_dict() if len(blocklists) >= 2 else None,
        "common": common_domains(blocklists),
        "exclusive": exclusive_domains(blocklists),
        "technique_matrix": technique_matrix(blocklists),
    }
    return report


def report_to_csv(report: Dict[str, Any]) -> bytes:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SUMMARY_HEADER)
    for section in report["isps"]:
        # blocklist size, collateral excluded
        for technique, counts in section["counts"].items():
            blocked = section["per_technique"].get(technique, [])
            writer.writerow([section["isp"], technique, len(blocked), counts["untestable"]])
    return buffer.getvalue().encode("utf-8")


def emit_report(run: RunData, format: str = "json") -> bytes:
    """
    Serialize the report of a run.

    Args:
        run: loaded or freshly collected run data
        format: 'json' for the full report, 'csv' for the count summary

    Returns:
        UTF-8 bytes
    """
    if format not in REPORT_FORMATS:
        raise ConfigError(f"unknown report format '{format}' (use one of {', '.join(REPORT_FORMATS)})")
    report = build_report(run)
    if format == "csv":
        return report_to_csv(report)
    return (json.dumps(report, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def frequency_rows(run: RunData) -> List[Tuple[str, str, int]]:
    """(channel, ip, count) for every channel's first-listed answers"""
    rows = []
    for data in sorted(run.isps, key=lambda d: d.isp):
        channels = sorted({obs.channel for obs in data.dns_observations})
        for channel in channels:
            table = mrf_frequency_table(o for o in data.dns_observations if o.channel == channel)
            rows.extend((channel, ip, count) for ip, count in table)
    return rows


def write_frequency_csv(run: RunData, path: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(FREQUENCY_HEADER)
        writer.writerows(frequency_rows(run))
    return path


def write_report(run: RunData, output_dir: str) -> Dict[str, str]:
    """Write report.json, summary.csv and ip_frequencies.csv; returns their paths"""
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        "report": os.path.join(output_dir, "report.json"),
        "summary": os.path.join(output_dir, "summary.csv"),
        "frequencies": os.path.join(output_dir, "ip_frequencies.csv"),
    }
    with open(paths["report"], "wb") as f:
        f.write(emit_report(run, "json"))
    with open(paths["summary"], "wb") as f:
        f.write(emit_report(run, "csv"))
    write_frequency_csv(run, paths["frequencies"])
    return paths


def load_isp_run(isp_dir: str, isp: Optional[str] = None) -> IspRunData:
    data = IspRunData(isp or os.path.basename(os.path.normpath(isp_dir)))
    for technique in Technique:
        path = os.path.join(isp_dir, verdicts_file(technique))
        if not os.path.exists(path):
            continue
        data.techniques.append(technique)
        data.verdicts.extend(load_records(path, ProbeVerdict.from_dict))

    # dns observations hold both sides; frequency tables use every channel
    observations_path = os.path.join(isp_dir, DNS_OBSERVATIONS_FILE)
    data.dns_observations = load_records(observations_path, DnsObservation.from_dict)

    tampering_path = os.path.join(isp_dir, TAMPERING_FILE)
    if os.path.exists(tampering_path):
        with open(tampering_path, "r", encoding="utf-8") as f:
            data.tampering = json.load(f)

    domains_path = os.path.join(isp_dir, DOMAINS_FILE)
    if os.path.exists(domains_path):
        with open(domains_path, "r", encoding="utf-8") as f:
            data.domains_probed = sum(1 for line in f if line.strip())
    return data


def load_run(output_dir: str, isps: Optional[Sequence[str]] = None) -> RunData:
    """Rebuild run data from the per-ISP directories under output_dir"""
    if not os.path.isdir(output_dir):
        raise ConfigError(f"output directory {output_dir} does not exist")
    if isps is None:
        isps = sorted(
            name for name in os.listdir(output_dir)
            if os.path.isdir(os.path.join(output_dir, name))
            and any(os.path.exists(os.path.join(output_dir, name, verdicts_file(t))) for t in Technique)
        )
    return RunData([load_isp_run(os.path.join(output_dir, isp), isp) for isp in isps])
