"""
Blockprobe - Blocklist Analytics

Per-ISP blocklists built from verdicts, with collateral censorship removed:
a domain only counts for an ISP when no other censor's notice signature was
matched on it. On top of the blocklists:

- Jaccard overlap matrix between ISPs
- Technique region counts (DNS only, HTTP only, both, ...)
- Domains common to every ISP and exclusive to one
- ISP x technique usage matrix
- Frequency table of the first-listed IP answers (for log-frequency plots)
"""

from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

from core.models import Domain, DnsObservation, ProbeVerdict, Technique, Verdict


@dataclass
class Blocklist:
    isp: str
    per_technique: Dict[Technique, Set[Domain]] = field(default_factory=dict)
    # domain -> foreign signature ids that excluded it
    collateral: Dict[Domain, List[str]] = field(default_factory=dict)

    @property
    def domains(self) -> Set[Domain]:
        return set().union(*self.per_technique.values()) if self.per_technique else set()

    def __len__(self) -> int:
        return len(self.domains)


def signatures_from_verdicts(verdicts: Iterable[ProbeVerdict]) -> Dict[Domain, Set[str]]:
    matched: Dict[Domain, Set[str]] = {}
    for verdict in verdicts:
        if verdict.matched_signature:
            matched.setdefault(verdict.domain, set()).add(verdict.matched_signature)
    return matched


def assemble_blocklist(
    isp: str,
    verdicts: Iterable[ProbeVerdict],
    signatures_matched: Optional[Mapping[Domain, Iterable[str]]] = None,
) -> Blocklist:
    """
    Censored domains of one ISP, excluding collateral censorship.

    Args:
        verdicts: domain-level verdicts of every technique for this ISP
        signatures_matched: domain -> matched signature ids; taken from the
            verdicts when omitted

    Returns:
        Blocklist whose per_technique sets only hold own-mechanism domains
    """
    verdicts = list(verdicts)
    if signatures_matched is None:
        signatures_matched = signatures_from_verdicts(verdicts)

    foreign = {domain: sorted(s for s in set(ids) if s != isp)
               for domain, ids in signatures_matched.items()}
    blocklist = Blocklist(isp, {t: set() for t in Technique})
    for verdict in verdicts:
        if not verdict.censored:
            continue
        if foreign.get(verdict.domain):
            blocklist.collateral[verdict.domain] = foreign[verdict.domain]
            continue
        blocklist.per_technique[verdict.technique].add(verdict.domain)
    return blocklist


SetLike = Union[Blocklist, Set[Domain], frozenset]


def _as_set(value: SetLike) -> Set[Domain]:
    return value.domains if isinstance(value, Blocklist) else set(value)


def jaccard(a: SetLike, b: SetLike) -> float:
    """|a & b| / |a | b|; two empty lists give 1.0"""
    a, b = _as_set(a), _as_set(b)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


@dataclass
class OverlapMatrix:
    isps: List[str]
    cells: List[List[float]]
    # pairs of ISPs whose lists were both empty
    degenerate: List[Tuple[str, str]] = field(default_factory=list)

    def cell(self, a: str, b: str) -> float:
        return self.cells[self.isps.index(a)][self.isps.index(b)]

    def to_dict(self):
        return {
            "isps": self.isps,
            "cells": self.cells,
            "degenerate": [list(pair) for pair in self.degenerate],
        }


def overlap_matrix(blocklists: Sequence[Blocklist]) -> OverlapMatrix:
    if len(blocklists) < 2:
        raise ValueError("overlap matrix needs at least 2 blocklists")
    n = len(blocklists)
    cells = [[1.0] * n for _ in range(n)]
    degenerate = []
    for i, j in combinations(range(n), 2):
        a, b = blocklists[i], blocklists[j]
        cells[i][j] = cells[j][i] = jaccard(a, b)
        if not a.domains and not b.domains:
            degenerate.append((a.isp, b.isp))
    for i, blocklist in enumerate(blocklists):
        if not blocklist.domains:
            degenerate.append((blocklist.isp, blocklist.isp))
    return OverlapMatrix([b.isp for b in blocklists], cells, degenerate)


def _technique_name(technique) -> str:
    return technique.value if isinstance(technique, Technique) else str(technique)


def technique_venn(per_technique: Mapping) -> Dict[str, int]:
    """
    Element counts for every exclusive region of the technique sets.

    Two techniques give {a}_only, {b}_only and both; otherwise singleton
    regions are {t}_only and intersections join names with '+', in the
    mapping's order. Regions with zero elements are included.
    """
    names = [_technique_name(t) for t in per_technique]
    sets = [set(s) for s in per_technique.values()]

    def region_name(members: Tuple[int, ...]) -> str:
        if len(members) == 1:
            return f"{names[members[0]]}_only"
        if len(names) == 2:
            return "both"
        return "+".join(names[i] for i in members)

    regions: Dict[str, int] = {}
    for size in range(1, len(names) + 1):
        for members in combinations(range(len(names)), size):
            regions[region_name(members)] = 0

    for element in set().union(*sets) if sets else set():
        members = tuple(i for i, s in enumerate(sets) if element in s)
        regions[region_name(members)] += 1
    return regions


def common_domains(blocklists: Sequence[Blocklist]) -> Dict:
    """Domains blocked by every ISP, and their share of the union"""
    sets = [b.domains for b in blocklists]
    union = set().union(*sets) if sets else set()
    common = set.intersection(*sets) if sets else set()
    return {
        "domains": sorted(common),
        "count": len(common),
        "union_count": len(union),
        "share": len(common) / len(union) if union else 0.0,
    }


def exclusive_domains(blocklists: Sequence[Blocklist]) -> Dict[str, List[Domain]]:
    """Per ISP, the domains no other ISP blocks"""
    counts = Counter(d for b in blocklists for d in b.domains)
    return {b.isp: sorted(d for d in b.domains if counts[d] == 1) for b in blocklists}


def technique_matrix(blocklists: Sequence[Blocklist]) -> Dict[str, Dict[str, bool]]:
    return {b.isp: {t.value: bool(b.per_technique.get(t)) for t in Technique} for b in blocklists}


def mrf_frequency_table(observations: Iterable[DnsObservation]) -> List[Tuple[str, int]]:
    """(IP, count) of first-listed answers, descending count, ties by IP"""
    counts = Counter(obs.first_ip for obs in observations if obs.outcome.resolved)
    return sorted(counts.items(), key=lambda item: (-item[1], item[0]))


def verdict_counts(verdicts: Iterable[ProbeVerdict]) -> Dict[str, Dict[str, int]]:
    """technique -> {censored, uncensored, untestable} counts"""
    counts = {t.value: {v.value: 0 for v in (Verdict.CENSORED, Verdict.UNCENSORED, Verdict.UNTESTABLE)}
              for t in Technique}
    for verdict in verdicts:
        if verdict.verdict in (Verdict.CENSORED, Verdict.UNCENSORED, Verdict.UNTESTABLE):
            counts[verdict.technique.value][verdict.verdict.value] += 1
    return counts
