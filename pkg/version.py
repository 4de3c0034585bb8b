# Blockprobe Release
VERSION = "1.0.0"
BUILD_DATE = "2026-10-19"
DESCRIPTION = "Blockprobe - ISP Censorship Measurement Toolkit"

# Bump when report.json changes shape
REPORT_SCHEMA_VERSION = "1.0"

# Features included in this build:
FEATURES = [
    "Corpus Ingestion (plain and CSV source lists)",
    "DNS Censorship Detection (NXDOMAIN, bogon, most-frequent-IP tampering)",
    "TCP/IP Reachability Probing with Retries",
    "HTTP Blockpage Detection (status, length, body, redirect, headers)",
    "Censorship Notice Signatures",
    "TLS 1.3 SNI Filtering Probe",
    "Censoring Network Simulator",
    "Blocklist Overlap and Technique Analysis",
    "Session Logs and Error CSV",
]

NOTES = "Measurement runs are re-analyzable offline from the stored JSON-lines outputs"
