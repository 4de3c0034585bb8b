"""
Blockprobe - Main Interface

Command-line interface for measurement runs against real networks or the
built-in censoring network simulator.

Subcommands:
- ingest       extract and liveness-filter the domain corpus
- probe-dns    DNS censorship detection (NXDOMAIN, bogon, tampering)
- probe-tcp    TCP/IP reachability with retries
- probe-http   HTTP blockpage detection
- probe-sni    TLS SNI filtering via reflectors
- analyze      rebuild the report from stored probe outputs
- simulate     serve scenario endpoints until interrupted
- full         everything above, end to end

Exit codes: 0 success, 1 configuration error, 2 runtime error,
3 completed with Untestable verdicts.
"""

import argparse
import os
import sys
import threading
from contextlib import ExitStack
from typing import Dict, List, Optional, Sequence

# Add current directory to path for imports
current_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.append(current_dir)

from core.config import SUBCOMMANDS, RunConfig, parse_ports
from core.diagnostics import ProbeLogger
from core.errors import ConfigError
from probes.pipeline import STAGES, MeasurementPipeline, scenario_corpus_entries
from analysis.report import RunData, load_run, write_report
from simulator.network import SimulatedNetwork
from simulator.scenario import CensorScenario, load_scenario_file
from version import DESCRIPTION, VERSION

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_UNTESTABLE = 3

SUBCOMMAND_STAGES = {
    "ingest": ["ingest"],
    "probe-dns": ["dns"],
    "probe-tcp": ["tcpip"],
    "probe-http": ["http"],
    "probe-sni": ["sni"],
    "full": list(STAGES),
}


class _ArgumentParser(argparse.ArgumentParser):
    """Bad flags are configuration errors (exit 1), not argparse's exit 2"""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="blockprobe", description=DESCRIPTION)
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON config file (overrides flags)")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--isp")
    parser.add_argument("--corpus", dest="corpus_path")
    parser.add_argument("--format", dest="corpus_format", choices=["plain", "csv"])
    parser.add_argument("--scenario", dest="scenario_paths", action="append",
                        help="scenario file, repeat for several ISPs")
    parser.add_argument("--controls", dest="control_count", type=int,
                        help="simulated control endpoint sets")
    parser.add_argument("--signatures", dest="signatures_path")
    parser.add_argument("--test-channel", dest="test_channel", help="id=kind:address")
    parser.add_argument("--control-channel", dest="control_channels", action="append",
                        help="id=kind:address, repeatable")
    parser.add_argument("--test-vantage", dest="test_vantage", help="id=local or id=relay:host:port")
    parser.add_argument("--vantage", dest="control_vantages", action="append",
                        help="control vantage id=relay:host:port, repeatable")
    parser.add_argument("--reflector", dest="test_reflector", help="host:port")
    parser.add_argument("--control-reflector", dest="control_reflector",
                        help="host:port reached through the control vantage (default: --reflector)")
    parser.add_argument("--retries", dest="tcp_retries", type=int)
    parser.add_argument("--retry-delay", dest="tcp_retry_delay", type=float, help="seconds")
    parser.add_argument("--ports", dest="tcp_ports", type=parse_ports, help="e.g. 80,443")
    parser.add_argument("--sni-retries", dest="sni_retries", type=int)
    parser.add_argument("--max-ips", dest="max_ips_per_domain", type=int)
    parser.add_argument("--channel-rate", dest="channel_rate", type=float,
                        help="max DNS queries per second per channel (0 = unlimited)")
    parser.add_argument("--host-rate", dest="host_rate", type=float,
                        help="max HTTP fetches per second per target IP (0 = unlimited)")
    parser.add_argument("--parallelism", type=int)
    parser.add_argument("--quiet", action="store_true", help="log to file only")
    return parser


class BlockprobeCLI:
    """Runs one subcommand and maps its outcome to an exit code"""

    def __init__(self, echo: bool = True, stop_event: Optional[threading.Event] = None):
        self.echo = echo
        self.stop_event = stop_event or threading.Event()
        self.logger: Optional[ProbeLogger] = None

    def say(self, message: str):
        if self.echo:
            print(message)

    def show_progress(self, completed: int, total: int, current_item: str = ""):
        """Console line every tenth of an operation"""
        if total <= 0:
            return
        step = max(1, total // 10)
        if completed == total or completed % step == 0:
            self.say(f"   ⏳ {completed}/{total} ({completed * 100 // total}%) {current_item}")

    def run(self, subcommand: str, config: RunConfig) -> int:
        """
        Execute a subcommand.

        Args:
            subcommand: one of SUBCOMMANDS
            config: fully loaded RunConfig

        Returns:
            process exit code
        """
        try:
            warnings = config.validate(subcommand)
        except ConfigError as e:
            self.say(f"❌ Configuration error: {e}")
            return EXIT_CONFIG

        os.makedirs(config.output_dir, exist_ok=True)
        self.logger = ProbeLogger(config.output_dir, echo=self.echo)
        self.logger.set_progress_callback(self.show_progress)
        for key, value in config.describe().items():
            self.logger.log_config(key, value)
        for warning in warnings:
            self.logger.log_warning(warning)

        try:
            if subcommand == "analyze":
                run = self.analyze(config)
            elif subcommand == "simulate":
                self.simulate(config)
                return EXIT_OK
            elif subcommand == "full" and config.scenario_paths:
                run = self.full_simulated(config)
            else:
                run = self.measure(subcommand, config)
        except ConfigError as e:
            self.logger.log_error(str(e), subcommand, "Configuration")
            self.say(f"❌ Configuration error: {e}")
            return EXIT_CONFIG
        except Exception as e:
            self.logger.log_error(str(e), subcommand, type(e).__name__)
            self.say(f"❌ {subcommand} failed: {e}")
            return EXIT_RUNTIME
        finally:
            self.logger.save_session()

        if run is not None and run.untestable_count:
            self.say(f"⚠️  Completed with {run.untestable_count} untestable verdicts")
            return EXIT_UNTESTABLE
        self.say("✅ Done")
        return EXIT_OK

    def measure(self, subcommand: str, config: RunConfig) -> Optional[RunData]:
        """Probe subcommands and full against a real network"""
        self.say(f"\n🔎 {subcommand.upper()} - {config.isp}")
        self.say("-" * 40)
        pipeline = MeasurementPipeline(config, self.logger)
        isp_run = pipeline.run(SUBCOMMAND_STAGES[subcommand])
        self._print_stats(pipeline.stats)

        if subcommand == "ingest":
            return None
        if subcommand == "full":
            return self._report(config, [config.isp])
        return RunData([isp_run])

    def full_simulated(self, config: RunConfig) -> RunData:
        """full against one SimulatedNetwork per scenario"""
        scenarios = self._load_scenarios(config.scenario_paths)
        isps = []
        for scenario in scenarios:
            self.say(f"\n🧪 SIMULATED ISP: {scenario.isp}")
            self.say("-" * 40)
            with SimulatedNetwork(scenario, config.control_count, self.logger) as network:
                isp_config = network.run_config(config)
                entries = None
                if not config.corpus_path:
                    urls = scenario.corpus or [f"http://{d}/" for d in sorted(scenario.domains())]
                    entries = scenario_corpus_entries(urls)
                pipeline = MeasurementPipeline(isp_config, self.logger)
                pipeline.run(STAGES, entries)
                self._print_stats(pipeline.stats)
            isps.append(scenario.isp)
        return self._report(config, isps)

    def analyze(self, config: RunConfig) -> RunData:
        self.say(f"\n📊 ANALYZE {config.output_dir}")
        self.say("-" * 40)
        return self._report(config, None)

    def simulate(self, config: RunConfig):
        """Serve every scenario's endpoints until interrupted"""
        scenarios = self._load_scenarios(config.scenario_paths)
        with ExitStack() as stack:
            for scenario in scenarios:
                network = stack.enter_context(
                    SimulatedNetwork(scenario, config.control_count, self.logger))
                self.say(f"\n🧪 {scenario.isp}")
                for key, value in network.describe().items():
                    self.say(f"   {key}: {value}")
            self.say("\n⏳ Serving. Press Ctrl+C to stop.")
            try:
                self.stop_event.wait()
            except KeyboardInterrupt:
                self.say("\n👋 Stopping simulator...")

    def _load_scenarios(self, paths: Sequence[str]) -> List[CensorScenario]:
        scenarios = [load_scenario_file(path) for path in paths]
        names = [s.isp for s in scenarios]
        if len(set(names)) != len(names):
            raise ConfigError(f"scenario ISP names must be unique: {names}")
        return scenarios

    def _report(self, config: RunConfig, isps: Optional[List[str]]) -> RunData:
        run = load_run(config.output_dir, isps)
        if not run.isps:
            raise ConfigError(f"no probe outputs under {config.output_dir}")
        paths = write_report(run, config.output_dir)
        for section in sorted(run.isps, key=lambda d: d.isp):
            blocked = {v.domain for v in section.verdicts if v.censored}
            self.say(f"   {section.isp}: {len(blocked)} domains with censored verdicts, "
                     f"{section.untestable_count} untestable")
        for name, path in paths.items():
            self.say(f"📄 {name}: {path}")
        return run

    def _print_stats(self, stats: Dict[str, Dict]):
        self.say("\n📊 STATISTICS:")
        for stage, values in stats.items():
            rendered = ", ".join(f"{k}={v}" for k, v in values.items() if not isinstance(v, dict))
            self.say(f"   {stage}: {rendered}")


def config_from_args(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    flags = {k: v for k, v in vars(args).items() if k not in ("subcommand", "config", "quiet")}
    return RunConfig.load(flags, args.config, environ)


def main(argv: Optional[Sequence[str]] = None, environ: Optional[Dict[str, str]] = None) -> int:
    """Main entry point"""
    try:
        args = build_parser().parse_args(argv)
        config = config_from_args(args, environ)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG

    cli = BlockprobeCLI(echo=not args.quiet)
    try:
        return cli.run(args.subcommand, config)
    except KeyboardInterrupt:
        print("\n\n👋 Exiting Blockprobe...")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
