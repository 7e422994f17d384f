import argparse
import asyncio
import logging
import os
import sys
from typing import List, Optional

from mavguard.attestor import Decision
from mavguard.config import GATEWAY_MODES, load_config, parse_defines
from mavguard.dsl import SpecError, format_spec, load_spec, parse_spec
from mavguard.gateway import Gateway, load_capture, replay_capture
from mavguard.harness import ScenarioError, ScenarioTimeout, load_scenario, run_matrix, run_scenario
from mavguard.utils import JsonlWriter, list_packaged_scenarios, resolve_spec_path

logger = logging.getLogger("mavguard")

DEFAULT_SPEC = "default.spec"

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


def _config(args):
    try:
        defines = parse_defines(args.define)
    except ValueError as e:
        raise UsageError(str(e)) from None
    overrides = {
        "spec_path": args.spec,
        "defines": defines,
        "log_dir": args.log_dir,
        "default_deny": True if args.default_deny else None,
    }
    return load_config(args.config, overrides)


def _spec(config):
    return load_spec(config.spec_path or DEFAULT_SPEC, config.spec_defines())


def check_spec(args) -> int:
    path = resolve_spec_path(args.spec_file or args.spec or DEFAULT_SPEC)
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        defines = parse_defines(args.define)
    except ValueError as e:
        raise UsageError(str(e)) from None
    try:
        spec = parse_spec(text, defines)
        diagnostics = []
    except SpecError as e:
        spec = None
        diagnostics = e.diagnostics
    for diagnostic in diagnostics:
        print(f"{path}:{diagnostic}")
    print(f"{len(diagnostics)} diagnostics")
    if spec is not None and args.print:
        print(format_spec(spec), end="")
    return EXIT_OK if not diagnostics else EXIT_FAILED


def proxy(args) -> int:
    config = _config(args)
    spec = _spec(config) if args.mode == "gateway+spec" else None
    gateway = Gateway(config, spec, args.mode)
    print(
        f"Gateway ({args.mode}): GCS side {config.gcs_listen}, FCS side {config.fcs_listen} -> {config.fcs_target}, "
        f"logs in {config.log_dir}"
    )
    try:
        asyncio.run(gateway.serve())
    except KeyboardInterrupt:
        print("Stopped.")
    print(gateway.counters.model_dump_json(indent=2))
    return EXIT_OK


def simulate(args) -> int:
    config = _config(args)
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = scenario.model_copy(update={"seed": args.seed})
    spec = _spec(config) if args.mode == "gateway+spec" else None
    report = asyncio.run(run_scenario(scenario, config, spec, args.mode))
    print(report.summary())
    print(f"Report written to {os.path.join(config.log_dir, scenario.name, args.mode.replace('+', '_'))}")
    return EXIT_OK if report.passed else EXIT_FAILED


def matrix(args) -> int:
    config = _config(args)
    scenarios = [load_scenario(name) for name in (args.scenarios or list_packaged_scenarios())]
    if args.seed is not None:
        scenarios = [s.model_copy(update={"seed": args.seed}) for s in scenarios]
    spec = _spec(config) if "gateway+spec" in args.modes else None
    result = asyncio.run(run_matrix(scenarios, config, args.modes, spec))
    print(result.render())
    for report in result.reports:
        if not report.passed:
            print(report.summary())
    return EXIT_OK if result.passed else EXIT_FAILED


def replay(args) -> int:
    config = _config(args)
    spec = _spec(config)
    verdicts = replay_capture(load_capture(args.capture), spec, config)
    writer = JsonlWriter(os.path.join(config.log_dir, "replay-verdicts.jsonl"))
    for index, verdict in enumerate(verdicts):
        writer.append(verdict.to_record(index))
        if verdict.decision == Decision.REJECT:
            print(f"#{index} {verdict.message or verdict.msgid}: {verdict.reason} ({verdict.rule_name})")
    asyncio.run(writer.flush())
    rejected = sum(1 for v in verdicts if v.decision == Decision.REJECT)
    print(f"{len(verdicts)} uplink messages: {len(verdicts) - rejected} accepted, {rejected} rejected")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", default=None, help="Refinement spec file (default: the packaged default.spec).")
    common.add_argument("--define", action="append", default=[], metavar="K=V", help="Override a spec constant.")
    common.add_argument("--config", default=None, help="Gateway config YAML file.")
    common.add_argument("--log-dir", default=None, help="Output directory (falls back to MAVGUARD_LOG_DIR).")
    common.add_argument("--default-deny", action="store_true", help="Reject messages no rule matches.")
    common.add_argument("--seed", type=int, default=None, help="Seed for scenario padding traffic.")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")

    parser = argparse.ArgumentParser(prog="mavguard", description="MAVLink attesting gateway utility commands.")
    subparsers = parser.add_subparsers()

    # Check spec command
    parser_check = subparsers.add_parser("check-spec", parents=[common], help="Parse and validate a spec.")
    parser_check.add_argument("spec_file", nargs="?", default=None)
    parser_check.add_argument("--print", action="store_true", help="Print the spec in canonical form.")
    parser_check.set_defaults(func=check_spec)

    # Proxy command
    parser_proxy = subparsers.add_parser("proxy", parents=[common], help="Run the gateway until interrupted.")
    parser_proxy.add_argument("--mode", choices=GATEWAY_MODES, default="gateway+spec")
    parser_proxy.set_defaults(func=proxy)

    # Simulate command
    parser_simulate = subparsers.add_parser("simulate", parents=[common], help="Run one scenario.")
    parser_simulate.add_argument("--scenario", required=True, help="Scenario name or JSON file.")
    parser_simulate.add_argument("--mode", choices=GATEWAY_MODES, default="gateway+spec")
    parser_simulate.set_defaults(func=simulate)

    # Matrix command
    parser_matrix = subparsers.add_parser("matrix", parents=[common], help="Run scenarios under every mode.")
    parser_matrix.add_argument("--scenarios", nargs="+", default=None, help="Default: every packaged scenario.")
    parser_matrix.add_argument("--modes", nargs="+", choices=GATEWAY_MODES, default=list(GATEWAY_MODES))
    parser_matrix.set_defaults(func=matrix)

    # Replay command
    parser_replay = subparsers.add_parser("replay", parents=[common], help="Attest a recorded capture offline.")
    parser_replay.add_argument("capture", help="capture.jsonl written by the gateway.")
    parser_replay.set_defaults(func=replay)
    return parser


def run_cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    if not hasattr(args, "func"):
        parser.print_help()
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(threadName)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mavguard: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SpecError, ScenarioError) as e:
        print(f"mavguard: {e}", file=sys.stderr)
        return EXIT_FAILED
    except (OSError, ScenarioTimeout) as e:
        print(f"mavguard: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"mavguard: invalid configuration: {e}", file=sys.stderr)
        return EXIT_FAILED


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
