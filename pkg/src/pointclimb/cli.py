"""``pointclimb`` command line: sample, run, report, verify.

Exit codes: 0 success, 1 run or verification failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .exceptions import ConfigError, InvalidArgumentError
from .experiment import ExperimentConfig, emit_report, load_manifests, run_benchmark, verify_bundle
from .sampler import SamplerConfig, build_scenario

EXIT_OK, EXIT_RUN_FAILURE, EXIT_CONFIG = 0, 1, 2


def _csv(kind):
    def parse(text):
        return [kind(x) for x in text.split(",") if x]
    return parse


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser():
    p = argparse.ArgumentParser(prog="pointclimb", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="draw a veristic scenario and write it as JSON")
    s.add_argument("--tc", type=int, required=True, help="total number of classes")
    s.add_argument("--low", type=int, required=True, help="minimum classes per task")
    s.add_argument("--high", type=int, required=True, help="maximum classes per task")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output file (default: stdout)")

    r = sub.add_parser("run", help="run every (backbone, loss, seed) of a config")
    r.add_argument("config", help="experiment config (JSON)")
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--backbones", type=_csv(str))
    r.add_argument("--losses", type=_csv(str))
    r.add_argument("--seeds", type=_csv(int))
    r.add_argument("--workers", type=int)
    r.add_argument("--profile", choices=["desk", "full"])
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="train override, e.g. --set epochs=5 --set loss.tau=4")

    rep = sub.add_parser("report", help="re-aggregate the run manifests of an output directory")
    rep.add_argument("run_dir")
    rep.add_argument("--out", help="where to write the report (default: run_dir)")
    rep.add_argument("--sample-std", action="store_true")

    v = sub.add_parser("verify", help="check the invariants of a results bundle")
    v.add_argument("run_dir")
    return p


def _apply_overrides(doc, args):
    for key in ("backbones", "losses", "seeds", "workers", "profile"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    if args.out:
        doc["output_dir"] = args.out
    train = doc.setdefault("train", {})
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        if key.startswith("loss."):
            train.setdefault("loss", {})[key[5:]] = _parse_value(value)
        else:
            train[key] = _parse_value(value)
    return doc


def cmd_sample(args):
    scenario = build_scenario(SamplerConfig(args.tc, args.low, args.high, args.seed))
    if args.out:
        scenario.save(args.out)
    else:
        print(json.dumps(scenario.to_dict(), indent=2))
    return EXIT_OK


def cmd_run(args):
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
    config = ExperimentConfig.from_dict(_apply_overrides(doc, args)).check_ready()
    manifests, failures = run_benchmark(config)
    for name, err in failures.items():
        print(f"run {name} failed: {err}", file=sys.stderr)
    print(f"{len(manifests)} run(s) completed, {len(failures)} failed; results in {config.output_dir}")
    return EXIT_RUN_FAILURE if failures else EXIT_OK


def cmd_report(args):
    manifests = load_manifests(args.run_dir)
    _, written = emit_report(manifests, args.out or args.run_dir, sample_std=args.sample_std)
    with open(written["table"]) as fh:
        print(fh.read(), end="")
    return EXIT_OK


def cmd_verify(args):
    problems = verify_bundle(args.run_dir)
    for p in problems:
        print(f"FAIL {p}")
    if not problems:
        print("OK results bundle is consistent")
    return EXIT_RUN_FAILURE if problems else EXIT_OK


COMMANDS = {"sample": cmd_sample, "run": cmd_run, "report": cmd_report, "verify": cmd_verify}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
