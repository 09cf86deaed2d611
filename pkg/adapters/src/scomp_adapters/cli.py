"""Command line entry for the stage adapters.

Two invocation shapes serve the same job-directory contract:

    scomp-adapter JOB_DIR                    stage read from manifest.json
    scomp-adapter STAGE [options] JOB_DIR    stage named explicitly

The first is what the pipeline engine uses: it prepares the directory,
writes the manifest and runs the adapter with a single argument.  The
second suits debugging by hand.  A third form materializes the canned
fixture set:

    scomp-adapter fixtures --out DIR

Exit codes: 0 success, 1 backend or validation failure, 2 usage,
4 backend unavailable or not configured.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import STAGES, AdapterConfig
from .errors import AdapterError, BackendUnavailable
from .fixtures import write_fixtures
from .stages import read_job, run_job

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_UNAVAILABLE = 4

_USAGE = """\
usage: scomp-adapter JOB_DIR
       scomp-adapter STAGE [--fixture DIR] [--timeout SECONDS] JOB_DIR
       scomp-adapter fixtures --out DIR

stages: %s
""" % ", ".join(STAGES)


def _stage_parser(stage: str) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=f"scomp-adapter {stage}",
        description=f"Run the {stage} stage over a prepared job directory.")
    parser.add_argument("--fixture", default="",
                        help="serve outputs from this canned-output directory")
    parser.add_argument("--timeout", type=float, default=None,
                        help="endpoint request timeout in seconds")
    parser.add_argument("job_dir", help="job directory to fill in")
    return parser


def _fixtures_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scomp-adapter fixtures",
        description="Write the deterministic canned output set.")
    parser.add_argument("--out", required=True, help="directory to create")
    return parser


def _fail(message: str, code: int) -> int:
    print(f"scomp-adapter: error: {message}", file=sys.stderr)
    return code


def _run(stage: str, job_dir: str, fixture: str, timeout: float | None) -> int:
    try:
        config = AdapterConfig.from_env()
        if timeout is not None:
            config = dataclasses.replace(config, timeout=timeout)
        run_job(stage, job_dir, config, fixture_dir=fixture)
    except BackendUnavailable as e:
        return _fail(str(e), EXIT_UNAVAILABLE)
    except AdapterError as e:
        return _fail(str(e), EXIT_FAILURE)
    except OSError as e:
        return _fail(str(e), EXIT_FAILURE)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print(_USAGE, end="")
        return EXIT_OK if argv else EXIT_USAGE

    head = argv[0]
    if head == "fixtures":
        args = _fixtures_parser().parse_args(argv[1:])
        try:
            out = write_fixtures(args.out)
        except OSError as e:
            return _fail(str(e), EXIT_FAILURE)
        print(f"wrote fixtures under {out}")
        return EXIT_OK

    if head in STAGES:
        args = _stage_parser(head).parse_args(argv[1:])
        return _run(head, args.job_dir, args.fixture, args.timeout)

    if head.startswith("-"):
        print(_USAGE, end="", file=sys.stderr)
        return EXIT_USAGE

    # bare job directory: the manifest names the stage
    if len(argv) != 1:
        print(_USAGE, end="", file=sys.stderr)
        return EXIT_USAGE
    try:
        stage, _, _ = read_job(head)
    except AdapterError as e:
        return _fail(str(e), EXIT_UNAVAILABLE)
    if stage is None:
        return _fail(f"{head}: no manifest to infer the stage from; "
                     f"name the stage explicitly", EXIT_UNAVAILABLE)
    return _run(stage, head, fixture="", timeout=None)


if __name__ == "__main__":
    sys.exit(main())
