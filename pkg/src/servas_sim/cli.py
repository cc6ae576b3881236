"""Command-line front end.

Subcommands:

* ``scenarios`` -- run the builtin attack/interaction suite or a JSON
  scenario file; exit 0 iff every verdict matches its expectation.
* ``evictions`` -- tweak-cache eviction Monte Carlo over a parameter grid,
  emitted as CSV (plus an optional gnuplot script).
* ``overhead`` -- inline vs tweak-cache tag-storage arithmetic as CSV.
* ``image`` -- pack, unpack or wrap enclave image containers.

Every command is deterministic under a fixed ``--seed``; the environment
variable ``SERVAS_SIM_SEED`` is the fallback seed.  Exit codes: 0 success,
1 verdict mismatch, 2 usage or script error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from xml.etree import ElementTree as ET

from .cache import EvictionMode, TcCfg, eviction_grid, overhead_sweep
from .image import build_image, load_enclave_image, ImagePageType
from .monitor import derive_developer_key
from .scenarios import ScriptError, builtin_suite, load_scenarios, run_scenario

EVICTION_CSV_SCHEMA = "servas-sim eviction-csv v1"
OVERHEAD_CSV_SCHEMA = "servas-sim overhead-csv v1"


def _seed_from(args) -> int:
    if args.seed is not None:
        return args.seed
    return int(os.environ.get("SERVAS_SIM_SEED", "0"))


def _parse_int_list(text: str) -> list[int]:
    return [int(x, 0) for x in text.split(",") if x]


def _parse_range(text: str) -> list[int]:
    """``a:b:step`` inclusive range, or a comma list."""
    if ":" in text:
        parts = [int(x, 0) for x in text.split(":")]
        start, stop = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 1
        return list(range(start, stop + 1, step))
    return _parse_int_list(text)


def _out_stream(path: str | None):
    return open(path, "w", newline="") if path and path != "-" else sys.stdout


# --- scenarios ----------------------------------------------------------------


def _text_report(results, stream) -> None:
    for name, expected, got in results:
        status = "PASS" if expected == got else "FAIL"
        stream.write(f"{status} {name}: expected {_fmt_verdict(expected)}, "
                     f"got {_fmt_verdict(got)}\n")
    n_fail = sum(1 for _, e, g in results if e != g)
    stream.write(f"{len(results) - n_fail}/{len(results)} scenarios matched\n")


def _fmt_verdict(v) -> str:
    detail = f"({v.detail})" if v.detail else ""
    return f"{v.outcome}{detail}@{v.at_step}"


def _junit_report(results, stream) -> None:
    suite = ET.Element("testsuite", name="servas-sim-scenarios",
                       tests=str(len(results)),
                       failures=str(sum(1 for _, e, g in results if e != g)))
    for name, expected, got in results:
        case = ET.SubElement(suite, "testcase", classname="scenario", name=name)
        if expected != got:
            failure = ET.SubElement(case, "failure",
                                    message=f"expected {_fmt_verdict(expected)}, "
                                            f"got {_fmt_verdict(got)}")
            failure.text = json.dumps({"expected": expected.to_dict(),
                                       "observed": got.to_dict()})
    stream.write(ET.tostring(suite, encoding="unicode") + "\n")


def cmd_scenarios(args) -> int:
    seed = _seed_from(args)
    if args.path is None or args.path == "builtin":
        scenarios = builtin_suite()
    else:
        scenarios = load_scenarios(Path(args.path).read_text())
    if args.filter:
        scenarios = [s for s in scenarios if args.filter in s.name]
        if not scenarios:
            raise ScriptError(f"no scenario matches filter {args.filter!r}")
    results = []
    for scenario in scenarios:
        got = run_scenario(scenario, seed=seed, fault_threshold=args.fault_threshold)
        results.append((scenario.name, scenario.expected, got))
    stream = _out_stream(args.out)
    try:
        (_junit_report if args.report == "junit" else _text_report)(results, stream)
    finally:
        if stream is not sys.stdout:
            stream.close()
    return 0 if all(e == g for _, e, g in results) else 1


# --- analytics ------------------------------------------------------------------


_GNUPLOT_EVICTIONS = """\
# gnuplot script for the eviction CSV (first two rows are schema + header)
set datafile separator ","
set key top left
set xlabel "tweaks inserted"
set ylabel "eviction probability"
plot "{csv}" every ::2 using 3:(strcol(4) eq "{mode}" ? $5 : 1/0) \\
     with points title "{mode}"
"""


def cmd_evictions(args) -> int:
    seed = _seed_from(args)
    rows = eviction_grid(
        _parse_int_list(args.entries), _parse_int_list(args.ways),
        _parse_range(args.tweaks), trials=args.trials, seed=seed,
    )
    stream = _out_stream(args.out)
    try:
        writer = csv.writer(stream)
        writer.writerow([EVICTION_CSV_SCHEMA])
        writer.writerow(["n_entries", "ways", "n_tweaks", "mode", "probability",
                         "trials", "seed"])
        writer.writerows(rows)
    finally:
        if stream is not sys.stdout:
            stream.close()
    if args.gnuplot:
        Path(args.gnuplot).write_text(
            _GNUPLOT_EVICTIONS.format(csv=args.out or "-", mode=EvictionMode.TOTAL.value))
    return 0


def cmd_overhead(args) -> int:
    tc_cfgs = []
    for part in args.tc.split(","):
        n_tweak, voffl = part.split(":")
        tc_cfgs.append(TcCfg(n_tweak=int(n_tweak, 0), voffset_low_bits=int(voffl, 0)))
    rows = overhead_sweep(_parse_range(args.lines), tc_cfgs, va_bits=args.va_bits)
    stream = _out_stream(args.out)
    try:
        writer = csv.writer(stream)
        writer.writerow([OVERHEAD_CSV_SCHEMA])
        writer.writerow(["n_lines", "n_tweak", "b_voffsetL", "inline_bits",
                         "tc_bits", "break_even_lines"])
        writer.writerows(rows)
    finally:
        if stream is not sys.stdout:
            stream.close()
    return 0


# --- images -----------------------------------------------------------------------


def cmd_image(args) -> int:
    if args.mode == "pack":
        manifest = json.loads(Path(args.manifest).read_text())
        pages = []
        for p in manifest["pages"]:
            if "file" in p:
                body = Path(Path(args.manifest).parent / p["file"]).read_bytes()
            else:
                fill = bytes.fromhex(p.get("fill", ""))
                body = (fill * (4096 // max(len(fill), 1) + 1))[:4096] if fill else b""
            pages.append((p["index"], p["perms"], ImagePageType[p["type"].upper()], body))
        image = build_image(pages, entry_offset=manifest.get("entry_offset", 0),
                            developer_id=manifest.get("developer_id", "devel-00").encode())
        Path(args.out).write_bytes(image.pack())
    elif args.mode == "unpack":
        image = load_enclave_image(Path(args.image).read_bytes(),
                                   developer_key=_image_key(args))
        manifest = {
            "entry_offset": image.entry_offset,
            "developer_id": image.developer_id.rstrip(b"\x00").decode(),
            "pages": [
                {"index": p.index,
                 "perms": "".join(f for f in "rwxug" if p.perms[f]),
                 "type": p.page_type.name.lower(),
                 "file": f"page{p.index:02d}.bin"}
                for p in image.pages
            ],
        }
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
        for p in image.pages:
            (out_dir / f"page{p.index:02d}.bin").write_bytes(p.body)
    elif args.mode == "wrap":
        image = load_enclave_image(Path(args.image).read_bytes())
        key = _image_key(args)
        if key is None:
            raise ScriptError("wrap needs --cpu-key")
        import random

        nonce = random.Random(f"image-wrap-{_seed_from(args)}").randbytes(12)
        Path(args.out).write_bytes(image.wrap(key, nonce))
    return 0


def _image_key(args) -> bytes | None:
    if not getattr(args, "cpu_key", None):
        return None
    cpu_key = bytes.fromhex(args.cpu_key)
    dev_id = args.developer_id.encode().ljust(8, b"\x00")[:8]
    return derive_developer_key(cpu_key, dev_id)


# --- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="servas-sim",
        description="enclave-isolation simulator: scenario suite, cache analytics, images",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenarios", help="run attack/interaction scenarios")
    p.add_argument("path", nargs="?", default="builtin",
                   help="scenario JSON file, or 'builtin' (default)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--filter", help="run only scenarios whose name contains this")
    p.add_argument("--fault-threshold", type=int, default=3)
    p.add_argument("--report", choices=("text", "junit"), default="text")
    p.add_argument("--out", help="report file (default stdout)")
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("evictions", help="tweak-cache eviction Monte Carlo")
    p.add_argument("--entries", default="32,128")
    p.add_argument("--ways", default="1,2,4,8")
    p.add_argument("--tweaks", default="2:72:2", help="a:b:step or comma list")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="CSV file (default stdout)")
    p.add_argument("--gnuplot", help="also write a gnuplot script here")
    p.set_defaults(func=cmd_evictions)

    p = sub.add_parser("overhead", help="cache tag storage arithmetic")
    p.add_argument("--va-bits", type=int, choices=(39, 48), default=48)
    p.add_argument("--lines", default="64,128,256,512,1024,2048,4096,8192,16384")
    p.add_argument("--tc", default="32:6,32:20,32:42,128:6,128:20,128:42,512:6,512:20,512:42",
                   help="comma list of n_tweak:b_voffsetL points")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="CSV file (default stdout)")
    p.set_defaults(func=cmd_overhead)

    p = sub.add_parser("image", help="enclave image tooling")
    p.add_argument("mode", choices=("pack", "unpack", "wrap"))
    p.add_argument("--manifest", help="pack: JSON manifest path")
    p.add_argument("--image", help="unpack/wrap: image file")
    p.add_argument("--out", required=True, help="output file (pack/wrap) or directory (unpack)")
    p.add_argument("--cpu-key", help="hex 128-bit per-CPU key (wrap/unpack of wrapped)")
    p.add_argument("--developer-id", default="devel-00")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_image)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ScriptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
