"""``gsure-ma`` command line: pretrain, adapt, sweep, verify.

Exit codes: 0 success, 1 configuration/usage/architecture error, 2 numeric
failure, 3 property failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .adaptation import STRATEGIES, records_to_csv
from .config import _FIELDS, RunConfig, _coerce, load_config
from .data_io import write_pgm
from .exceptions import ConfigError, ContainerError, ContractError, DimensionError, NumericError
from .networks import load_params, save_params

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PROPERTY = 0, 1, 2, 3

log = logging.getLogger("gsure_ma")


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; 2 is reserved for numeric failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        out[k] = v
    return out


def _config(args) -> RunConfig:
    overrides = {}
    for k, v in _parse_set(args.set).items():
        if k not in _FIELDS:
            raise ConfigError(f"--set: unknown config key {k!r}")
        overrides[k] = _coerce(k, v)
    overrides["out_dir"] = args.out
    overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    return out


def _load_net(cfg: RunConfig, params: str | None, out: Path):
    path = Path(params) if params else out / "pretrained.tnsr"
    if not path.is_file():
        raise ConfigError(f"parameter file not found: {path}")
    net = ex.make_network(cfg)
    load_params(net, path)
    return net


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    net, res = ex.run_pretrain(cfg)
    save_params(net, out / "pretrained.tnsr")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"])
    for e, v in enumerate(res.losses, 1):
        w.writerow([e, repr(v)])
    (out / "pretrain_loss.csv").write_text(buf.getvalue(), encoding="utf-8")
    final = f"{res.losses[-1]:.6g}" if res.losses else "n/a"
    print(f"pretrained {cfg.pretrain_epochs} epochs, final loss {final} -> {out / 'pretrained.tnsr'}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    net = _load_net(cfg, args.params, out)
    run = ex.run_single(cfg, net, args.strategy)
    s = args.strategy
    (out / f"adapt_{s}.csv").write_text(records_to_csv(run.result.records), encoding="utf-8")
    save_params(net, out / f"adapted_{s}.tnsr")
    scales = ["# image min max (magnitude, before 8-bit scaling)"]
    for name, img in (("ground_truth", run.image), ("regridded", run.regridded),
                      ("before_ma", run.before), (f"after_ma_{s}", run.after)):
        lo, hi = write_pgm(out / f"{name}.pgm", img)
        scales.append(f"{name}.pgm {lo!r} {hi!r}")
    (out / f"pgm_scales_{s}.txt").write_text("\n".join(scales) + "\n", encoding="utf-8")
    r = run.result
    print(f"{s}: input {run.input_psnr:.2f} dB, before {r.psnr_before:.2f} dB, "
          f"after {r.psnr_after:.2f} dB ({len(r.records)} epochs)")
    if r.aborted:
        print(f"error: {s} adaptation hit a non-finite loss; kept last good parameters",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    net = _load_net(cfg, args.params, out)
    matrix = ex.run_sweep(cfg, net)
    (out / "matrix.csv").write_text(matrix.to_csv(), encoding="utf-8")
    table = matrix.to_table()
    (out / "matrix_table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all
    results = run_all(args.inject_fault)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_PROPERTY
    print(f"all {len(results)} properties passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsure-ma", description="Test-time adaptation of MRI reconstruction networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        sp.add_argument("--seed", type=int, help="run seed (overrides seed)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; repeatable")

    sp = sub.add_parser("pretrain", help="supervised pre-training")
    common(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("adapt", help="adapt to one held-out acquisition")
    common(sp)
    sp.add_argument("--strategy", required=True, choices=STRATEGIES)
    sp.add_argument("--params", help="parameter file (default: <out>/pretrained.tnsr)")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("sweep", help="before/after PSNR over accelerations and strategies")
    common(sp)
    sp.add_argument("--params", help="parameter file (default: <out>/pretrained.tnsr)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("verify", help="run the fast property suite")
    sp.add_argument("--inject-fault", choices=("adjoint",), help="test hook: corrupt an operator")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, DimensionError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
