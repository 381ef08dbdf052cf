"""``d2sa`` command line.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_config
from .io import save_manifest, save_tensor
from .mri import SCENARIOS, simulate_dataset, simulate_patient
from .pipeline import NumericalAbort, run_experiment
from .recon import ReconNet, pretrain_source
from .theory import DivergenceError, fit_affine, make_linear_model, write_fit_csv

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CONFIG", "EXIT_NUMERIC"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _run_config(args) -> RunConfig:
    overrides = _overrides(args.set)
    if getattr(args, "scenario", None):
        overrides["scenario.name"] = args.scenario
    if args.seed is not None:
        overrides.setdefault("scenario.seed", str(args.seed))
        overrides.setdefault("experiment.seed", str(args.seed))
    if args.config:
        return load_config(args.config, overrides)
    # without a file the flags must carry the required keys
    overrides.setdefault("experiment.methods", "fine+mr-inr+sst")
    return parse_config("", overrides)


def _save_slices(directory: Path, slices) -> list[dict]:
    entries = []
    for s in slices:
        stem = f"slice{s.index:02d}"
        save_tensor(directory / f"{stem}_image.d2t", s.image.to_complex())
        save_tensor(directory / f"{stem}_kspace.d2t", s.kspace.data)
        entries.append({"index": s.index, "image": f"{stem}_image.d2t", "kspace": f"{stem}_kspace.d2t"})
    save_tensor(directory / "mask.d2t", slices[0].kspace.mask.mask.astype(np.float64))
    save_tensor(directory / "sensitivities.d2t", slices[0].sens.maps)
    return entries


def cmd_gen_data(args) -> int:
    run = _run_config(args)
    exp = run.experiment
    seeds = np.random.SeedSequence(exp.seed).generate_state(5)
    out = Path(args.out)
    source = simulate_dataset(run.scenario.source, exp.n_source_patients, exp.source_slices_per_patient, int(seeds[0]))
    target = simulate_patient(run.scenario.target, exp.n_target_slices, int(seeds[3]))
    manifest = {"scenario": run.scenario.name, "seed": exp.seed}
    for name, slices in (("source", source), ("target", target)):
        # source slices of different patients share an index, so number them afresh
        numbered = [replace(s, index=i) for i, s in enumerate(slices)]
        manifest[name] = _save_slices(out / name, numbered)
    save_manifest(out / "manifest.json", manifest)
    print(f"wrote {len(source)} source and {len(target)} target slices to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    run = _run_config(args)
    exp = run.experiment
    seeds = np.random.SeedSequence(exp.seed).generate_state(5)
    source = simulate_dataset(run.scenario.source, exp.n_source_patients, exp.source_slices_per_patient, int(seeds[0]))
    net = ReconNet(exp.recon, int(seeds[1]))
    trace = pretrain_source(net, source, exp.pretrain_epochs, exp.pretrain_lr, int(seeds[2]))
    out = Path(args.out)
    net.save(out / "net")
    with open(out / "pretrain_loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "l1"])
        writer.writerows([i, repr(v)] for i, v in enumerate(trace))
    print(f"pretrained {exp.pretrain_epochs} epochs, final L1 {trace[-1] if trace else float('nan'):.5f}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    run = _run_config(args)
    pretrained = ReconNet.load(args.pretrained) if args.pretrained else None
    report = run_experiment(run.scenario, run.methods, run.experiment, pretrained)
    out = Path(args.out)
    report.save(out)
    for row in report.rows:
        if row["slice"] == "summary":
            print(f"{row['method']:<24} median PSNR {row['psnr_db']:7.3f} dB  SSIM {row['ssim']:.4f}  {row['seconds']:8.1f} s")
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    model = make_linear_model(args.n, args.d, args.s2, seed=args.seed or 0)
    result = fit_affine(model, n_samples=args.samples, seed=args.seed or 0, objective=args.objective)
    path = write_fit_csv(Path(args.out) / "theory_fit.csv", result)
    alpha_star = 1.0 / (1.0 + args.s2)
    print(
        f"alpha_hat={result.alpha:.6f} (1/(1+s2)={alpha_star:.6f}) "
        f"|beta_hat-mu|={np.linalg.norm(result.beta - model.mu):.6f} steps={result.steps} -> {path}"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_report

    written = render_report(args.run, args.out, figure=not args.no_figure)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="d2sa", description="Test-time adaptation for multi-coil MRI on synthetic phantoms.")
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="simulate source and target slices")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="supervised source-domain training")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", parents=[common], help="run the adaptation method grid")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--pretrained", type=Path, help="directory written by 'pretrain' (skips pretraining)")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("verify-theory", parents=[common], help="fit the affine estimator in the linear model")
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--s2", type=float, default=0.25)
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("--objective", choices=("monte-carlo", "closed-form"), default="monte-carlo")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("report", parents=[common], help="render images and tables for a finished run")
    p.add_argument("--run", type=Path, required=True, help="directory written by 'adapt'")
    p.add_argument("--no-figure", action="store_true", help="skip the matplotlib PNG")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, DivergenceError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
