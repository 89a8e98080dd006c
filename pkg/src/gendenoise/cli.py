"""``gendenoise`` command line: corrupt, train, sample, evaluate, verify.

Exit codes: 0 success, 1 domain or contract error, 2 I/O or format error,
3 verification failure.  Every command is a pure function of its flags,
input files and seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, forward
from .core import (
    DEFAULT_STEPS,
    build_schedule,
    floor_clean,
    make_family,
    parse_key_values,
    rng_stream,
)
from .denoise import (
    FinitePrior,
    OracleDenoiser,
    ToyRegressor,
    TrainConfig,
    checkpoint_bytes,
    model_from_checkpoint,
    train,
)
from .diagnostics import evaluate_pair
from .errors import ConfigurationError, FormatError, GenDenoiseError
from .pgm import load_pgm, save_pgm
from .reverse import sample_reverse
from .verification import SuiteConfig, all_passed, csv_footer, rows_to_csv, run_verification_suite

EXIT_OK, EXIT_DOMAIN, EXIT_IO, EXIT_VERIFY = 0, 1, 2, 3

DEFAULT_PARAM = {"gaussian": 25.0, "gamma": 26.0, "poisson": 0.2}


class InputError(GenDenoiseError):
    """Bad or inconsistent input files (exit code 2)."""


# --------------------------------------------------------------------------
# helpers


def _schedule(args):
    family = args.family or "gaussian"
    param = args.param if args.param is not None else DEFAULT_PARAM[family]
    N = args.N if args.N is not None else DEFAULT_STEPS[0]
    return build_schedule(make_family(family, param), N)


def _pgm_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{d}: not a directory")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".pgm" and p.is_file())
    if not files:
        raise InputError(f"{d}: no .pgm files")
    return files


def _load_stack(directory) -> tuple[list[Path], np.ndarray]:
    files = _pgm_files(directory)
    imgs = [load_pgm(f) for f in files]
    shapes = {im.shape for im in imgs}
    if len(shapes) > 1:
        detail = ", ".join(f"{f.name}:{im.shape[1]}x{im.shape[0]}" for f, im in zip(files, imgs))
        raise InputError(f"{directory}: images have mixed dimensions ({detail})")
    return files, np.stack(imgs)


def _load(path) -> np.ndarray:
    try:
        return load_pgm(path)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def _provenance(out: Path, command: str, seed: int, schedule=None, **extra) -> None:
    lines = [f"command={command}", f"version={__version__}", f"seed={seed}"]
    text = "\n".join(lines) + "\n"
    if schedule is not None:
        text += schedule.to_text()
    text += "".join(f"{k}={v}\n" for k, v in extra.items())
    (out / "provenance.txt").write_text(text)


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigurationError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


# --------------------------------------------------------------------------
# commands


def cmd_corrupt(args) -> int:
    s = _schedule(args)
    t = s.N if args.t is None else args.t
    if not 1 <= t <= s.N:
        raise IndexError(f"--t must be in 1..{s.N}, got {t}")
    src = Path(args.input)
    files = _pgm_files(src) if src.is_dir() else [src]
    out = _out_dir(args)
    for i, f in enumerate(files):
        x0 = floor_clean(_load(f), s.family)
        x_t = forward.sample_marginal(s, x0, t, rng_stream(args.seed, i))
        save_pgm(x_t, out / f"{f.stem}_t{t}.pgm")
    _provenance(out, "corrupt", args.seed, s, t=t, inputs=len(files))
    return EXIT_OK


def cmd_train(args) -> int:
    s = _schedule(args)
    _, data = _load_stack(args.data)
    model = ToyRegressor(data.shape[1:], s.N, needs_terminal=s.name == "poisson",
                         width=args.width, seed=args.seed, family=s.family)
    cfg = TrainConfig(steps=args.steps, batch=args.batch, learning_rate=args.lr, seed=args.seed)
    result = train(data, s, model, cfg)
    out = _out_dir(args)
    meta = {"family": s.name, "param": repr(s.family.terminal), "seed": str(args.seed),
            "fingerprint": s.fingerprint()}
    (out / "model.gdnz").write_bytes(checkpoint_bytes(result.model, meta))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "loss"))
    for k, loss in enumerate(result.losses):
        w.writerow((k, repr(loss)))
    buf.write(csv_footer(args.seed))
    (out / "loss.csv").write_text(buf.getvalue())
    final = result.losses[-1] if result.losses else float("nan")
    _provenance(out, "train", args.seed, s, steps=args.steps, batch=args.batch,
                learning_rate=args.lr, width=args.width, images=data.shape[0],
                final_loss=repr(final))
    if result.losses and not math.isfinite(final):
        return EXIT_DOMAIN
    return EXIT_OK


def _denoiser_for_sample(args, shape):
    if bool(args.model) == bool(args.oracle):
        raise ConfigurationError("give exactly one of --model or --oracle")
    if args.oracle:
        s = _schedule(args)
        _, atoms = _load_stack(args.oracle)
        return s, OracleDenoiser(FinitePrior.uniform(atoms), s)
    model, meta = model_from_checkpoint(Path(args.model).read_bytes())
    s = build_schedule(make_family(meta["family"], float(meta["param"])), int(meta["N"]))
    asked = {"family": args.family, "param": args.param, "N": args.N}
    have = {"family": s.name, "param": s.family.terminal, "N": s.N}
    clash = [k for k, v in asked.items() if v is not None and v != have[k]]
    if clash:
        raise ConfigurationError(
            "checkpoint schedule does not match the request: "
            + ", ".join(f"{k} {asked[k]!r} vs {have[k]!r}" for k in clash))
    if model.image_shape != tuple(shape):
        raise ConfigurationError(f"model expects {model.image_shape} images, input is {shape}")
    return s, model


def cmd_sample(args) -> int:
    x_N = _load(args.input)
    s, den = _denoiser_for_sample(args, x_N.shape)
    n = args.n if args.n is not None else (100 if args.mean else 1)
    if n < 1:
        raise ConfigurationError(f"--n must be >= 1, got {n}")
    out = _out_dir(args)
    total = np.zeros_like(x_N)
    for i in range(n):
        keep = args.trajectory and i == 0
        x0, traj = sample_reverse(s, x_N, den, rng_stream(args.seed, i),
                                  keep_trajectory=keep, seed=args.seed)
        total += x0
        save_pgm(x0, out / f"sample_{i:04d}.pgm")
        if traj is not None:
            traj.export(out / "trajectory")
    if args.mean:
        save_pgm(total / n, out / "mean.pgm")
    _provenance(out, "sample", args.seed, s, n_samples=n, mean=int(args.mean),
                denoiser="oracle" if args.oracle else "model")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ref = {p.name: p for p in _pgm_files(args.reference)}
    cand = {p.name: p for p in _pgm_files(args.candidate)}
    unmatched = sorted(set(ref) ^ set(cand))
    if unmatched:
        raise InputError("unmatched filenames: " + ", ".join(unmatched))
    out = _out_dir(args)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("image", "psnr_db", "ssim"))
    psnrs, ssims = [], []
    for name in sorted(ref):
        a, b = _load(ref[name]), _load(cand[name])
        if a.shape != b.shape:
            raise InputError(f"{name}: dimensions differ ({a.shape} vs {b.shape})")
        m = evaluate_pair(a, b)
        psnrs.append(m.psnr_db)
        ssims.append(m.ssim)
        w.writerow((name, _fmt(m.psnr_db), _fmt(m.ssim)))
    finite = [v for v in psnrs if math.isfinite(v)]
    mean_psnr = sum(finite) / len(finite) if finite else math.inf
    w.writerow(("mean", _fmt(mean_psnr), _fmt(sum(ssims) / len(ssims))))
    buf.write(csv_footer(args.seed))
    (out / "metrics.csv").write_text(buf.getvalue())
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = SuiteConfig(seed=args.seed, n_samples=args.n_samples,
                      corrupt_schedule=args.fault_inject)
    rows = run_verification_suite(cfg)
    out = _out_dir(args)
    (out / "verification.csv").write_text(rows_to_csv(rows, args.seed))
    failed = [r for r in rows if not r.passed]
    for r in failed:
        print(f"FAIL {r.suite}/{r.test}: statistic={r.statistic:.6g}", file=sys.stderr)
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_OK if all_passed(rows) else EXIT_VERIFY


# --------------------------------------------------------------------------
# argument parsing


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


class _Parser(argparse.ArgumentParser):
    # usage mistakes are contract errors (exit 1), not argparse's default 2
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--family", choices=sorted(DEFAULT_PARAM))
    common.add_argument("--param", type=float, help="terminal noise parameter")
    common.add_argument("--N", type=int, help="number of diffusion steps")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="key=value file supplying defaults")

    parser = _Parser(prog="gendenoise", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parser.commands = {}

    p = sub.add_parser("corrupt", parents=[common], help="apply the forward marginal at step t")
    parser.commands["corrupt"] = p
    p.add_argument("--input", required=False, help="PGM file or directory")
    p.add_argument("--t", type=int, help="diffusion step (default N)")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", parents=[common], help="train a toy denoiser")
    parser.commands["train"] = p
    p.add_argument("--data", help="directory of clean PGMs")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--width", type=int, default=256)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="reverse-sample from a noisy image")
    parser.commands["sample"] = p
    p.add_argument("--input", help="noisy PGM (x_N)")
    p.add_argument("--model", help="checkpoint written by train")
    p.add_argument("--oracle", help="directory of prior atoms for the exact oracle")
    p.add_argument("--n", type=int, help="number of samples (default 1, or 100 with --mean)")
    p.add_argument("--mean", action="store_true", help="also write the mean of samples")
    p.add_argument("--trajectory", action="store_true", help="export frames of the first chain")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM between two directories")
    parser.commands["evaluate"] = p
    p.add_argument("--reference")
    p.add_argument("--candidate")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("verify", parents=[common], help="run the statistical identity suite")
    parser.commands["verify"] = p
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--fault-inject", action="store_true",
                   help="corrupt one schedule to exercise the failure path")
    p.set_defaults(func=cmd_verify)
    return parser


REQUIRED = {
    "corrupt": ("input",),
    "train": ("data",),
    "sample": ("input",),
    "evaluate": ("reference", "candidate"),
    "verify": (),
}


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = parse_key_values(Path(args.config).read_text())
        except OSError as exc:
            raise InputError(f"{args.config}: {exc.strerror}") from None
        sub = parser.commands[args.command]
        known = {a.dest: a for a in sub._actions}
        for key, raw in values.items():
            dest = key.replace("-", "_")
            if dest not in known or dest in ("config", "help", "func"):
                raise ConfigurationError(f"{args.config}: unknown key {key!r}")
            if isinstance(known[dest], argparse._StoreTrueAction):
                sub.set_defaults(**{dest: _bool(raw)})
            else:
                sub.set_defaults(**{dest: raw})
        args = parser.parse_args(argv)
    for dest in REQUIRED[args.command]:
        if getattr(args, dest) is None:
            raise ConfigurationError(f"{args.command}: --{dest} is required")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        return args.func(args)
    except (OSError, FormatError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GenDenoiseError, ValueError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
