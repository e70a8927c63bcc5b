"""Command-line entry point: ``denseflow <command> [flags]``.

Settings resolve as defaults < ``--config`` file (key=value lines) < flags,
and every command that writes outputs also writes ``run_config.txt`` with
the resolved settings next to them.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments, gradcheck, quant, svg, synth
from .encoding import DegenerateRangeError, ZeroNormError
from .losses import LossReport
from .nnkit import checkpoint as ckpt_io
from .nnkit.autodiff import NonFiniteError
from .nnkit.train import (DivergenceError, Trainer, TrainerConfig, evaluate, examples_from_samples,
                          predict)
from .tensorio import DenseMap, DTFError, Task, read_dtf, read_meta, write_dtf

STEPS_GRID = (1, 2, 4, 10, 25)

DEFAULTS = {
    "quant-analyze": {"range": ["0.1:10", "0.1:80"], "mapping": "uni,sqrt", "power_sweep": False,
                      "samples": 1_000_000, "seed": 0, "out": None},
    "make-data": {"data": None, "seed": 0, "n_train": 500, "n_val": 100, "range": "0.1:80",
                  "resolution": 64},
    "train": {"data": None, "out": None, "task": "depth", "mapping": "sqrt", "use_cons": True,
              "epochs": 3, "batch": 8, "lr": 2e-3, "seed": 0},
    "infer": {"ckpt": None, "data": None, "out": None, "steps": "1"},
    "eval": {"pred": None, "data": None, "task": None, "range": None, "out": None},
    "steps-sweep": {"ckpt": None, "data": None, "steps": ",".join(map(str, STEPS_GRID)), "range": None,
                    "out": None},
    "grad-check": {"seed": 0, "out": None},
}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- config plumbing


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected true/false, got {text!r}")


def parse_range(text: str) -> tuple[float, float]:
    lo, sep, hi = str(text).partition(":")
    try:
        lo_f, hi_f = float(lo), float(hi)
    except ValueError:
        raise UsageError(f"range must look like LO:HI, got {text!r}") from None
    if not sep or not 0 < lo_f < hi_f:
        raise UsageError(f"range must satisfy 0 < LO < HI, got {text!r}")
    return lo_f, hi_f


def parse_mapping(text: str) -> quant.Mapping:
    try:
        return quant.Mapping.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_steps(text) -> list[int]:
    try:
        steps = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"steps must be N[,N...], got {text!r}") from None
    if not steps or min(steps) < 1:
        raise UsageError("steps must be positive integers")
    return steps


def read_config_file(path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} not found")
    out = {}
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"config line without '=': {line!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            if key not in cfg:
                raise UsageError(f"unknown config key {key!r} for {command}")
            cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if command == "quant-analyze" and isinstance(cfg["range"], str):
        cfg["range"] = [r for r in cfg["range"].split(",") if r]
    return cfg


def write_run_config(out_dir: Path, command: str, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}"]
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(map(str, value))
        lines.append(f"{key}={value}")
    (out_dir / "run_config.txt").write_text("\n".join(lines) + "\n")


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _emit(text: str, out_dir: Path | None, name: str) -> None:
    print(text)
    if out_dir is not None:
        (out_dir / name).write_text(text + "\n")


# ---------------------------------------------------------------- commands


def cmd_quant_analyze(cfg: dict) -> int:
    ranges = [parse_range(r) for r in cfg["range"]]
    mappings = [parse_mapping(m) for m in str(cfg["mapping"]).split(",") if m]
    out_dir = Path(cfg["out"]) if cfg["out"] else None
    if out_dir:
        write_run_config(out_dir, "quant-analyze", cfg)
    reports = []
    for k, (lo, hi) in enumerate(ranges):
        samples = np.random.default_rng([int(cfg["seed"]), k]).uniform(lo, hi, int(cfg["samples"]))
        reports += [quant.quant_report(m, lo, hi, samples) for m in mappings]
    _emit(quant.format_table(reports), out_dir, "quant_table.txt")
    if _bool(cfg["power_sweep"]):
        grid = np.round(np.arange(0.25, 1.0 + 1e-9, 0.05), 2)
        lines = ["range        p      analytic_%"]
        for lo, hi in ranges:
            best, errors = quant.optimality_scan(grid, lo, hi)
            for p, e in zip(grid, errors):
                mark = "  <- argmin" if p == best else ""
                lines.append(f"[{lo:g},{hi:g}]  {p:4.2f}  {100 * e:.6f}{mark}")
        _emit("\n".join(lines), out_dir, "power_sweep.txt")
    if out_dir:
        bars = {f"{r.mapping}[{r.y_min:g},{r.y_max:g}]": 100 * r.analytic_error for r in reports}
        (out_dir / "quant_analytic.svg").write_text(svg.bar_chart(bars, "analytic bf16 AbsRel", "%"))
    return 0


def cmd_make_data(cfg: dict) -> int:
    _require(cfg, "data")
    params = synth.SplitParams(resolution=int(cfg["resolution"]), depth_range=parse_range(cfg["range"]))
    root = synth.make_split(int(cfg["seed"]), int(cfg["n_train"]), int(cfg["n_val"]), cfg["data"], params)
    write_run_config(root, "make-data", cfg)
    print(f"wrote {cfg['n_train']} train / {cfg['n_val']} val scenes to {root}")
    return 0


def _split_dir(data: str, split: str) -> Path:
    base = Path(data)
    return base / split if (base / split / "manifest.txt").exists() else base


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    parse_mapping(cfg["mapping"])
    tcfg = TrainerConfig(task=cfg["task"], mapping=cfg["mapping"], use_cons=_bool(cfg["use_cons"]),
                         epochs=int(cfg["epochs"]), batch=int(cfg["batch"]), lr=float(cfg["lr"]),
                         seed=int(cfg["seed"]))
    out_dir = Path(cfg["out"])
    write_run_config(out_dir, "train", cfg)
    train = examples_from_samples(synth.read_split(_split_dir(cfg["data"], "train")), tcfg)
    trainer = Trainer(tcfg, train)
    rows = [LossReport.CSV_HEADER]
    trainer.run(on_step=lambda r: rows.append(r.csv_row()))
    (out_dir / "losses.csv").write_text("\n".join(rows) + "\n")
    ckpt_io.save_checkpoint(trainer.net, out_dir / "model.e2pc", trainer.step,
                            {"trainer": json.loads(tcfg.to_json())})
    steps = [r.step for r in trainer.history]
    (out_dir / "losses.svg").write_text(svg.line_chart(
        {"L_FM": (steps, [r.l_fm for r in trainer.history]),
         "total": (steps, [r.total for r in trainer.history])}, "training loss", "step", "loss"))
    last = trainer.history[-1]
    print(f"trained {trainer.step} steps; final l_fm={last.l_fm:.6f} l_cons={last.l_cons:.6f} "
          f"lambda={last.lam:.6f}; checkpoint {out_dir / 'model.e2pc'}")
    return 0


def _load_model(path):
    ck = ckpt_io.load_checkpoint(path)
    if "trainer" not in ck.extra:
        raise ckpt_io.CorruptCheckpointError("checkpoint lacks its trainer config")
    d = dict(ck.extra["trainer"])
    d["widths"] = tuple(d["widths"])
    tcfg = TrainerConfig(**d)
    return ck.build(), tcfg


def _predict_split(net, tcfg: TrainerConfig, split: Path, steps: int):
    examples = examples_from_samples(synth.read_split(split), tcfg)
    return examples, predict(net, examples, steps, tcfg.z0_seed, tcfg.schedule)


def cmd_infer(cfg: dict) -> int:
    _require(cfg, "ckpt", "data", "out")
    steps = parse_steps(cfg["steps"])
    if len(steps) != 1:
        raise UsageError("infer takes a single --steps value; use steps-sweep for several")
    net, tcfg = _load_model(cfg["ckpt"])
    split = _split_dir(cfg["data"], "val")
    _, z_hat = _predict_split(net, tcfg, split, steps[0])
    out_dir = Path(cfg["out"])
    write_run_config(out_dir, "infer", cfg)
    (out_dir / "pred").mkdir(parents=True, exist_ok=True)
    names = [line.split()[0].split("/")[-1] for line in (split / "manifest.txt").read_text().splitlines() if line]
    for name, z in zip(names, z_hat):
        write_dtf(DenseMap(z.astype(np.float32), Task.LATENT), out_dir / "pred" / name,
                  {"pred_task": tcfg.task, "mapping": tcfg.mapping, "steps": steps[0]})
    print(f"wrote {len(names)} predictions to {out_dir / 'pred'}")
    return 0


def _depth_clip(cfg: dict, split: Path):
    if cfg.get("range"):
        return parse_range(cfg["range"])
    meta = read_meta(next((split / "depth").glob("*.dtf")))
    return float(meta["range_lo"]), float(meta["range_hi"])


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "pred", "data")
    pred_dir = Path(cfg["pred"])
    pred_dir = pred_dir / "pred" if (pred_dir / "pred").is_dir() else pred_dir
    split = _split_dir(cfg["data"], "val")
    files = sorted(pred_dir.glob("*.dtf"))
    if not files:
        raise FileNotFoundError(f"no predictions in {pred_dir}")
    first = read_dtf(files[0]).meta
    task = cfg["task"] or first.get("pred_task")
    mapping = first.get("mapping", "sqrt")
    tcfg = TrainerConfig(task=task, mapping=mapping)
    examples = examples_from_samples(synth.read_split(split), tcfg)
    if len(examples) != len(files):
        raise UsageError(f"{len(files)} predictions but {len(examples)} ground-truth samples")
    z_hat = np.stack([read_dtf(f).data.astype(np.float64) for f in files])
    result = evaluate(z_hat, examples, task, _depth_clip(cfg, split) if task == "depth" else None)
    out_dir = Path(cfg["out"]) if cfg["out"] else None
    if out_dir:
        write_run_config(out_dir, "eval", cfg)
        (out_dir / "eval.csv").write_text(result.to_csv())
    _emit(result.table(), out_dir, "eval_table.txt")
    return 0


def cmd_steps_sweep(cfg: dict) -> int:
    _require(cfg, "ckpt", "data")
    steps = parse_steps(cfg["steps"])
    net, tcfg = _load_model(cfg["ckpt"])
    split = _split_dir(cfg["data"], "val")
    examples = examples_from_samples(synth.read_split(split), tcfg)
    clip = _depth_clip(cfg, split) if tcfg.task == "depth" else None
    results = experiments.steps_sweep(net, examples, tcfg, steps, clip)
    keys = list(results[0][1].metrics)
    lines = ["steps," + ",".join(keys)]
    lines += [f"{n}," + ",".join(repr(r.metrics[k]) for k in keys) for n, r in results]
    out_dir = Path(cfg["out"]) if cfg["out"] else None
    if out_dir:
        write_run_config(out_dir, "steps-sweep", cfg)
        (out_dir / "steps_sweep.csv").write_text("\n".join(lines) + "\n")
        (out_dir / "steps_sweep.svg").write_text(svg.line_chart(
            {keys[0]: (steps, [r.metrics[keys[0]] for _, r in results])},
            "metric vs Euler steps", "steps", keys[0], log_x=True))
    table = [f"{'steps':>6} " + " ".join(f"{k:>14}" for k in keys)]
    table += [f"{n:>6} " + " ".join(f"{r.metrics[k]:>14.6f}" for k in keys) for n, r in results]
    _emit("\n".join(table), out_dir, "steps_sweep.txt")
    return 0


def cmd_grad_check(cfg: dict) -> int:
    seed = int(cfg["seed"])
    checks = gradcheck.all_checks(range(seed, seed + 3))
    lines = [c.row() for c in checks]
    lines.append("")
    lines.append(f"{'1-dot':>8} {'|g| atan2':>12} {'|g| arccos':>12} {'L atan2':>14} {'L arccos':>14}")
    for gap, ga, gc, la, lc in gradcheck.gradient_contrast():
        lines.append(f"{gap:8.0e} {ga:12.4g} {gc:12.4g} {la:14.8g} {lc:14.8g}")
    failed = [c.name for c in checks if not c.passed]
    lines.append("")
    lines.append(f"{len(checks) - len(failed)}/{len(checks)} gradient checks passed")
    out_dir = Path(cfg["out"]) if cfg["out"] else None
    if out_dir:
        write_run_config(out_dir, "grad-check", cfg)
    _emit("\n".join(lines), out_dir, "grad_check.txt")
    if failed:
        raise GradientCheckFailed(", ".join(failed))
    return 0


class GradientCheckFailed(AssertionError):
    pass


COMMANDS = {
    "quant-analyze": cmd_quant_analyze,
    "make-data": cmd_make_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "steps-sweep": cmd_steps_sweep,
    "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denseflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, *flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="FILE", help="key=value settings file (flags override it)")
        for flag in flags:
            flag(p)
        return p

    seed = lambda p: p.add_argument("--seed", type=int)  # noqa: E731
    out = lambda p: p.add_argument("--out", metavar="DIR")  # noqa: E731
    data = lambda p: p.add_argument("--data", metavar="DIR")  # noqa: E731
    ckpt = lambda p: p.add_argument("--ckpt", metavar="FILE")  # noqa: E731
    steps = lambda p: p.add_argument("--steps", metavar="N[,N...]")  # noqa: E731
    task = lambda p: p.add_argument("--task", choices=("depth", "normal", "matting"))  # noqa: E731
    rng1 = lambda p: p.add_argument("--range", metavar="LO:HI")  # noqa: E731

    add("quant-analyze", "bf16 quantisation error of depth mappings",
        lambda p: p.add_argument("--range", metavar="LO:HI", action="append"),
        lambda p: p.add_argument("--mapping", metavar="uni|sqrt|log|power:P[,...]"),
        lambda p: p.add_argument("--power-sweep", dest="power_sweep", action="store_const", const=True),
        lambda p: p.add_argument("--samples", type=int), seed, out)
    add("make-data", "write a synthetic train/val split", data, seed, rng1,
        lambda p: p.add_argument("--n-train", dest="n_train", type=int),
        lambda p: p.add_argument("--n-val", dest="n_val", type=int),
        lambda p: p.add_argument("--resolution", type=int))
    add("train", "train the toy velocity net", data, out, task, seed,
        lambda p: p.add_argument("--mapping", metavar="uni|sqrt|log|power:P"),
        lambda p: p.add_argument("--use-cons", dest="use_cons", metavar="true|false"),
        lambda p: p.add_argument("--epochs", type=int),
        lambda p: p.add_argument("--batch", type=int),
        lambda p: p.add_argument("--lr", type=float))
    add("infer", "predict latents for a split", ckpt, data, out, steps)
    add("eval", "score predictions against ground truth", data, out, task, rng1,
        lambda p: p.add_argument("--pred", metavar="DIR"))
    add("steps-sweep", "metrics as a function of Euler step count", ckpt, data, out, steps, rng1)
    add("grad-check", "finite-difference check of every gradient", seed, out)
    return parser


ERROR_CATEGORIES = (
    (UsageError, "usage", 2),
    ((FileNotFoundError, FileExistsError, NotADirectoryError, PermissionError), "io", 3),
    ((DTFError, ckpt_io.CheckpointError), "format", 4),
    ((DivergenceError, NonFiniteError), "divergence", 5),
    (GradientCheckFailed, "gradient-check", 6),
    ((DegenerateRangeError, ZeroNormError, ValueError), "invalid-data", 7),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except Exception as exc:  # one machine-parsable line per failure
        for types, category, code in ERROR_CATEGORIES:
            if isinstance(exc, types):
                break
        else:
            category, code = "internal", 1
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {category}: {message}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
