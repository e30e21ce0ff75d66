"""Command-line entry point.

    difftpt run       [--config FILE] [--set key=value ...]
    difftpt sweep     [--config FILE] [--set key=value ...]
    difftpt gradcheck [--set key=value ...]
    difftpt selftest

Config files are flat ``key=value`` lines; ``#`` starts a comment. Flags win
over the file, and ``DIFFTPT_SEED`` overrides the file's seed. Exit status is
0 on success, 1 on invalid configuration or I/O problems, 2 when an oracle or
property check fails.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .augmentation import AugmentConfig
from .bench import (Axis, Method, SYNTHETIC_NOTE, SweepResult, TaskParams, make_synthetic_task,
                    paired_difference, run_benchmark, run_method, sweep_mix_ratio, sweep_scalar)
from .checks import GRAD_REL_TOL, gradcheck, selftest
from .errors import ConfigError, MissingFile, UnknownKey
from .selection import SelectionDiagnostics, diagnostics_to_csv
from .tuner import PredictionRule, TuningConfig, adapt, config_dict

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_CHECK_FAILED = 2

SEED_ENV = "DIFFTPT_SEED"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _pair(s: str) -> tuple:
    parts = [p for p in s.replace(" ", "").split(",") if p]
    if len(parts) != 2:
        raise ValueError(f"expected 'lo,hi', got {s!r}")
    return float(parts[0]), float(parts[1])


def _float_list(s: str) -> list:
    return [float(p) for p in s.replace(" ", "").split(",") if p]


def _str_list(s: str) -> list:
    return [p for p in s.replace(" ", "").split(",") if p]


# key -> (section, parser)
_KEYS = {
    "n_standard": ("augment", int),
    "n_diffusion": ("augment", int),
    "crop_fraction_range": ("augment", _pair),
    "noise_sigma": ("augment", float),
    "diversity_alpha_range": ("augment", _pair),
    "spurious_rate": ("augment", float),
    "steps": ("tuning", int),
    "learning_rate": ("tuning", float),
    "rho_H": ("tuning", float),
    "rho_C": ("tuning", float),
    "beta1": ("tuning", float),
    "beta2": ("tuning", float),
    "epsilon": ("tuning", float),
    "prediction_rule": ("tuning", lambda s: PredictionRule(s.strip().lower())),
    "recompute_masks": ("tuning", _bool),
    "per_family_filtering": ("tuning", _bool),
    "K": ("task", int),
    "D_in": ("task", int),
    "shift_angle": ("task", float),
    "bias_scale": ("task", float),
    "noise_scale": ("task", float),
    "n_test": ("task", int),
    "clutter_width": ("task", int),
    "jitter": ("task", float),
    "vocab_angle": ("task", float),
    "vocab_noise": ("task", float),
    "token_scale": ("task", float),
    "prompt_scale": ("task", float),
    "seed": ("run", int),
    "n_seeds": ("run", int),
    "workers": ("run", int),
    "output_dir": ("run", str),
    "methods": ("run", lambda s: [Method(m.upper()).value for m in _str_list(s)]),
    "sweep_axis": ("run", lambda s: s.strip().upper()),
    "sweep_values": ("run", _float_list),
    "mix_diffusion_fractions": ("run", _float_list),
    "mix_standard_fractions": ("run", _float_list),
    "diagnostics": ("run", _bool),
}


@dataclass
class RunConfig:
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    tuning: TuningConfig = field(default_factory=TuningConfig)
    task: TaskParams = field(default_factory=TaskParams)
    seed: int = 0
    n_seeds: int = 20
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    output_dir: str = "results"
    methods: list = field(default_factory=lambda: [m.value for m in Method])
    sweep_axis: str = "STEPS"
    sweep_values: list = field(default_factory=lambda: [0, 1, 2, 3, 4, 5, 6])
    mix_diffusion_fractions: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    mix_standard_fractions: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    diagnostics: bool = False

    @property
    def seeds(self) -> list:
        return [self.seed + i for i in range(self.n_seeds)]

    def flat(self) -> dict:
        out = {}
        out.update(config_dict(self.augment))
        out.update(config_dict(self.tuning))
        out.update(dataclasses.asdict(self.task))
        for k in ("seed", "n_seeds", "workers", "output_dir", "methods", "sweep_axis",
                  "sweep_values", "mix_diffusion_fractions", "mix_standard_fractions", "diagnostics"):
            out[k] = getattr(self, k)
        return out


def _parse_lines(lines, origin: str) -> dict:
    values = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected key=value, got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        values[key] = (raw, f"{origin}:{n}")
    return values


def parse_config(path: str | os.PathLike | None = None, overrides=(), env=None) -> RunConfig:
    """Defaults, then the file, then ``DIFFTPT_SEED``, then ``key=value`` overrides."""
    env = os.environ if env is None else env
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise MissingFile(f"config file not found: {p}")
        raw.update(_parse_lines(p.read_text().splitlines(), str(p)))
    if env.get(SEED_ENV):
        raw["seed"] = (env[SEED_ENV], SEED_ENV)
    raw.update(_parse_lines(overrides, "flag"))

    sections = {"augment": {}, "tuning": {}, "task": {}, "run": {}}
    for key, (text, origin) in raw.items():
        if key not in _KEYS:
            raise UnknownKey(f"{origin}: unknown key {key!r}")
        section, parser = _KEYS[key]
        try:
            sections[section][key] = parser(text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{origin}: bad value for {key}: {exc}") from None

    try:
        cfg = RunConfig(
            augment=AugmentConfig(**sections["augment"]),
            tuning=TuningConfig(**sections["tuning"]),
            task=TaskParams(**sections["task"]),
            **sections["run"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _validate_run(cfg)
    return cfg


def _validate_run(cfg: RunConfig):
    t = cfg.task
    if t.K < 2 or t.n_test < 1 or t.D_in < 2:
        raise ConfigError("task needs K >= 2, n_test >= 1, D_in >= 2")
    if cfg.n_seeds < 1:
        raise ConfigError("n_seeds must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.sweep_axis not in {a.value for a in Axis} | {"MIX_GRID"}:
        raise ConfigError(f"unknown sweep_axis {cfg.sweep_axis!r}")


# output helpers ----------------------------------------------------------------

def header_lines(cfg: RunConfig, command: str) -> list[str]:
    lines = [f"difftpt {__version__} {command}", SYNTHETIC_NOTE]
    for k, v in cfg.flat().items():
        if k in ("workers", "output_dir"):
            continue
        lines.append(f"{k}={_render(v)}")
    return lines


def _render(v):
    if isinstance(v, (list, tuple)):
        return ",".join(_render(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _prepare_output(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from None
    return out


def _write_text(path: Path, text: str):
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _comment(lines) -> str:
    return "".join(f"# {ln}\n" for ln in lines)


def summary_csv(cfg: RunConfig, summaries) -> str:
    import io
    buf = io.StringIO()
    buf.write(_comment(header_lines(cfg, "run")))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "accuracy", "accuracy_se", "mean_entropy", "seeds"])
    for s in summaries.values():
        row = s.row()
        w.writerow([row["method"], repr(row["accuracy"]), repr(row["accuracy_se"]),
                    repr(row["mean_entropy"]), row["seeds"]])
    return buf.getvalue()


def _task_kwargs(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg.task)


def cmd_run(cfg: RunConfig) -> int:
    out = _prepare_output(cfg)
    task_kwargs = _task_kwargs(cfg)
    summaries, per_seed = run_benchmark(cfg.methods, cfg.seeds, task_kwargs, cfg.augment,
                                        cfg.tuning, cfg.workers)
    _write_text(out / "summary.csv", summary_csv(cfg, summaries))
    doc = {
        "header": {"tool": f"difftpt {__version__}", "command": "run", "note": SYNTHETIC_NOTE,
                   "config": cfg.flat()},
        "summary": [s.row() for s in summaries.values()],
        "results": {m: [{"seed": r.seeds[0], "accuracy": r.accuracy,
                         "mean_entropy": r.mean_entropy, "reports": r.reports}
                        for r in rs] for m, rs in per_seed.items()},
    }
    _write_text(out / "results.json", json.dumps(doc, indent=1, default=_json_default) + "\n")
    if cfg.diagnostics:
        _write_filtration_log(cfg, out)
    for s in summaries.values():
        print(f"{s.method:<14} accuracy {s.mean:.4f} +/- {s.se:.4f}  entropy {np.mean(s.entropies):.4f}")
    names = list(summaries)
    if "ZERO_SHOT" in summaries:
        for m in names:
            if m != "ZERO_SHOT":
                d, se = paired_difference(summaries[m], summaries["ZERO_SHOT"])
                print(f"{m} - ZERO_SHOT: {d:+.4f} (paired se {se:.4f})")
    return EXIT_OK


def _write_filtration_log(cfg: RunConfig, out: Path):
    task = make_synthetic_task(seed=cfg.seeds[0], **_task_kwargs(cfg))
    aug = dataclasses.replace(cfg.augment, seed=task.seed)
    items = []
    for i in range(task.n_test):
        rep = adapt(task.sample(i), task.prompt_init, task.vocab, task.weights, aug, cfg.tuning,
                    sample_index=i)
        items.append((i, rep.diagnostics))
    _write_text(out / "filtration.csv", _comment(header_lines(cfg, "run")) + diagnostics_to_csv(items))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not serializable: {type(o)}")


def _mean_sweep(results: list[SweepResult]) -> SweepResult:
    first = results[0]
    acc = np.mean([r.accuracy for r in results], axis=0)
    return SweepResult(first.axis_names, first.axis_values, acc)


def cmd_sweep(cfg: RunConfig) -> int:
    out = _prepare_output(cfg)
    results = []
    for seed in cfg.seeds:
        task = make_synthetic_task(seed=seed, **_task_kwargs(cfg))
        aug = dataclasses.replace(cfg.augment, seed=seed)
        if cfg.sweep_axis == "MIX_GRID":
            results.append(sweep_mix_ratio(task, cfg.mix_diffusion_fractions,
                                           cfg.mix_standard_fractions, aug, cfg.tuning, cfg.workers))
        else:
            values = cfg.sweep_values
            if cfg.sweep_axis in ("NUM_VIEWS", "STEPS"):
                values = [int(v) for v in values]
            results.append(sweep_scalar(cfg.sweep_axis, values, task, aug, cfg.tuning,
                                        workers=cfg.workers))
    sweep = _mean_sweep(results)
    path = out / f"sweep_{cfg.sweep_axis.lower()}.csv"
    _write_text(path, sweep.to_csv("\n".join(header_lines(cfg, "sweep"))))
    print(f"wrote {path}")
    print(sweep.to_csv())
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, instances: int = 100) -> int:
    res = gradcheck(instances, seed=cfg.seed, config=cfg.tuning)
    status = "PASS" if res.ok else "FAIL"
    print(f"{status} max relative error {res.max_rel_error:.3e} "
          f"(tolerance {GRAD_REL_TOL:g}, {res.instances} instances, {res.seconds:.1f}s)")
    return EXIT_OK if res.ok else EXIT_CHECK_FAILED


def cmd_selftest(cfg: RunConfig, quick: bool = False) -> int:
    checks = selftest(quick=quick)
    for c in checks:
        print(f"{'PASS' if c.ok else 'FAIL'}  {c.name}" + (f"  ({c.detail})" if c.detail else ""))
    return EXIT_OK if all(c.ok for c in checks) else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="difftpt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"difftpt {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("run", "compare zero-shot, TPT and DiffTPT on synthetic tasks"),
                        ("sweep", "ablation sweep over one axis or the mix-ratio grid"),
                        ("gradcheck", "finite-difference audit of the prompt gradient"),
                        ("selftest", "brute-force oracle and invariant checks")]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", "-c", help="flat key=value config file")
        sp.add_argument("--set", "-s", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--out", "-o", help="output directory (same as output_dir=)")
        sp.add_argument("--workers", "-j", type=int, help="worker processes (same as workers=)")
        if name == "gradcheck":
            sp.add_argument("--instances", type=int, default=100)
        if name == "selftest":
            sp.add_argument("--quick", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.set)
    if args.out:
        overrides.append(f"output_dir={args.out}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    try:
        cfg = parse_config(args.config, overrides)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, args.instances)
        return cmd_selftest(cfg, args.quick)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
