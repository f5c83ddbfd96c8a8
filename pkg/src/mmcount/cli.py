"""Command line entry point: ``mmcount [command] --config FILE [--output-dir D] [--seed S]``.

A run is described by one YAML document with three sections::

    model:
      type: binomial            # or poisson
      q: [[-1, 2], [1, -2]]
      q_convention: column      # or row (transposed on load)
      lambda: [1, 3]
      n: 3                      # binomial only
      truncation_epsilon: 1e-12 # poisson only
      x0: [1, 0]
    task:
      command: dist
      times: [0.5, 1.0]
    output:
      directory: out
      precision: 1e-10

Chain states are numbered from 1 in configs and CSV output. Every command
writes ``<command>.csv`` and a ``<command>.meta.json`` sidecar. Exit status is
0 on success, 1 on invalid input and 2 when a numerical check fails.
"""

import argparse
import csv
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
import json
import math
import os
from pathlib import Path
import sys

import numpy as np
import scipy
import sklearn
import yaml

from . import __version__
from .acceptance import DEFAULT_SEED, run_all
from .binomial_model import (
    MMBinomialModel,
    char_function,
    conditional_joint,
    mgf,
    transient_marginals,
)
from .chain import adjugate_identity, invariant_distribution, stability_check, validate_generator
from .exceptions import (
    ConfigError,
    DimensionError,
    InternalError,
    NumericalCheckError,
    ValidationError,
)
from .filtering import (
    ObservationRecord,
    predict_joint_filtered,
    read_observations,
    run_filter,
    write_trajectory,
)
from .linalg import mat_exp
from .montecarlo import estimate_law, write_replications
from .poisson_model import (
    MMPoissonModel,
    char_function_poisson,
    conditional_counts_poisson,
    transient_counts,
    truncation_level,
)
from .rapid_limits import (
    exp_limit_check,
    lambda_infinity,
    limit_conditional_check,
    resolvent_limit_check,
    write_reports,
)

COMMANDS = ("validate", "dist", "cf", "mgf", "predict", "simulate", "filter", "limit",
            "selftest")
DEFAULT_PRECISION = 1e-10


@dataclass(frozen=True)
class ModelSpec:
    type: str
    q: tuple
    q_convention: str = "column"
    rates: tuple = ()
    n: int | None = None
    truncation_epsilon: float | None = None
    x0: tuple | None = None

    @property
    def d(self):
        return len(self.q)

    def build(self):
        """Fitted model; ``q`` is already in column convention."""
        x0 = None if self.x0 is None else list(self.x0)
        if self.type == "binomial":
            return MMBinomialModel([list(r) for r in self.q], list(self.rates),
                                   n_obligors=self.n, initial_law=x0).fit()
        eps = 1e-12 if self.truncation_epsilon is None else self.truncation_epsilon
        return MMPoissonModel([list(r) for r in self.q], list(self.rates), initial_law=x0,
                              truncation_epsilon=eps).fit()


@dataclass(frozen=True)
class TaskSpec:
    command: str = "dist"
    times: tuple = (1.0,)
    u_grid: tuple = ()
    v_grid: tuple = ()
    alpha_grid: tuple = (10.0, 100.0, 1000.0, 10000.0)
    elapsed: float | None = None
    state: tuple | None = None
    observations: str | None = None
    horizon: float | None = None
    grid_step: float = 0.1
    replications: int = 10000
    seed: int = DEFAULT_SEED
    rao_blackwell: bool = False
    write_replications: bool = False


@dataclass(frozen=True)
class OutputSpec:
    directory: str | None = None
    precision: float = DEFAULT_PRECISION


@dataclass(frozen=True)
class RunSpec:
    model: ModelSpec
    task: TaskSpec = field(default_factory=TaskSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    base_dir: str | None = field(default=None, compare=False)

    def observations_path(self):
        p = Path(self.task.observations)
        if not p.is_absolute() and self.base_dir:
            p = Path(self.base_dir) / p
        return p


# ---------------------------------------------------------------- parsing

def _number(value, path, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    try:
        x = float(value)
    except ValueError:
        raise ConfigError(path, f"expected a number, got {value!r}") from None
    if not math.isfinite(x):
        raise ConfigError(path, "must be finite")
    if integer:
        if x != int(x):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(x)
    return x


def _numbers(value, path):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(path, f"expected a list of numbers, got {value!r}")
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))


def _section(doc, name, required=True):
    sec = doc.get(name)
    if sec is None:
        if required:
            raise ConfigError(name, "section is missing")
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(name, "must be a mapping")
    return sec


def _check_keys(sec, allowed, path):
    extra = sorted(set(sec) - set(allowed))
    if extra:
        raise ConfigError(f"{path}.{extra[0]}", "unknown field")


def _parse_model(sec):
    _check_keys(sec, ("type", "q", "q_convention", "lambda", "n", "truncation_epsilon", "x0"),
                "model")
    kind = sec.get("type")
    if kind not in ("binomial", "poisson"):
        raise ConfigError("model.type", f"must be 'binomial' or 'poisson', got {kind!r}")
    raw = sec.get("q")
    if not isinstance(raw, list) or not raw or not all(isinstance(r, list) for r in raw):
        raise ConfigError("model.q", "expected a list of rows")
    rows = [_numbers(r, f"model.q[{i}]") for i, r in enumerate(raw)]
    d = len(rows)
    if any(len(r) != d for r in rows):
        raise ConfigError("model.q", f"must be square, got {d} rows of lengths "
                          f"{[len(r) for r in rows]}")
    conv = sec.get("q_convention", "column")
    if conv not in ("column", "row"):
        raise ConfigError("model.q_convention", f"must be 'column' or 'row', got {conv!r}")
    q = np.array(rows)
    if conv == "row":
        q = q.T
    # generator errors are reported as raised by the chain module
    validate_generator(q)
    if "lambda" not in sec:
        raise ConfigError("model.lambda", "is required")
    rates = _numbers(sec["lambda"], "model.lambda")
    if len(rates) != d:
        raise DimensionError(f"model.lambda: has length {len(rates)}, expected d={d}")
    if any(r < 0 for r in rates):
        raise ConfigError("model.lambda", "entries must be nonnegative")
    n = eps = None
    if kind == "binomial":
        if "truncation_epsilon" in sec:
            raise ConfigError("model.truncation_epsilon", "only applies to poisson models")
        n = _number(sec.get("n", 1), "model.n", integer=True)
        if n < 1:
            raise ConfigError("model.n", "must be >= 1")
    else:
        if "n" in sec:
            raise ConfigError("model.n", "only applies to binomial models")
        if "truncation_epsilon" in sec:
            eps = _number(sec["truncation_epsilon"], "model.truncation_epsilon")
            if not 0 < eps <= 1e-3:
                raise ConfigError("model.truncation_epsilon", "must be in (0, 1e-3]")
    x0 = None
    if sec.get("x0") is not None:
        x0 = _numbers(sec["x0"], "model.x0")
        if len(x0) != d:
            raise DimensionError(f"model.x0: has length {len(x0)}, expected d={d}")
        if any(v < 0 for v in x0) or abs(sum(x0) - 1.0) > 1e-10:
            raise ConfigError("model.x0", "must be a probability vector")
    return ModelSpec(type=kind, q=tuple(tuple(float(v) for v in r) for r in q),
                     q_convention=conv, rates=rates, n=n, truncation_epsilon=eps, x0=x0)


def _parse_task(sec, model):
    _check_keys(sec, TaskSpec.__dataclass_fields__, "task")
    out = {}
    cmd = sec.get("command", "dist")
    if cmd not in COMMANDS:
        raise ConfigError("task.command", f"must be one of {', '.join(COMMANDS)}")
    out["command"] = cmd
    for key in ("times", "u_grid", "v_grid", "alpha_grid"):
        if key in sec:
            vals = _numbers(sec[key], f"task.{key}")
            if key in ("times", "v_grid", "alpha_grid") and any(v < 0 for v in vals):
                raise ConfigError(f"task.{key}", "entries must be nonnegative")
            out[key] = vals
    if "alpha_grid" in out:
        a = out["alpha_grid"]
        if not a or a[0] <= 0 or any(y <= x for x, y in zip(a, a[1:])):
            raise ConfigError("task.alpha_grid", "must be positive and strictly increasing")
    for key in ("elapsed", "horizon", "grid_step"):
        if key in sec and sec[key] is not None:
            v = _number(sec[key], f"task.{key}")
            if v < 0 or (key == "grid_step" and v == 0):
                raise ConfigError(f"task.{key}", "out of range")
            out[key] = v
    if sec.get("state") is not None:
        st = sec["state"]
        if not isinstance(st, list) or len(st) != 2:
            raise ConfigError("task.state", "expected [count, chain_state]")
        k0 = _number(st[0], "task.state[0]", integer=True)
        j0 = _number(st[1], "task.state[1]", integer=True)
        if k0 < 0 or (model.n is not None and k0 > model.n):
            raise ConfigError("task.state[0]", f"count {k0} out of range")
        if not 1 <= j0 <= model.d:
            raise ConfigError("task.state[1]", f"chain state must be in 1..{model.d}")
        out["state"] = (k0, j0)
    if sec.get("observations") is not None:
        if not isinstance(sec["observations"], str):
            raise ConfigError("task.observations", "expected a file path")
        out["observations"] = sec["observations"]
    if "replications" in sec:
        r = _number(sec["replications"], "task.replications", integer=True)
        if r < 1000:
            raise ConfigError("task.replications", "must be >= 1000")
        out["replications"] = r
    if "seed" in sec:
        s = _number(sec["seed"], "task.seed", integer=True)
        if s < 0:
            raise ConfigError("task.seed", "must be nonnegative")
        out["seed"] = s
    for key in ("rao_blackwell", "write_replications"):
        if key in sec:
            if not isinstance(sec[key], bool):
                raise ConfigError(f"task.{key}", "expected true or false")
            out[key] = sec[key]
    return TaskSpec(**out)


def _parse_output(sec):
    _check_keys(sec, ("directory", "precision"), "output")
    out = {}
    if sec.get("directory") is not None:
        out["directory"] = str(sec["directory"])
    if "precision" in sec:
        p = _number(sec["precision"], "output.precision")
        if not 0 < p < 1:
            raise ConfigError("output.precision", "must be in (0, 1)")
        out["precision"] = p
    return OutputSpec(**out)


def parse_config(text, base_dir=None):
    """Parse and validate a YAML run document into a :class:`RunSpec`."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"not valid YAML ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("<document>", "expected a mapping with model/task/output sections")
    _check_keys(doc, ("model", "task", "output"), "<document>")
    model = _parse_model(_section(doc, "model"))
    task = _parse_task(_section(doc, "task", required=False), model)
    output = _parse_output(_section(doc, "output", required=False))
    spec = RunSpec(model=model, task=task, output=output,
                   base_dir=None if base_dir is None else str(base_dir))
    if task.observations is not None and not spec.observations_path().is_file():
        raise ConfigError("task.observations", f"file not found: {spec.observations_path()}")
    return spec


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, base_dir=path.parent)


def spec_to_dict(spec):
    m = spec.model
    q = np.array(m.q)
    if m.q_convention == "row":
        q = q.T
    model = {"type": m.type, "q": [list(map(float, r)) for r in q],
             "q_convention": m.q_convention, "lambda": list(m.rates)}
    if m.n is not None:
        model["n"] = m.n
    if m.truncation_epsilon is not None:
        model["truncation_epsilon"] = m.truncation_epsilon
    if m.x0 is not None:
        model["x0"] = list(m.x0)
    task = {}
    for k, v in asdict(spec.task).items():
        if v is None:
            continue
        task[k] = list(v) if isinstance(v, tuple) else v
    output = {k: v for k, v in asdict(spec.output).items() if v is not None}
    return {"model": model, "task": task, "output": output}


def emit_config(spec):
    """YAML text that :func:`parse_config` maps back to an equal RunSpec."""
    return yaml.safe_dump(spec_to_dict(spec), sort_keys=False)


# ---------------------------------------------------------------- output

def fmt(x):
    """Shortest round-trip decimal for floats; integers as is."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _check_mass(label, total, tol):
    if abs(total - 1.0) > tol:
        raise NumericalCheckError(
            f"{label}: probabilities sum to {float(total)!r}, not 1 within {tol:g}")


def _joint_rows(key, blocks):
    for k, row in enumerate(blocks):
        for j, p in enumerate(row):
            yield (key, k, j + 1, float(p))


# ---------------------------------------------------------------- commands

def _cmd_validate(spec, model, out):
    d = model.d_
    rows = [("d", d), ("lambda_inf", lambda_infinity(model.q_, model.lam_))]
    pi = invariant_distribution(model.q_)
    rows += [(f"pi_{j + 1}", pi[j]) for j in range(d)]
    _, qdet = adjugate_identity(model.q_)
    rows.append(("adjugate_scale", qdet))
    if model.rates_.all_positive:
        rep = stability_check(model.q_, model.lam_, [1.0, 10.0, 50.0])
        rows.append(("cond_q_lambda", rep.condition_number))
        rows.append(("survival_norm_50", float(rep.norms[-1])))
    write_csv(out / "validate.csv", ["quantity", "value"], rows)
    return {}


def _cmd_dist(spec, model, out):
    tol = spec.output.precision
    rows, extra = [], {}
    for t in spec.task.times:
        if isinstance(model, MMBinomialModel):
            blocks = transient_marginals(model, t).blocks
            _check_mass(f"t={t}", blocks.sum(), tol)
        else:
            law = transient_counts(model, t)
            blocks = law.blocks
            extra[f"tail_bound_t={t!r}"] = law.tail_bound
            _check_mass(f"t={t}", blocks.sum(), max(tol, law.tail_bound))
        rows.extend(_joint_rows(t, blocks))
    write_csv(out / "dist.csv", ["t", "k", "state", "prob"], rows)
    return extra


def _u_grid(spec):
    return spec.task.u_grid or tuple(2 * math.pi * np.arange(16) / 16)


def _cmd_cf(spec, model, out):
    rows = []
    for t in spec.task.times:
        us = np.array(_u_grid(spec))
        if isinstance(model, MMBinomialModel):
            vals = char_function(model, t, us).sum(axis=1)
        else:
            vals = char_function_poisson(model, t, us).sum(axis=1)
        rows.extend((t, float(u), v.real, v.imag) for u, v in zip(us, vals))
    write_csv(out / "cf.csv", ["t", "u", "re", "im"], rows)
    return {}


def _cmd_mgf(spec, model, out):
    rows = []
    vs = spec.task.v_grid or (0.0, 0.5, 1.0, 2.0)
    for t in spec.task.times:
        for v in vs:
            if isinstance(model, MMBinomialModel):
                vec = mgf(model, t, v)
            else:
                m = (math.exp(-v) - 1.0) * np.diag(model.lam_) + model.q_
                vec = mat_exp(m, t) @ model.initial_law_
            rows.extend((t, v, j + 1, float(x)) for j, x in enumerate(vec))
    write_csv(out / "mgf.csv", ["t", "v", "state", "value"], rows)
    return {}


def _cmd_predict(spec, model, out):
    task, tol = spec.task, spec.output.precision
    elapsed = 1.0 if task.elapsed is None else task.elapsed
    extra = {}
    if task.observations is not None:
        times = read_observations(spec.observations_path())
        horizon = task.horizon if task.horizon is not None else (
            float(times[-1]) if times.size else 0.0)
        record = ObservationRecord.for_model(model, times, horizon)
        state = run_filter(model, record, grid_step=None).final
        law = predict_joint_filtered(model, state, elapsed)
        blocks = law.blocks
        extra["filtered_xhat"] = [float(v) for v in state.xhat]
        extra["observed_count"] = state.count
        bound = getattr(law, "tail_bound", 0.0)
    else:
        k0, j0 = task.state if task.state is not None else (0, 1)
        if isinstance(model, MMBinomialModel):
            blocks = conditional_joint(model, elapsed, (k0, j0 - 1)).blocks
            bound = 0.0
        else:
            m = truncation_level(model.rates_.max, elapsed, model.truncation_epsilon_)
            rows = conditional_counts_poisson(model, elapsed, (k0, j0 - 1), m)
            blocks = np.zeros((k0 + m + 1, model.d_))
            blocks[k0:] = rows
            bound = model.truncation_epsilon_
    _check_mass("conditional law", blocks.sum(), max(tol, bound))
    write_csv(out / "predict.csv", ["elapsed", "k", "state", "prob"],
              _joint_rows(elapsed, blocks))
    return extra


def _cmd_simulate(spec, model, out, seed):
    task, rows = spec.task, []
    extra = {"replications": task.replications, "rao_blackwell": task.rao_blackwell}
    for i, t in enumerate(task.times):
        rep = estimate_law(model, t, task.replications, seed + i,
                           rao_blackwell=task.rao_blackwell)
        lo, hi = rep.confidence_interval(marginal=False)
        for k in range(rep.estimates.shape[0]):
            for j in range(model.d_):
                rows.append((t, k, j + 1, rep.estimates[k, j], rep.standard_errors[k, j],
                             lo[k, j], hi[k, j]))
        extra[f"overflow_t={t!r}"] = rep.overflow
        _check_mass(f"t={t}", rep.estimates.sum() + rep.overflow,
                    max(spec.output.precision, 1e-9))
    write_csv(out / "simulate.csv",
              ["t", "k", "state", "estimate", "std_error", "ci_low", "ci_high"], rows)
    if task.write_replications:
        write_replications(out / "simulate_replications.csv", model, task.times,
                           task.replications, seed)
    return extra


def _cmd_filter(spec, model, out):
    if spec.task.observations is None:
        raise ConfigError("task.observations", "the filter command needs an observation file")
    times = read_observations(spec.observations_path())
    horizon = spec.task.horizon if spec.task.horizon is not None else (
        float(times[-1]) if times.size else 0.0)
    record = ObservationRecord.for_model(model, times, horizon)
    traj = run_filter(model, record, grid_step=spec.task.grid_step)
    for x in traj.xhat:
        _check_mass("posterior", x.sum(), spec.output.precision)
    write_trajectory(out / "filter.csv", traj, fmt=fmt)
    return {"max_drift_rate": traj.max_drift_rate}


def _cmd_limit(spec, model, out):
    alphas = spec.task.alpha_grid
    t = spec.task.times[0] if spec.task.times else 1.0
    reports = []
    if model.rates_.all_positive:
        reports.append(resolvent_limit_check(model.q_, model.lam_, alphas))
    reports.append(exp_limit_check(model.q_, model.lam_, 1, t, alphas))
    if isinstance(model, MMBinomialModel) and model.rates_.all_positive:
        k0, j0 = spec.task.state if spec.task.state is not None else (0, 1)
        elapsed = 1.0 if spec.task.elapsed is None else spec.task.elapsed
        reports.append(limit_conditional_check(model, alphas, elapsed, (k0, j0 - 1)))
    write_reports(out / "limit.csv", reports)
    return {"slopes": {r.identity: r.slope for r in reports},
            "lambda_inf": lambda_infinity(model.q_, model.lam_)}


def shipped_configs():
    """Paths of the example configurations installed with the package."""
    root = resources.files("mmcount") / "configs"
    return sorted(Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml"))


def _cmd_selftest(spec, out, seed, echo):
    results = run_all(seed=seed, echo=echo)
    rows = []
    for r in results:
        for key, val in r.measurements.items():
            rows.append((r.number, r.passed, key, val))
    write_csv(out / "selftest.csv", ["criterion", "passed", "measure", "value"], rows)
    failed = [r.number for r in results if not r.ok]
    if spec is not None:
        configs = [(spec.task.command, spec)]
    else:
        configs = [(p.stem, load_config(p)) for p in shipped_configs()]
    names = []
    for name, cfg in configs:
        if cfg.task.command == "selftest":
            continue
        sub = out / "configs" / name
        status = execute(cfg, sub, seed=seed)
        names.append(name)
        if echo:
            echo(f"config {name}: exit {status}")
        if status != 0:
            failed.append(name)
    if failed:
        raise NumericalCheckError(f"selftest failures: {failed}")
    return {"criteria": [r.number for r in results], "configs": names}


def execute(spec, output_dir, command=None, seed=None, echo=None):
    """Run ``command`` (default: the config's) and write its outputs under ``output_dir``."""
    command = command or (spec.task.command if spec is not None else "selftest")
    if command not in COMMANDS:
        raise ConfigError("command", f"must be one of {', '.join(COMMANDS)}")
    if seed is None:
        seed = spec.task.seed if spec is not None else DEFAULT_SEED
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if command == "selftest":
        extra = _cmd_selftest(spec, out, seed, echo)
    else:
        if spec is None:
            raise ConfigError("--config", f"the {command} command needs a config file")
        model = spec.model.build()
        handlers = {"validate": _cmd_validate, "dist": _cmd_dist, "cf": _cmd_cf,
                    "mgf": _cmd_mgf, "predict": _cmd_predict, "filter": _cmd_filter,
                    "limit": _cmd_limit}
        if command == "simulate":
            extra = _cmd_simulate(spec, model, out, seed)
        else:
            extra = handlers[command](spec, model, out)
    meta = {
        "command": command,
        "seed": seed,
        "precision": spec.output.precision if spec is not None else DEFAULT_PRECISION,
        "truncation_epsilon": getattr(spec.model, "truncation_epsilon", None) if spec else None,
        "versions": {"mmcount": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "scikit-learn": sklearn.__version__,
                     "python": ".".join(map(str, sys.version_info[:3]))},
        "config": spec_to_dict(spec) if spec is not None else None,
        "details": extra,
    }
    with open(out / f"{command}.meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=fmt)
        fh.write("\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="mmcount", description=__doc__.split("\n")[0])
    p.add_argument("command", nargs="?", choices=COMMANDS,
                   help="defaults to task.command from the config")
    p.add_argument("--config", help="YAML run document")
    p.add_argument("--output-dir", help="overrides output.directory")
    p.add_argument("--seed", type=int, help="overrides task.seed")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        spec = load_config(args.config) if args.config else None
        command = args.command or (spec.task.command if spec else None)
        if command is None:
            raise ConfigError("command", "give a command or a config with task.command")
        if args.seed is not None and spec is not None:
            spec = replace(spec, task=replace(spec.task, seed=args.seed))
        out = args.output_dir or (spec.output.directory if spec and spec.output.directory
                                  else os.curdir)
        echo = print if command == "selftest" else None
        return execute(spec, out, command=command, seed=args.seed, echo=echo)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ArithmeticError, InternalError) as exc:
        print(f"numerical check failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
