"""Command-line front end: ``run``, ``eval`` and ``verify``.

Exit codes: 0 ok, 1 audit failure, 2 invalid input, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import platform
import re
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, adcore, mlp, problems, tfc, train

EXIT_OK, EXIT_AUDIT, EXIT_INPUT, EXIT_TRAIN = 0, 1, 2, 3

MODEL_FILE = "model.json"
DIAG_FILE = "diagnostics.jsonl"
ERRORS_FILE = "errors.csv"
MANIFEST_FILE = "manifest.json"


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def config_schema():
    return json.loads(resources.files("deeptfc").joinpath("config.schema.json").read_text())


def _line_of(text, path):
    """Best-effort line number of a JSON path inside ``text``."""
    pos, line = 0, None
    for key in path:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if not m:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise InputError(f"{path}: cannot read config: {e.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise InputError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from None
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            path_for_line = list(e.absolute_path)
            if e.validator == "additionalProperties":
                extra = re.findall(r"'([^']+)'", e.message)
                path_for_line += extra[:1]
            line = _line_of(text, path_for_line)
            prefix = f"{path}:{line}" if line else str(path)
            msgs.append(f"{prefix}: {where}: {e.message}")
        raise InputError("\n".join(msgs))
    return cfg


def resolve(cfg):
    """Problem definition and training config with overrides applied."""
    problem = problems.get(cfg["problem"])
    net = cfg.get("network", {})
    if "input_dim" in net and net["input_dim"] != problem.n:
        raise InputError(f"network.input_dim={net['input_dim']} but {problem.name} has {problem.n} inputs")
    if net:
        specs = {}
        for k, s in problem.networks.items():
            specs[k] = mlp.NetworkSpec(problem.n, tuple(net.get("hidden_widths", s.hidden_widths)), 1,
                                       net.get("activation", s.activation))
        problem = problem.with_networks(specs)
    base = problem.config
    ls = cfg.get("line_search", {})
    try:
        tc = train.TrainConfig(
            optimizer=cfg.get("optimizer", base.optimizer),
            batch_size=cfg.get("batch_size", base.batch_size),
            max_iterations=cfg.get("max_iterations", base.max_iterations),
            gtol=cfg.get("gtol", base.gtol),
            adam=train.AdamConfig(**{**vars(base.adam), **cfg.get("adam", {})}),
            adam_iterations=cfg.get("adam_iterations", base.adam_iterations),
            resample=cfg.get("resample", base.resample),
            c1=ls.get("c1", base.c1),
            c2=ls.get("c2", base.c2),
            lbfgs=cfg.get("lbfgs", base.lbfgs),
            memory=cfg.get("memory", base.memory),
            time_limit_s=cfg.get("time_limit_s", base.time_limit_s),
            seed=cfg.get("seed", 0),
        )
    except ValueError as e:
        raise InputError(str(e)) from None
    return problem, tc


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------


def model_to_json(problem_name, params):
    if len(params) == 1:
        (name, p), = params.items()
        return {"problem": problem_name, "field": name, **mlp.to_json_dict(p)}
    return {"problem": problem_name, "fields": {k: mlp.to_json_dict(p) for k, p in params.items()}}


def model_from_json(doc, problem):
    if "fields" in doc:
        params = {k: mlp.from_json_dict(v) for k, v in doc["fields"].items()}
    else:
        name = doc.get("field", next(iter(problem.fields)))
        params = {name: mlp.from_json_dict(doc)}
    if set(params) != set(problem.fields):
        raise InputError(f"model has fields {sorted(params)}, {problem.name} needs {sorted(problem.fields)}")
    for k, p in params.items():
        if p.spec.input_dim != problem.n or p.spec.output_dim != 1:
            raise InputError(
                f"field {k}: network maps {p.spec.input_dim} -> {p.spec.output_dim}, "
                f"{problem.name} needs {problem.n} -> 1"
            )
    return params


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _trained_exactness(problem, params, trials_points=64, seed=0):
    worst = 0.0
    for k, expr in problem.fields.items():
        p = params[k]
        net = mlp.bind(p.spec, p)
        rep = tfc.verify_exactness(expr, trials=1, seed=seed, domain=problem.domain, points=trials_points,
                                   free_functions=[lambda *xs, _n=net: _n(xs)])
        worst = max(worst, rep.max_violation)
    return worst


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_run(args):
    try:
        cfg = load_config(args.config)
        problem, tc = resolve(cfg)
    except (InputError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(cfg["output_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"error: cannot create output directory {out}: {e.strerror}", file=sys.stderr)
        return EXIT_INPUT

    seed = tc.seed
    t0 = time.perf_counter()
    with open(out / DIAG_FILE, "w") as log:
        diag = train.Diagnostics([sys.stderr, log], t0)
        try:
            params, result, objective = problems.fit(problem, tc, diag)
        except (train.TrainingError, adcore.NonFiniteError) as e:
            print(f"error: training failed: {e}", file=sys.stderr)
            _write_json(out / MANIFEST_FILE, {
                "status": "failed", "error": str(e), "config": cfg,
                "train_config": tc.to_dict(), "diagnostics": DIAG_FILE,
            })
            return EXIT_TRAIN
    wall = time.perf_counter() - t0

    _write_json(out / MODEL_FILE, model_to_json(problem.name, params))
    grid_n = cfg.get("grid_points", 10)
    report = problems.error_report(problem, params, problems.evaluation_grid(problem, grid_n))
    report.to_csv(out / ERRORS_FILE)
    exact = _trained_exactness(problem, params, seed=seed)
    manifest = {
        "status": "ok",
        "config": cfg,
        "resolved": {
            "problem": problem.name,
            "networks": {k: s.to_dict() for k, s in problem.networks.items()},
            "train_config": tc.to_dict(),
            "grid_points": grid_n,
        },
        "seed": seed,
        "wall_time_s": wall,
        "final_loss": result.loss,
        "final_grad_norm": result.grad_norm,
        "iterations": result.iterations,
        "stop_reason": result.stop_reason,
        "objective_evaluations": objective.n_evals,
        "error_report": report.summary(),
        "boundary_exactness": {"max_violation": exact, "tol": tfc.EXACTNESS_TOL,
                               "passed": exact <= tfc.EXACTNESS_TOL},
        "files": {"model": MODEL_FILE, "diagnostics": DIAG_FILE, "errors": ERRORS_FILE},
        "environment": {"deeptfc": __version__, "numpy": np.__version__,
                        "python": platform.python_version()},
    }
    if problem.name == "problem4":
        manifest["symmetry_max_abs_diff"] = problems.symmetry_report(problem, params)
    _write_json(out / MANIFEST_FILE, manifest)
    _print_summary(report)
    return EXIT_OK


def _print_summary(report):
    for k in report.errors:
        print(f"{report.problem} {k}: max {report.max_abs_error[k]:.4e} {report.units}, "
              f"mean {report.mean_abs_error[k]:.4e} {report.units} over {len(report.points)} points")


def cmd_eval(args):
    try:
        problem = problems.get(args.problem)
        path = Path(args.model)
        try:
            doc = json.loads(path.read_text())
        except OSError as e:
            raise InputError(f"{path}: cannot read model: {e.strerror}") from None
        except json.JSONDecodeError as e:
            raise InputError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from None
        if doc.get("problem", problem.name) != problem.name:
            raise InputError(f"model was trained for {doc['problem']}, not {problem.name}")
        try:
            params = model_from_json(doc, problem)
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"{path}: malformed model: {e}") from None
        if args.grid < 2:
            raise InputError("--grid must be >= 2")
    except (InputError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    report = problems.error_report(problem, params, problems.evaluation_grid(problem, args.grid))
    out = Path(args.out) if args.out else path.with_name(path.stem + "_" + ERRORS_FILE)
    report.to_csv(out)
    _print_summary(report)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_verify(args):
    try:
        problem = problems.get(args.problem)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    if args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    checks = problems.audits(problem, args.trials, args.seed)
    for c in checks:
        print(f"{problem.name} {c.line()}")
    ok = all(c.passed for c in checks)
    print(f"{problem.name}: {'all checks passed' if ok else 'audit FAILED'}")
    return EXIT_OK if ok else EXIT_AUDIT


def build_parser():
    ap = argparse.ArgumentParser(prog="deeptfc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train from a JSON config")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a saved model on the test grid")
    p.add_argument("model")
    p.add_argument("problem", choices=problems.PROBLEMS)
    p.add_argument("--grid", type=int, default=10, help="points per dimension (default 10)")
    p.add_argument("--out", help="CSV path (default: next to the model)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="exactness and reference audits")
    p.add_argument("problem", choices=problems.PROBLEMS)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse uses 2 for usage errors, which matches EXIT_INPUT
        return int(e.code or 0)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
