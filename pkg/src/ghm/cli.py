"""Command-line interface: ``ghm fit | select | simulate | evaluate | replicate``.

Every option can also be given in a flat ``key = value`` config file passed
with ``--config``. Keys are the long flag names without the leading dashes
(``max-iter`` and ``max_iter`` are both accepted). Values given on the
command line override the file, which overrides built-in defaults.

Exit codes: 0 success, 1 input or usage error, 2 non-convergence (results
are still written), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import em, simulate
from .data import DataError, Schema, load_dataset, load_similarity, save_dataset
from .families import FamilyError, parse_families
from .selection import SelectionGrid, parse_range, select

log = logging.getLogger("ghm")

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGED, EXIT_NUMERICAL = 0, 1, 2, 3

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- #
# Argument definitions
# --------------------------------------------------------------------------- #


def _data_args(p):
    p.add_argument("--data", required=False, help="input CSV")
    p.add_argument("--cluster", default="cluster", help="cluster id column")
    p.add_argument("--response", default="y", help="response column")
    p.add_argument("--covariates", default="", help="comma-separated covariate columns")
    p.add_argument("--offset", default=None, help="exposure column (counts only)")
    p.add_argument("--no-intercept", action="store_true", help="do not add an intercept column")


def _fit_args(p):
    p.add_argument("--families", default="gaussian",
                   help="component families, e.g. gaussian or zeromass+poisson+poisson")
    p.add_argument("--xi", type=float, default=0.0, help="similarity penalty weight")
    p.add_argument("--similarity", default=None, help="similarity matrix file")
    p.add_argument("--similarity-format", default="dense-csv", choices=["dense-csv", "edge-list"])
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--restarts", type=int, default=10, help="k-means restarts at initialization")
    p.add_argument("--local-starts", type=int, default=3, help="random starts per local mixture")
    p.add_argument("--sequential-gamma", action="store_true",
                   help="update labels one cluster at a time (penalized mode)")


def _common(p):
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ghm", description="Grouped heterogeneous mixture models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit one (G, L) model")
    _common(p)
    _data_args(p)
    _fit_args(p)
    p.add_argument("--G", type=int, default=1)
    p.add_argument("--L", type=int, default=1)
    p.add_argument("--out", default=None, help="fit JSON (default: stdout)")

    p = sub.add_parser("select", help="fit a (G, L) grid and pick the IC minimizer")
    _common(p)
    _data_args(p)
    _fit_args(p)
    p.add_argument("--G", default="1..8", help="candidate G values, e.g. 1..8 or 1,2,3")
    p.add_argument("--L", default="1..4", help="candidate L values")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--table", default=None, help="IC table CSV")
    p.add_argument("--out", default=None, help="selected-cell JSON (default: stdout)")

    p = sub.add_parser("simulate", help="generate a scenario dataset")
    _common(p)
    p.add_argument("--kind", default="gaussian", choices=list(simulate.RESPONSE_KINDS))
    p.add_argument("--scenario", default="II", choices=list(simulate.SCENARIOS))
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--n", type=int, default=80)
    p.add_argument("--out", default=None, help="dataset CSV")
    p.add_argument("--truth", default=None, help="truth JSON")

    p = sub.add_parser("evaluate", help="MISE of a fit against a simulation truth")
    _common(p)
    p.add_argument("--fit", default=None, help="fit JSON (or a truth JSON)")
    p.add_argument("--truth", default=None, help="truth JSON")

    p = sub.add_parser("replicate", help="Monte Carlo study over seeded replications")
    _common(p)
    p.add_argument("--kind", default="gaussian", choices=list(simulate.RESPONSE_KINDS))
    p.add_argument("--scenario", default="II", choices=list(simulate.SCENARIOS))
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--n", type=int, default=80)
    p.add_argument("--R", type=int, default=10)
    p.add_argument("--methods", default=",".join(simulate.METHODS))
    p.add_argument("--G-max", type=int, default=10)
    p.add_argument("--L-candidates", default="1..4")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="results CSV (default: stdout)")
    p.add_argument("--manifest", default=None, help="JSON manifest with seeds and records")
    return parser


# --------------------------------------------------------------------------- #
# Config files
# --------------------------------------------------------------------------- #


def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` comments; an optional section header is ignored."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    if not text.lstrip().startswith("["):
        text = "[ghm]\n" + text
    cp.read_string(text)
    out: dict[str, str] = {}
    for section in cp.sections():
        for k, v in cp.items(section):
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sub = _subparser(parser, args.command)
    try:
        values = read_config(args.config)
    except (OSError, configparser.Error) as e:
        sub.error(f"cannot read config {args.config}: {e}")
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        if key in ("config", "help") or key not in actions:
            sub.error(f"unknown config key {key!r}")
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in _BOOL:
                sub.error(f"config key {key!r} expects a boolean, got {value!r}")
            defaults[key] = _BOOL[value.lower()]
        else:
            defaults[key] = value  # argparse converts string defaults with the action's type
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------- #
# Helpers
# --------------------------------------------------------------------------- #


def _need(args, *names):
    for n in names:
        if getattr(args, n) in (None, ""):
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _load_data(args):
    _need(args, "data")
    cov = [c.strip() for c in args.covariates.split(",") if c.strip()]
    schema = Schema(cluster=args.cluster, response=args.response, covariates=tuple(cov),
                    offset=args.offset, intercept=not args.no_intercept)
    return load_dataset(args.data, schema)


def _load_similarity(args, data):
    if args.similarity is None:
        return None
    return load_similarity(args.similarity, data.m, format=args.similarity_format)


def _config(args, G, L):
    return em.FitConfig(G=G, L=L, xi=args.xi, tol=args.tol, max_iter=args.max_iter,
                        seed=args.seed, n_init_restarts=args.restarts,
                        sequential_gamma=args.sequential_gamma, local_starts=args.local_starts)


def _write(text: str, path: str | None):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def run_fit(args) -> int:
    data = _load_data(args)
    sim = _load_similarity(args, data)
    kinds = parse_families(args.families)
    result = em.fit(data, _config(args, args.G, args.L), kinds, similarity=sim)
    _write(simulate.dumps(result.to_dict()) + "\n", args.out)
    if not result.converged:
        log.error("no convergence after %d iterations", result.n_iter)
        return EXIT_NONCONVERGED
    return EXIT_OK


def run_select(args) -> int:
    data = _load_data(args)
    sim = _load_similarity(args, data)
    kinds = parse_families(args.families)
    grid = SelectionGrid(parse_range(args.G), parse_range(args.L))
    select(data, grid, _config(args, 1, 1), kinds, similarity=sim, jobs=args.jobs)
    if args.table is not None:
        Path(args.table).write_text(grid.to_csv())
    out = grid.to_dict()
    out["fit"] = grid.best_result.to_dict()
    _write(simulate.dumps(out) + "\n", args.out)
    if not grid.best_result.converged:
        log.error("selected cell %s did not converge", grid.best)
        return EXIT_NONCONVERGED
    return EXIT_OK


def run_simulate(args) -> int:
    _need(args, "out", "truth")
    data, truth = simulate.generate(
        simulate.ScenarioSpec(args.kind, args.scenario, args.m, args.n, args.seed))
    save_dataset(data, args.out)
    Path(args.truth).write_text(simulate.dumps(truth.to_dict()) + "\n")
    return EXIT_OK


def _estimator(doc: dict, truth: simulate.TrueModel):
    schema = doc.get("schema")
    if schema == "ghm-truth/1":
        return simulate.TrueModel.from_dict(doc)
    if schema != "ghm-fit/1":
        raise ValueError(f"unsupported document schema {schema!r}")
    result = em.FitResult.from_dict(doc)
    est = simulate.MixtureDensity.from_fit(result)
    if result.cluster_ids and tuple(result.cluster_ids) != tuple(truth.cluster_ids):
        pos = {c: i for i, c in enumerate(result.cluster_ids)}
        missing = [c for c in truth.cluster_ids if c not in pos]
        if missing:
            raise ValueError(f"fit has no cluster {missing[0]!r}")
        idx = [pos[c] for c in truth.cluster_ids]
        est = simulate.MixtureDensity(est.pi[idx], [est.phi[i] for i in idx])
    return est


def run_evaluate(args) -> int:
    _need(args, "fit", "truth")
    truth = simulate.TrueModel.from_dict(_read_json(args.truth))
    est = _estimator(_read_json(args.fit), truth)
    value = simulate.mise(est, truth, truth.kind)
    scale = simulate.REPORT_SCALE[truth.kind]
    print(json.dumps({"mise": value, "sqrt_mise": float(np.sqrt(value)),
                      "scaled_sqrt_mise": float(np.sqrt(value) * scale), "scale": scale}))
    return EXIT_OK


def run_replicate(args) -> int:
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    study = simulate.StudySpec(args.kind, args.scenario, args.m, args.n, args.R, seed=args.seed,
                               methods=methods, G_max=args.G_max,
                               L_candidates=tuple(parse_range(args.L_candidates)),
                               tol=args.tol, max_iter=args.max_iter)

    def progress(rec):
        log.info("replication %d done: %s", rec["replication"],
                 {k: round(float(v), 6) for k, v in rec["mise"].items()})

    res = simulate.replicate(study, jobs=args.jobs, progress=progress)
    _write(res.to_csv(), args.out)
    if args.manifest is not None:
        Path(args.manifest).write_text(simulate.dumps(res.manifest()) + "\n")
    return EXIT_OK


COMMANDS = {
    "fit": run_fit,
    "select": run_select,
    "simulate": run_simulate,
    "evaluate": run_evaluate,
    "replicate": run_replicate,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DataError, OSError, IndexError, KeyError, TypeError,
            json.JSONDecodeError) as e:
        print(f"ghm {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ArithmeticError, FamilyError, np.linalg.LinAlgError, em.InitializationError) as e:
        print(f"ghm {args.command}: numerical error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"ghm {args.command}: error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
