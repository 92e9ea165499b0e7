"""Command-line interface: ``astermix {fit,boot,map,simulate,boundary}``.

Exit codes: 0 success, 1 input error, 2 non-convergence.  Every output
file starts with a format-version line and the exact invocation.

A fit writes a human-readable file and, next to it, a JSON sidecar
(``<out>.json``) that the ``boot``, ``map`` and ``boundary`` commands
read back.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import astergraph
from .astergraph import BlockDiag, read_graph
from .boundary import classify_boundary
from .design import (
    Dataset,
    build_design,
    design_from_matrices,
    parse_formula,
    read_dataset,
    read_matrix_csv,
)
from .errors import AstermixError, ConvergenceError, FormulaError
from .fitting import FitOptions, FitResult, fit
from .inference import mean_value_map, parametric_bootstrap

FORMAT_VERSION = 1
THREADS_ENV = "ASTERMIX_THREADS"


class InputError(Exception):
    """Bad command-line input; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- helpers ------------------------------------------------------------


def _invocation(argv):
    return "astermix " + " ".join(shlex.quote(a) for a in argv)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _floats(text, flag):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def _named_or_positional(text, names, flag):
    """Parse ``v1,v2`` or ``name=v,...`` against an ordered list of names."""
    tokens = [t.strip() for t in text.split(",") if t.strip()]
    if tokens and all("=" in t for t in tokens):
        out = {}
        for t in tokens:
            k, v = t.split("=", 1)
            if k not in names:
                raise InputError(f"{flag}: unknown name {k!r} (expected one of {names})")
            try:
                out[k] = float(v)
            except ValueError:
                raise InputError(f"{flag}: bad value in {t!r}") from None
        missing = [n for n in names if n not in out]
        if missing:
            raise InputError(f"{flag}: missing values for {missing}")
        return np.array([out[n] for n in names])
    vals = _floats(text, flag)
    if len(vals) != len(names):
        raise InputError(f"{flag}: expected {len(names)} values ({', '.join(names)}), got {len(vals)}")
    return np.array(vals)


def _parse_context(text):
    out = {}
    for tok in [t for t in text.split(",") if t.strip()]:
        if tok.count("=") != 1 or not tok.split("=")[0].strip():
            raise InputError(f"--context: malformed token {tok!r} (expected key=value)")
        k, v = (s.strip() for s in tok.split("="))
        out[k] = v
    return out


def _open_out(path):
    if path in (None, "-"):
        return contextlib.nullcontext(sys.stdout)
    return open(path, "w", newline="")


def _header(argv):
    return f"# format-version: {FORMAT_VERSION}\n# invocation: {_invocation(argv)}\n"


# -- model construction shared by fit and the commands reading a fit ----------


def _model_from_inputs(inputs):
    """Rebuild ``(design, y)`` from the input section of a fit sidecar or
    from parsed fit arguments."""
    graph = read_graph(inputs["graph"])
    if inputs.get("M"):
        M, mh = read_matrix_csv(inputs["M"])
        Z, zh = read_matrix_csv(inputs["Z"])
        kmap, _ = read_matrix_csv(inputs["kmap"])
        kmap = kmap.reshape(-1).astype(int)
        design = design_from_matrices(graph, M, Z, kmap, alpha_names=mh, b_names=zh)
        data = read_dataset(inputs["data"], graph)
        y = data.y(graph)
        if y.size != design.M.shape[0]:
            raise InputError(f"data give {y.size} responses, M has {design.M.shape[0]} rows")
        return design, y
    data = read_dataset(inputs["data"], graph)
    fixed = _formula(inputs["fixed"], "--fixed")
    random = _formula(inputs["random"], "--random") if inputs.get("random") else None
    design = build_design(graph, data, fixed, random, fitness_node=inputs.get("fitness"))
    return design, data.y(graph)


def _formula(text, flag):
    try:
        return parse_formula(text)
    except FormulaError as exc:
        raise InputError(f"{flag}: formula error: {exc}") from None


def _input_record(args):
    rec = {"graph": args.graph, "data": args.data}
    if args.M or args.Z or args.kmap:
        if not (args.M and args.Z and args.kmap):
            raise InputError("--M, --Z and --kmap must be given together")
        rec.update(M=args.M, Z=args.Z, kmap=args.kmap)
    else:
        if args.fixed is None:
            raise InputError("missing --fixed (or use --M/--Z/--kmap)")
        rec.update(fixed=args.fixed, random=args.random, fitness=args.fitness)
    files = {}
    for key in ("graph", "data", "M", "Z", "kmap"):
        if rec.get(key):
            p = Path(rec[key])
            if not p.is_file():
                raise InputError(f"--{key}: cannot read {rec[key]}")
            rec[key] = str(p.resolve())
            files[key] = {"path": rec[key], "sha256": _sha256(p)}
    return rec, files


# -- fit ------------------------------------------------------------------------


def _fit_document(result: FitResult, argv, inputs, files, seed, error=None):
    d = result.design
    se = result.se()
    rep = result.boundary
    status = {c.name: c for c in rep.components} if rep else {}
    doc = {
        "format_version": FORMAT_VERSION,
        "invocation": _invocation(argv),
        "inputs": inputs,
        "files": files,
        "seed": seed,
        "options": result.options.to_dict(),
        "converged": bool(result.converged and error is None),
        "error": error,
        "objective": result.value,
        "fixed_effects": [
            {"name": n, "estimate": float(v), "se": se.get(n)} for n, v in zip(d.alpha_names, result.alpha)
        ],
        "variance_components": [
            {
                "name": n,
                "estimate": float(v),
                "se": se.get(n),
                "at_boundary": bool(v == 0),
                "decision": status[n].decision.value if n in status else None,
                "descent_test": status[n].test_value if n in status else None,
            }
            for n, v in zip(d.nu_names, result.nu)
        ],
        "random_effects": dict(zip(d.b_names, result.b.tolist())),
        "what": {
            "provenance": f"W(a + M alpha + Z b) at the estimates of pass {max(result.n_outer - 1, 0)}"
            if result.n_outer > 1 else "W(a + M alpha) at the fixed-effects-only fit",
            "passes": result.n_outer,
            "blocks": result.what.blocks.tolist(),
        },
        "boundary_note": rep.note if rep else None,
        "stationarity_residuals": result.diagnostics.get("stationarity_residuals"),
        "trace": [list(t) for t in result.trace],
    }
    if "fisher_error" in result.diagnostics:
        doc["fisher_error"] = result.diagnostics["fisher_error"]
    return doc


def _fit_text(doc):
    out = io.StringIO()
    w = out.write
    w(f"format-version: {doc['format_version']}\n")
    w(f"invocation: {doc['invocation']}\n\n[inputs]\n")
    for key, f in doc["files"].items():
        w(f"{key} = {f['path']}  sha256={f['sha256']}\n")
    for key in ("fixed", "random", "fitness"):
        if doc["inputs"].get(key) is not None:
            w(f"{key} = {doc['inputs'][key]}\n")
    w(f"seed = {doc['seed']}\n\n[status]\n")
    w(f"converged = {str(doc['converged']).lower()}\n")
    if doc["error"]:
        w(f"error = {doc['error']}\n")
    w(f"objective = {doc['objective']!r}\n")
    if doc.get("fisher_error"):
        w(f"fisher-information = unavailable: {doc['fisher_error']}\n")
    w("\n[fixed-effects]\n")
    for fe in doc["fixed_effects"]:
        se = "NA" if fe["se"] is None else repr(fe["se"])
        w(f"{fe['name']} = {fe['estimate']!r}  se={se}\n")
    w("\n[variance-components]\n")
    for vc in doc["variance_components"]:
        se = "NA" if vc["se"] is None else repr(vc["se"])
        extra = f"  descent-test={vc['descent_test']!r}" if vc["descent_test"] is not None else ""
        w(f"{vc['name']} = {vc['estimate']!r}  se={se}  status={vc['decision']}{extra}\n")
    if doc["boundary_note"]:
        w(f"note = {doc['boundary_note']}\n")
    w("\n[random-effects]\n")
    for k, v in doc["random_effects"].items():
        w(f"{k} = {v!r}\n")
    w("\n[what]\n")
    w(f"provenance = {doc['what']['provenance']}\n")
    w(f"passes = {doc['what']['passes']}\n")
    w("\n[trace]\n")
    for p, stage, v in doc["trace"]:
        w(f"{p} {stage} {v!r}\n")
    return out.getvalue()


def _write_fit(doc, out):
    text = _fit_text(doc)
    if out in (None, "-"):
        sys.stdout.write(text)
        return
    Path(out).write_text(text)
    Path(str(out) + ".json").write_text(json.dumps(doc, indent=1))


def cmd_fit(args, argv):
    if args.graph is None:
        raise InputError("missing required flag --graph")
    if args.data is None:
        raise InputError("missing required flag --data")
    inputs, files = _input_record(args)
    design, y = _model_from_inputs(inputs)
    opts = FitOptions(
        max_outer=args.max_outer,
        tol=args.tol,
        fixed_zero=tuple(args.fixed_zero or ()),
    )
    try:
        result = fit(design, y, opts)
        error = None
    except ConvergenceError as exc:
        if exc.result is None:
            raise
        result, error = exc.result, str(exc)
    doc = _fit_document(result, argv, inputs, files, args.seed, error)
    _write_fit(doc, args.out)
    if error:
        print(f"astermix fit: did not converge: {error}", file=sys.stderr)
        return 2
    return 0


# -- reading a fit back ------------------------------------------------------------


def _load_fit(path):
    p = Path(path)
    side = p if p.suffix == ".json" else Path(str(p) + ".json")
    try:
        doc = json.loads(side.read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read fit file {side}: {exc}") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{side}: unsupported format version {doc.get('format_version')!r}")
    for key, f in doc["files"].items():
        if not Path(f["path"]).is_file():
            raise InputError(f"{side}: input file {f['path']} is missing")
        if _sha256(f["path"]) != f["sha256"]:
            raise InputError(f"{side}: input file {f['path']} changed since the fit")
    design, y = _model_from_inputs(doc["inputs"])
    opts = dict(doc["options"])
    opts["fixed_zero"] = tuple(opts["fixed_zero"])
    result = FitResult(
        design=design,
        y=y,
        options=FitOptions(**opts),
        alpha=np.array([fe["estimate"] for fe in doc["fixed_effects"]]),
        nu=np.array([vc["estimate"] for vc in doc["variance_components"]]),
        b=np.array([doc["random_effects"][n] for n in design.b_names]),
        what=BlockDiag(np.array(doc["what"]["blocks"], dtype=float)),
        value=doc["objective"],
        converged=doc["converged"],
        n_outer=doc["what"]["passes"],
        trace=tuple(tuple(t) for t in doc["trace"]),
    )
    return result, doc


def cmd_boot(args, argv):
    if args.B <= 0:
        raise InputError(f"-B must be positive, got {args.B}")
    result, doc = _load_fit(args.fit)
    if not doc["converged"]:
        raise InputError("the bootstrap needs a converged fit")
    jobs = args.jobs if args.jobs is not None else int(os.environ.get(THREADS_ENV, "1"))
    boot = parametric_bootstrap(result, args.B, args.seed, n_jobs=jobs)
    text = _header(argv) + boot.to_csv()
    summary = _header(argv) + boot.summary(args.level)
    if args.out in (None, "-"):
        sys.stdout.write(text)
        sys.stdout.write(summary)
    else:
        Path(args.out).write_text(text)
        Path(str(args.out) + ".summary.txt").write_text(summary)
        sys.stdout.write(boot.summary(args.level))
    return 0


def cmd_map(args, argv):
    result, _ = _load_fit(args.fit)
    design = result.design
    try:
        j = design.component(args.component)
    except (AstermixError, KeyError, IndexError):
        raise InputError(f"--component: unknown variance component {args.component!r}") from None
    if args.node not in design.graph.nodes:
        raise InputError(f"--node: unknown node {args.node!r}")
    context = _parse_context(args.context)
    if "individual" in context:
        try:
            ctx = int(context["individual"])
        except ValueError:
            raise InputError(f"--context: bad individual index {context['individual']!r}") from None
    else:
        ctx = {k: _maybe_number(v) for k, v in context.items()}
    if args.fitted_effects:
        values = np.asarray(result.b)[design.effects_of(j)]
    elif args.values is not None:
        values = np.array(_floats(args.values, "--values"))
    else:
        raise InputError("give --values or --fitted-effects")
    pairs = mean_value_map(result, j, values, args.node, ctx)
    dens = None
    if args.kde:
        from scipy.stats import gaussian_kde

        m = np.array([p[1] for p in pairs])
        if m.size < 2 or np.ptp(m) == 0:
            raise InputError("--kde needs at least two distinct mean values")
        dens = gaussian_kde(m, bw_method="silverman")(m)
    with _open_out(args.out) as fh:
        fh.write(_header(argv))
        if dens is not None:
            fh.write("# density column: Gaussian kernel, Silverman bandwidth; presentation only\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["effect", "mean"] + (["density_presentation_only"] if dens is not None else []))
        for i, (s, mu) in enumerate(pairs):
            w.writerow([repr(s), repr(mu)] + ([repr(float(dens[i]))] if dens is not None else []))
    return 0


def _maybe_number(v):
    try:
        return float(v)
    except ValueError:
        return v


def cmd_boundary(args, argv):
    result, _ = _load_fit(args.fit)
    rep = classify_boundary(result)
    sys.stdout.write(_header(argv))
    json.dump(rep.to_dict(), sys.stdout, indent=1)
    sys.stdout.write("\n")
    return 0


# -- simulate ---------------------------------------------------------------------


def _draw_covariates(spec, n, rng):
    cols = {}
    for name, cs in spec.get("covariates", {}).items():
        if "levels" in cs:
            levels = [str(v) for v in cs["levels"]]
            if cs.get("assign", "cycle") == "random":
                cols[name] = np.array(levels, dtype=str)[rng.integers(0, len(levels), n)]
            else:
                cols[name] = np.array([levels[i % len(levels)] for i in range(n)], dtype=str)
        elif "normal" in cs:
            m, s = cs["normal"]
            cols[name] = rng.normal(m, s, n)
        elif "uniform" in cs:
            lo, hi = cs["uniform"]
            cols[name] = rng.uniform(lo, hi, n)
        else:
            raise InputError(f"design spec: covariate {name!r} needs 'levels', 'normal' or 'uniform'")
    return cols


def cmd_simulate(args, argv):
    for flag in ("graph", "design_spec", "alpha", "nu"):
        if getattr(args, flag) is None:
            raise InputError(f"missing required flag --{flag.replace('_', '-')}")
    if args.n < 0:
        raise InputError(f"--n must be nonnegative, got {args.n}")
    graph = read_graph(args.graph)
    try:
        spec = json.loads(Path(args.design_spec).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"--design-spec: {exc}") from None
    for key in ("fixed",):
        if key not in spec:
            raise InputError(f"design spec: missing key {key!r}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(args.seed)))
    names = list(graph.nodes) + list(spec.get("covariates", {}))
    with _open_out(args.out) as fh:
        fh.write(_header(argv))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        if args.n == 0:
            return 0
        cols = _draw_covariates(spec, args.n, rng)
        ones = {node: np.ones(args.n) for node in graph.nodes}
        data = Dataset.from_columns(graph, {**ones, **cols})
        random = parse_formula(spec["random"]) if spec.get("random") else None
        design = build_design(graph, data, parse_formula(spec["fixed"]), random,
                              fitness_node=spec.get("fitness"))
        alpha = _named_or_positional(args.alpha, design.alpha_names, "--alpha")
        nu = _named_or_positional(args.nu, design.nu_names, "--nu")
        if np.any(nu < 0):
            raise InputError("--nu: variance components must be nonnegative")
        b = rng.standard_normal(design.n_b) * np.sqrt(nu)[design.kmap]
        y = astergraph.simulate_graph(graph, design.phi(alpha, b), rng).reshape(args.n, -1)
        for i in range(args.n):
            row = [repr(float(v)) if not graph.families[k].integer_valued else str(int(v))
                   for k, v in enumerate(y[i])]
            for c in cols.values():
                row.append(c[i] if c.dtype.kind in "US" else repr(float(c[i])))
            w.writerow(row)
    return 0


# -- argument parsing ---------------------------------------------------------------


def build_parser():
    p = _Parser(prog="astermix", description="Aster and exponential-family mixed models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a model")
    f.add_argument("--graph", help="graph specification file")
    f.add_argument("--data", help="data CSV (one row per individual)")
    f.add_argument("--fixed", help='fixed-effect formula, e.g. "site + region:site"')
    f.add_argument("--random", help='random-effect formula, e.g. "(1|pop) + (1|block)"')
    f.add_argument("--fitness", help="node whose rows carry the covariate columns")
    f.add_argument("--M", help="explicit fixed-effect matrix CSV")
    f.add_argument("--Z", help="explicit random-effect matrix CSV")
    f.add_argument("--kmap", help="CSV of the component index of each Z column")
    f.add_argument("--fixed-zero", action="append", help="constrain a variance component to zero")
    f.add_argument("--out", help="fit file (a .json sidecar is written next to it)")
    f.add_argument("--max-outer", type=int, default=10)
    f.add_argument("--tol", type=float, default=1e-8)
    f.add_argument("--seed", type=int, default=0, help="recorded for provenance; fitting is deterministic")

    b = sub.add_parser("boot", help="parametric bootstrap of a fit")
    b.add_argument("--fit", required=True)
    b.add_argument("-B", type=int, required=True)
    b.add_argument("--seed", type=int, required=True)
    b.add_argument("--out")
    b.add_argument("--level", type=float, default=0.95)
    b.add_argument("--jobs", type=int, help=f"worker processes (default ${THREADS_ENV} or 1)")

    m = sub.add_parser("map", help="random effects on the mean value scale")
    m.add_argument("--fit", required=True)
    m.add_argument("--component", required=True)
    m.add_argument("--node", required=True)
    m.add_argument("--context", default="", help="key=value,... or individual=i")
    g = m.add_mutually_exclusive_group()
    g.add_argument("--values", help="comma-separated effect values")
    g.add_argument("--fitted-effects", action="store_true")
    m.add_argument("--kde", action="store_true", help="add a kernel density column (presentation only)")
    m.add_argument("--out")

    s = sub.add_parser("simulate", help="simulate a dataset from a model")
    s.add_argument("--graph")
    s.add_argument("--design-spec", help="JSON: fixed, random, fitness, covariates")
    s.add_argument("--alpha", help="fixed effects, positional or name=value")
    s.add_argument("--nu", help="variance components, positional or name=value")
    s.add_argument("--n", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    c = sub.add_parser("boundary", help="boundary report for a fit")
    c.add_argument("--fit", required=True)
    return p


COMMANDS = {
    "fit": cmd_fit,
    "boot": cmd_boot,
    "map": cmd_map,
    "simulate": cmd_simulate,
    "boundary": cmd_boundary,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, argv)
    except ConvergenceError as exc:
        print(f"astermix {args.command}: did not converge: {exc}", file=sys.stderr)
        return 2
    except (InputError, AstermixError, OSError) as exc:
        print(f"astermix {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
