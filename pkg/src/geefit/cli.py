"""Batch command-line front end.

Four subcommands — ``fit``, ``diagnose``, ``simulate``, ``compare`` — each
driven by a single JSON config document (validated against a strict
schema; unknown keys are rejected) and writing machine-readable outputs
into ``--out``.  Outputs embed the sha256 hash of the canonical config so
runs are archivable; reruns with the same config and seed are
byte-identical regardless of ``--workers``.

Exit codes: 0 success, 2 config/dataset load error, 3 non-convergence
(outputs are still written), 4 singular or rank-deficient systems.
"""

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import jsonschema

from .correlation import (
    CorrelationSingularError,
    FixedCorrelation,
    IdentityCorrelation,
    structured_correlation,
)
from .diagnostics import hypothesis_check, regularity_constants
from .estimator import (
    NonConvergedPilotError,
    RankDeficiencyError,
    fit,
    independence_fit,
)
from .model import (
    DatasetFormatError,
    get_link,
    load_dataset_csv,
    write_dataset_csv,
)
from .simulation import (
    GeneratorConfig,
    consistency_trace,
    efficiency_comparison,
    generate_dataset,
    quasi_score_identity_check,
    true_correlation,
)

__all__ = ["main"]

_LINK_ENUM = {"enum": ["linear", "log", "logistic", "probit"]}

_MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["type"],
    "properties": {
        "type": {"enum": ["identity", "fixed", "ple", "aqs"]},
        "structure": {"enum": ["exchangeable", "ar1", "custom"]},
        "alpha": {"type": "number"},
        "matrix_csv": {"type": "string"},
        "ridge": {"type": "boolean"},
    },
}

_SOLVER_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "tol_g": {"type": "number", "exclusiveMinimum": 0},
        "max_iter": {"type": "integer", "minimum": 1},
        "scoring": {"type": "boolean"},
        "multistart": {"type": "integer", "minimum": 0},
    },
}

_GENERATOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["n", "m", "p", "beta0"],
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "m": {"type": "integer", "minimum": 1},
        "p": {"type": "integer", "minimum": 1},
        "beta0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "link": _LINK_ENUM,
        "correlation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["structure"],
            "properties": {
                "structure": {"enum": ["exchangeable", "ar1", "identity", "custom"]},
                "param": {"type": "number"},
                "matrix_csv": {"type": "string"},
            },
        },
        "covariates_csv": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "dependence": {
            "type": "array",
            "items": {"type": "number"},
            "minItems": 2,
            "maxItems": 2,
        },
    },
}

_SCHEMAS = {
    "fit": {
        "type": "object",
        "additionalProperties": False,
        "required": ["dataset", "link", "model"],
        "properties": {
            "dataset": {"type": "string"},
            "link": _LINK_ENUM,
            "model": _MODEL_SCHEMA,
            "solver": _SOLVER_SCHEMA,
            "ci_level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        },
    },
    "diagnose": {
        "type": "object",
        "additionalProperties": False,
        "required": ["dataset", "link", "r"],
        "properties": {
            "dataset": {"type": "string"},
            "link": _LINK_ENUM,
            "model": _MODEL_SCHEMA,
            "beta": {"type": "array", "items": {"type": "number"}},
            "r": {"type": "number", "exclusiveMinimum": 0},
            "delta": {"type": "number", "exclusiveMinimum": 0},
            "c0": {"type": "number", "exclusiveMinimum": 0},
            "domain_bound": {"type": "number", "exclusiveMinimum": 0},
            "ball_samples": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer", "minimum": 0},
            "n_grid": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        },
    },
    "simulate": {
        "type": "object",
        "additionalProperties": False,
        "required": ["generator"],
        "properties": {
            "generator": _GENERATOR_SCHEMA,
            "replication": {"type": "integer", "minimum": 0},
        },
    },
    "compare": {
        "type": "object",
        "additionalProperties": False,
        "required": ["generator", "experiment", "reps"],
        "properties": {
            "generator": _GENERATOR_SCHEMA,
            "experiment": {"enum": ["efficiency", "consistency", "quasi_score"]},
            "reps": {"type": "integer", "minimum": 10},
            "methods": {
                "type": "array",
                "items": {"enum": ["indep", "gee", "ple", "aqs", "oracle"]},
                "minItems": 1,
            },
            "families": {
                "type": "array",
                "items": {"enum": ["indep", "gee", "optimal", "aqs"]},
                "minItems": 1,
            },
            "gee": {
                "type": "object",
                "additionalProperties": False,
                "required": ["structure", "param"],
                "properties": {
                    "structure": {"enum": ["exchangeable", "ar1"]},
                    "param": {"type": "number"},
                },
            },
            "n_grid": {
                "type": "array",
                "items": {"type": "integer", "minimum": 1},
                "minItems": 1,
            },
            "method": {"enum": ["indep", "gee", "ple", "aqs", "oracle"]},
            "delta": {"type": "number", "exclusiveMinimum": 0},
            "ci_level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        },
    },
}


class ConfigError(ValueError):
    """Config file missing, unparsable, or schema-invalid."""


def _load_config(path, schema):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        config = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    try:
        jsonschema.validate(config, schema)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config {path} invalid: {exc.message}") from None
    return config


def _config_hash(config) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else str(v) for v in row])


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _load_matrix_csv(path, m):
    try:
        mat = np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError as exc:
        raise DatasetFormatError(f"cannot read matrix {path}: {exc}") from None
    except ValueError as exc:
        raise DatasetFormatError(f"matrix {path} is not numeric CSV: {exc}") from None
    if mat.shape != (m, m):
        raise DatasetFormatError(
            f"matrix {path} has shape {mat.shape}, expected ({m}, {m})"
        )
    return mat


def _build_model_spec(spec, dataset, link):
    kind = spec["type"]
    ridge = spec.get("ridge", True)
    if kind == "identity":
        return "indep", None
    if kind == "aqs":
        return "aqs", None
    if kind == "ple":
        return "ple", None
    structure = spec.get("structure")
    if structure is None:
        raise ConfigError("model.type 'fixed' requires model.structure")
    if structure == "custom":
        if "matrix_csv" not in spec:
            raise ConfigError("model.structure 'custom' requires model.matrix_csv")
        matrix = _load_matrix_csv(spec["matrix_csv"], dataset.m)
    else:
        if "alpha" not in spec:
            raise ConfigError(f"model.structure {structure!r} requires model.alpha")
        matrix = structured_correlation(structure, spec["alpha"], dataset.m)
    return "gee", matrix


def _generator_from_config(spec):
    corr = spec.get("correlation", {"structure": "identity"})
    structure = corr["structure"]
    matrix = None
    param = corr.get("param", 0.0)
    if structure == "custom":
        if "matrix_csv" not in corr:
            raise ConfigError("correlation.structure 'custom' requires matrix_csv")
        matrix = np.loadtxt(corr["matrix_csv"], delimiter=",", ndmin=2)
    covariates = "uniform"
    if "covariates_csv" in spec:
        design = load_dataset_csv(spec["covariates_csv"])
        covariates = design.covariates
    dependence = spec.get("dependence")
    return GeneratorConfig(
        n=spec["n"],
        m=spec["m"],
        p=spec["p"],
        beta0=np.asarray(spec["beta0"], dtype=float),
        link=spec.get("link", "linear"),
        correlation=structure,
        corr_param=param,
        corr_matrix=matrix,
        covariates=covariates,
        seed=spec.get("seed", 0),
        dependence=None if dependence is None else tuple(dependence),
    )


def _cmd_fit(config, out, workers):
    dataset = load_dataset_csv(config["dataset"])
    link = get_link(config["link"])
    method, gee_matrix = _build_model_spec(config["model"], dataset, link)
    solver = config.get("solver", {})
    result = fit(
        dataset,
        link,
        method,
        gee_correlation=gee_matrix,
        ridge=config["model"].get("ridge", True),
        tol_g=solver.get("tol_g", 1e-10),
        max_iter=solver.get("max_iter", 100),
        scoring=solver.get("scoring", False),
        multistart=solver.get("multistart", 0),
        ci_level=config.get("ci_level", 0.95),
    )
    payload = {
        "beta": _jsonable(result.beta),
        "converged": result.converged,
        "iterations": result.iterations,
        "final_gnorm": result.final_gnorm,
        "method": result.method,
        "message": result.message,
        "ridge_events": result.ridge_events,
        "fallback_count": result.fallback_count,
        "se_model": _jsonable(result.se_model),
        "se_sandwich": _jsonable(result.se_sandwich),
        "ci_level": result.ci_level,
        "ci_model": _jsonable(result.ci_model),
        "ci_sandwich": _jsonable(result.ci_sandwich),
        "config_hash": _config_hash(config),
    }
    _write_json(out / "fit.json", payload)
    _write_csv(
        out / "fit_trace.csv",
        ["iteration", "gnorm", "step_norm"],
        [(i, float(g), float(s)) for i, (g, s) in enumerate(result.trace)],
    )
    return payload, (0 if result.converged else 3)


def _cmd_diagnose(config, out, workers):
    dataset = load_dataset_csv(config["dataset"])
    link = get_link(config["link"])
    if "beta" in config:
        beta = np.asarray(config["beta"], dtype=float)
    else:
        beta = independence_fit(dataset, link).beta
    model_spec = config.get("model", {"type": "identity"})
    method, gee_matrix = _build_model_spec(model_spec, dataset, link)
    if method == "indep":
        model = IdentityCorrelation(dataset.m)
    elif method == "gee":
        model = FixedCorrelation(gee_matrix)
    elif method == "ple":
        from .correlation import PilotCorrelation

        pilot = independence_fit(dataset, link)
        model = PilotCorrelation.from_pilot(
            dataset, link, pilot, ridge=model_spec.get("ridge", True)
        )
    else:
        from .correlation import AdaptiveCorrelation

        model = AdaptiveCorrelation(dataset, link, ridge=model_spec.get("ridge", True))

    constants = regularity_constants(
        dataset,
        beta,
        link,
        model,
        r=config["r"],
        delta=config.get("delta", 0.1),
        ball_samples=config.get("ball_samples", 16),
        seed=config.get("seed", 0),
    )
    n_grid = config.get("n_grid", [dataset.n])
    report = hypothesis_check(
        dataset,
        n_grid,
        beta,
        link,
        delta=config.get("delta", 0.1),
        c0=config.get("c0"),
        domain_bound=config.get("domain_bound", 1.0),
    )
    payload = {
        "beta_center": _jsonable(beta),
        "constants": _jsonable(vars(constants)),
        "hypothesis": {
            "delta": report.delta,
            "c0": report.c0,
            "domain_bound": report.domain_bound,
            "lam_min_monotone": report.lam_min_monotone,
        },
        "overrides": {
            "r": config["r"],
            "delta": config.get("delta", 0.1),
            "ball_samples": config.get("ball_samples", 16),
            "seed": config.get("seed", 0),
        },
        "config_hash": _config_hash(config),
    }
    _write_json(out / "diagnostics.json", payload)
    _write_csv(
        out / "diagnostics_grid.csv",
        [
            "n",
            "lam_min",
            "lam_max",
            "growth_ratio",
            "weighted_lower_sum",
            "weighted_upper_sum",
            "sufficient_ratio",
            "rank_deficient",
            "hypothesis_ok",
        ],
        [
            (
                row.n,
                row.lam_min,
                row.lam_max,
                row.growth_ratio,
                row.weighted_lower_sum,
                row.weighted_upper_sum,
                row.sufficient_ratio,
                int(row.rank_deficient),
                int(row.hypothesis_ok),
            )
            for row in report.rows
        ],
    )
    return payload, 0


def _cmd_simulate(config, out, workers):
    gen = _generator_from_config(config["generator"])
    dataset = generate_dataset(gen, replication=config.get("replication", 0))
    write_dataset_csv(dataset, out / "dataset.csv")
    manifest = {
        "generator": gen.to_dict(),
        "true_correlation": _jsonable(true_correlation(gen)),
        "replication": config.get("replication", 0),
        "rows": dataset.n * dataset.m,
        "config_hash": _config_hash(config),
    }
    _write_json(out / "manifest.json", manifest)
    return manifest, 0


def _cmd_compare(config, out, workers):
    gen = _generator_from_config(config["generator"])
    experiment = config["experiment"]
    reps = config["reps"]
    gee_spec = config.get("gee")
    gee_corr = None if gee_spec is None else (gee_spec["structure"], gee_spec["param"])
    summary_rows = []
    plot_rows = []

    if experiment == "efficiency":
        methods = tuple(config.get("methods", ["indep", "gee", "ple", "aqs", "oracle"]))
        summary = efficiency_comparison(
            gen,
            methods=methods,
            reps=reps,
            gee_correlation=gee_corr,
            ci_level=config.get("ci_level", 0.95),
            workers=workers,
        )
        for name in methods:
            ms = summary.methods[name]
            summary_rows.append((name, gen.n, "median_err", -1, ms.median_err))
            summary_rows.append((name, gen.n, "convergence_rate", -1, ms.convergence_rate))
            summary_rows.append((name, gen.n, "excluded", -1, float(ms.excluded)))
            for k in range(gen.p):
                summary_rows.append((name, gen.n, "bias", k, float(ms.bias[k])))
                summary_rows.append((name, gen.n, "variance", k, float(ms.var[k])))
                summary_rows.append((name, gen.n, "coverage", k, float(ms.coverage[k])))
                plot_rows.append((name, k, float(ms.var[k])))
    elif experiment == "consistency":
        n_grid = config.get("n_grid", [gen.n])
        trace = consistency_trace(
            gen,
            n_grid,
            method=config.get("method", "aqs"),
            reps=reps,
            delta=config.get("delta", 0.1),
            gee_correlation=gee_corr,
            workers=workers,
        )
        for row in trace.rows:
            summary_rows.append((trace.method, row.n, "median_err", -1, row.median_err))
            summary_rows.append((trace.method, row.n, "q90_err", -1, row.q90_err))
            summary_rows.append((trace.method, row.n, "slln_median", -1, row.slln_median))
            summary_rows.append((trace.method, row.n, "excluded", -1, float(row.excluded)))
            plot_rows.append((trace.method, row.n, row.median_err))
    else:
        families = tuple(config.get("families", ["indep", "gee", "optimal"]))
        results = quasi_score_identity_check(
            gen, families=families, reps=reps, gee_correlation=gee_corr, workers=workers
        )
        for res in results:
            summary_rows.append((res.family, gen.n, "max_abs_z", -1, res.max_abs_z))
            if res.cov_max_abs_z is not None:
                summary_rows.append(
                    (res.family, gen.n, "cov_max_abs_z", -1, res.cov_max_abs_z)
                )
            p = gen.p
            for a in range(p):
                for b in range(p):
                    plot_rows.append(
                        (res.family, a * p + b, float(res.diff_mean[a, b]))
                    )

    manifest = {
        "generator": gen.to_dict(),
        "experiment": experiment,
        "reps": reps,
        "workers_note": "outputs are independent of --workers",
        "config_hash": _config_hash(config),
    }
    _write_csv(
        out / "summary.csv",
        ["method", "n", "statistic", "coordinate", "value"],
        summary_rows,
    )
    _write_csv(out / "plot_data.csv", ["series", "x", "value"], plot_rows)
    _write_json(out / "manifest.json", manifest)
    return manifest, 0


_HANDLERS = {
    "fit": _cmd_fit,
    "diagnose": _cmd_diagnose,
    "simulate": _cmd_simulate,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="geefit",
        description="Estimating-equation fits and experiments for longitudinal data",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _HANDLERS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="path to the JSON run config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument(
            "--json", action="store_true", help="print a JSON summary on stdout"
        )
    args = parser.parse_args(argv)

    try:
        config = _load_config(args.config, _SCHEMAS[args.command])
    except ConfigError as exc:
        print(f"geefit {args.command}: {exc}", file=sys.stderr)
        return 2

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        summary, code = _HANDLERS[args.command](config, out, max(1, args.workers))
    except (ConfigError, DatasetFormatError, ValueError) as exc:
        print(f"geefit {args.command}: {exc}", file=sys.stderr)
        return 2
    except NonConvergedPilotError as exc:
        print(f"geefit {args.command}: {exc}", file=sys.stderr)
        return 3
    except (CorrelationSingularError, RankDeficiencyError, np.linalg.LinAlgError) as exc:
        print(f"geefit {args.command}: {exc}", file=sys.stderr)
        return 4

    if args.json:
        print(json.dumps(_jsonable(summary), sort_keys=True))
    if code == 3:
        print(f"geefit {args.command}: fit did not converge", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
