"""Command-line front end: ``aptmle analyze | simulate | permtest``.

Every command writes a JSON report (sorted keys, time-stamped) and a short
Markdown summary next to it. Two runs on the same inputs give reports that
differ only in the ``timestamp`` field.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adaptive_prespec import run_adaptive_prespec
from .config import ConfigError, load_config
from .data_model import DataError, load_csv
from .simulation import load_dgp, run_parametric_sim, run_permutation_check

log = logging.getLogger("aptmle")

EXIT_CONFIG = 2
EXIT_DATA = 3


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    return x


def fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()


def _header(command, config, seed_override):
    return {
        "command": command,
        "tool": "aptmle",
        "version": __version__,
        "timestamp": _timestamp(),
        "seed": int(config.seed),
        "seed_override": seed_override,
        "config": config.to_dict(),
    }


def _out_paths(out):
    out = Path(out)
    if out.suffix.lower() == ".json":
        return out, out.with_suffix(".md")
    return out.with_suffix(out.suffix + ".json"), out.with_suffix(out.suffix + ".md")


def write_report(report: dict, markdown: str, out) -> tuple:
    js, md = _out_paths(out)
    js.parent.mkdir(parents=True, exist_ok=True)
    js.write_text(json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    md.write_text(markdown, encoding="utf-8")
    return js, md


def _apply_seed(config, seed):
    if seed is None:
        return config, None
    log.warning("seed override: config seed %d replaced by %d", config.seed, seed)
    return config.replace(seed=seed), {"config_seed": int(config.seed), "used": int(seed)}


def _load_data(config, data_path):
    if config.data_schema is None:
        raise ConfigError("analysis plan has no 'data' section describing the CSV columns")
    return load_csv(data_path, config.data_schema)


def _data_block(path, data):
    return {"file": Path(path).name, "sha256": fingerprint(path), "n": data.n,
            "n_independent_units": data.n_independent, "cluster_randomized": data.cluster_randomized}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def analysis_report(config, data, data_path, seed_override=None) -> dict:
    sel = run_adaptive_prespec(config, data)
    scheme = sel.folds.scheme
    rep = _header("analyze", config, seed_override)
    rep.update({
        "data": _data_block(data_path, data),
        "selection": {
            "cv_scheme": scheme.text,
            "cv_unit": scheme.unit,
            "folds": sel.folds.V_effective,
            "stage1_pscore": "unadjusted",
            "outcome_regression": {"selected": sel.or_spec.label, "scores": [s.to_dict() for s in sel.or_scores]},
            "propensity_score": {"selected": sel.ps_spec.label, "scores": [s.to_dict() for s in sel.ps_scores]},
        },
        "final": sel.final.summary(),
        "unadjusted": sel.unadjusted.summary(),
        "precision_gain": sel.precision_gain,
        "variance_kind": sel.variance_kind_used,
        "fallbacks": dict(sel.final.fallbacks),
        "epsilon": {"eps0": sel.final.fluctuation.eps0, "eps1": sel.final.fluctuation.eps1},
        "learner_info": sel.learner_info,
    })
    return rep


def analysis_markdown(rep: dict) -> str:
    f, u, s = rep["final"], rep["unadjusted"], rep["selection"]
    lines = [
        f"# Analysis report ({rep['config']['estimand']})",
        "",
        f"- generated: {rep['timestamp']} by aptmle {rep['version']}",
        f"- data: `{rep['data']['file']}` sha256 `{rep['data']['sha256']}`",
        f"- units: {rep['data']['n']} rows, {rep['data']['n_independent_units']} independent",
        f"- seed: {rep['seed']}" + (" (overridden on the command line)" if rep["seed_override"] else ""),
        f"- cross-validation: {s['cv_scheme']} over {s['cv_unit']} units ({s['folds']} folds)",
        "",
        "| | estimate | 95% CI | SE |",
        "|---|---|---|---|",
        f"| adaptive TMLE | {f['estimate']:.6g} | ({f['ci'][0]:.6g}, {f['ci'][1]:.6g}) | {f['se']:.6g} |",
        f"| unadjusted | {u['estimate']:.6g} | ({u['ci'][0]:.6g}, {u['ci'][1]:.6g}) | {u['se']:.6g} |",
        "",
        f"Selected outcome regression: **{s['outcome_regression']['selected']}**; "
        f"propensity score: **{s['propensity_score']['selected']}**. "
        f"Precision gain over unadjusted: {rep['precision_gain']:.4g}.",
        "",
        "| stage | candidate | CV variance |",
        "|---|---|---|",
    ]
    for stage in ("outcome_regression", "propensity_score"):
        for c in s[stage]["scores"]:
            lines.append(f"| {stage} | {c['spec']} | {c['cv_variance']:.6g} |")
    if rep["fallbacks"]:
        lines += ["", "Fallbacks: " + "; ".join(f"{k}: {v}" for k, v in sorted(rep["fallbacks"].items()))]
    return "\n".join(lines) + "\n"


def cmd_analyze(config_path, data_path, out_path, seed=None) -> dict:
    config, override = _apply_seed(load_config(config_path), seed)
    data = _load_data(config, data_path)
    rep = analysis_report(config, data, data_path, override)
    write_report(rep, analysis_markdown(rep), out_path)
    return rep


def cmd_simulate(dgp_path, config_path, reps, out_path, seed=None) -> dict:
    config, override = _apply_seed(load_config(config_path), seed)
    dgp = load_dgp(dgp_path)
    res = run_parametric_sim(dgp, config, reps, config.seed,
                             progress=lambda i, n: log.info("replicate %d/%d", i, n) if i % 50 == 0 else None)
    rep = _header("simulate", config, override)
    rep.update({"dgp": {"file": Path(dgp_path).name, "sha256": fingerprint(dgp_path)}, "result": res.to_dict()})
    m = res.metrics
    lines = [
        f"# Simulation report ({res.estimand})", "",
        f"- generated: {rep['timestamp']} by aptmle {__version__}; seed {config.seed}",
        f"- replicates: {res.reps} ({res.n_failed} failed)",
        f"- true effect: {res.true_effect:.6g} ({res.true_effect_method})", "",
        "| estimator | bias | emp. var | mean est. var | MSE | coverage | rejection (95% CI) |",
        "|---|---|---|---|---|---|---|",
    ]
    for name, e in m.items():
        lines.append(f"| {name} | {e.bias:.4g} | {e.empirical_variance:.4g} | {e.mean_estimated_variance:.4g} "
                     f"| {e.mse:.4g} | {e.coverage:.3f} | {e.rejection_rate:.3f} "
                     f"({e.rejection_ci[0]:.3f}, {e.rejection_ci[1]:.3f}) |")
    lines += ["", f"Relative precision (MSE ratio): {res.relative_precision:.4g}; "
                  f"mean estimated precision gain: {res.mean_precision_gain:.4g}; "
                  f"sample-size savings: {res.sample_size_savings:.3f}."]
    write_report(rep, "\n".join(lines) + "\n", out_path)
    return rep


def cmd_permtest(config_path, data_path, reps, out_path, seed=None) -> dict:
    config, override = _apply_seed(load_config(config_path), seed)
    data = _load_data(config, data_path)
    res = run_permutation_check(data, config, reps, config.seed)
    rep = _header("permtest", config, override)
    rep.update({"data": _data_block(data_path, data), "result": res.to_dict()})
    mode = "all distinct assignments enumerated (exhaustive)" if res.exhaustive else "random permutations"
    md = "\n".join([
        "# Permutation check", "",
        f"- generated: {rep['timestamp']} by aptmle {__version__}; seed {config.seed}",
        f"- data: `{rep['data']['file']}` sha256 `{rep['data']['sha256']}`",
        f"- arm labels permuted at the {res.level} level; {mode}",
        f"- replicates: {res.reps} ({res.n_failed} failed)",
        f"- rejection rate: {res.rate:.4f}, exact 95% CI ({res.ci[0]:.4f}, {res.ci[1]:.4f})",
    ]) + "\n"
    write_report(rep, md, out_path)
    return rep


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aptmle", description="Adaptive pre-specified TMLE for randomized trials.")
    p.add_argument("--version", action="version", version=f"aptmle {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="run the locked analysis plan on a dataset")
    a.add_argument("--config", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="report path (.json; a .md summary is written alongside)")
    a.add_argument("--seed", type=int, help="override the plan's master seed (logged)")

    s = sub.add_parser("simulate", help="Monte-Carlo evaluation on a parametric DGP")
    s.add_argument("--dgp", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    t = sub.add_parser("permtest", help="arm-label permutation check of Type-I error")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--reps", type=int, default=500)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "analyze":
            cmd_analyze(args.config, args.data, args.out, args.seed)
        elif args.command == "simulate":
            cmd_simulate(args.dgp, args.config, args.reps, args.out, args.seed)
        else:
            cmd_permtest(args.config, args.data, args.reps, args.out, args.seed)
    except ConfigError as exc:
        print(f"aptmle: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"aptmle: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
