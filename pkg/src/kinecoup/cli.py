"""Command-line entry point.

Subcommands: sample (single chain), couple (coupled ensembles), constants
(derived-constant inspection), verify (one-step contraction checks), bias
(step-size order studies), figures (decay-curve CSV sets for the two
benchmark potentials plus bias curves).

Exit codes: 0 success; 1 a verification bound failed; 2 malformed
configuration (the offending key is named); 3 validity-flag failure under
--strict.  All file outputs are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from kinecoup import __version__
from kinecoup import config as cfgmod
from kinecoup import rng as rngmod
from kinecoup.errors import ConfigError, HypothesisError
from kinecoup.harness import (
    estimate_bias_order,
    estimate_decay_curve,
    verify_onestep_proposition,
    write_bias_csv,
    write_contour_csv,
    write_decay_csv,
)
from kinecoup.integrators import PhasePoint, SchemeConfig, run_chain
from kinecoup.metric import compute_constants

# single source of truth for every flag; the help reflection test walks this
FLAG_TABLE: dict[str, list[tuple[str, dict]]] = {
    "common": [
        ("--config", dict(type=str, default=None, help="TOML experiment config file")),
        ("--set", dict(action="append", dest="overrides", metavar="SECTION.KEY=VALUE",
                       help="override a config key after file parsing (repeatable)")),
        ("--seed", dict(type=int, default=None, help="override experiment.seed")),
        ("--out", dict(type=str, default=None, help="output directory")),
        ("--replicas", dict(type=int, default=None, help="override couple.n_replicas")),
        ("--strict", dict(action="store_true", help="exit 3 when validity flags fail")),
        ("--json", dict(action="store_true", help="emit machine-readable JSON")),
    ],
    "verify": [
        ("--prop", dict(type=str, choices=["em", "bu"], default="em",
                        help="which one-step contraction bound to check")),
        ("--samples", dict(type=int, default=10_000, help="sampled state pairs")),
    ],
    "bias": [
        ("--scheme", dict(type=str, choices=["EM", "BU", "UBU"], default=None,
                          help="override scheme.kind for the bias study")),
    ],
    "figures": [
        ("--which", dict(type=str, choices=["banana", "gmm", "bias"], default="banana",
                         help="which figure CSV set to emit")),
    ],
}

SUBCOMMANDS = ("sample", "couple", "constants", "verify", "bias", "figures")

# placeholder mixture layout (the canonical mode table is external to this
# project, so these are NOT the published means): ten modes spread over
# [0, 10]^2 along a connected path, so mode hopping happens on simulated
# time scales
GMM_MEANS_PLACEHOLDER = [
    [1.0, 1.0], [3.0, 1.2], [5.0, 1.6], [6.8, 2.8], [8.6, 3.4],
    [9.0, 5.4], [8.0, 7.2], [6.4, 8.6], [4.4, 9.0], [2.6, 8.0],
]

FIGURE_DEFAULTS = {
    "banana": {
        "potential": {"kind": "banana", "kappa": 0.1},
        "scheme": {"kind": "BU", "h": 0.02},
        "gammas": [0.5, 1.0, 3.0],
        "initial_a": [4.0, 16.0],
        "initial_b": [-4.0, 16.0],
        "n_steps": 18000,
        "stride": 50,
        "contour_box": [[-4.5, -1.0], [4.5, 18.0]],
    },
    "gmm": {
        "potential": {"kind": "gmm", "sigma": 0.5, "means": GMM_MEANS_PLACEHOLDER,
                      "kappa": 0.05},
        "scheme": {"kind": "BU", "h": 0.03},
        "gammas": [0.5, 1.0, 3.0],
        "initial_a": [1.0, 1.0],
        "initial_b": [9.0, 9.0],
        "n_steps": 17000,
        "stride": 50,
        "contour_box": [[-1.0, -1.0], [11.0, 11.0]],
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kinecoup",
        description="Kinetic Langevin integrators, couplings and contraction experiments.",
    )
    parser.add_argument("--version", action="version", version=f"kinecoup {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    helps = {
        "sample": "run one chain and write its trace CSV",
        "couple": "run a coupled-pair ensemble and write decay CSVs",
        "constants": "print every derived metric constant plus validity flags",
        "verify": "check a one-step contraction bound on sampled states",
        "bias": "fit the stationary-bias order against the step size",
        "figures": "emit the benchmark decay-curve CSV sets",
    }
    for name in SUBCOMMANDS:
        sp = subs.add_parser(name, help=helps[name])
        for flag, kwargs in FLAG_TABLE["common"] + FLAG_TABLE.get(name, []):
            sp.add_argument(flag, **kwargs)
    return parser


def _load(args) -> dict:
    cfg = cfgmod.load_config(args.config) if args.config else {}
    cfg = cfgmod.apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.setdefault("experiment", {})["seed"] = args.seed
    if args.replicas is not None:
        cfg.setdefault("couple", {})["n_replicas"] = args.replicas
    if args.out is not None:
        cfg.setdefault("experiment", {})["out"] = args.out
    cfgmod.validate_config(cfg)
    return cfg


def _out_dir(cfg, default="runs"):
    return Path(cfg.get("experiment", {}).get("out", default))


def _scheme_params(cfg):
    block = cfg.get("scheme", {})
    scheme = block.get("kind", "BU")
    h = float(block.get("h", block.get("h_list", [0.01])[0]))
    gamma = float(block.get("gamma", block.get("gamma_list", [1.0])[0]))
    return scheme, h, gamma


def _resolved_scheme(cfg):
    block = dict(cfg.get("scheme", {}))
    block.setdefault("kind", "BU")
    if "h_list" not in block:
        block["h_list"] = [block.get("h", 0.01)]
    block.pop("h", None)
    if "gamma_list" not in block:
        block["gamma_list"] = [block.get("gamma", 1.0)]
    block.pop("gamma", None)
    return block


def _resolved_config(cfg) -> dict:
    """Materialize defaults so the manifest reproduces the run verbatim."""
    resolved = cfgmod._deep_copy(cfg)
    resolved.setdefault("experiment", {}).setdefault("seed", 0)
    resolved["scheme"] = _resolved_scheme(cfg)
    couple = resolved.setdefault("couple", {})
    couple.setdefault("mode", "switching")
    couple.setdefault("n_replicas", 1000)
    couple.setdefault("n_steps", 1000)
    couple.setdefault("stride", 1)
    couple.setdefault("coalescence_threshold", 1e-12)
    if "initial_a" not in couple:
        couple.setdefault("x_scale", 1.0)
        couple.setdefault("v_scale", 1.0)
    return resolved


def _validity_flags(cfg):
    pot = cfgmod.build_potential(cfg.get("potential", {"kind": "gaussian", "d": 1, "kappa": 1.0}))
    scheme, h, gamma = _scheme_params(cfg)
    mc = compute_constants(pot, gamma, h, scheme)
    if scheme == "EM":
        ok = mc.flags["gamma_cond_em"] and mc.flags["h_cond_em"]
    else:
        ok = mc.flags["gamma_cond_bu"] and mc.flags["h_cond_bu"]
    return mc, ok


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _manifest_constants(mc) -> dict:
    """Derived constants and validity flags recorded in the run manifest."""
    return {f"const_{k}": v for k, v in constants_report(mc).items()}


# ---------------------------------------------------------------------------
# subcommands


def cmd_sample(args) -> int:
    cfg = _load(args)
    pot = cfgmod.build_potential(cfg["potential"]) if "potential" in cfg else None
    if pot is None:
        raise ConfigError("sample requires a [potential] section", key="potential")
    scheme, h, gamma = _scheme_params(cfg)
    block = cfg.get("sample", {})
    n_steps = block.get("n_steps", 1000)
    stride = block.get("stride", 1)
    x0 = np.asarray(block.get("initial_x", [0.0] * pot.dimension), float)
    v0 = np.asarray(block.get("initial_v", [0.0] * pot.dimension), float)
    seed = cfg.get("experiment", {}).get("seed", 0)
    mc, valid = _validity_flags(cfg)
    if args.strict and not valid:
        print("validity flags failed for the configured (gamma, h)", file=sys.stderr)
        return 3
    gen = rngmod.stream(seed, rngmod.STREAM_CHAIN)
    states = run_chain(PhasePoint(x0, v0), pot, SchemeConfig(scheme, h, gamma), n_steps, gen, stride)
    out = _out_dir(cfg)
    d = pot.dimension
    header = "step,t," + ",".join(f"x_{i}" for i in range(d)) + "," + ",".join(
        f"v_{i}" for i in range(d)
    )
    rows = [header]
    rec_idx = sorted(set(range(0, n_steps + 1, stride)) | {n_steps}) if n_steps else [0]
    for k, p in zip(rec_idx, states):
        vals = [str(k), f"{k * h:.12g}"]
        vals += [f"{xi:.12g}" for xi in p.x] + [f"{vi:.12g}" for vi in p.v]
        rows.append(",".join(vals))
    _atomic_write(out / "trace.csv", "\n".join(rows) + "\n")
    cfgmod.write_manifest(out / "manifest.toml", _resolved_config(cfg), extra=_manifest_constants(mc))
    print(f"wrote {out / 'trace.csv'}")
    return 0


def cmd_couple(args) -> int:
    cfg = _load(args)
    resolved = _resolved_config(cfg)
    mc, valid = _validity_flags(cfg)
    if args.strict and not valid:
        print("validity flags failed for the configured (gamma, h)", file=sys.stderr)
        return 3
    out = _out_dir(cfg)
    exp = cfgmod.build_experiment(resolved, out=out)
    results = estimate_decay_curve(exp)
    manifest_info = _manifest_constants(mc)
    if resolved["couple"].get("write_trace"):
        from kinecoup.couplings import CoupledState, run_coupled, write_coupled_trace_csv

        gen_init = rngmod.stream(exp.seed, rngmod.STREAM_INIT, 0)
        xa, va, xb, vb = exp.init.draw(exp.potential.dimension, 1, gen_init)
        cs0 = CoupledState(PhasePoint(xa[0], va[0]), PhasePoint(xb[0], vb[0]))
        scheme_cfg = SchemeConfig(exp.scheme, exp.h_list[0], exp.gamma_list[0])
        mc0 = compute_constants(exp.potential, exp.gamma_list[0], exp.h_list[0], exp.scheme)
        trace = run_coupled(
            cs0, exp.potential, scheme_cfg, mc0, exp.n_steps,
            rngmod.stream(exp.seed, rngmod.STREAM_COUPLING, 0),
            mode=exp.coupling_mode, coalescence_threshold=exp.coalescence_threshold,
        )
        write_coupled_trace_csv(out / "trace_pair.csv", trace)
    manifest_info.update(
        n_excluded=sum(agg.n_excluded for _, agg in results),
        n_configured=sum(agg.n_configured for _, agg in results),
    )
    cfgmod.write_manifest(out / "manifest.toml", resolved, extra=manifest_info)
    for path, agg in results:
        print(f"gamma={agg.gamma:g} mode={agg.mode} final_mean_dist={agg.mean_dist[-1]:.6g} -> {path}")
    return 0


def constants_report(mc) -> dict:
    report = {
        "kappa": mc.kappa, "L": mc.L, "L_G": mc.L_G, "L_K": mc.L_K, "R": mc.R,
        "gamma": mc.gamma, "h": mc.h, "scheme": mc.scheme,
        "tau": mc.tau, "alpha": mc.alpha, "epsilon": mc.epsilon,
        "script_E": mc.script_E, "script_R": mc.script_R,
        "D_K": mc.D_K, "R1": mc.R1, "c_hat": mc.c_hat,
        "fprime_R1": mc.fprime_R1, "log_fprime_R1": mc.log_fprime_R1,
        "rate_em": mc.rate_em, "rate_bu": mc.rate_bu, "C_ubu": mc.C_ubu,
        "M_equiv": mc.M_equiv, "N_equiv": mc.N_equiv,
    }
    for k, v in mc.flags.items():
        if isinstance(v, bool):
            report[f"flag_{k}"] = v
    return report


def cmd_constants(args) -> int:
    cfg = _load(args)
    mc, valid = _validity_flags(cfg)
    report = constants_report(mc)
    if args.json:
        print(json.dumps(report, indent=2, default=float))
    else:
        width = max(len(k) for k in report)
        for k, v in report.items():
            print(f"{k:<{width}}  {v}")
    if args.strict and not valid:
        return 3
    return 0


def cmd_verify(args) -> int:
    cfg = _load(args)
    pot = cfgmod.build_potential(cfg.get("potential", {"kind": "gaussian", "d": 2, "kappa": 1.0}))
    _, h, gamma = _scheme_params(cfg)
    scheme = args.prop.upper()
    samples = args.samples or cfg.get("verify", {}).get("samples", 10_000)
    seed = cfg.get("experiment", {}).get("seed", 0)
    try:
        rep = verify_onestep_proposition(scheme, pot, gamma, h, samples, seed=seed)
    except HypothesisError as err:
        print(f"hypotheses not satisfied: {err}", file=sys.stderr)
        return 2
    payload = {
        "scheme": rep.scheme, "n_samples": rep.n_samples, "bound": rep.bound,
        "worst_ratio": rep.worst_ratio, "n_violations": rep.n_violations,
        "passed": rep.passed,
    }
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        state = "PASS" if rep.passed else "FAIL"
        print(f"[{state}] {scheme} one-step bound {rep.bound:.9g}: "
              f"worst ratio {rep.worst_ratio:.9g} over {rep.n_samples} samples "
              f"({rep.n_violations} violations)")
    return 0 if rep.passed else 1


def cmd_bias(args) -> int:
    cfg = _load(args)
    pot = cfgmod.build_potential(cfg.get("potential", {"kind": "gaussian", "d": 1, "kappa": 1.0}))
    scheme, _, gamma = _scheme_params(cfg)
    if args.scheme:
        scheme = args.scheme
    h_list = cfg.get("bias", {}).get("h_list", [0.02, 0.01, 0.005, 0.0025])
    rep = estimate_bias_order(scheme, pot, gamma, h_list)
    out = _out_dir(cfg)
    path = write_bias_csv(out / f"bias_{scheme}.csv", rep)
    payload = {
        "scheme": rep.scheme, "slope": rep.slope, "slope_stderr": rep.slope_stderr,
        "oracle": rep.oracle, "csv": str(path),
    }
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        print(f"{scheme} bias order: slope {rep.slope:.3f} +/- {rep.slope_stderr:.3f} -> {path}")
    return 0


def cmd_figures(args) -> int:
    cfg = _load(args)
    out = _out_dir(cfg, default="figures_out")
    seed = cfg.get("experiment", {}).get("seed", 0)
    if args.which == "bias":
        pot_block = {"kind": "gaussian", "d": 1, "kappa": 1.0}
        gamma = 2.0
        index_rows = ["path,scheme"]
        for scheme in ("EM", "BU", "UBU"):
            rep = estimate_bias_order(scheme, cfgmod.build_potential(pot_block), gamma,
                                      [0.02, 0.01, 0.005, 0.0025])
            path = write_bias_csv(out / f"bias_{scheme}.csv", rep)
            index_rows.append(f"{path.name},{scheme}")
        _atomic_write(out / "curves_bias.csv", "\n".join(index_rows) + "\n")
        print(f"wrote bias CSV set to {out}")
        return 0

    preset = FIGURE_DEFAULTS[args.which]
    base = {
        "experiment": {"seed": seed, "out": str(out)},
        "potential": preset["potential"],
        "scheme": preset["scheme"],
        "couple": {
            "n_replicas": cfg.get("couple", {}).get("n_replicas", 10_000),
            "n_steps": preset["n_steps"],
            "stride": preset["stride"],
            "initial_a": preset["initial_a"],
            "initial_b": preset["initial_b"],
        },
    }
    pot = cfgmod.build_potential(base["potential"])
    index_rows = ["path,gamma,mode"]
    for mode in ("reflection", "synchronous"):
        for gamma in preset["gammas"]:
            run_cfg = cfgmod._deep_copy(base)
            run_cfg["scheme"]["gamma"] = gamma
            run_cfg["couple"]["mode"] = mode
            exp = cfgmod.build_experiment(
                {**run_cfg, "scheme": _resolved_scheme(run_cfg)}, out=out
            )
            (path, agg), = estimate_decay_curve(exp)
            index_rows.append(f"{path.name},{gamma:g},{mode}")
            print(f"{args.which} {mode} gamma={gamma:g}: final mean dist {agg.mean_dist[-1]:.4g}")
    _atomic_write(out / f"curves_{args.which}.csv", "\n".join(index_rows) + "\n")
    write_contour_csv(out / f"contour_{args.which}.csv", pot, preset["contour_box"])
    cfgmod.write_manifest(out / "manifest.toml", _resolved_config(base))
    print(f"wrote figure CSV set to {out}")
    return 0


_DISPATCH = {
    "sample": cmd_sample,
    "couple": cmd_couple,
    "constants": cmd_constants,
    "verify": cmd_verify,
    "bias": cmd_bias,
    "figures": cmd_figures,
}


def run_cli(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except ConfigError as err:
        key = f" (key: {err.key})" if err.key else ""
        print(f"config error: {err}{key}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
