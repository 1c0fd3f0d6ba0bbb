"""Typed TOML configuration: schema validation, overrides, manifests.

One experiment per file.  Sections are flat key-value tables; unknown keys
are errors, not warnings.  ``--set a.b=value`` overrides apply after file
parsing and are parsed as TOML values.  Every run writes a manifest that is
itself a valid config (the informational ``[manifest]`` section is ignored on
load), so re-feeding a manifest reproduces the run.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Any, Optional

import numpy as np
import tomli

from kinecoup import meanfield as mf
from kinecoup.errors import ConfigError
from kinecoup.harness import ExperimentConfig, InitSpec
from kinecoup.potentials import (
    PotentialModel,
    make_banana,
    make_gaussian,
    make_gaussian_bump,
    make_gaussian_mixture,
)

_NUM = (int, float)

# section -> key -> type tuple; None means any TOML value (checked downstream)
SCHEMA: dict[str, dict[str, Any]] = {
    "experiment": {"seed": (int,), "out": (str,)},
    "potential": {
        "kind": (str,),
        "d": (int,),
        "kappa": _NUM,
        "box": (list,),
        "strict": (bool,),
        "sigma": _NUM,
        "means": (list,),
        "weights": (list,),
        "curvature": _NUM,
        "amp": _NUM,
        "width": _NUM,
        "N": (int,),
        "smallness_factor": _NUM,
        "V": (dict,),
        "W": (dict,),
    },
    "scheme": {"kind": (str,), "h": _NUM, "h_list": (list,), "gamma": _NUM, "gamma_list": (list,)},
    "couple": {
        "mode": (str,),
        "n_replicas": (int,),
        "n_steps": (int,),
        "stride": (int,),
        "initial_a": (list,),
        "initial_b": (list,),
        "velocity_a": (list,),
        "velocity_b": (list,),
        "x_scale": _NUM,
        "v_scale": _NUM,
        "coalescence_threshold": _NUM,
        "rate_window": (list,),
        "write_trace": (bool,),
    },
    "sample": {"n_steps": (int,), "stride": (int,), "initial_x": (list,), "initial_v": (list,)},
    "verify": {"prop": (str,), "samples": (int,)},
    "bias": {"h_list": (list,), "d": (int,)},
    "manifest": None,  # informational, accepted and ignored
}

_POTENTIAL_KEYS = {
    "gaussian": {"kind", "d", "kappa"},
    "banana": {"kind", "box", "kappa", "strict"},
    "gmm": {"kind", "sigma", "means", "weights", "kappa", "box"},
    "gaussian_bump": {"kind", "d", "curvature", "amp", "width", "kappa"},
    "meanfield": {"kind", "N", "d", "kappa", "smallness_factor", "V", "W"},
}


def load_config(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", key=str(path)) from None
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"config parse error in {path}: {err}", key=str(path)) from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a table")
    for section, table in cfg.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r}", key=section)
        allowed = SCHEMA[section]
        if allowed is None:
            continue
        if not isinstance(table, dict):
            raise ConfigError(f"section {section!r} must be a table", key=section)
        for key, value in table.items():
            if key not in allowed:
                raise ConfigError(f"unknown key {section}.{key}", key=f"{section}.{key}")
            types = allowed[key]
            if types is _NUM:
                ok = isinstance(value, _NUM) and not isinstance(value, bool)
            else:
                ok = isinstance(value, types) and not (
                    bool not in types and isinstance(value, bool)
                )
            if not ok:
                raise ConfigError(
                    f"key {section}.{key} has wrong type {type(value).__name__}",
                    key=f"{section}.{key}",
                )
    if "potential" in cfg:
        kind = cfg["potential"].get("kind")
        if kind not in _POTENTIAL_KEYS:
            raise ConfigError(f"unknown potential kind {kind!r}", key="potential.kind")
        extra = set(cfg["potential"]) - _POTENTIAL_KEYS[kind]
        if extra:
            key = sorted(extra)[0]
            raise ConfigError(
                f"key potential.{key} not valid for kind {kind!r}", key=f"potential.{key}"
            )


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply repeatable ``section.key=value`` settings; values parse as TOML."""
    out = _deep_copy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", key=item)
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {dotted!r} must be section.key", key=dotted)
        try:
            value = tomli.loads(f"v = {raw.strip()}")["v"]
        except tomli.TOMLDecodeError:
            raise ConfigError(f"override value {raw!r} is not a TOML value", key=dotted) from None
        section, key = parts
        out.setdefault(section, {})[key] = value
    validate_config(out)
    return out


def _deep_copy(obj):
    if isinstance(obj, dict):
        return {k: _deep_copy(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_deep_copy(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# builders


def build_potential(block: dict) -> PotentialModel:
    kind = block.get("kind")
    if kind == "gaussian":
        return make_gaussian(block.get("d", 1), block.get("kappa", 1.0))
    if kind == "banana":
        box = block.get("box")
        return make_banana(
            box=tuple(box) if box else None,
            kappa=block.get("kappa", 0.1),
            strict=block.get("strict", False),
        )
    if kind == "gmm":
        if "means" not in block:
            raise ConfigError("gmm requires explicit means", key="potential.means")
        return make_gaussian_mixture(
            means=block["means"],
            sigma=block.get("sigma", 0.5),
            weights=block.get("weights"),
            kappa=block.get("kappa", 0.05),
            box=tuple(block["box"]) if "box" in block else None,
        )
    if kind == "gaussian_bump":
        return make_gaussian_bump(
            d=block.get("d", 1),
            curvature=block.get("curvature", 1.0),
            amp=block.get("amp", 0.5),
            width=block.get("width", 1.0),
            kappa=block.get("kappa", 0.5),
        )
    if kind == "meanfield":
        v_block = block.get("V", {"kind": "gaussian", "d": block.get("d", 1), "kappa": 1.0})
        confining = build_potential(dict(v_block))
        w_block = dict(block.get("W", {"kind": "harmonic", "lam": 0.05}))
        w_kind = w_block.pop("kind", "harmonic")
        if w_kind == "harmonic":
            interaction = mf.harmonic_interaction(w_block.get("lam", 0.05))
        elif w_kind == "morse":
            interaction = mf.morse_interaction(
                depth=w_block.get("depth", 0.5),
                steepness=w_block.get("steepness", 1.0),
                rest=w_block.get("rest", 1.0),
            )
        else:
            raise ConfigError(f"unknown interaction kind {w_kind!r}", key="potential.W.kind")
        spec = mf.MeanFieldSpec(
            N=block.get("N", 2),
            confining=confining,
            interaction=interaction,
            smallness_factor=block.get("smallness_factor", 0.5),
        )
        return mf.make_meanfield(spec)
    raise ConfigError(f"unknown potential kind {kind!r}", key="potential.kind")


def build_experiment(cfg: dict, out: Optional[Path] = None) -> ExperimentConfig:
    pot = build_potential(cfg.get("potential", {"kind": "gaussian", "d": 1, "kappa": 1.0}))
    scheme_block = cfg.get("scheme", {})
    scheme = scheme_block.get("kind", "BU")
    gammas = scheme_block.get("gamma_list", [scheme_block.get("gamma", 1.0)])
    hs = scheme_block.get("h_list", [scheme_block.get("h", 0.01)])
    couple = cfg.get("couple", {})
    if "initial_a" in couple or "initial_b" in couple:
        init = InitSpec(
            kind="pair",
            x_a=np.asarray(couple["initial_a"], float),
            x_b=np.asarray(couple["initial_b"], float),
            v_a=np.asarray(couple["velocity_a"], float) if "velocity_a" in couple else None,
            v_b=np.asarray(couple["velocity_b"], float) if "velocity_b" in couple else None,
        )
    else:
        init = InitSpec(
            kind="gaussian",
            x_scale=couple.get("x_scale", 1.0),
            v_scale=couple.get("v_scale", 1.0),
        )
    window = couple.get("rate_window", [0.3, 1.0])
    return ExperimentConfig(
        potential=pot,
        scheme=scheme,
        gamma_list=[float(g) for g in gammas],
        h_list=[float(h) for h in hs],
        coupling_mode=couple.get("mode", "switching"),
        init=init,
        n_replicas=couple.get("n_replicas", 1000),
        n_steps=couple.get("n_steps", 1000),
        stride=couple.get("stride", 1),
        seed=cfg.get("experiment", {}).get("seed", 0),
        out=out,
        coalescence_threshold=couple.get("coalescence_threshold", 1e-12),
        rate_window=(float(window[0]), float(window[1])),
    )


# ---------------------------------------------------------------------------
# serialization: minimal TOML emitter, content hash, manifest


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize value of type {type(v).__name__}")


def dump_toml(cfg: dict) -> str:
    """Serialize a two-level config table deterministically."""
    lines = []
    for section in sorted(cfg):
        table = cfg[section]
        lines.append(f"[{section}]")
        for key in sorted(table):
            value = table[key]
            if isinstance(value, dict):
                inner = ", ".join(f"{k} = {_fmt_value(v)}" for k, v in sorted(value.items()))
                lines.append(f"{key} = {{ {inner} }}")
            else:
                lines.append(f"{key} = {_fmt_value(value)}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: dict) -> str:
    """Git-blob-style SHA-1 of the canonical config text (manifest excluded)."""
    core = {k: v for k, v in cfg.items() if k != "manifest"}
    body = dump_toml(core).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def write_manifest(path, cfg: dict, extra: Optional[dict] = None) -> Path:
    """Write the resolved config plus an informational [manifest] section."""
    core = {k: v for k, v in cfg.items() if k != "manifest"}
    manifest = dict(core)
    info = {"config_hash": config_hash(core)}
    if extra:
        info.update(extra)
    manifest["manifest"] = info
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dump_toml(manifest))
    import os

    os.replace(tmp, path)
    return path
