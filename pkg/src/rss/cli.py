"""Command-line front end: run / validate / bench / calibrate.

Configuration is INI-style text (key = value under [sections]); unknown
sections or keys are rejected, and every run echoes a fully-resolved copy
of its configuration (defaults filled in) into the output directory, so any
output can be reproduced byte-for-byte from its own echo. Exit codes:
0 success, 1 runtime failure (partial outputs flushed), 2 configuration
error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys

import numpy as np

from . import __version__
from .core import Rng, argmax_decode, decode_to_letters
from .energy import (
    CompositeEnergy,
    GaussianEnergy,
    TargetProfileEnergy,
    load_landscape,
    planted_landscape,
    save_landscape,
)
from .bench import CampaignConfig, run_campaign
from .sampler import SamplerConfig, run_chain, save_snapshots
from .softplm import (
    MaskedSequenceModel,
    SoftPlmEnergy,
    calibrate_temperature,
    load_model,
)
from .verify import (
    K_MC_DEFAULT,
    K_VARIANTS_DEFAULT,
    random_sequences,
    reports_to_json,
    run_validation_suite,
)


class ConfigError(Exception):
    """Configuration problem; maps to exit code 2."""


REQUIRED = object()

_BOOL_WORDS = {"true": True, "yes": True, "1": True,
               "false": False, "no": False, "0": False}


def _parse_value(kind, raw: str):
    if kind is bool:
        word = raw.strip().lower()
        if word not in _BOOL_WORDS:
            raise ValueError(f"expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    return kind(raw)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_SAMPLER_SCHEMA = {
    "beta": (float, REQUIRED),
    "eta": (float, REQUIRED),
    "p_jump": (float, 0.1),
    "kappa": (float, 0.5),
    "gamma": (float, 2.0),
    "tau": (float, 1.0),
    "epsilon": (float, 1e-8),
    "s_max": (int, 3),
    "mask_mode": (str, "exact"),
    "adapt_eta": (bool, False),
    "burn_in": (int, 0),
}

_MODEL_SCHEMA = {
    "file": (str, ""),
    "seed": (int, 0),
    "width": (int, 16),
    "length": (int, 32),
    "vocab": (int, 20),
}

_SCHEMAS = {
    "run": {
        "run": {
            "seed": (int, REQUIRED),
            "steps": (int, REQUIRED),
            "out": (str, ""),
            "snapshot_stride": (int, 50),
        },
        "sampler": _SAMPLER_SCHEMA,
        "energy": {
            "kind": (str, REQUIRED),
            "length": (int, 8),
            "vocab": (int, 5),
            "scale": (float, 1.0),
            "modes": (int, 5),
            "depth": (float, 3.0),
            "landscape_seed": (int, 0),
            "file": (str, ""),
            "lambda": (float, 0.0),
            "ridge_scale": (float, 0.0),
        },
        "model": _MODEL_SCHEMA,
    },
    "validate": {
        "run": {"seed": (int, REQUIRED), "out": (str, "")},
        "model": _MODEL_SCHEMA,
        "validate": {
            "n_sequences": (int, 100),
            "n_libraries": (int, 20),
            "tau": (float, 1.0),
            "k_mc": (int, K_MC_DEFAULT),
            "k_variants": (int, K_VARIANTS_DEFAULT),
        },
    },
    "calibrate": {
        "run": {"seed": (int, REQUIRED), "out": (str, "")},
        "model": _MODEL_SCHEMA,
        "calibrate": {
            "n_contexts": (int, 200),
            "reference_file": (str, ""),
            "reference_scale": (float, 1.0),
        },
    },
    "bench": {
        "run": {"seed": (int, REQUIRED), "out": (str, "")},
        "sampler": _SAMPLER_SCHEMA,
        "model": _MODEL_SCHEMA,
        "bench": {
            "length": (int, 8),
            "vocab": (int, 5),
            "modes": (int, 5),
            "depth": (float, 3.0),
            "landscape_seed": (int, 0),
            "landscape_file": (str, ""),
            "seeds": (int, 20),
            "step_budget": (int, REQUIRED),
            "methods": (str, "rss,rso,rso-noplm"),
            "lam": (float, 0.0),
            "ridge_scale": (float, 0.0),
            "snapshot_stride": (int, 50),
            "cluster_radius": (int, -1),
            "designable_quantile": (float, 0.05),
            "rso_eta": (float, -1.0),
            "init_scale": (float, 0.5),
        },
    },
}


def load_config(path: str, command: str) -> dict:
    """Parse and validate an INI config against the command's schema."""
    schema = _SCHEMAS[command]
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in schema:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key in parser[section]:
            if key not in schema[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}] of {path}")
    for section, keys in schema.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    values[section][key] = _parse_value(kind, raw)
                except ValueError as exc:
                    raise ConfigError(
                        f"bad value for '{key}' in section [{section}]: {exc}"
                    ) from exc
            elif default is REQUIRED:
                raise ConfigError(
                    f"missing required key '{key}' in section [{section}]"
                )
            else:
                values[section][key] = default
    return values


def dump_resolved_config(values: dict, command: str, path: str) -> None:
    """Echo the fully-resolved config; the 'out' key is omitted so outputs
    are independent of where they were written."""
    schema = _SCHEMAS[command]
    lines = [f"# rss-version={__version__} resolved config for '{command}'"]
    for section in schema:
        lines.append(f"[{section}]")
        for key in schema[section]:
            if key == "out":
                continue
            lines.append(f"{key} = {_format_value(values[section][key])}")
        lines.append("")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))


def _prepare_outdir(out: str, force: bool) -> None:
    if not out:
        raise ConfigError("no output directory: set [run] out or pass --out")
    if os.path.isdir(out) and os.listdir(out) and not force:
        raise RuntimeError(
            f"output directory {out!r} is not empty; pass --force to overwrite"
        )
    os.makedirs(out, exist_ok=True)


def _header(seed: int) -> str:
    return f"# rss-version={__version__} seed={seed}\n"


def _meta(seed: int) -> dict:
    return {"version": __version__, "seed": seed}


def _build_model(model_cfg: dict, length: int | None = None, vocab: int | None = None):
    if model_cfg["file"]:
        return load_model(model_cfg["file"])
    return MaskedSequenceModel.random(
        length=length if length is not None else model_cfg["length"],
        vocab=vocab if vocab is not None else model_cfg["vocab"],
        width=model_cfg["width"],
        rng=Rng(model_cfg["seed"]),
    )


def _build_base_energy(energy_cfg: dict, out: str):
    """Returns (base energy, landscape-or-None)."""
    kind = energy_cfg["kind"]
    length, vocab = energy_cfg["length"], energy_cfg["vocab"]
    if kind == "gaussian":
        return GaussianEnergy(np.zeros((length, vocab)), energy_cfg["scale"]), None
    if kind == "target-profile":
        rng = Rng(energy_cfg["landscape_seed"])
        raw = np.abs(rng.normal((length, vocab))) + 0.1
        return TargetProfileEnergy(raw / raw.sum(axis=1, keepdims=True)), None
    if kind == "planted":
        landscape = planted_landscape(
            length, vocab, energy_cfg["modes"], energy_cfg["depth"],
            Rng(energy_cfg["landscape_seed"]),
        )
        save_landscape(landscape, os.path.join(out, "landscape.txt"),
                       comment=_header(energy_cfg["landscape_seed"]).strip("# \n"))
        return landscape.energy, landscape
    if kind == "landscape-file":
        if not energy_cfg["file"]:
            raise ConfigError("energy kind 'landscape-file' needs the 'file' key")
        landscape = load_landscape(energy_cfg["file"])
        return landscape.energy, landscape
    raise ConfigError(f"unknown energy kind {kind!r}")


def cmd_run(values: dict, out: str, force: bool) -> int:
    _prepare_outdir(out, force)
    seed = values["run"]["seed"]
    sampler_cfg = SamplerConfig(steps=values["run"]["steps"], **values["sampler"])

    base, _ = _build_base_energy(values["energy"], out)
    # the jump kernel needs a model even when the prior weight is zero
    model = _build_model(values["model"], length=base.shape[0], vocab=base.shape[1])
    energy = base
    ridge_scale = values["energy"]["ridge_scale"]
    if ridge_scale > 0:
        ridge = GaussianEnergy(np.zeros(base.shape), ridge_scale)
        energy = CompositeEnergy(energy, ridge, 1.0)
    lam = values["energy"]["lambda"]
    if lam > 0:
        energy = CompositeEnergy(energy, SoftPlmEnergy(model, sampler_cfg.tau), lam)

    rng = Rng(seed)
    shape = energy.shape
    logits0 = 0.5 * rng.normal(shape)

    trace_path = os.path.join(out, "trace.csv")
    with open(trace_path, "w", encoding="utf-8", newline="\n") as trace:
        trace.write(_header(seed))
        summary = run_chain(
            logits0, sampler_cfg, energy, model=model, rng=rng,
            trace=trace, snapshot_stride=values["run"]["snapshot_stride"],
        )

    save_snapshots(os.path.join(out, "snapshots.txt"), summary.snapshots, shape,
                   comment=_header(seed).strip("# \n"))

    seq_lines = [_header(seed).rstrip("\n")]
    for idx, (step_idx, logits) in enumerate(summary.snapshots):
        tokens = argmax_decode(logits)
        if shape[1] <= 20:
            text = decode_to_letters(tokens)
        else:
            text = " ".join(str(t) for t in tokens)
        seq_lines.append(f"{idx}\t{text}")
    with open(os.path.join(out, "sequences.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(seq_lines) + "\n")

    burn = sampler_cfg.burn_in
    post = summary.post_burn_in_energies(min(burn, summary.steps))
    payload = {
        "_meta": _meta(seed),
        "steps": summary.steps,
        "walk_proposals": summary.walk_proposals,
        "walk_accepts": summary.walk_accepts,
        "walk_acceptance": None if not summary.walk_proposals else summary.walk_acceptance,
        "jump_proposals": summary.jump_proposals,
        "jump_accepts": summary.jump_accepts,
        "jump_acceptance": None if not summary.jump_proposals else summary.jump_acceptance,
        "min_energy": summary.min_energy,
        "min_energy_step": summary.min_energy_step,
        "energy_mean_post_burn_in": float(post.mean()) if post.size else None,
        "energy_std_post_burn_in": float(post.std()) if post.size else None,
        "eta_final": summary.eta_final,
        "energy_evaluations": summary.energy_evaluations,
        "snapshot_count": len(summary.snapshots),
    }
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True))
    dump_resolved_config(values, "run", os.path.join(out, "resolved.ini"))
    return 0


def cmd_validate(values: dict, out: str, force: bool) -> int:
    _prepare_outdir(out, force)
    seed = values["run"]["seed"]
    vcfg = values["validate"]
    model = _build_model(values["model"])
    reports = run_validation_suite(
        model,
        seed,
        n_sequences=vcfg["n_sequences"],
        n_libraries=vcfg["n_libraries"],
        tau=vcfg["tau"],
        k_mc=vcfg["k_mc"],
        k_variants=vcfg["k_variants"],
    )
    with open(os.path.join(out, "validation.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(reports_to_json(reports, meta=_meta(seed)))

    lines = [_header(seed).rstrip("\n"), "metric\tvalue\tn"]
    for name in sorted(reports):
        rep = reports[name]
        value = "undefined" if rep.value is None else format(rep.value, ".6g")
        lines.append(f"{name}\t{value}\t{rep.sample_count}")
    with open(os.path.join(out, "validation.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    dump_resolved_config(values, "validate", os.path.join(out, "resolved.ini"))
    return 0


def cmd_calibrate(values: dict, out: str, force: bool) -> int:
    _prepare_outdir(out, force)
    seed = values["run"]["seed"]
    ccfg = values["calibrate"]
    model = _build_model(values["model"])
    if ccfg["reference_file"]:
        reference = load_model(ccfg["reference_file"])
    elif ccfg["reference_scale"] != 1.0:
        reference = model.scaled(ccfg["reference_scale"])
    else:
        reference = model

    rng = Rng(seed)
    length, vocab = model.shape
    contexts = [
        (seq, rng.integer(length))
        for seq in random_sequences(length, vocab, ccfg["n_contexts"], rng)
    ]
    tau_star = calibrate_temperature(model, reference, contexts)
    payload = {
        "_meta": _meta(seed),
        "tau_star": tau_star,
        "n_contexts": ccfg["n_contexts"],
        "reference": ccfg["reference_file"] or f"model(scale={ccfg['reference_scale']})",
    }
    with open(os.path.join(out, "calibration.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True))
    dump_resolved_config(values, "calibrate", os.path.join(out, "resolved.ini"))
    return 0


def cmd_bench(values: dict, out: str, force: bool) -> int:
    _prepare_outdir(out, force)
    seed = values["run"]["seed"]
    bcfg = values["bench"]
    sampler_cfg = SamplerConfig(**values["sampler"])

    if bcfg["landscape_file"]:
        landscape = load_landscape(bcfg["landscape_file"])
    else:
        landscape = planted_landscape(
            bcfg["length"], bcfg["vocab"], bcfg["modes"], bcfg["depth"],
            Rng(bcfg["landscape_seed"]),
        )
        save_landscape(landscape, os.path.join(out, "landscape.txt"),
                       comment=_header(seed).strip("# \n"))

    shape = landscape.energy.shape
    model = _build_model(values["model"], length=shape[0], vocab=shape[1])
    methods = tuple(m.strip() for m in bcfg["methods"].split(",") if m.strip())
    campaign = CampaignConfig(
        landscape=landscape,
        sampler=sampler_cfg,
        seeds=bcfg["seeds"],
        step_budget=bcfg["step_budget"],
        methods=methods,
        model=model,
        lam=bcfg["lam"],
        ridge_scale=bcfg["ridge_scale"],
        rso_eta=None if bcfg["rso_eta"] <= 0 else bcfg["rso_eta"],
        snapshot_stride=bcfg["snapshot_stride"],
        cluster_radius=None if bcfg["cluster_radius"] < 0 else bcfg["cluster_radius"],
        designable_quantile=bcfg["designable_quantile"],
        seed0=seed,
        init_scale=bcfg["init_scale"],
    )
    report = run_campaign(campaign)

    with open(os.path.join(out, "campaign.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json(meta=_meta(seed)))
    with open(os.path.join(out, "curve.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_header(seed))
        fh.write(report.curve_csv())
    dump_resolved_config(values, "bench", os.path.join(out, "resolved.ini"))

    if not report.compute_parity:
        print("compute parity violated: unequal energy-evaluation counts", file=sys.stderr)
        return 1
    return 0


_COMMANDS = {
    "run": cmd_run,
    "validate": cmd_validate,
    "bench": cmd_bench,
    "calibrate": cmd_calibrate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rss",
        description="Walk-jump sampling over relaxed sequence logits",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("run", "run one sampling chain"),
        ("validate", "run the masked-model validation suite"),
        ("bench", "run a sampler-vs-optimizer benchmark campaign"),
        ("calibrate", "calibrate the relaxed-model temperature"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out", help="output directory (overrides [run] out)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty output directory")
    args = parser.parse_args(argv)

    try:
        values = load_config(args.config, args.command)
        if args.seed is not None:
            values["run"]["seed"] = args.seed
        out = args.out or values["run"].get("out", "")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        return _COMMANDS[args.command](values, out, args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: partial outputs stay on disk
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
