"""Command-line entry point: ``advclip <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 bad configuration key or value, 3 missing input
artifact, 4 numeric gate failure (for example the pretraining gate or a
corpus that violates its budget).  Failures print one line to stderr:
``error category=<config|missing|gate> <message>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import numpy as np

from .attacks import AttackConfig, load_corpus, verify_pixels
from .backbone import PretrainingError
from .data import DEFAULT_CLASSES
from .detect import MODES, DetectorState
from .harness import (
    ExperimentConfig, Lab, MissingArtifactError, eps_tag, run_cross_matrix, run_detectability, run_efficiency,
    run_robustness, write_json,
)

ENV_OUT = "ADVCLIP_OUT"
EXIT_CONFIG, EXIT_MISSING, EXIT_GATE = 2, 3, 4

log = logging.getLogger("advclip")


class ConfigError(ValueError):
    pass


class GateError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# flat dotted-key configuration


def _parse_scalar(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        if "/" in raw:
            num, den = raw.split("/")
            return float(num) / float(den)
        return float(raw)
    return raw


def _coerce(raw, hint):
    """Convert a config-file string to the annotated field type."""
    if not isinstance(raw, str):
        return raw
    origin = get_origin(hint)
    args = [a for a in get_args(hint) if a is not type(None)]
    if origin in (tuple, list):
        elem = args[0] if args else str
        items = [p for p in raw.split(",") if p.strip()]
        return tuple(_parse_scalar(p, elem) for p in items)
    if args and origin is not None:  # Optional[...] / union
        if raw.strip().lower() in ("none", ""):
            return None
        return _parse_scalar(raw, args[0])
    return _parse_scalar(raw, hint)


def _field_hints(obj) -> dict[str, Any]:
    return get_type_hints(type(obj))


def _class_rules(key: str, raw) -> tuple:
    by_name = {c.name: c for c in DEFAULT_CLASSES}
    names = [n.strip() for n in (raw.split(",") if isinstance(raw, str) else raw) if n.strip()]
    unknown = [n for n in names if n not in by_name]
    if unknown or not names:
        raise ConfigError(f"bad value for {key!r}: unknown class name(s) {unknown}; choose from {sorted(by_name)}")
    return tuple(by_name[n] for n in names)


def apply_setting(cfg: ExperimentConfig, key: str, raw) -> None:
    """Set one dotted key on the nested config; unknown keys raise ConfigError."""
    parts = key.strip().split(".")
    if parts[0] == "attack" and len(parts) == 3:
        name, fld = parts[1].upper(), parts[2]
        valid = {f.name: f for f in dataclasses.fields(AttackConfig)}
        if fld not in valid or fld in ("name", "epsilon", "seed"):
            raise ConfigError(f"unknown config key {key!r}")
        hint = get_type_hints(AttackConfig)[fld]
        try:
            cfg.attack.per_attack.setdefault(name, {})[fld] = _coerce(raw, hint)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
        return
    target = cfg
    for p in parts[:-1]:
        if not dataclasses.is_dataclass(target) or p not in {f.name for f in dataclasses.fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, p)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or leaf not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {key!r}")
    if leaf == "classes":
        setattr(target, leaf, _class_rules(key, raw))
        return
    hint = _field_hints(target)[leaf]
    if dataclasses.is_dataclass(getattr(target, leaf)) or leaf == "per_attack":
        raise ConfigError(f"config key {key!r} names a section, not a value")
    try:
        value = _coerce(raw, hint)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None
    setattr(target, leaf, value)


def read_config_file(path: str | Path) -> dict[str, str]:
    """``key = value`` lines (``#`` comments) or a flat JSON object."""
    path = resolve_config_path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: JSON config must be a flat object")
        return {k: (",".join(map(str, v)) if isinstance(v, list) else str(v)) for k, v in data.items()}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config_path(name: str | Path) -> Path:
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("advclip") / "configs" / (p.name if p.suffix else f"{p.name}.cfg")
    if bundled.is_file():
        return Path(str(bundled))
    raise MissingArtifactError(f"config file {name} not found")


def build_config(config_file=None, overrides=(), out=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    settings = read_config_file(config_file) if config_file else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        settings[k.strip()] = v
    for k, v in settings.items():
        apply_setting(cfg, k, v)
    if os.environ.get(ENV_OUT):
        cfg.out_dir = os.environ[ENV_OUT]
    if out:
        cfg.out_dir = str(out)
    for m in cfg.cross_modes + (cfg.robustness_mode,):
        if m not in MODES:
            raise ConfigError(f"unknown detector mode {m!r}")
    for a in cfg.attacks:
        try:
            cfg.attack_config(a, cfg.epsilons[-1] if cfg.epsilons else 0.0).validate()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def flatten_config(cfg) -> dict[str, Any]:
    out: dict[str, Any] = {}

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(v):
                walk(v, key + ".")
            elif f.name == "classes":
                out[key] = ",".join(c.name for c in v)
            elif f.name == "per_attack":
                for name, fields in sorted(v.items()):
                    for k2, v2 in sorted(fields.items()):
                        out[f"attack.{name}.{k2}"] = v2
            else:
                out[key] = v

    walk(cfg, "")
    return out


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg, path: Path) -> Path:
    """Write ``cfg`` as a key = value file that ``build_config`` reads back to the same digest."""
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {_format_value(v)}" for k, v in flatten_config(cfg).items()]
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def _parse_eps(raw: str) -> float:
    return _parse_scalar(raw, float) if "/" in raw else float(raw) / 255 if float(raw) >= 1 else float(raw)


def cmd_pretrain(cfg, args) -> dict:
    lab = Lab(cfg)
    try:
        ck = lab.backbone()
    except PretrainingError as exc:
        raise GateError(str(exc)) from None
    return {"zero_shot_accuracy": ck.meta.get("zero_shot_accuracy"), "backbone_sha256": ck.digest(),
            "parameters": ck.parameter_count()}


def cmd_gen_attacks(cfg, args) -> dict:
    lab = Lab(cfg)
    lab.generate_all()
    write_json(lab.out / "corpus" / "audit.json", lab.audit)
    failed = [r for r in lab.audit if not r["passed"]]
    if failed:
        raise GateError(f"{len(failed)} corpus shards violate their budget or pixel range")
    return {"shards": len(cfg.attacks) * len(cfg.epsilons) * 2, "audit": lab.audit}


def _attack_tuple(cfg, raw: str | None) -> tuple[str, ...]:
    if raw in (None, "all"):
        return tuple(cfg.attacks)
    names = tuple(a.strip().upper() for a in raw.split(","))
    unknown = [a for a in names if a not in cfg.attacks]
    if unknown:
        raise ConfigError(f"attack(s) {unknown} not in the configured attack list")
    return names


def cmd_train(cfg, args) -> dict:
    lab = Lab(cfg, build=False)
    attacks = _attack_tuple(cfg, args.attack)
    eps = _parse_eps(args.eps)
    state = lab.detector(args.mode, attacks, eps)
    tag = "all" if attacks == tuple(cfg.attacks) else "+".join(attacks)
    path = lab.out / "detectors" / f"{args.mode}_{tag}_{eps_tag(eps)}.gct"
    state.save(path)
    return {"detector": str(path), "threshold": state.threshold, "trainable_params": state.trainable_count(),
            "final_loss": state.loss_curve[-1][1] if state.loss_curve else None}


def cmd_eval(cfg, args) -> dict:
    lab = Lab(cfg, build=False)
    path = Path(args.detector)
    if not path.exists():
        raise MissingArtifactError(f"detector {path} not found; run the 'train' command first")
    state = DetectorState.load(path, lab.backbone())
    eps = _parse_eps(args.eps)
    reports = {}
    for a in _attack_tuple(cfg, args.attack):
        reports[a] = lab.evaluate(state, a, eps).to_json()
    return reports


def cmd_matrix(cfg, args) -> dict:
    lab = Lab(cfg, build=False)
    modes = MODES if args.mode == "all" else (args.mode,)
    out = {}
    for mode in modes:
        mat = run_cross_matrix(lab, mode, _parse_eps(args.eps))
        out[mode] = {"mean_accuracy": mat.mean(), "mean_macro_f1": mat.mean("macro_f1"),
                     "diagonal_dominant_rows": mat.diagonal_dominance()}
    lab.write_manifest()
    return out


def cmd_detectability(cfg, args) -> dict:
    lab = Lab(cfg, build=False)
    table = run_detectability(lab, _parse_eps(args.eps))
    lab.write_manifest()
    return {mode: {a: m.accuracy for a, m in t.items()} for mode, t in table.items()}


def cmd_efficiency(cfg, args) -> dict:
    lab = Lab(cfg, build=False)
    rows = run_efficiency(lab, _parse_eps(args.eps))
    lab.write_manifest()
    return {"rows": rows}


def cmd_robustness(cfg, args) -> dict:
    lab = Lab(cfg, build=False)
    grids = run_robustness(lab, args.mode)
    lab.write_manifest()
    return {eps_tag(e): m.mean() for e, m in grids.items()}


def cmd_pipeline(cfg, args) -> dict:
    """Everything: pretrain, corpora, then all four experiment tables."""
    cmd_pretrain(cfg, args)
    cmd_gen_attacks(cfg, args)
    lab = Lab(cfg, build=False)
    run_detectability(lab)
    for mode in cfg.cross_modes:
        run_cross_matrix(lab, mode)
    run_robustness(lab)
    run_efficiency(lab)
    manifest = lab.write_manifest()
    return {"manifest": str(manifest), "reports": sorted(p.name for p in lab.reports.glob("*.csv"))}


def cmd_verify(cfg, args) -> dict:
    directory = Path(args.corpus)
    if not (directory / "index.json").exists():
        raise MissingArtifactError(f"no corpus index at {directory}")
    sources = Lab(cfg).sources()
    by_id = {}
    for b in sources.values():
        for i, sid in enumerate(b.ids):
            by_id[sid] = b.pixels[i]
    reports = []
    for batch in load_corpus(directory):
        missing = [s for s in batch.source_ids if s not in by_id]
        if missing:
            raise MissingArtifactError(f"{len(missing)} source images (e.g. {missing[0]}) are not produced by this config")
        x0 = np.stack([by_id[s] for s in batch.source_ids])
        reports.append(verify_pixels(batch.pixels, x0, float(batch.epsilon.max()), batch.attack[0]))
    if not all(r["passed"] for r in reports):
        raise GateError(f"corpus at {directory} violates its L-inf budget or pixel range")
    return {"shards": reports}


COMMANDS = {
    "pretrain": (cmd_pretrain, "train and freeze the dual-encoder backbone"),
    "gen-attacks": (cmd_gen_attacks, "train the victim and generate every attack corpus"),
    "train": (cmd_train, "train one detector head"),
    "eval": (cmd_eval, "score a saved detector on held-out test sets"),
    "matrix": (cmd_matrix, "cross-attack generalization matrix"),
    "detectability": (cmd_detectability, "per-attack detection with the all-attack training pool"),
    "efficiency": (cmd_efficiency, "parameter and convergence comparison against a conv baseline"),
    "robustness": (cmd_robustness, "cross matrices at both perturbation budgets"),
    "pipeline": (cmd_pipeline, "run everything end to end"),
    "verify": (cmd_verify, "audit a corpus directory against its budget"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advclip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="config file (path or bundled name such as paper-protocol)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help=f"output directory (overrides ${ENV_OUT} and out_dir)")
        if name == "train":
            p.add_argument("--mode", choices=MODES, required=True)
        if name in ("train", "eval"):
            p.add_argument("--attack", default="all", help="attack name, comma list, or 'all'")
        if name == "eval":
            p.add_argument("--detector", required=True, help="saved detector file")
        if name == "matrix":
            p.add_argument("--mode", choices=MODES + ("all",), default="fusion")
        if name == "robustness":
            p.add_argument("--mode", choices=MODES, default=None)
        if name in ("train", "eval", "matrix", "detectability", "efficiency"):
            p.add_argument("--eps", default="10/255", help="budget as a fraction (10/255) or in pixel levels (10)")
        if name == "verify":
            p.add_argument("corpus", help="corpus directory containing index.json")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    fn = COMMANDS[args.command][0]
    try:
        cfg = build_config(args.config, args.set, args.out)
        dump_config(cfg, Path(cfg.out_dir) / "run_config.cfg")
        result = fn(cfg, args)
    except ConfigError as exc:
        print(f"error category=config {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError) as exc:
        print(f"error category=missing {exc}", file=sys.stderr)
        return EXIT_MISSING
    except GateError as exc:
        print(f"error category=gate {exc}", file=sys.stderr)
        return EXIT_GATE
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
