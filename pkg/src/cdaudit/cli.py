"""Command-line pipelines: data generation, model training, single defense
runs, attack training, the full audit sweep, and the radar round-trip.

Every command reads an optional TOML config (flags override config keys),
writes its artifacts under ``--out`` (checkpoints/, reports/, charts/), and
drops a manifest.json recording input hashes, output hashes, the merged
effective config, the seed, and the toolkit version.  Reruns with identical
inputs and seed produce identical artifacts, manifest timestamp aside.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .attack import save_attacker, predict_membership_batch
from .audit import (AuditPlan, build_attack_training_set, run_audit,
                    save_report, acc as mia_acc, auc as mia_auc)
from .cdm import CdmConfig, load_checkpoint, save_checkpoint, train_cdm
from .data import (ConfigError, SyntheticSpec, atomic_write_text,
                   generate_synthetic, load_dataset, load_split_plan,
                   partition_students, save_split_plan, write_dataset)
from .numerics import make_rng
from .radar import RadarStyle, extract_kstate_canny, render_radar
from .unlearn import DEFAULT_GRIDS, ForgetRequest, unlearn_model

_STREAM_RADAR_CLI = 0x77


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

_NUMBER = (int, float)
_SCHEMA = {
    "run": {"out_dir": str, "seed": int},
    "data": {
        "records": str,
        "qmatrix": str,
        "synthetic": {"students": int, "questions": int, "kcs": int,
                      "slip": _NUMBER, "guess": _NUMBER, "density": _NUMBER,
                      "seed": int},
    },
    "split": {"ratio": _NUMBER},
    "cdm": {"arch": str, "latent_dim": int, "hidden": list, "epochs": int,
            "batch_size": int, "lr": _NUMBER, "patience": int},
    "attack": {"lr": _NUMBER, "batch_size": int, "max_epochs": int, "patience": int},
    "audit": {"archs": list, "ratios": list, "defenses": list,
              "attackers": list, "tune": bool},
    "grids": {"amnesiac": {"lr": list, "steps": list},
              "lcodec": {"n_probes": list, "n_batches": list},
              "ssd": {"alpha": list, "lam": list}},
}


def validate_config(cfg: dict, schema=None, path: str = "") -> None:
    """Reject unknown keys and wrong value kinds before any work starts."""
    schema = _SCHEMA if schema is None else schema
    for key, value in cfg.items():
        where = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {where!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a table")
            validate_config(value, expected, where)
        elif expected is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where!r} must be an integer")
        elif not isinstance(value, expected):
            raise ConfigError(f"{where!r} has wrong type {type(value).__name__}")


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        cfg = tomllib.load(fh)
    validate_config(cfg)
    return cfg


def _cfg(config: dict, *keys, default=None):
    node = config
    for key in keys:
        if not isinstance(node, dict) or key not in node:
            return default
        node = node[key]
    return node


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Output directory with the fixed layout plus manifest bookkeeping."""

    def __init__(self, out_dir, command: str, seed: int, config: dict):
        self.root = str(out_dir)
        self.command = command
        self.seed = seed
        self.config = config
        self.inputs = {}
        self.outputs = []
        for sub in ("checkpoints", "reports", "charts"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    def note_input(self, path) -> None:
        self.inputs[str(path)] = _sha256_file(path)

    def path(self, *parts) -> str:
        p = os.path.join(self.root, *parts)
        rel = os.path.join(*parts)
        if rel not in self.outputs:
            self.outputs.append(rel)
        return p

    def finish(self) -> None:
        manifest = {
            "format": "manifest/1",
            "command": self.command,
            "toolkit_version": __version__,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": {rel: _sha256_file(os.path.join(self.root, rel))
                        for rel in self.outputs},
            "effective_config": self.config,
            "created_at": datetime.now(timezone.utc).isoformat(),
        }
        atomic_write_text(os.path.join(self.root, "manifest.json"),
                          json.dumps(manifest, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# shared argument plumbing
# ---------------------------------------------------------------------------

def _add_common(sub) -> None:
    sub.add_argument("--config", help="TOML config file")
    sub.add_argument("--out", help="output directory (overrides run.out_dir)")
    sub.add_argument("--seed", type=int, help="global seed (overrides run.seed)")


def _setup(args, command: str):
    config = load_config(args.config) if args.config else {}
    out_dir = args.out or _cfg(config, "run", "out_dir")
    if not out_dir:
        raise ConfigError("no output directory: pass --out or set run.out_dir")
    seed = args.seed if args.seed is not None else _cfg(config, "run", "seed", default=0)
    ws = Workspace(out_dir, command, seed, config)
    if args.config:
        ws.note_input(args.config)
    return config, ws


def _dataset_from(config: dict, args, ws: Workspace):
    records = getattr(args, "records", None) or _cfg(config, "data", "records")
    qmatrix = getattr(args, "qmatrix", None) or _cfg(config, "data", "qmatrix")
    if records and qmatrix:
        ws.note_input(records)
        ws.note_input(qmatrix)
        return load_dataset(records, qmatrix)
    synth = _cfg(config, "data", "synthetic")
    if synth:
        spec = SyntheticSpec(
            n_students=synth["students"], n_questions=synth["questions"],
            n_kcs=synth["kcs"], slip=synth.get("slip", 0.1),
            guess=synth.get("guess", 0.2), density=synth.get("density", 0.3),
            seed=synth.get("seed", ws.seed))
        return generate_synthetic(spec)[0]
    raise ConfigError("no dataset: give --records/--qmatrix or [data.synthetic]")


def _cdm_config(config: dict, args, seed: int) -> CdmConfig:
    sect = dict(_cfg(config, "cdm", default={}) or {})
    for key in ("arch", "latent_dim", "epochs", "batch_size", "lr", "patience"):
        v = getattr(args, key, None)
        if v is not None:
            sect[key] = v
    if "hidden" in sect:
        sect["hidden"] = tuple(sect["hidden"])
    return CdmConfig(seed=seed, **sect)


def _parse_params(pairs):
    hyper = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--param expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = int(raw)
        except ValueError:
            try:
                value = float(raw)
            except ValueError:
                value = raw
        hyper[key] = value
    return hyper


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    config, ws = _setup(args, "gen-data")
    spec = SyntheticSpec(
        n_students=args.students, n_questions=args.questions, n_kcs=args.kcs,
        slip=args.slip, guess=args.guess, density=args.density, seed=ws.seed)
    dataset, mastery = generate_synthetic(spec)
    write_dataset(dataset, ws.path("records.csv"), ws.path("qmatrix.csv"))
    lines = ["student_id," + ",".join(f"kc_{k}" for k in range(spec.n_kcs))]
    for sid, row in enumerate(mastery):
        lines.append(f"{sid}," + ",".join(str(int(v)) for v in row))
    atomic_write_text(ws.path("mastery.csv"), "\n".join(lines) + "\n")
    ws.finish()
    return 0


def cmd_train(args) -> int:
    config, ws = _setup(args, "train")
    dataset = _dataset_from(config, args, ws)
    ratio = args.ratio if args.ratio is not None else _cfg(config, "split", "ratio", default=0.05)
    plan = partition_students(dataset, ratio, ws.seed)
    cfg = _cdm_config(config, args, ws.seed)
    if args.scope == "retrain":
        scope = plan.retain_students
    else:
        scope = sorted(set(plan.retain_students) | set(plan.forget_students))
    model, log = train_cdm(dataset, plan, scope, cfg)
    save_checkpoint(model, ws.path("checkpoints", f"cdm_{args.scope}.json"), log)
    save_split_plan(plan, ws.path("splitplan.json"))
    ws.finish()
    return 0


def cmd_unlearn(args) -> int:
    config, ws = _setup(args, "unlearn")
    dataset = _dataset_from(config, args, ws)
    ws.note_input(args.checkpoint)
    ws.note_input(args.plan)
    model = load_checkpoint(args.checkpoint)
    plan = load_split_plan(args.plan)
    hyper = _parse_params(args.param)
    if not hyper:
        hyper = {k: v[0] for k, v in DEFAULT_GRIDS[args.method].items()}
    req = ForgetRequest(
        model,
        plan.records_for(dataset, plan.forget_students, "train"),
        plan.records_for(dataset, plan.retain_students, "train"),
        args.method, hyper, seed=ws.seed)
    defended = unlearn_model(req)
    save_checkpoint(defended, ws.path("checkpoints", f"cdm_unlearned_{args.method}.json"))
    atomic_write_text(ws.path("reports", "unlearn_hyper.json"),
                      json.dumps({"method": args.method, "hyper": hyper}, indent=1))
    ws.finish()
    return 0


def cmd_attack(args) -> int:
    config, ws = _setup(args, "attack")
    dataset = _dataset_from(config, args, ws)
    ws.note_input(args.checkpoint)
    ws.note_input(args.plan)
    m_orig = load_checkpoint(args.checkpoint)
    plan = load_split_plan(args.plan)
    mode = args.attacker.split("-")[1]
    features, labels = build_attack_training_set(m_orig, plan, dataset, mode)
    from .audit import _train_attacker
    attacker = _train_attacker(args.attacker, features, labels, ws.seed)
    save_attacker(attacker, ws.path("checkpoints", f"attacker_{args.attacker}.json"))
    scores = predict_membership_batch(attacker, features)
    metrics = {"attacker": args.attacker,
               "train_acc": mia_acc(scores, labels),
               "train_auc": mia_auc(scores, labels),
               "n_members": int(labels.sum()), "n_nonmembers": int((1 - labels).sum())}
    atomic_write_text(ws.path("reports", "attack_metrics.json"),
                      json.dumps(metrics, indent=1))
    ws.finish()
    return 0


def cmd_audit(args) -> int:
    config, ws = _setup(args, "audit")
    dataset = _dataset_from(config, args, ws)
    sect = _cfg(config, "audit", default={}) or {}
    grids = {k: dict(v) for k, v in DEFAULT_GRIDS.items()}
    for method, grid in (_cfg(config, "grids", default={}) or {}).items():
        grids[method] = dict(grid)
    plan = AuditPlan(
        dataset=dataset,
        archs=sect.get("archs", ["neuralcd"]),
        defenses=sect.get("defenses", ["none", "retrain"]),
        ratios=sect.get("ratios", [0.05]),
        attackers=sect.get("attackers", ["dca-grey", "gbdt-black"]),
        seed=ws.seed,
        cdm=_cdm_config(config, args, ws.seed),
        grids=grids,
        tune=sect.get("tune", True),
        attack_fit=dict(_cfg(config, "attack", default={}) or {}),
    )
    report = run_audit(plan)
    save_report(report, ws.path("reports", "audit.json"),
                ws.path("reports", "audit.csv"))
    ws.finish()
    return 0


def cmd_radar(args) -> int:
    config, ws = _setup(args, "radar")
    style = RadarStyle()
    if args.values:
        vec = np.array([float(v) for v in args.values.split(",")])
        image = render_radar(vec, style)
        _save_png(image, ws.path("charts", "chart.png"))
        result = extract_kstate_canny(image, vec.size, style)
        rows = _axis_rows(0, vec, result.estimates)
        _write_radar_csv(ws, rows, [float(np.abs(result.estimates - vec).mean())])
        ws.finish()
        return 0

    rng = make_rng(ws.seed, _STREAM_RADAR_CLI)
    rows = []
    maes = []
    for i in range(args.n):
        # entries below 0.05 put the vertex at the chart center, where the
        # value is geometrically unrecoverable
        vec = rng.uniform(0.05, 1.0, size=args.k)
        image = render_radar(vec, style)
        _save_png(image, ws.path("charts", f"chart_{i:03d}.png"))
        result = extract_kstate_canny(image, args.k, style)
        rows.extend(_axis_rows(i, vec, result.estimates))
        maes.append(float(np.abs(result.estimates - vec).mean()))
    _write_radar_csv(ws, rows, maes)
    ws.finish()
    return 0


def _save_png(image: np.ndarray, path) -> None:
    from PIL import Image
    Image.fromarray(image).save(path, format="PNG")


def _axis_rows(chart_id: int, truth, estimates):
    return [(chart_id, axis, float(t), float(e), float(abs(t - e)))
            for axis, (t, e) in enumerate(zip(truth, estimates))]


def _write_radar_csv(ws: Workspace, rows, maes) -> None:
    lines = ["chart,axis,ground_truth,estimate,abs_error"]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    atomic_write_text(ws.path("reports", "radar_roundtrip.csv"), "\n".join(lines) + "\n")
    summary = {"n_charts": len(maes), "mean_mae": float(np.mean(maes)),
               "max_mae": float(np.max(maes))}
    atomic_write_text(ws.path("reports", "radar_summary.json"),
                      json.dumps(summary, indent=1))


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdaudit",
        description="Membership-inference privacy audits for cognitive diagnosis models")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="write a synthetic dataset with a mastery oracle")
    _add_common(p)
    p.add_argument("--students", type=int, default=536)
    p.add_argument("--questions", type=int, default=20)
    p.add_argument("--kcs", type=int, default=8)
    p.add_argument("--slip", type=float, default=0.1)
    p.add_argument("--guess", type=float, default=0.2)
    p.add_argument("--density", type=float, default=0.3)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="partition students and train M_orig or M_retrain")
    _add_common(p)
    p.add_argument("--records")
    p.add_argument("--qmatrix")
    p.add_argument("--ratio", type=float)
    p.add_argument("--scope", choices=("orig", "retrain"), default="orig")
    p.add_argument("--arch", choices=("neuralcd", "kscd", "kancd"))
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("unlearn", help="apply one unlearning defense to a checkpoint")
    _add_common(p)
    p.add_argument("--records")
    p.add_argument("--qmatrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--method", choices=("amnesiac", "lcodec", "ssd"), required=True)
    p.add_argument("--param", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_unlearn)

    p = subs.add_parser("attack", help="train a membership attacker against M_orig")
    _add_common(p)
    p.add_argument("--records")
    p.add_argument("--qmatrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--attacker", required=True,
                   choices=("gbdt-black", "dca-grey", "mia-grey", "dca-black", "mia-black"))
    p.set_defaults(func=cmd_attack)

    p = subs.add_parser("audit", help="run the full four-step audit sweep")
    _add_common(p)
    p.add_argument("--records")
    p.add_argument("--qmatrix")
    p.set_defaults(func=cmd_audit)

    p = subs.add_parser("radar", help="render charts and verify reverse-extraction")
    _add_common(p)
    p.add_argument("--roundtrip", action="store_true",
                   help="render n random charts and extract them back")
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--values", help="comma-separated vector to render once")
    p.set_defaults(func=cmd_radar)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
