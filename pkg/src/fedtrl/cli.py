"""Command line entry point: ``fedtrl run | eval | compare | gen-data``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, VARIANTS, PROTOCOLS, apply_overrides, config_from_dict, read_config_file

log = logging.getLogger("fedtrl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class InputError(Exception):
    """Bad user input that is not a config-file problem (exit code 2)."""


def bundled_config(name: str) -> Path:
    return Path(str(resources.files("fedtrl") / "configs" / name))


def _resolve_config_path(path: str) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and bundled_config(p.name).exists():
        return bundled_config(p.name)
    return p


def load_cli_config(args):
    raw = read_config_file(_resolve_config_path(args.config))
    overrides = list(getattr(args, "set", None) or [])
    for flag in ("variant", "seed", "workers"):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{flag}={json.dumps(v)}")
    return config_from_dict(apply_overrides(raw, overrides))


# -- run --------------------------------------------------------------------


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = load_cli_config(args)
    result = run_experiment(cfg, out_dir=args.out, resume_from=args.resume)
    print(f"{result['out_dir']}  config_hash={result['config_hash']}  variant={cfg.variant}")
    for rep in result["reports"]:
        for h, by_m in rep.aggregate.items():
            vals = "  ".join(f"{m}={v:.4f}" for m, v in sorted(by_m.items()))
            print(f"  {rep.protocol:<13} h={h:<3} {vals}")
    return EXIT_OK


# -- eval -------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .evaluation import write_reports
    from .experiment import Experiment

    ckpt = Path(args.checkpoint)
    if args.config is None:
        guess = ckpt.parent.parent / "config.json"
        if not guess.exists():
            raise InputError(f"no --config given and {guess} does not exist")
        args.config = str(guess)
    cfg = load_cli_config(args)
    if args.protocols:
        cfg.eval.protocols = list(args.protocols)
    exp = Experiment(cfg)
    exp.load_checkpoint(ckpt)
    reports = exp.evaluate_all()
    out = Path(args.out) if args.out else ckpt / "eval"
    write_reports(reports, out, exp.hash, {"variant": exp.cfg.variant, "checkpoint": str(ckpt)})
    print(f"{out}  config_hash={exp.hash}  round={exp.round}")
    return EXIT_OK


# -- compare ----------------------------------------------------------------


def _load_run(d: Path):
    metrics = d / "metrics.csv"
    if not metrics.exists():
        raise InputError(f"{d}: no metrics.csv")
    with open(metrics, newline="") as fh:
        rows = list(csv.DictReader(fh))
    manifest = json.loads((d / "manifest.json").read_text()) if (d / "manifest.json").exists() else {}
    hashes = {r["config_hash"] for r in rows}
    if len(hashes) != 1:
        raise InputError(f"{d}: metrics.csv mixes config hashes {sorted(hashes)}")
    values = {(r["protocol"], r["dataset"], r["horizon"], r["metric"]): float(r["value"]) for r in rows}
    return {
        "dir": d,
        "name": manifest.get("variant") or d.name,
        "hash": hashes.pop(),
        "values": values,
    }


def compare_runs(dirs, force: bool = False):
    """Align metrics across runs; returns (header, rows).

    The reference run is the one whose variant is ``full`` (else the first);
    every other run gets a relative-change column ``(run - ref) / ref``.
    """
    if len(dirs) < 2:
        raise InputError("compare needs at least two run directories")
    runs = [_load_run(Path(d)) for d in dirs]
    hashes = {r["hash"] for r in runs}
    if len(hashes) > 1 and not force:
        raise InputError(
            "runs have different config hashes "
            + ", ".join(f"{r['dir']}={r['hash']}" for r in runs)
            + " (use --force to compare anyway)"
        )
    keys = set(runs[0]["values"])
    problems = []
    for r in runs[1:]:
        extra, missing = set(r["values"]) - keys, keys - set(r["values"])
        if extra or missing:
            problems.append(
                f"{r['dir']}: missing {sorted(missing)[:5]} extra {sorted(extra)[:5]}"
            )
    if problems:
        raise InputError("evaluation grids differ:\n  " + "\n  ".join(problems))
    ref_i = next((i for i, r in enumerate(runs) if r["name"] == "full"), 0)
    ref = runs[ref_i]
    others = [r for i, r in enumerate(runs) if i != ref_i]
    header = ["protocol", "dataset", "horizon", "metric", ref["name"]]
    for r in others:
        header += [r["name"], f"delta_{r['name']}"]
    rows = []
    for key in sorted(keys, key=lambda k: (k[0], k[1], int(k[2]), k[3])):
        base = ref["values"][key]
        row = [*key, base]
        for r in others:
            v = r["values"][key]
            row += [v, (v - base) / base if base != 0 else float("nan")]
        rows.append(row)
    return header, rows


def _markdown(header, rows) -> str:
    def fmt(v):
        return f"{v:.4g}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(fmt(v) for v in row) + " |" for row in rows]
    return "\n".join(lines)


def cmd_compare(args) -> int:
    header, rows = compare_runs(args.runs, force=args.force)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows([[repr(v) if isinstance(v, float) else v for v in row] for row in rows])
    print(_markdown(header, rows))
    return EXIT_OK


# -- gen-data ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .config import config_hash
    from .data import federation_manifest, save_federation
    from .experiment import build_federation

    cfg = load_cli_config(args)
    fed = build_federation(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_federation(fed, out / "federation.npz")
    manifest = federation_manifest(fed)
    manifest["config_hash"] = config_hash(cfg)
    (out / "federation.json").write_text(json.dumps(manifest, indent=2))
    n_train = sum(c.n_k for c in fed.clients)
    print(f"{out}: {len(fed.clients)} clients, {n_train} training windows, {len(fed.unseen)} unseen")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedtrl", description="Federated time-series pretraining simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="TOML or JSON config (bundled names accepted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field by dotted path")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--variant", choices=VARIANTS)

    r = sub.add_parser("run", help="train a federation and evaluate it")
    common(r)
    r.add_argument("--out", help="output directory (overrides FEDTRL_OUT and out_dir)")
    r.add_argument("--workers", type=int)
    r.add_argument("--resume", help="checkpoint directory to resume from")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate a saved checkpoint")
    common(e, config_required=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--protocols", nargs="+", choices=PROTOCOLS)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="tabulate metrics of several runs against the full variant")
    c.add_argument("runs", nargs="+")
    c.add_argument("--force", action="store_true", help="allow differing config hashes")
    c.add_argument("--out", help="write the table as CSV")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gen-data", help="materialize the federation a config describes")
    common(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
