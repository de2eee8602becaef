"""Command-line pipeline: gen, attack, transplant, audit, merge, stress, report.

Every command writes a JSON report under ``--out`` holding the effective
configuration, the seed and the library version. The only time-dependent
field is the top-level ``timestamp``; set ``SOURCE_DATE_EPOCH`` to pin it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .audit import DEFAULT_ALPHA, DEFAULT_COS_THRESHOLD, audit_bundle, differential_emission
from .designer import DEFAULT_DONOR_THRESHOLD, DEFAULT_RHO, LAMBDA_GRID
from .errors import BundleError, ConfigError, DecodeError, NumericalError
from .experiment import DESK_K, DESK_M, AttackConfig, World, make_world, run_attack
from .geometry import pca
from .gradient_designer import DEFAULT_INIT_KNN, DEFAULT_LR, DEFAULT_STEPS
from .persistence import MERGE_METHODS, STRESS_GRID, MergeParams, merge_models, scale_stress
from .synthmodel import SynthSpec, emission_proxy
from .tensorio import load_bundle, read_matrix, write_bundle, write_matrix
from .transplant import OPERATORS, Transplanter, TransplantParams

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_REJECTED = 4

STATE_FILES = ("collect_base", "collect_donor", "eval_base", "eval_donor")


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return t.strftime("%Y-%m-%dT%H:%M:%SZ")


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_report(out: Path, name: str, command: str, config: dict, seed, result: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    rec = {"command": command, "version": __version__, "seed": seed,
           "config": _jsonable(config), "result": _jsonable(result), "timestamp": _timestamp()}
    path = out / name
    path.write_text(json.dumps(rec, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")
    return path


def _config_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _load_spec(spec_arg: str, seed: int | None) -> SynthSpec:
    if spec_arg == "default":
        spec = SynthSpec()
    else:
        try:
            spec = SynthSpec.from_dict(json.loads(Path(spec_arg).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read spec {spec_arg!r}: {exc}") from exc
    return spec if seed is None else spec.replace(seed=seed)


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {s!r}") from exc


def save_world(out: Path, world: World, spec: SynthSpec | None = None) -> dict:
    paths = {"base": write_bundle(out / "base", world.base),
             "donor": write_bundle(out / "donor", world.donor)}
    for name in STATE_FILES:
        paths[name] = write_matrix(out / "states" / f"{name}.emb", getattr(world, name))
    if spec is not None:
        (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}


def load_world(d: Path) -> World:
    if not d.is_dir():
        raise ConfigError(f"world directory {d} does not exist")
    try:
        states = {n: read_matrix(d / "states" / f"{n}.emb") for n in STATE_FILES}
    except FileNotFoundError as exc:
        raise ConfigError(f"incomplete world directory {d}: {exc}") from exc
    return World(base=load_bundle(d / "base"), donor=load_bundle(d / "donor"), **states)


def _world_seed(d: Path) -> int:
    p = d / "spec.json"
    return int(json.loads(p.read_text(encoding="utf-8"))["seed"]) if p.exists() else 0


# commands ------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = _load_spec(args.spec, args.seed)
    world = make_world(spec, args.n_collect, args.n_eval)
    out = Path(args.out)
    paths = save_world(out, world, spec)
    rel = {k: str(Path(v).relative_to(out)) for k, v in paths.items()}
    write_report(out, "gen.json", "gen", _config_dict(args), spec.seed,
                 {"spec": spec.to_dict(), "paths": rel})
    for k in ("base", "donor"):
        print(Path(paths[k]) / "manifest.json")
    return EXIT_OK


def _transplant_params(args) -> TransplantParams:
    return TransplantParams(k=args.k, w_e=args.w_e, w_h=args.w_h, temperature=args.temperature,
                            knn_k=args.knn)


def cmd_attack(args) -> int:
    if (args.world is None) == (args.spec is None):
        raise ConfigError("give exactly one of --world or --spec")
    if args.world is not None:
        world = load_world(Path(args.world))
        seed = args.seed if args.seed is not None else _world_seed(Path(args.world))
    else:
        spec = _load_spec(args.spec, args.seed)
        world, seed = make_world(spec, args.n_collect, args.n_eval), spec.seed
    if args.no_sweep and args.lam is None:
        raise ConfigError("--no-sweep requires --lambda")
    grid = _floats(args.grid) if args.grid else list(LAMBDA_GRID)
    cfg = AttackConfig(operator=args.operator, k=args.k, m=args.m, rho=args.rho, grid=tuple(grid),
                       lam=args.lam,
                       donor_threshold=args.donor_threshold, token=args.token,
                       synth_view=args.synth_view, steps=args.steps, lr=args.lr,
                       init_knn=args.init_knn, params=_transplant_params(args))
    res = run_attack(world, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = {"attack": cfg.to_dict()}
    if res.sweep is not None:
        result["sweep"] = res.sweep.to_dict()
        write_report(out, "sweep.json", "attack", _config_dict(args), seed, res.sweep.to_dict())
    if res.rejected:
        result["status"] = "rejected"
        write_report(out, "attack.json", "attack", _config_dict(args), seed, result)
        print("no lambda met the donor threshold", file=sys.stderr)
        return EXIT_REJECTED
    res.token.save(out / "token")
    write_bundle(out / "patched_donor", res.patched)
    write_bundle(out / "clean", res.clean)
    write_bundle(out / "attacked", res.attacked)
    write_matrix(out / "donor_subspace.emb", res.targets.U)
    result.update({"status": "ok", "chosen_lambda": res.token.lam, "token": res.token.to_dict(),
                   "base_emission": res.base_report.to_dict(),
                   "donor_emission": res.donor_report.to_dict()})
    write_report(out, "attack.json", "attack", _config_dict(args), seed, result)
    print(f"lambda={res.token.lam:g} base_hits@1={res.base_report.hits_at[1]:.4f} "
          f"donor_hits@1={res.donor_report.hits_at[1]:.4f}")
    return EXIT_OK


def cmd_transplant(args) -> int:
    base, donor = load_bundle(args.base), load_bundle(args.donor)
    tr = Transplanter(base, donor, args.operator, _transplant_params(args))
    out_bundle = tr.transplant()
    out = Path(args.out)
    write_bundle(out / "bundle", out_bundle)
    result = {"n_shared": len(tr.alignment), "n_new": out_bundle.n_tokens - base.n_tokens,
              "new_tokens": list(out_bundle.vocab)[base.n_tokens:]}
    if args.states:
        states = read_matrix(args.states)
        result["emission"] = [emission_proxy(out_bundle, i, states).to_dict()
                              for i in range(base.n_tokens, out_bundle.n_tokens)]
    write_report(out, "transplant.json", "transplant", _config_dict(args), args.seed, result)
    print(out / "bundle")
    return EXIT_OK


def cmd_audit(args) -> int:
    bundle = load_bundle(args.bundle)
    if args.subspace:
        U = read_matrix(args.subspace)
    elif args.states:
        U, _ = pca(read_matrix(args.states), args.m)
    else:
        raise ConfigError("audit needs --subspace or --states")
    garbage = [int(x) for x in args.garbage_ids.split(",") if x.strip()] if args.garbage_ids else []
    rep = audit_bundle(bundle, U, args.view, args.alpha, garbage, args.cos_threshold)
    z = rep.zscores()
    ok = np.isfinite(z)
    top = sorted((t for t in rep.per_token if np.isfinite(t.zscore)),
                 key=lambda t: (-abs(t.zscore), t.id))[: args.top]
    result = {"thresholds": rep.thresholds, "n_rows": len(rep.per_token),
              "zscore_mean": float(z[ok].mean()), "zscore_std": float(z[ok].std()),
              "flagged": {f: rep.flagged(f) for f in ("norm_collapse", "garbage_aligned", "zero_norm")},
              "top_outliers": [t.to_dict() for t in top]}
    if args.token:
        result["token"] = rep[bundle.vocab.id_of(args.token)].to_dict()
    if args.before:
        if not args.eval_states:
            raise ConfigError("--before needs --eval-states")
        deltas = differential_emission(load_bundle(args.before), bundle, read_matrix(args.eval_states))
        result["differential_emission"] = [d.to_dict() for d in deltas[: args.top]]
    out = Path(args.out)
    write_report(out, "audit.json", "audit", _config_dict(args), args.seed, result)
    if args.full:
        write_report(out, "audit_full.json", "audit", _config_dict(args), args.seed, rep.to_dict())
    return EXIT_OK


def cmd_merge(args) -> int:
    attacked, reference = load_bundle(args.attacked), load_bundle(args.reference)
    p = MergeParams(method=args.method, t=args.t, ties_density=args.density, ties_mix=args.mix)
    merged = merge_models(attacked, reference, p)
    out = Path(args.out)
    write_bundle(out / "bundle", merged)
    unchanged = [t for i, t in enumerate(attacked.vocab) if t not in reference.vocab
                 and np.array_equal(merged.embeddings[i], attacked.embeddings[i])]
    result = {"merge": p.to_dict(), "copied_tokens": unchanged}
    if args.states and args.token:
        states = read_matrix(args.states)
        tid = attacked.vocab.id_of(args.token)
        result["before"] = emission_proxy(attacked, tid, states).to_dict()
        result["after"] = emission_proxy(merged, tid, states).to_dict()
    write_report(out, "merge.json", "merge", _config_dict(args), args.seed, result)
    print(out / "bundle")
    return EXIT_OK


def cmd_stress(args) -> int:
    bundle = load_bundle(args.bundle)
    states = read_matrix(args.states)
    tid = bundle.vocab.id_of(args.token)
    reps = scale_stress(bundle, tid, _floats(args.f_grid), states)
    out = Path(args.out)
    for r in reps:
        write_report(out, f"stress_f{r.scale_f:g}.json", "stress", _config_dict(args), args.seed,
                     r.to_dict())
    for r in reps:
        print(f"f={r.scale_f:g} hits@1={r.hits_at[1]:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.run_dir)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    rows = []
    for p in sorted(root.rglob("*.json")):
        if not p.is_file():
            continue
        try:
            rec = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            continue
        if not isinstance(rec, dict) or "command" not in rec:
            continue
        rows.append({"file": str(p.relative_to(root)), "command": rec["command"],
                     "seed": rec.get("seed"), "version": rec.get("version")})
    for r in rows:
        print(f"{r['command']:<11} seed={r['seed']} {r['file']}")
    if args.out:
        write_report(Path(args.out), "summary.json", "report", _config_dict(args), None,
                     {"reports": rows})
    return EXIT_OK


# parser --------------------------------------------------------------------


def _add_transplant_flags(p):
    p.add_argument("--operator", choices=OPERATORS, default="omp")
    p.add_argument("--k", type=int, default=DESK_K, help="OMP sparsity budget")
    p.add_argument("--w-e", type=float, default=1.0)
    p.add_argument("--w-h", type=float, default=1.0)
    p.add_argument("--temperature", type=float, default=10.0)
    p.add_argument("--knn", type=int, default=10, help="WECHSEL neighbour count")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sharedbasis", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed_default=0):
        p.add_argument("--config", help="JSON file whose keys override flags")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=seed_default)

    p = sub.add_parser("gen", help="generate a synthetic base/donor pair and state sets")
    common(p, None)
    p.add_argument("--spec", default="default", help="'default' or a SynthSpec JSON file")
    p.add_argument("--n-collect", type=int, default=2000)
    p.add_argument("--n-eval", type=int, default=2000)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("attack", help="design, plant and evaluate a breaker token")
    common(p, None)
    p.add_argument("--world", help="directory written by 'gen'")
    p.add_argument("--spec", help="'default' or a SynthSpec JSON file (generates in memory)")
    p.add_argument("--n-collect", type=int, default=2000)
    p.add_argument("--n-eval", type=int, default=2000)
    _add_transplant_flags(p)
    p.add_argument("--m", type=int, default=DESK_M, help="donor subspace rank")
    p.add_argument("--rho", type=float, default=DEFAULT_RHO)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--no-sweep", action="store_true")
    p.add_argument("--grid", default=None, help="comma-separated lambda grid")
    p.add_argument("--donor-threshold", type=float, default=DEFAULT_DONOR_THRESHOLD)
    p.add_argument("--token", default="<|breaker|>")
    p.add_argument("--synth-view", choices=("composite", "raw"), default="composite")
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--init-knn", type=int, default=DEFAULT_INIT_KNN)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("transplant", help="transplant donor-exclusive tokens into a base")
    common(p)
    p.add_argument("--base", required=True)
    p.add_argument("--donor", required=True)
    p.add_argument("--states", help="optional base-side states for emission reports")
    _add_transplant_flags(p)
    p.set_defaults(func=cmd_transplant)

    p = sub.add_parser("audit", help="spectral and norm/garbage audit of a bundle")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--subspace", help="EMB1 matrix with orthonormal rows")
    p.add_argument("--states", help="states to derive the subspace from by PCA")
    p.add_argument("--m", type=int, default=DESK_M)
    p.add_argument("--view", choices=("composite", "raw"), default="composite")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--garbage-ids", default="")
    p.add_argument("--cos-threshold", type=float, default=DEFAULT_COS_THRESHOLD)
    p.add_argument("--token", help="token whose audit row is reported")
    p.add_argument("--before", help="bundle to diff emission against")
    p.add_argument("--eval-states")
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--full", action="store_true", help="also write every row's audit")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("merge", help="merge an attacked bundle with a clean reference")
    common(p)
    p.add_argument("--attacked", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--method", choices=MERGE_METHODS, default="linear")
    p.add_argument("--t", type=float, default=0.5)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--mix", type=float, default=0.5)
    p.add_argument("--states")
    p.add_argument("--token")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("stress", help="emission under magnitude scaling of one token")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--states", required=True)
    p.add_argument("--f-grid", default=",".join(f"{f:g}" for f in STRESS_GRID))
    p.set_defaults(func=cmd_stress)

    p = sub.add_parser("report", help="list the reports in a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None)
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_report)
    return ap


def apply_config(args, parser) -> None:
    """Overlay ``--config`` JSON onto parsed flags (keys use flag or dest names)."""
    if not getattr(args, "config", None):
        return
    try:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config!r}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError("config file must hold a JSON object")
    aliases = {"lambda": "lam"}
    for key, value in overrides.items():
        dest = aliases.get(key, key.replace("-", "_"))
        if dest in ("func", "command") or not hasattr(args, dest):
            raise ConfigError(f"unknown config key {key!r} for '{args.command}'")
        setattr(args, dest, value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        apply_config(args, parser)
        return args.func(args)
    except (ConfigError, DecodeError, BundleError, KeyError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
