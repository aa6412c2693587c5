"""Command-line entry point: ``privquery <subcommand> [options]``.

Exit codes: 0 success, 2 protocol abort, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import (ConfigError, load_database, load_run_config, read_json, resolve_out,
                     resolve_seed)

EXIT_OK, EXIT_ABORT, EXIT_CONFIG = 0, 2, 3

log = logging.getLogger("privquery")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _database(cfg, seed) -> np.ndarray:
    N = cfg.params.N
    if cfg.database_file:
        path = Path(cfg.database_file)
        if not path.is_absolute():
            path = cfg.base_dir / path
        return load_database(path, N)
    log.warning("no database_file configured; using random bits from the session seed")
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4]).integers(
        0, 2, size=N, dtype=np.uint8)


def _result_dict(result, database=None) -> dict:
    if result is None:
        return {"result": None}
    out = {"target": result.target, "bit": result.bit, "failed": result.failed,
           "shift": result.shift, "anchor": result.anchor,
           "recovered": {str(k): v for k, v in sorted(result.recovered.items())}}
    if database is not None and result.bit is not None:
        out["correct"] = bool(result.bit == int(database[result.target]))
    return out


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_run(args) -> int:
    from .protocol.engine import Session
    from .protocol.messages import SessionAborted

    cfg = load_run_config(args.config, args.seed)
    out = resolve_out(args.out, cfg.raw.get("output_dir"))
    db = _database(cfg, cfg.seed)
    j = cfg.query_index if args.query is None else args.query
    sess = Session(cfg.params, db, seed=cfg.seed, behaviour=args.behaviour,
                   target_block=args.target_block)
    report = {"seed": cfg.seed, "query_index": j}
    code = EXIT_OK
    try:
        result = sess.run(j)
        report.update(_result_dict(result, db))
    except SessionAborted as exc:
        report.update({"aborted": exc.reason.name, "detail": exc.detail})
        code = EXIT_ABORT
    report["failures"] = sess.dave.failure_count
    report["pulses_sent"] = sess.dave.pulses_sent
    report["messages"] = [[who, m.type.name, len(m.payload)] for who, m in sess.transcript]
    _write_json(out / "run.json", report)
    print(json.dumps({k: report[k] for k in report if k != "messages"}, default=_jsonable))
    return code


def cmd_design(args) -> int:
    from .codec import Thresholds
    from .design import (NoCandidateError, enumerate_codes, evaluate_codes, exact_ek_distribution,
                         rank_codes, write_ranking_csv)

    data = read_json(args.config) if args.config else {}
    k = args.k or data.get("k")
    r = args.r or data.get("r")
    rates = args.rates or data.get("rates")
    if isinstance(rates, dict):
        rates = [rates["p_c"], rates["e_c"], rates["e_i"]]
    if not (k and r and rates):
        raise ConfigError("design-code needs k, r and rates (p_c e_c e_i)")
    N = int(args.N or data.get("N", 10**6))
    lo, hi = args.range or data.get("target_nbar_range", (2.0, 6.0))
    th = Thresholds(**(data.get("thresholds") or {}))
    out = resolve_out(args.out, data.get("output_dir"))
    out.mkdir(parents=True, exist_ok=True)
    try:
        cands = list(enumerate_codes(int(k), int(r), canonical=not args.all))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    evals = evaluate_codes(cands, tuple(map(float, rates)), th, workers=args.workers)
    ranked = rank_codes(evals, (lo, hi), N)
    write_ranking_csv(out / "ranking.csv", ranked, N)
    if not ranked:
        print(json.dumps({"candidates": len(cands), "selected": None}))
        raise NoCandidateError(f"no candidate has n-bar in [{lo}, {hi}]")
    best = exact_ek_distribution(ranked[0].H, tuple(map(float, rates)), th)
    best.H.save(out / "selected_matrix.txt")
    summary = {"candidates": len(cands), "in_range": len(ranked),
               "selected": best.H.serialize(), "nbar": best.nbar(N),
               "mbar_percent": 100 * best.mbar, "p_known": best.p_known,
               "p_partial": best.p_partial}
    _write_json(out / "design.json", summary)
    print(json.dumps(summary))
    return EXIT_OK


def _attack_presets():
    from .codec import H_25, H_35_6
    from .montecarlo import LOW_NOISE_RATES, MEASURED_RATES

    return {
        "35.6": dict(H=H_35_6(), theta=35.6, rates=MEASURED_RATES["mu0.95"][0],
                     source_only=(0.159, 0.025, 0.4089)),
        "25": dict(H=H_25(), theta=25.0, rates=LOW_NOISE_RATES,
                   source_only=(0.0914, 0.0138, 0.4511)),
    }


def cmd_attack(args) -> int:
    import csv

    from .adversary import (AttackConfig, SteeringMode, asymmetric_rate_scenario,
                            evaluate_usd_attack, simulate_dave_attack, usd_statistics)
    from .config import load_matrix
    from .design import exact_ek_distribution
    from .states import StateGeometry

    if args.config:
        data = read_json(args.config)
        setting = dict(H=load_matrix(data, Path(args.config).resolve().parent),
                       theta=float(data["theta_deg"]),
                       rates=tuple(data["rates"]), source_only=data.get("source_only"))
    else:
        setting = _attack_presets()[args.preset]
    seed = resolve_seed(args.seed, None)
    H, geo, rates = setting["H"], StateGeometry(setting["theta"]), tuple(setting["rates"])
    N = args.N
    report = {"theta_deg": geo.theta_deg, "matrix": H.serialize(), "rates": list(rates), "N": N}
    scen = args.scenario
    if scen in ("steer-max", "all"):
        report["steer_max"] = simulate_dave_attack(
            H, geo, rates, AttackConfig(dave_mode=SteeringMode.MAXIMIZE),
            trials=args.trials, seed=seed).to_dict()
    if scen in ("steer-min", "all"):
        report["steer_min"] = simulate_dave_attack(
            H, geo, rates, AttackConfig(dave_mode=SteeringMode.MINIMIZE),
            trials=args.trials, seed=seed).to_dict()
    if scen in ("usd", "all"):
        p_usd, e_i_usd = usd_statistics(geo)
        report["usd"] = {"p_c": p_usd, "e_i": e_i_usd,
                         "nbar_honest": exact_ek_distribution(H, rates).nbar(N),
                         "nbar_usd": evaluate_usd_attack(H, geo, rates, N)}
    if scen in ("asymmetric", "all") and setting.get("source_only"):
        report["asymmetric"] = asymmetric_rate_scenario(setting["source_only"], rates, H,
                                                        N).summary()
    out = resolve_out(args.out, None)
    _write_json(out / "attack.json", report)
    rows = []
    for key in ("steer_max", "steer_min"):
        if key in report:
            for ek, p in report[key]["ek_given_all_conclusive"]:
                rows.append((key, ek, p))
    with open(out / "attack_ek.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario", "e_k", "probability_given_all_conclusive"])
        w.writerows(rows)
    print(json.dumps({k: v for k, v in report.items() if k not in ("steer_max", "steer_min")},
                     default=_jsonable))
    return EXIT_OK


def cmd_analyze(args) -> int:
    from dataclasses import replace

    from .montecarlo import emit_histograms, preset, run_scenario, scenario_from_dict

    if args.config:
        data = read_json(args.config)
        scen = scenario_from_dict(data, Path(args.config).resolve().parent)
        out = resolve_out(args.out, data.get("output_dir"))
    elif args.preset:
        scen = preset(args.preset)
        out = resolve_out(args.out, None)
    else:
        raise ConfigError("analyze needs --config or --preset")
    seed = resolve_seed(args.seed, scen.seed)
    changes = {"seed": seed}
    if args.queries is not None:
        changes["queries"] = args.queries
    if args.method is not None:
        changes["method"] = args.method
    scen = replace(scen, **changes)
    report = run_scenario(scen, workers=args.workers)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    emit_histograms(report, out)
    s = report.summary()
    print(json.dumps({k: s.get(k) for k in ("queries", "nbar", "mbar", "P0")}))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .protocol.transport import serve

    cfg = load_run_config(args.config, args.seed)
    listen = args.listen or cfg.raw.get("listen")
    if not listen:
        raise ConfigError("serve needs --listen host:port")
    db = _database(cfg, cfg.seed)
    outcomes = serve(cfg.params, db, listen, seed=cfg.seed, behaviour=args.behaviour,
                     target_block=args.target_block, sessions=args.sessions,
                     ready=lambda addr: print(f"listening on {addr[0]}:{addr[1]}", flush=True))
    code = EXIT_OK
    for o in outcomes:
        print(json.dumps({"phase": o.phase.value,
                          "aborted": o.abort_reason.name if o.abort_reason else None}))
        if o.aborted:
            code = EXIT_ABORT
    return code


def cmd_connect(args) -> int:
    from .protocol.transport import connect

    cfg = load_run_config(args.config, args.seed)
    peer = args.peer or cfg.raw.get("peer")
    if not peer:
        raise ConfigError("connect needs --peer host:port")
    j = cfg.query_index if args.query is None else args.query
    o = connect(cfg.params, peer, j, seed=cfg.seed, record=args.transcript)
    report = {"phase": o.phase.value, "failures": sum(r.failed for r in o.results),
              "aborted": o.abort_reason.name if o.abort_reason else None,
              "detail": o.abort_detail}
    report.update(_result_dict(o.result))
    if o.transcript is not None:
        report["messages"] = [[who, m.type.name, len(m.payload)] for who, m in o.transcript]
    out = resolve_out(args.out, cfg.raw.get("output_dir"))
    _write_json(out / "connect.json", report)
    print(json.dumps({k: v for k, v in report.items() if k != "messages"}))
    return EXIT_ABORT if o.aborted else EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="RNG seed (overrides config and environment)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = _Parser(prog="privquery", description="Quantum private-query protocol simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    behaviours = ["honest", "random_syndromes", "steer_min", "steer_max"]

    run = sub.add_parser("run", parents=[common], help="run one session in-process")
    run.add_argument("--query", type=int, help="database index to retrieve")
    run.add_argument("--behaviour", default="honest", choices=behaviours)
    run.add_argument("--target-block", type=int, default=0)
    run.set_defaults(func=cmd_run, needs_config=True)

    des = sub.add_parser("design-code", parents=[common], help="search parity-check codes")
    des.add_argument("--k", type=int)
    des.add_argument("--r", type=int)
    des.add_argument("--rates", type=float, nargs=3, metavar=("P_C", "E_C", "E_I"))
    des.add_argument("--N", type=int)
    des.add_argument("--range", type=float, nargs=2, metavar=("LO", "HI"))
    des.add_argument("--all", action="store_true",
                     help="evaluate every RREF matrix instead of one per column-permutation class")
    des.add_argument("--workers", type=int, default=1)
    des.set_defaults(func=cmd_design, needs_config=False)

    att = sub.add_parser("attack", parents=[common], help="evaluate attack scenarios")
    att.add_argument("--scenario", default="all",
                     choices=["steer-max", "steer-min", "usd", "asymmetric", "all"])
    att.add_argument("--preset", default="35.6", choices=["35.6", "25"])
    att.add_argument("--trials", type=int, default=0, help="Monte Carlo trials per steering mode")
    att.add_argument("--N", type=int, default=10**6)
    att.set_defaults(func=cmd_attack, needs_config=False)

    ana = sub.add_parser("analyze", parents=[common], help="Monte Carlo over many queries")
    ana.add_argument("--preset", choices=["low-noise", "mu0.95", "mu9.5"])
    ana.add_argument("--queries", type=int)
    ana.add_argument("--method", choices=["exact", "blocks", "pulses"])
    ana.add_argument("--workers", type=int, default=1)
    ana.set_defaults(func=cmd_analyze, needs_config=False)

    srv = sub.add_parser("serve", parents=[common], help="run Dave over TCP")
    srv.add_argument("--listen", help="host:port to listen on")
    srv.add_argument("--sessions", type=int, default=1)
    srv.add_argument("--behaviour", default="honest", choices=behaviours)
    srv.add_argument("--target-block", type=int, default=0)
    srv.set_defaults(func=cmd_serve, needs_config=True)

    con = sub.add_parser("connect", parents=[common], help="run Ursula over TCP")
    con.add_argument("--peer", help="host:port of the server")
    con.add_argument("--query", type=int)
    con.add_argument("--transcript", action="store_true", help="record the message log")
    con.set_defaults(func=cmd_connect, needs_config=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.needs_config and not args.config:
        print(f"privquery {args.command}: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"privquery {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (KeyError, TypeError, ValueError) as exc:
        print(f"privquery {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
