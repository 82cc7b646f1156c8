"""Command-line front end.

    benders-sddp solve --instance case.json --mode benders-sddp --epsilon 0.01 --relative
    benders-sddp gen power --seed 42 --out case.json
    benders-sddp oracle-check --count 25
    benders-sddp extensive --instance tiny.json

Any long flag may also come from a JSON file passed with ``--config``
(keys use underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .exceptions import CapExceededError, InstanceError, ToleranceGuardError

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INVALID = 2
EXIT_CAP = 3

MODES = ("benders-sddp", "sddp-only", "extensive", "benchmark")


def _common(p):
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", help="output path")


def build_parser():
    parser = argparse.ArgumentParser(prog="benders-sddp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve an instance")
    _common(p)
    p.add_argument("--instance", required=False)
    p.add_argument("--mode", choices=MODES, default="benders-sddp")
    p.add_argument("--epsilon", type=float, default=None, help="master gap target")
    p.add_argument("--relative", action="store_true",
                   help="read --epsilon as a fraction of the deterministic benchmark objective")
    p.add_argument("--delta", type=float, default=None, help="subproblem gap target")
    p.add_argument("--iter-cap", type=int, default=None, help="iteration cap (Benders or SDDP)")
    p.add_argument("--sddp-mode", choices=("enhanced", "basic"), default="enhanced")
    p.add_argument("--x", help="master point for sddp-only: JSON list or a solution file")
    p.add_argument("--trace", help="CSV trace path")
    p.add_argument("--pool-size", type=int, default=500)
    p.add_argument("--clusters", type=int, default=10)

    p = sub.add_parser("gen", help="generate an instance")
    _common(p)
    p.add_argument("kind", choices=("power", "random"))
    p.add_argument("--hours", type=int, default=None, help="blocks per stage (power)")
    p.add_argument("--stages", type=int, default=None)
    p.add_argument("--states", type=int, default=None)
    p.add_argument("--scenarios", type=int, default=None)
    p.add_argument("--nodes", type=int, default=2, help="subproblem nodes (random)")

    p = sub.add_parser("oracle-check", help="randomised SDDP-versus-extensive-form check")
    _common(p)
    p.add_argument("--count", type=int, default=25)
    p.add_argument("--iter-cap", type=int, default=10_000)

    p = sub.add_parser("extensive", help="solve the deterministic equivalent")
    _common(p)
    p.add_argument("--instance", required=False)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise InstanceError(f"unknown keys in config file: {', '.join(unknown)}")
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _emit_error(kind, message):
    print(json.dumps({"error": kind, "message": str(message)}), file=sys.stderr)


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, default=_jsonable)
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not serialisable: {type(v).__name__}")


def _header(args, instance_hash, **tolerances):
    lines = [f"benders-sddp {__version__}", f"seed={args.seed}", f"instance_sha256={instance_hash}"]
    lines += [f"{k}={v!r}" for k, v in tolerances.items()]
    return lines


def _need_instance(args):
    from .model import instance_hash, load_instance

    if not args.instance:
        raise InstanceError("--instance is required")
    inst = load_instance(args.instance)
    return inst, instance_hash(inst)


def _master_point(args, instance):
    if not args.x:
        return instance.lower.copy()
    text = args.x
    if os.path.exists(text):
        with open(text, encoding="utf-8") as fh:
            data = json.load(fh)
        text = data["x"] if isinstance(data, dict) else data
    vals = np.asarray(json.loads(text) if isinstance(text, str) else text, float)
    if vals.shape != (instance.n_master,):
        raise InstanceError(f"--x needs {instance.n_master} values, got shape {vals.shape}")
    return vals


def _solve(args):
    from .benders import SddpEvaluator, run_benders
    from .casegen import deterministic_benchmark
    from .extform import extform_full
    from .sddp import run_sddp

    inst, digest = _need_instance(args)
    start = time.perf_counter()
    if args.mode == "extensive":
        opt, x = extform_full(inst)
        _write_json({"mode": args.mode, "objective": opt, "x": x, "instance_sha256": digest}, args.out)
        print(f"optimal objective {opt:.10g}", file=sys.stderr)
        return EXIT_OK

    cap = args.iter_cap
    mass = inst.probability_mass()
    bench = None
    if args.mode == "benchmark" or (args.mode == "benders-sddp" and args.relative):
        # a relative target needs a scale; the deterministic benchmark gives it
        eps_bench = args.epsilon if args.mode == "benchmark" and args.epsilon and not args.relative \
            else _bench_epsilon(inst)
        bench = deterministic_benchmark(inst, eps_bench, args.pool_size, args.clusters, args.seed,
                                        max_iter=cap or 500, workers=args.workers)
        bench_obj = bench.upper_bound
        if args.mode == "benchmark":
            out = {"mode": args.mode, "objective": bench_obj, **bench.to_dict(), "instance_sha256": digest,
                   "wall_s": time.perf_counter() - start}
            _write_json(out, args.out)
            return EXIT_OK

    if args.mode == "sddp-only":
        x = _master_point(args, inst)
        delta = args.delta if args.delta is not None else 1e-4
        nodes = []
        for i, node in enumerate(inst.nodes):
            trace = f"{args.trace}.node{i}.csv" if args.trace else None
            res = run_sddp(inst.template(i), inst.node_x(i, x), delta, args.sddp_mode,
                           cap or 10_000, workers=args.workers, trace_path=trace,
                           trace_comments=_header(args, digest, delta=delta, node=i))
            nodes.append({"node": i, "lower": res.lower_bound, "upper": res.upper_bound,
                          "iterations": res.n_iter,
                          "subgradient": res.subgradient})
        _write_json({"mode": args.mode, "x": x, "nodes": nodes, "instance_sha256": digest,
                     "wall_s": time.perf_counter() - start}, args.out)
        return EXIT_OK

    # benders-sddp
    if args.epsilon is None:
        raise InstanceError("--epsilon is required for benders-sddp")
    epsilon = args.epsilon
    if args.relative:
        epsilon = args.epsilon * abs(bench_obj)
    delta = args.delta if args.delta is not None else epsilon / (4.0 * mass)
    if not inst.epsilon_admissible(epsilon, delta):
        raise ToleranceGuardError(
            f"epsilon = {epsilon:.6g} must exceed 2 * delta * sum(pi) = {2 * delta * mass:.6g}"
        )
    evaluator = SddpEvaluator(workers=args.workers)
    res = run_benders(inst, epsilon, delta, evaluator, max_iter=cap or 500, workers=args.workers,
                      trace_path=args.trace,
                      trace_comments=_header(args, digest, epsilon=epsilon, delta=delta))
    out = {"mode": args.mode, "epsilon": epsilon, "delta": delta, **res.to_dict(),
           "names": inst.names, "instance_sha256": digest, "wall_s": time.perf_counter() - start}
    if bench is not None:
        out["benchmark_objective"] = bench_obj
    _write_json(out, args.out)
    return EXIT_OK


def _bench_epsilon(inst):
    # the benchmark is cheap, so solve it tightly enough to serve as a scale
    return 1e-4 * (1.0 + abs(float(inst.cost @ inst.upper)))


def _gen(args):
    from .casegen import PowerConfig, generate_instance, random_instance, summarize_instance
    from .model import dumps_instance

    if args.kind == "power":
        cfg = PowerConfig(seed=args.seed)
        for flag, attr in (("hours", "hours_per_stage"), ("stages", "n_stages"),
                           ("states", "n_states"), ("scenarios", "n_scenarios")):
            v = getattr(args, flag)
            if v is not None:
                setattr(cfg, attr, v)
        inst = generate_instance(cfg)
    else:
        rng = np.random.default_rng(args.seed)
        inst = random_instance(
            args.seed,
            n_nodes=args.nodes,
            n_stages=args.stages or int(rng.integers(2, 4)),
            n_states=args.states or int(rng.integers(1, 3)),
            n_scenarios=args.scenarios or int(rng.integers(1, 3)),
        )
    text = dumps_instance(inst)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text)
    print(summarize_instance(inst), file=sys.stderr)
    return EXIT_OK


def oracle_check(count, seed=0, iteration_cap=10_000, log=None):
    """SDDP against the extensive form on ``count`` random templates.

    Returns ``(passed, failed)``.
    """
    from .casegen import random_template
    from .extform import extform_value
    from .sddp import run_sddp

    passed = failed = 0
    for s in range(count):
        rng = np.random.default_rng(seed + s)
        t = random_template(rng, int(rng.integers(2, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3)))
        x = rng.uniform(0.0, 2.0, t.n_x)
        g = extform_value(t, x)
        tol = 1e-7 * (1.0 + abs(g))
        try:
            res = run_sddp(t, x, 1e-4 * (1.0 + abs(g)), iteration_cap=iteration_cap)
            ok = all(r["theta_lb"] - tol <= g <= r["theta_ub"] + tol for r in res.trace)
        except CapExceededError:
            ok = False
        passed += ok
        failed += not ok
        if log:
            log(f"seed {seed + s}: {'pass' if ok else 'FAIL'} (g = {g:.8g})")
    return passed, failed


def _oracle_check(args):
    passed, failed = oracle_check(args.count, args.seed, args.iter_cap, log=lambda m: print(m, file=sys.stderr))
    print(f"passed {passed} failed {failed}")
    return EXIT_OK if failed == 0 else EXIT_FAILED


def _extensive(args):
    from .extform import extform_full

    inst, digest = _need_instance(args)
    opt, x = extform_full(inst)
    _write_json({"objective": opt, "x": x, "instance_sha256": digest}, args.out)
    print(f"optimal objective {opt:.10g}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"solve": _solve, "gen": _gen, "oracle-check": _oracle_check, "extensive": _extensive}


def main(argv=None):
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except CapExceededError as exc:
        _emit_error("cap_exceeded", exc)
        partial = getattr(exc, "result", None)
        out = getattr(locals().get("args"), "out", None)
        if partial is not None and out and hasattr(partial, "to_dict"):
            _write_json({"converged": False, **partial.to_dict()}, out)
        return EXIT_CAP
    except (ToleranceGuardError, InstanceError) as exc:
        _emit_error(type(exc).__name__, exc)
        return EXIT_INVALID
    except (OSError, json.JSONDecodeError) as exc:
        _emit_error(type(exc).__name__, exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every failure becomes an exit code
        _emit_error(type(exc).__name__, exc)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
