"""``tiletrain`` command line.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys are the
long flag names with underscores); flags given on the command line win.
Machine-readable records go to stdout as JSON lines, tables to stderr. Set
``TILETRAIN_LOG`` (e.g. ``DEBUG``) to change log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import TileTrainError
from .geometry import BACKWARD, FORWARD, GridSpec, GroupingProfile
from .grouping import (CostParams, build_group_graph, group_cost, layer_macs, measure_cost_params,
                       optimal_grouping)
from .modelio import (Lcg, format_model_config, load_model_config, load_weights, save_weights,
                      synth_batch, synth_model)
from .runtime import METRIC_FIELDS, SimulatedCluster, build_plan, run_tcp_node, weights_checksum
from .tensor import Model, reference_train_batch

log = logging.getLogger("tiletrain")

_DIRECTIONS = {"fwd": FORWARD, "forward": FORWARD, "bwd": BACKWARD, "backward": BACKWARD}


def parse_profile(text: str, direction: str, num_layers: int, seed: int = 0) -> GroupingProfile:
    """``per-layer``, ``single``, ``random`` (seeded) or explicit boundaries like ``0,2,6``."""
    text = text.strip()
    if text == "per-layer":
        return GroupingProfile.per_layer(direction, num_layers)
    if text == "single":
        return GroupingProfile.single(direction, num_layers)
    if text == "random":
        rng = Lcg(seed)
        inner = [b for b in range(1, num_layers) if rng.next() > 0]
        return GroupingProfile.from_boundaries(direction, [0] + inner + [num_layers])
    try:
        bounds = [int(v) for v in text.split(",")]
    except ValueError:
        raise TileTrainError(f"bad profile {text!r}: use per-layer, single, random or e.g. 0,2,6") from None
    profile = GroupingProfile.from_boundaries(direction, bounds)
    profile.validate(num_layers)
    return profile


def _model_shape(args):
    """Zero-weight model: enough for planning and cost estimates."""
    dims, layers = load_model_config(args.model)
    return Model(dims, layers)


def _load_model(args):
    dims, layers = load_model_config(args.model)
    model = synth_model(args.seed, config=format_model_config(dims, layers))
    if getattr(args, "init_weights", None):
        load_weights(args.init_weights, model)
    return model


def _profiles(args, n):
    fwd = parse_profile(args.fwd_profile, FORWARD, n, args.seed)
    bwd = parse_profile(args.bwd_profile or args.fwd_profile, BACKWARD, n, args.seed)
    return fwd, bwd


def _emit(record):
    sys.stdout.write(json.dumps(record, sort_keys=False) + "\n")
    sys.stdout.flush()


def _table(rows, cols):
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in cols] if rows else [len(c) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)), file=sys.stderr)
    for r in rows:
        print("  ".join(str(r[c]).ljust(w) for c, w in zip(cols, widths)), file=sys.stderr)


# -- subcommands ------------------------------------------------------------------------

def cmd_plan(args):
    model = _model_shape(args)
    grid = GridSpec.parse(args.grid)
    fwd, bwd = _profiles(args, len(model.layers))
    plan = build_plan(model, grid, fwd, bwd)
    rows = plan.describe()
    for r in rows:
        _emit({"record": "rect", **r})
    params = CostParams(args.cp, args.cc, args.cf)
    groups = []
    for tp in (plan.fwd, plan.bwd):
        for g in tp.profile.groups:
            bd = group_cost(g, tp, params)
            rec = {"record": "group", "direction": tp.direction, **bd.as_record(),
                   "o_l": {str(l): max(layer_macs(tp, t, l) for t in range(tp.tiles)) for l in range(g.s, g.e)}}
            groups.append(rec)
            _emit(rec)
    for direction, sched in ((FORWARD, plan.fwd_exchanges), (BACKWARD, plan.bwd_exchanges)):
        for m, per_tile in sorted(sched.items()):
            for t, (recv, send) in sorted(per_tile.items()):
                _emit({"record": "halo", "direction": direction, "map": m, "tile": t,
                       "recv": [[b.peer, list(b.rect)] for b in recv],
                       "send": [[b.peer, list(b.rect)] for b in send]})
    _table([{k: (v if not isinstance(v, list) else tuple(v)) for k, v in r.items()} for r in rows],
           ["direction", "tile", "map", "owned", "required", "computed", "sync"])
    _table(groups, ["direction", "group", "tile", "macs", "boundary_elements", "total"])
    return 0


def cmd_optimize(args):
    shape = _model_shape(args)
    layers, dims = shape.layers, shape.map_dims()
    grid = GridSpec.parse(args.grid)
    if args.measure:
        params = measure_cost_params()
        _emit({"record": "params", "c_p": params.c_p, "c_c": params.c_c, "c_f": params.c_f})
    else:
        params = CostParams(args.cp, args.cc, args.cf)
    directions = [FORWARD, BACKWARD] if args.direction == "both" else [_DIRECTIONS[args.direction]]
    for direction in directions:
        edges = build_group_graph(layers, grid, dims, params, direction)
        profile = optimal_grouping(layers, grid, dims, params, direction, edges=edges)
        parts = [edges[(g.s, g.e)] for g in profile.groups]
        total = 0.0
        for p in parts:
            total += p.total
        _emit({"record": "profile", "direction": direction, "boundaries": list(profile.boundaries),
               "total": total})
        for p in parts:
            _emit({"record": "group", "direction": direction, **p.as_record()})
        print(f"{direction}: {profile}  (cost {total:.6g})", file=sys.stderr)
        _table([p.as_record() for p in parts], ["group", "tile", "macs", "compute", "boundary_elements",
                                                 "comm", "sync", "total"])
    return 0


def _metric_rows(metrics, step):
    for rec in metrics.records():
        rec = dict(rec)
        rec["step"] = step
        yield rec


def cmd_simulate(args):
    model = _load_model(args)
    grid = GridSpec.parse(args.grid)
    fwd, bwd = _profiles(args, len(model.layers))
    cluster = SimulatedCluster(model, grid, fwd, bwd, args.lr)
    table = []
    for step in range(args.steps):
        xs, ts = synth_batch(args.seed, model, args.batch, step)
        metrics = cluster.train_batch(xs, ts)
        for rec in _metric_rows(metrics, step):
            _emit(rec)
            table.append(rec)
        log.info("step %d loss %.6g", step, sum(metrics.losses))
    _emit({"record": "weights", "checksum": weights_checksum(cluster.model)})
    if args.weights_out:
        save_weights(args.weights_out, cluster.model)
    _table(table, ["step"] + list(METRIC_FIELDS))
    return 0


def _tcp(args, local_tile):
    from .transport import TcpTransport, parse_roster

    model = _load_model(args)
    grid = GridSpec.parse(args.grid)
    roster = parse_roster(Path(args.roster).read_text())
    if len(roster) != grid.tiles:
        raise TileTrainError(f"roster lists {len(roster)} tiles, grid {grid} has {grid.tiles}")
    fwd, bwd = _profiles(args, len(model.layers))
    transport = TcpTransport(roster, local_tile, timeout=args.timeout, connect_timeout=args.timeout)
    try:
        batches = (synth_batch(args.seed, model, args.batch, s) for s in range(args.steps))
        final, metrics = run_tcp_node(transport, model, grid, fwd, bwd, args.lr, args.steps, args.batch,
                                      batches if 0 in transport.local_tiles else None, args.timeout)
    finally:
        transport.close()
    for step, m in enumerate(metrics):
        for rec in _metric_rows(m, step):
            rec["tiles"] = transport.local_tiles
            _emit(rec)
    _emit({"record": "weights", "tiles": transport.local_tiles, "checksum": weights_checksum(final)})
    if args.weights_out:
        save_weights(args.weights_out, final)
    return 0


def cmd_coordinator(args):
    return _tcp(args, 0)


def cmd_worker(args):
    if args.tile == 0:
        raise TileTrainError("tile 0 is the coordinator; start it with the coordinator command")
    return _tcp(args, args.tile)


def _max_violation(got, ref, tol, floor):
    worst = 0.0
    for a, r in zip(got, ref):
        d = np.abs(a.astype(np.float64) - r.astype(np.float64))
        worst = max(worst, float(np.max(d / np.maximum(tol * np.abs(r.astype(np.float64)), floor))))
    return worst


def cmd_verify(args):
    model = _load_model(args)
    n = len(model.layers)
    xs, ts = synth_batch(args.seed, model, args.batch)
    ref = model.copy()
    reference_train_batch(ref, xs, ts, args.lr)
    ref_w = [fb.weights for fb in ref.filters if fb is not None]
    failures = 0
    rows = []
    for g in args.grids:
        grid = GridSpec.parse(g)
        for p in args.profiles:
            fwd = parse_profile(p, FORWARD, n, args.seed)
            bwd = parse_profile(p, BACKWARD, n, args.seed)
            cluster = SimulatedCluster(model, grid, fwd, bwd, args.lr)
            cluster.train_batch(xs, ts)
            worst = max(_max_violation(cluster.tile_weights(t), ref_w, args.tol, args.abs_floor)
                        for t in range(grid.tiles))
            ok = worst <= 1.0
            failures += not ok
            rec = {"record": "verify", "grid": str(grid), "profile": list(fwd.boundaries),
                   "batch": args.batch, "max_error_ratio": worst, "pass": ok}
            rows.append(rec)
            _emit(rec)
    _emit({"record": "summary", "cases": len(rows), "failures": failures, "pass": failures == 0})
    _table(rows, ["grid", "profile", "batch", "max_error_ratio", "pass"])
    return 0 if failures == 0 else 1


# -- argument handling ------------------------------------------------------------------------

DEFAULTS = {
    "model": "desk6", "grid": "2x2", "fwd_profile": "per-layer", "bwd_profile": None, "seed": 0,
    "batch": 1, "steps": 1, "lr": 0.01, "cp": 1.0, "cc": 1.0, "cf": 1.0, "direction": "both",
    "weights_out": None, "init_weights": None, "timeout": 30.0, "roster": None, "tile": None,
    "grids": ["1x1", "2x2"], "profiles": ["per-layer", "single", "random"], "tol": 1e-5,
    "abs_floor": 1e-7, "measure": False,
}


def _common(p, *names):
    for name in names:
        flag = "--" + name.replace("_", "-")
        kind = {"seed": int, "batch": int, "steps": int, "tile": int, "lr": float, "cp": float, "cc": float,
                "cf": float, "timeout": float, "tol": float, "abs_floor": float}.get(name, str)
        if name in ("grids", "profiles"):
            p.add_argument(flag, nargs="+", default=None)
        elif name == "measure":
            p.add_argument(flag, action="store_true", default=None)
        elif name == "direction":
            p.add_argument(flag, choices=["fwd", "bwd", "forward", "backward", "both"], default=None)
        else:
            p.add_argument(flag, type=kind, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="tiletrain", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)
    model_flags = ("model", "seed", "init_weights")
    shape_flags = ("model", "seed")
    run_flags = ("grid", "fwd_profile", "bwd_profile", "batch", "steps", "lr", "weights_out")
    specs = {
        "plan": (cmd_plan, shape_flags + ("grid", "fwd_profile", "bwd_profile", "cp", "cc", "cf")),
        "optimize-grouping": (cmd_optimize, ("model", "grid", "cp", "cc", "cf", "direction", "measure")),
        "simulate": (cmd_simulate, model_flags + run_flags),
        "coordinator": (cmd_coordinator, model_flags + run_flags + ("roster", "timeout")),
        "worker": (cmd_worker, model_flags + run_flags + ("roster", "timeout", "tile")),
        "verify": (cmd_verify, model_flags + ("grids", "profiles", "batch", "lr", "tol", "abs_floor")),
    }
    for name, (fn, flags) in specs.items():
        p = sub.add_parser(name)
        p.add_argument("--config", dest="sub_config", help="JSON file of flag defaults")
        _common(p, *flags)
        p.set_defaults(func=fn, flags=flags)
    sim = sub.choices["simulate"]
    sim.add_argument("--profiles", nargs="+", dest="profiles_pair", metavar="P",
                     help="forward and optional backward profile (shorthand)")
    return parser


def resolve(args):
    """Fill unset flags from the config file, then from built-in defaults."""
    path = getattr(args, "sub_config", None) or args.config
    config = {}
    if path:
        config = json.loads(Path(path).read_text())
        if not isinstance(config, dict):
            raise TileTrainError("config file must hold a JSON object")
        unknown = set(config) - set(args.flags)
        if unknown:
            raise TileTrainError(f"config keys not valid for {args.command}: {sorted(unknown)}")
    for name in args.flags:
        if getattr(args, name) is None:
            setattr(args, name, config.get(name, DEFAULTS[name]))
    pair = getattr(args, "profiles_pair", None)
    if pair:
        if len(pair) > 2:
            raise TileTrainError("--profiles takes a forward and an optional backward profile")
        args.fwd_profile = pair[0]
        args.bwd_profile = pair[1] if len(pair) == 2 else None
    for required in ("roster", "tile"):
        if required in args.flags and getattr(args, required) is None:
            raise TileTrainError(f"--{required} is required for {args.command}")
    return args


def main(argv=None):
    logging.basicConfig(level=os.environ.get("TILETRAIN_LOG", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(resolve(args))
    except (TileTrainError, KeyError, OSError, ValueError) as exc:
        print(f"tiletrain {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
