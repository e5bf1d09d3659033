"""``crisloc`` command line: one subcommand per pipeline stage.

Stages exchange files: scenarios and maps are JSON documents, capture sets are
compressed numpy archives, tables are tab-separated with a header row.
Exit status: 0 ok, 1 invalid input or configuration, 2 usage error or
missing file.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .detect import (DEFAULT_BUDGET, DEFAULT_L0, DEFAULT_MAX_SEQ, DEFAULT_MIN_SEQ,
                     DEFAULT_R0, JointDetector, calibrate_baseline, kde_detect, kde_fit,
                     random_query_position)
from .evaluation import DetectionCounts, error_stats, fmt_metric, micro_metrics
from .locate import as_database, build_portion_table, eeknn, wknn
from .model import (CrislocError, Position, RadioMap, fingerprint_from_samples,
                    load_radio_map, read_json, save_radio_map, write_json)
from .preprocess import (CV_IQR_FACTOR, build_radio_map, process_capture,
                         subcarrier_filter)
from .reconstruct import (DEFAULT_ALPHA, DEFAULT_LAMBDA, DEFAULT_MU, TransferParams,
                          load_map_any, reconstruct_map, save_reconstructed)
from .synth import (Capture, generate_capture, load_captures, load_scenario, make_scenario,
                    move_ap, random_relocation, rng_for, save_captures, save_scenario)

log = logging.getLogger("crisloc")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


class UsageError(Exception):
    """Bad flags or configuration; exit status 2."""


# -- helpers ---------------------------------------------------------------------

def _setup_logging() -> None:
    name = os.environ.get("CRISLOC_LOG", "warn").lower()
    if name not in LOG_LEVELS:
        raise UsageError(f"CRISLOC_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    logging.captureWarnings(True)


def _need(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _table(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _emit(text: str, out: str | None) -> None:
    if out:
        path = Path(out)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text)
        tmp.replace(path)
    else:
        sys.stdout.write(text)


def _capture_job(job):
    sc, rx, n_frames, stream, seed = job
    return generate_capture(sc, rx, n_frames, stream=stream, seed=seed)


def _captures(sc, positions, n_frames, streams, seed, jobs: int) -> list[Capture]:
    work = [(sc, p, n_frames, s, seed) for p, s in zip(positions, streams)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_capture_job, work, chunksize=max(1, len(work) // (4 * jobs))))
    return [_capture_job(w) for w in work]


def _pool_by_position(caps: Sequence[Capture], mask, filter_frames=True):
    """Processed samples per distinct position, bursts at one point pooled."""
    order, pooled = [], {}
    for c in caps:
        key = (c.rx.x, c.rx.y)
        if key not in pooled:
            order.append(c.rx)
            pooled[key] = {}
        for ap, x in process_capture(c, mask, filter_frames).items():
            pooled[key].setdefault(ap, []).append(x)
    samples = [{ap: np.vstack(v) for ap, v in pooled[(p.x, p.y)].items()} for p in order]
    return order, samples


def _parse_aps(text: str | None) -> list[str]:
    return [a for a in (text or "").split(",") if a]


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.base:
        sc = load_scenario(_need(args.base))
    else:
        sc = make_scenario(seed=args.seed if args.seed is not None else 0, nx=args.nx,
                           ny=args.ny, spacing=args.spacing, n_aps=args.aps, n_rp=args.rps)
    rng = rng_for("cli-alter", sc.seed if args.seed is None else args.seed)
    targets = _parse_aps(args.move)
    if args.alter:
        if targets:
            raise UsageError("use either --alter or --move, not both")
        targets = sorted(str(a) for a in rng.choice(sc.ap_ids, args.alter, replace=False))
    for ap in targets:
        sc = move_ap(sc, ap, random_relocation(sc, ap, args.distance, rng))
    save_scenario(sc, args.out)
    log.info("wrote scenario %s (altered: %s)", args.out, ",".join(sorted(sc.altered)) or "-")
    print(_table(["key", "value"], [("aps", len(sc.aps)), ("grid_points", len(sc.grid)),
                                    ("rps", len(sc.rp_positions)),
                                    ("altered", ",".join(sorted(sc.altered)) or "-")]), end="")
    return 0


def cmd_survey(args) -> int:
    sc = load_scenario(_need(args.scenario))
    if args.at == "grid":
        positions = list(sc.grid)
    elif args.at == "rp":
        positions = list(sc.rp_positions)
    else:
        rng = rng_for("cli-queries", sc.seed if args.seed is None else args.seed, args.stream)
        positions = [random_query_position(sc, rng) for _ in range(args.count)]
    pos_all, streams = [], []
    for b in range(args.bursts):
        for i, p in enumerate(positions):
            pos_all.append(p)
            streams.append((args.stream, i, b))
    caps = _captures(sc, pos_all, args.frames, streams, args.seed, args.jobs)
    save_captures(caps, args.out, {"at": args.at, "stream": args.stream,
                                   "bursts": args.bursts})
    log.info("wrote %d captures to %s", len(caps), args.out)
    return 0


def cmd_preprocess(args) -> int:
    caps, _ = load_captures(_need(args.captures))
    if args.mask_from:
        mask = load_radio_map(_need(args.mask_from)).mask
    else:
        mask = subcarrier_filter(caps, args.kappa)
    positions, samples = _pool_by_position(caps, mask, not args.no_frame_filter)
    spacing = args.spacing
    if spacing is None:
        if args.mask_from:
            spacing = load_radio_map(args.mask_from).grid_spacing
        else:
            xy = np.array([[p.x, p.y] for p in positions])
            d = np.hypot(*(xy[:, None, :] - xy[None, :, :]).transpose(2, 0, 1))
            d[d == 0] = np.inf
            spacing = float(d.min()) if len(xy) > 1 else 1.0
    rmap = RadioMap(mask, tuple(positions), tuple(samples), float(spacing), caps[0].ap_ids,
                    {"removed_subcarriers": mask.removed})
    save_radio_map(rmap, args.out)
    print(_table(["key", "value"], [("points", len(rmap)), ("active_subcarriers", mask.active),
                                    ("removed", ",".join(map(str, mask.removed)))]), end="")
    return 0


def _localize_rows(db, caps, mask, ap_ids, matcher, k, k_prime):
    mdb = as_database(db)
    table = build_portion_table(mdb) if matcher == "eeknn" else None
    rows = []
    for i, c in enumerate(caps):
        fp = fingerprint_from_samples(process_capture(c, mask), ap_ids, mask.active)
        est = eeknn(fp, mdb, k_prime, table) if matcher == "eeknn" else wknn(fp, mdb, k)
        rows.append((i, c.rx.x, c.rx.y, est.x, est.y, est.distance(c.rx)))
    return rows


LOCALIZE_HEADER = ["query", "true_x", "true_y", "est_x", "est_y", "error_m"]


def cmd_localize(args) -> int:
    db = load_map_any(_need(args.map))
    caps, _ = load_captures(_need(args.captures))
    base = getattr(db, "base", db)
    rows = _localize_rows(db, caps, base.mask, base.ap_ids, args.matcher, args.k, args.k_prime)
    _emit(_table(LOCALIZE_HEADER, rows), args.out)
    return 0


def _report_doc(rep, mode: str) -> dict:
    return {"format_version": 1, "kind": "detection_report", "mode": mode, **rep}


def cmd_detect(args) -> int:
    if args.mode == "rp":
        if not (args.history and args.fresh):
            raise UsageError("--mode rp needs --history and --fresh")
        model = kde_fit(load_radio_map(_need(args.history)))
        fresh = load_radio_map(_need(args.fresh))
        verdicts = kde_detect(model, fresh.samples, args.p_value)
        rep = {"altered": sorted(a for a, v in verdicts.items() if v.altered),
               "params": {"p_value": args.p_value},
               "aps": {a: {"altered": v.altered, "p": v.p} for a, v in verdicts.items()}}
    else:
        if not (args.map and args.scenario):
            raise UsageError("--mode joint needs --map and --scenario")
        rmap = load_radio_map(_need(args.map))
        sc = load_scenario(_need(args.scenario))
        seed = sc.seed if args.seed is None else args.seed
        if args.baseline:
            try:
                a, s = (float(v) for v in args.baseline.split(","))
            except ValueError:
                raise UsageError("--baseline takes 'a,sigma'") from None
            base = (a, s)
        elif args.calibrate_from:
            base = calibrate_baseline(load_scenario(_need(args.calibrate_from)), rmap,
                                      seed=seed, budget=args.budget, r0=args.r0)
        else:
            raise UsageError("--mode joint needs --baseline or --calibrate-from")
        det = JointDetector(rmap, base, args.r0, args.budget, seed)
        rep = det.detect(sc, key=("cli", seed), min_seq=args.min_seq, max_seq=args.max_seq,
                         l0=args.l0).to_dict()
    text = json.dumps(_report_doc(rep, args.mode), indent=2, sort_keys=True) + "\n"
    _emit(text, args.out)
    return 0


def cmd_reconstruct(args) -> int:
    old = load_radio_map(_need(args.map))
    fresh = load_radio_map(_need(args.fresh))
    altered = _parse_aps(args.altered)
    if args.report:
        if altered:
            raise UsageError("use either --altered or --report, not both")
        altered = read_json(_need(args.report)).get("altered", [])
    params = TransferParams(args.mu, args.lam, args.alpha, args.subdim)
    rec = reconstruct_map(old, fresh, altered, params)
    save_reconstructed(rec, args.out)
    rows = []
    for ap in sorted(rec.projectors):
        tm = rec.transforms.get(ap)
        rows.append((ap, rec.projectors[ap].shape[1],
                     float(tm.eigenvalues[0]) if tm is not None else "-"))
    print(_table(["ap", "subspace_dim", "top_eigenvalue"], rows), end="")
    return 0


def _read_estimates(path) -> list[tuple[Position, Position]]:
    with open(_need(path), newline="") as f:
        rows = list(csv.DictReader(f, delimiter="\t"))
    missing = set(LOCALIZE_HEADER) - set(rows[0] if rows else {})
    if missing:
        raise CrislocError(f"{path}: not a localize table (missing {sorted(missing)})")
    return [(Position(float(r["est_x"]), float(r["est_y"])),
             Position(float(r["true_x"]), float(r["true_y"]))) for r in rows]


def cmd_eval(args) -> int:
    out = []
    if args.estimates:
        st = error_stats(_read_estimates(args.estimates))
        out += [(f"error_{k}", float(v)) for k, v in st.summary().items()]
        if args.cdf:
            _emit(st.cdf_table(), args.cdf)
    if args.report:
        if not args.scenario:
            raise UsageError("--report needs --scenario for the ground truth")
        sc = load_scenario(_need(args.scenario))
        rep = read_json(_need(args.report))
        counts = DetectionCounts.from_trials([(sc.altered, rep.get("altered", []))],
                                             sc.ap_ids)
        m = micro_metrics(counts)
        out += [("precision", fmt_metric(m.precision)), ("recall", fmt_metric(m.recall)),
                ("f1", fmt_metric(m.f1))]
    if not out:
        raise UsageError("eval needs --estimates and/or --report")
    _emit(_table(["metric", "value"], out), args.out)
    return 0


def cmd_pipeline(args) -> int:
    """Every stage end to end in one output directory."""
    seed = 0 if args.seed is None else args.seed
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    created: list[Path] = []

    def path(name):
        p = d / name
        created.append(p)
        return p

    try:
        sc = make_scenario(seed=seed)
        save_scenario(sc, path("scenario.json"))
        grid_caps = _captures(sc, sc.grid, args.frames, [("survey", i) for i in
                                                          range(len(sc.grid))], None, args.jobs)
        rmap = build_radio_map(grid_caps, sc.grid_spacing)
        save_radio_map(rmap, path("radio_map.json"))
        hist_caps = _captures(sc, [p for _ in range(10) for p in sc.rp_positions], 100,
                              [("rp-history", i, b) for b in range(10)
                               for i in range(len(sc.rp_positions))], None, args.jobs)
        pos, samp = _pool_by_position(hist_caps, rmap.mask)
        history = RadioMap(rmap.mask, tuple(pos), tuple(samp), sc.grid_spacing, sc.ap_ids)

        rng = rng_for("pipeline-alter", seed)
        sc2 = sc
        for ap in sorted(str(a) for a in rng.choice(sc.ap_ids, args.alter, replace=False)):
            sc2 = move_ap(sc2, ap, random_relocation(sc2, ap, args.distance, rng))
        save_scenario(sc2, path("scenario_altered.json"))
        fresh_caps = _captures(sc2, [p for _ in range(3) for p in sc.rp_positions], 100,
                               [("fresh", i, b) for b in range(3)
                                for i in range(len(sc.rp_positions))], None, args.jobs)
        pos, samp = _pool_by_position(fresh_caps, rmap.mask)
        fresh = RadioMap(rmap.mask, tuple(pos), tuple(samp), sc.grid_spacing, sc.ap_ids)

        if args.mode == "rp":
            verdicts = kde_detect(kde_fit(history), fresh.samples, args.p_value)
            alarms = sorted(a for a, v in verdicts.items() if v.altered)
        else:
            base = calibrate_baseline(sc, rmap, seed=seed)
            alarms = sorted(JointDetector(rmap, base, seed=seed).detect(sc2, key=seed).altered)
        write_json(_report_doc({"altered": alarms}, args.mode), path("report.json"))
        rec = reconstruct_map(rmap, fresh, alarms)
        save_reconstructed(rec, path("reconstructed.json"))

        q_rng = rng_for("pipeline-queries", seed)
        qpos = [random_query_position(sc, q_rng) for _ in range(args.queries)]
        qcaps = _captures(sc2, qpos, 100, [("query", i) for i in range(len(qpos))], None,
                          args.jobs)
        rows_old = _localize_rows(rmap, qcaps, rmap.mask, rmap.ap_ids, args.matcher, 3, 1.0)
        rows_new = _localize_rows(rec, qcaps, rmap.mask, rmap.ap_ids, args.matcher, 3, 1.0)
        _emit(_table(LOCALIZE_HEADER, rows_new), path("estimates.tsv"))
        st_old = error_stats((Position(r[3], r[4]), Position(r[1], r[2])) for r in rows_old)
        st_new = error_stats((Position(r[3], r[4]), Position(r[1], r[2])) for r in rows_new)
        _emit(st_new.cdf_table(), path("cdf.tsv"))
        counts = DetectionCounts.from_trials([(sc2.altered, alarms)], sc.ap_ids)
        m = micro_metrics(counts)
        metrics = _table(["metric", "value"], [
            ("seed", seed), ("altered", ",".join(sorted(sc2.altered)) or "-"),
            ("alarms", ",".join(alarms) or "-"),
            ("precision", fmt_metric(m.precision)), ("recall", fmt_metric(m.recall)),
            ("f1", fmt_metric(m.f1)),
            ("mean_error_outdated", st_old.mean), ("mean_error_reconstructed", st_new.mean),
            ("median_error_reconstructed", st_new.median)])
        _emit(metrics, path("metrics.tsv"))
    except BaseException:
        for p in created:
            p.unlink(missing_ok=True)
        raise
    sys.stdout.write(metrics)
    return 0


# -- parser ------------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand from overwriting values given before it
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="overrides every stored seed")
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS,
                   help="parallel capture workers (default 1)")
    p.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of flag defaults")
    return p


GLOBAL_DEFAULTS = {"seed": None, "jobs": 1}


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="crisloc", description=__doc__.splitlines()[0],
                                 parents=[common])
    ap.add_argument("--version", action="version", version=f"crisloc {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="create or alter a scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--nx", type=int, default=10)
    p.add_argument("--ny", type=int, default=10)
    p.add_argument("--spacing", type=float, default=0.6)
    p.add_argument("--aps", type=int, default=9)
    p.add_argument("--rps", type=int, default=8)
    p.add_argument("--base", help="start from this scenario instead of a new one")
    p.add_argument("--alter", type=int, default=0, help="move this many random APs")
    p.add_argument("--move", help="comma-separated APs to move")
    p.add_argument("--distance", type=float, default=3.0, help="relocation distance, m")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("survey", parents=[common], help="simulate raw captures")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True, help="capture set (.npz)")
    p.add_argument("--at", choices=["grid", "rp", "random"], default="grid")
    p.add_argument("--count", type=int, default=40, help="positions for --at random")
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--bursts", type=int, default=1, help="captures per position")
    p.add_argument("--stream", default="survey", help="noise stream label")
    p.set_defaults(func=cmd_survey)

    p = sub.add_parser("preprocess", parents=[common], help="captures -> radio map")
    p.add_argument("--captures", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-from", help="reuse the subcarrier mask of this map")
    p.add_argument("--kappa", type=float, default=CV_IQR_FACTOR)
    p.add_argument("--spacing", type=float, default=None)
    p.add_argument("--no-frame-filter", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("localize", parents=[common], help="estimate query positions")
    p.add_argument("--map", required=True, help="radio map or reconstructed map")
    p.add_argument("--captures", required=True)
    p.add_argument("--matcher", choices=["eeknn", "wknn"], default="eeknn")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--k-prime", type=float, default=1.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("detect", parents=[common], help="find altered APs")
    p.add_argument("--mode", choices=["rp", "joint"], default="rp")
    p.add_argument("--history", help="RP history map (rp mode)")
    p.add_argument("--fresh", help="fresh RP map (rp mode)")
    p.add_argument("--p-value", type=float, default=0.05)
    p.add_argument("--map", help="radio map (joint mode)")
    p.add_argument("--scenario", help="current environment (joint mode)")
    p.add_argument("--baseline", help="'a,sigma' dispersion baseline (joint mode)")
    p.add_argument("--calibrate-from", help="unaltered scenario for the baseline")
    p.add_argument("--r0", type=float, default=DEFAULT_R0)
    p.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p.add_argument("--min-seq", type=int, default=DEFAULT_MIN_SEQ)
    p.add_argument("--max-seq", type=int, default=DEFAULT_MAX_SEQ)
    p.add_argument("--l0", type=float, default=DEFAULT_L0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("reconstruct", parents=[common], help="rebuild altered-AP blocks")
    p.add_argument("--map", required=True, help="outdated radio map")
    p.add_argument("--fresh", required=True, help="fresh RP map")
    p.add_argument("--altered", help="comma-separated AP ids")
    p.add_argument("--report", help="detection report naming the altered APs")
    p.add_argument("--mu", type=float, default=DEFAULT_MU)
    p.add_argument("--lambda", dest="lam", type=float, default=DEFAULT_LAMBDA)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--subdim", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", parents=[common], help="error statistics and detection metrics")
    p.add_argument("--estimates", help="table written by localize")
    p.add_argument("--cdf", help="write the error CDF table here")
    p.add_argument("--report", help="detection report")
    p.add_argument("--scenario", help="scenario holding the true alterations")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", parents=[common], help="all stages, end to end")
    p.add_argument("--out-dir", default="crisloc-run")
    p.add_argument("--alter", type=int, default=1)
    p.add_argument("--distance", type=float, default=3.0)
    p.add_argument("--mode", choices=["rp", "joint"], default="rp")
    p.add_argument("--p-value", type=float, default=0.05)
    p.add_argument("--matcher", choices=["eeknn", "wknn"], default="eeknn")
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--queries", type=int, default=40)
    p.set_defaults(func=cmd_pipeline)
    return ap


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> dict:
    """Fold ``--config`` file values in as defaults; explicit flags still win.

    Returns fallbacks for the global flags, per subcommand.
    """
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subs = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    fallbacks = {name: dict(GLOBAL_DEFAULTS) for name in subs.choices}
    if not known.config:
        return fallbacks
    conf = read_json(_need(known.config))
    if not isinstance(conf, dict):
        raise UsageError(f"{known.config}: expected a JSON object")
    bad = set(conf) - set(subs.choices) - set(GLOBAL_DEFAULTS)
    if bad:
        raise UsageError(f"{known.config}: unknown top-level keys {sorted(bad)}")
    for name, sp in subs.choices.items():
        section = conf.get(name, {})
        if not isinstance(section, dict):
            raise UsageError(f"{known.config}: section {name!r} must be an object")
        values = {k.replace("-", "_"): v for k, v in section.items()}
        dests = {a.dest for a in sp._actions}
        unknown = set(values) - dests
        if unknown:
            raise UsageError(f"{known.config}: unknown keys for {name}: {sorted(unknown)}")
        for key in GLOBAL_DEFAULTS:
            if key in conf:
                fallbacks[name][key] = conf[key]
            if key in values:
                fallbacks[name][key] = values.pop(key)
        values.pop("config", None)
        sp.set_defaults(**values)
    return fallbacks


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        _setup_logging()
        parser = build_parser()
        fallbacks = _apply_config(parser, argv)
        args = parser.parse_args(argv)
        for key, value in fallbacks[args.command].items():
            if not hasattr(args, key):
                setattr(args, key, value)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"crisloc: error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"crisloc: error: {exc}", file=sys.stderr)
        return 2
    except (CrislocError, json.JSONDecodeError, KeyError) as exc:
        print(f"crisloc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
