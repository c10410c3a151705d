"""
Command-line front end.

Exit codes: 0 success, 1 metric/invariant failure, 2 I/O, schema or
parameter error. Failures print a JSON error object on stderr (and write
``error.json`` into ``--out`` when one was given).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .assignment import (COMBINATORS, DEFAULT_POSITIVE_THRESHOLD, DEFAULT_WARMUP_ITERS, assign_labels,
                         label_records, read_proposals, rpn_score_histogram, topk_hard_labels)
from .data import CategorySpace, dataset_to_coco, load_annotations, load_detection_table, load_space, write_detections
from .errors import (CapacityError, DomainError, MalformedBoxError, OsodError, ParameterError, SchemaError,
                     UndefinedMetricError, ValidationError)
from .metrics import AOSE_MODES, AP_VARIANTS, WI_VARIANTS, EvalConfig, evaluate
from .postprocess import DEFAULT_MAX_DETS, DEFAULT_NMS_THR, DEFAULT_SCORE_THR, postprocess
from .selfcheck import run_selfcheck
from .splits import (BENCHMARKS, build_owod_tasks, build_t1_split, build_t2_split, load_groups,
                     wilderness_ratio, write_split)

logger = logging.getLogger("osod")

CONFIG_FORMAT = "osod-run/1"
EXIT_OK, EXIT_FAILURE, EXIT_IO = 0, 1, 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_IO, kind="InputError"):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _run_config(args, path_keys) -> dict:
    cfg = {"format_version": CONFIG_FORMAT, "subcommand": args.command}
    for key, val in sorted(vars(args).items()):
        if key in ("command", "func"):
            continue
        cfg[key] = val
    for key in path_keys:
        if cfg.get(key) is not None and not os.path.exists(cfg[key]):
            raise CliError(f"--{key.replace('_', '-')}: no such file: {cfg[key]}")
    return cfg


def _write_text(path, text):
    with open(path, "w", newline="") as f:
        f.write(text)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2) + "\n")


def _space_from_groups(groups) -> CategorySpace:
    known = tuple(sorted(groups[0].category_ids))
    rest = frozenset().union(*(g.category_ids for g in groups[1:])) if len(groups) > 1 else frozenset()
    return CategorySpace(known, rest - set(known))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    cfg = _run_config(args, ("annotations", "detections", "space"))
    space = load_space(args.space)
    dataset = load_annotations(args.annotations, space, strict=not args.lenient)
    table = load_detection_table(args.detections, space)
    if args.postprocess:
        dets = postprocess(table, space, args.score_thr, args.nms_thr, args.max_dets)
    else:
        dets = table
    ecfg = EvalConfig(iou_thr=args.iou_thr, wi_iou_thr=args.wi_iou_thr, wi_recall=args.wi_recall,
                      ap_variant=args.ap_variant, wi_variant=args.wi_variant,
                      aose_mode=args.aose_mode)
    report = evaluate(dets, dataset, space, ecfg, run_config=cfg)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "report.json"), report.to_json())
    _write_text(os.path.join(args.out, "report.csv"), report.to_csv())
    _write_text(os.path.join(args.out, "pr_curves.csv"), report.pr_curves_csv())
    print(report.summary_table())
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _run_config(args, ("known", "pool", "groups"))
    if args.mode == "owod":
        if not args.pool:
            raise CliError("owod mode needs --pool")
        benchmark = args.benchmark if args.benchmark != "voc-coco" else "m-owodb"
        groups = load_groups(args.groups, benchmark=benchmark)
        pool = load_annotations(args.pool, _space_from_groups(groups), strict=False)
        tasks = build_owod_tasks(pool, benchmark, groups)
        os.makedirs(args.out, exist_ok=True)
        info = {"format_version": "osod-split/1", "config": cfg}
        entries = []
        for task in tasks:
            path = os.path.join(args.out, f"task{task.index}.json")
            with open(path, "w") as f:
                json.dump(dataset_to_coco(task.dataset, info), f)
            entries.append({"task": task.index, "name": task.name, "num_classes": task.num_classes,
                            "class_ids": sorted(task.class_ids), "images": len(task.dataset.images),
                            "instances": len(task.dataset.annotations),
                            "image_ids": [im.id for im in task.dataset.images]})
        _write_json(os.path.join(args.out, "owod_manifest.json"),
                    {"format_version": "osod-split/1", "config": cfg, "mode": "OWOD", "benchmark": benchmark,
                     "seed": args.seed, "tasks": entries})
        for e in entries:
            print(f"task {e['task']}: {e['num_classes']} classes, {e['images']} images, {e['instances']} instances")
        return EXIT_OK

    if not (args.known and args.pool):
        raise CliError(f"{args.mode} mode needs --known and --pool")
    if args.n is None:
        raise CliError("--n is required")
    groups = load_groups(args.groups, benchmark="voc-coco")
    load_space_ = _space_from_groups(groups)
    known_eval = load_annotations(args.known, load_space_, strict=False)
    pool = load_annotations(args.pool, load_space_, strict=False)
    if args.mode == "t1":
        if args.level is None:
            raise CliError("t1 mode needs --level")
        result = build_t1_split(known_eval, pool, groups, args.level, args.n, args.seed)
        stem = f"voc_coco_t1_{args.level}"
    else:
        if args.multiplier is None:
            raise CliError("t2 mode needs --multiplier")
        result = build_t2_split(known_eval, pool, args.multiplier, args.n, args.seed)
        stem = f"voc_coco_t2_x{args.multiplier:g}"
    ann_path, man_path = write_split(result, args.out, cfg, stem=stem)
    ratio = wilderness_ratio(result.dataset)
    print(f"{stem}: {len(result.known_image_ids)} known + {len(result.open_image_ids)} open images, "
          f"wilderness ratio {ratio:g}")
    print(ann_path)
    print(man_path)
    return EXIT_OK


def _strategies(args):
    names = args.strategy or ["soft-e"]
    out = []
    for name in names:
        if name == "topk":
            for k in (args.k or [1]):
                out.append((f"topk-{k}", k))
        else:
            out.append((name, COMBINATORS[name.split("-", 1)[1]]))
    return out


def cmd_assign(args) -> int:
    cfg = _run_config(args, ("annotations", "proposals", "space"))
    space = load_space(args.space)
    dataset = load_annotations(args.annotations, space, strict=not args.lenient)
    proposals = read_proposals(args.proposals)
    os.makedirs(args.out, exist_ok=True)
    edges = np.linspace(0.0, 1.0, 11)
    summary = {"format_version": CONFIG_FORMAT, "config": cfg, "proposals": len(proposals), "strategies": {}}
    unk = space.unknown_slot - 1
    for name, param in _strategies(args):
        if name.startswith("topk"):
            labels = topk_hard_labels(proposals, dataset.annotations, param, space, args.pos_thr)
        else:
            labels = assign_labels(proposals, dataset.annotations, param, space, args.pos_thr,
                                   iteration=args.iteration, warmup=args.warmup)
        mat = np.stack(labels) if labels else np.zeros((0, space.num_slots))
        positive = (mat[:, :space.num_known].sum(axis=1) > 0) if len(mat) else np.zeros(0, bool)
        neg = mat[~positive]
        path = os.path.join(args.out, f"labels_{name}.jsonl")
        with open(path, "w") as f:
            f.write(json.dumps({"format_version": "osod-labels/1", "strategy": name, "config": cfg}) + "\n")
            for row in label_records(proposals, labels):
                f.write(json.dumps(row) + "\n")
        hist = rpn_score_histogram(neg[:, unk].tolist(), edges.tolist())
        summary["strategies"][name] = {
            "positives": int(positive.sum()),
            "negatives": int(len(neg)),
            "unknown_labeled": int(np.count_nonzero(neg[:, unk] > 0)) if len(neg) else 0,
            "unknown_mass_total": round(float(neg[:, unk].sum()), 6) if len(neg) else 0.0,
            "max_known_mass_on_negatives": float(neg[:, :space.num_known].max()) if len(neg) else 0.0,
            "unknown_mass_histogram": [
                {"low": lo, "high": hi, "count": c, "fraction": round(fr, 6)}
                for (lo, hi), c, fr in zip(hist.bins, hist.counts, hist.fractions)
            ],
        }
        print(f"{name}: {summary['strategies'][name]['unknown_labeled']} of {len(neg)} negatives carry unknown mass")
    _write_json(os.path.join(args.out, "assign_summary.json"), summary)
    hist_path = os.path.join(args.out, "unknown_mass_histogram.csv")
    with open(hist_path, "w") as f:
        f.write(f"# {CONFIG_FORMAT} config={json.dumps(cfg, sort_keys=True)}\n")
        f.write("strategy,low,high,count,fraction\n")
        for name, s in summary["strategies"].items():
            for b in s["unknown_mass_histogram"]:
                f.write(f"{name},{b['low']:.6f},{b['high']:.6f},{b['count']},{b['fraction']:.6f}\n")
    return EXIT_OK


def cmd_postprocess(args) -> int:
    cfg = _run_config(args, ("detections", "space"))
    space = load_space(args.space)
    table = load_detection_table(args.detections, space)
    kept = postprocess(table, space, args.score_thr, args.nms_thr, args.max_dets)
    os.makedirs(args.out, exist_ok=True)
    write_detections(kept, space, os.path.join(args.out, "detections.json"))
    _write_json(os.path.join(args.out, "postprocess_manifest.json"),
                {"format_version": CONFIG_FORMAT, "config": cfg, "input": len(table), "output": len(kept)})
    print(f"kept {len(kept)} of {len(table)} predictions")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(seed=args.seed)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"[{status}] {r.name}: {r.detail} ({r.seconds:.2f}s)")
    if failed:
        raise CliError(f"{failed} self-check(s) failed: " + ", ".join(r.name for r in results if not r.passed),
                       code=EXIT_FAILURE, kind="SelfCheckFailure")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="osod", description="Open-set detection label assignment and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add_post_flags(sp):
        sp.add_argument("--score-thr", type=float, default=DEFAULT_SCORE_THR)
        sp.add_argument("--nms-thr", type=float, default=DEFAULT_NMS_THR)
        sp.add_argument("--max-dets", type=int, default=DEFAULT_MAX_DETS)

    ev = sub.add_parser("evaluate", help="compute mAP, WI, A-OSE, U-AP and U-Recall")
    ev.add_argument("--annotations", required=True)
    ev.add_argument("--detections", required=True)
    ev.add_argument("--space", required=True)
    ev.add_argument("--iou-thr", type=float, default=0.5)
    ev.add_argument("--wi-iou-thr", type=float, default=0.8)
    ev.add_argument("--wi-recall", type=float, default=0.8)
    ev.add_argument("--ap-variant", choices=AP_VARIANTS, default="voc07")
    ev.add_argument("--wi-variant", choices=WI_VARIANTS, default="per-class")
    ev.add_argument("--aose-mode", choices=AOSE_MODES, default="gt-consumption")
    ev.add_argument("--postprocess", action="store_true", help="filter detections before evaluating")
    ev.add_argument("--lenient", action="store_true", help="remap unlisted GT categories to unknown")
    add_post_flags(ev)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("split", help="build VOC-COCO T1/T2 or OWOD task splits")
    sp.add_argument("--mode", choices=("t1", "t2", "owod"), required=True)
    sp.add_argument("--known", help="known-source evaluation annotations (COCO JSON)")
    sp.add_argument("--pool", help="open pool annotations (COCO JSON)")
    sp.add_argument("--groups", help="semantic group file; defaults to the shipped groups")
    sp.add_argument("--benchmark", choices=BENCHMARKS, default="voc-coco")
    sp.add_argument("--level", type=int, choices=(20, 40, 60))
    sp.add_argument("--multiplier", type=float)
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_split)

    asg = sub.add_parser("assign", help="assign proposal target labels")
    asg.add_argument("--annotations", required=True)
    asg.add_argument("--proposals", required=True)
    asg.add_argument("--space", required=True)
    asg.add_argument("--strategy", action="append",
                     choices=[f"soft-{c}" for c in sorted(COMBINATORS)] + ["topk"])
    asg.add_argument("--k", type=int, action="append")
    asg.add_argument("--pos-thr", type=float, default=DEFAULT_POSITIVE_THRESHOLD)
    asg.add_argument("--iteration", type=int, help="training iteration, for the warmup gate")
    asg.add_argument("--warmup", type=int, default=DEFAULT_WARMUP_ITERS)
    asg.add_argument("--lenient", action="store_true")
    asg.add_argument("--seed", type=int, default=0)
    asg.add_argument("--out", required=True)
    asg.set_defaults(func=cmd_assign)

    pp = sub.add_parser("postprocess", help="score filter, NMS and top-N selection")
    pp.add_argument("--detections", required=True)
    pp.add_argument("--space", required=True)
    add_post_flags(pp)
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_postprocess)

    sc = sub.add_parser("selfcheck", help="run the embedded oracle checks")
    sc.add_argument("--seed", type=int, default=0)
    sc.set_defaults(func=cmd_selfcheck)
    return p


def _fail(args, kind, message, code, extra=None) -> int:
    err = {"error": kind, "message": message, "exit_code": code}
    if extra:
        err.update(extra)
    print(json.dumps(err), file=sys.stderr)
    out = getattr(args, "out", None)
    if out:
        try:
            os.makedirs(out, exist_ok=True)
            _write_json(os.path.join(out, "error.json"), err)
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as ex:
        return _fail(args, ex.kind, str(ex), ex.code)
    except CapacityError as ex:
        return _fail(args, "CapacityError", str(ex), EXIT_FAILURE,
                     {"required": ex.required, "available": ex.available, "shortfall": ex.shortfall})
    except UndefinedMetricError as ex:
        return _fail(args, "UndefinedMetricError", str(ex), EXIT_FAILURE)
    except (SchemaError, ValidationError, ParameterError, DomainError, MalformedBoxError) as ex:
        return _fail(args, type(ex).__name__, str(ex), EXIT_IO)
    except OsodError as ex:
        return _fail(args, type(ex).__name__, str(ex), EXIT_FAILURE)
    except (OSError, json.JSONDecodeError) as ex:
        return _fail(args, type(ex).__name__, str(ex), EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
