"""Command-line entry point: ``ovdkit <subcommand> [options]``.

Every subcommand accepts ``--config`` (a JSON document), ``--seed`` and
``--out``.  Values given on the command line override the config file,
which overrides the built-in defaults.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import jsonio
from .dataset import Dataset
from .denoise import label_denoise_queries, make_noise_group, pairs_per_object
from .evalkit import DetectionRecord, evaluate
from .foreground import ForegroundEstimator
from .geometry import Box
from .harness.scenario import STAGE_DENOISE, ScenarioConfig, stage_rng, synth_dataset
from .harness.simulate import SimulationConfig, StageError, simulate
from .losses import FocalParams, LossWeights
from .matcher import hungarian, match_group
from .pipeline import AnnotationStore, FileProposalSource, FilterConfig, OracleProposalSource, run_pipeline
from .roqis import EmbeddingTable, region_similarity, roqis_criterion, top_indices

HYPER_FLAGS = {
    "tau": (float, "wildcard IoU threshold (default 0.5)"),
    "rho": (float, "negative-query corruption probability (default 0.25)"),
    "alpha": (float, "RoQIs geometric-mean weight (default 0.45)"),
    "beta": (float, "denoising loss weight (default 2.0)"),
    "gamma": (float, "foreground score exponent (default 0.5)"),
    "iterations": (int, "pseudo-labeling iterations (default 2)"),
}

FILTER_FLAGS = {
    "max_iou_vs_gt": float,
    "min_quality": float,
    "min_area": float,
    "max_area": float,
    "dedup_iou": float,
    "per_image_cap": int,
}


def _given(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _config_doc(args) -> dict:
    return jsonio.load(args.config) if args.config else {}


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _filter_config(args, doc) -> FilterConfig:
    return FilterConfig.from_dict({**doc.get("filter", {}), **_given(args, FILTER_FLAGS)})


def _sim_config(args) -> SimulationConfig:
    doc = _config_doc(args)
    cfg = SimulationConfig.from_dict(doc) if doc else SimulationConfig()
    overrides = _given(args, HYPER_FLAGS)
    for name in ("top_n", "emit_prob"):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    if getattr(args, "no_wildcard", False):
        overrides["wildcard"] = False
    cfg = replace(cfg, **overrides, filter=_filter_config(args, {"filter": cfg.filter.to_dict()}))
    if args.seed is not None:
        cfg = replace(cfg, scenario=replace(cfg.scenario, seed=args.seed))
    return cfg


def cmd_synth(args) -> None:
    doc = _config_doc(args)
    scenario = ScenarioConfig.from_dict(doc.get("scenario", doc))
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    if args.images is not None:
        scenario = replace(scenario, images=args.images)
    dataset, table = synth_dataset(scenario)
    out = _out(args)
    dataset.save(out / "dataset.json")
    jsonio.save(table.to_dict(), out / "embeddings.json")
    print(f"wrote {len(dataset.images)} images to {out / 'dataset.json'}")


def cmd_fit_fe(args) -> None:
    doc = _config_doc(args)
    dataset = Dataset.load(args.dataset)
    fg = [o.eta for img in dataset.images for o in img.gt if o.eta is not None]
    bg = [o.eta for img in dataset.images for o in img.background if o.eta is not None]
    gamma = args.gamma if args.gamma is not None else doc.get("gamma", 0.5)
    fe = ForegroundEstimator.fit(fg, bg, gamma)
    path = jsonio.save(fe.to_dict(), _out(args) / "foreground.json")
    print(f"fg a={fe.fg.a:.4f} c={fe.fg.c:.4f}  bg a={fe.bg.a:.4f} c={fe.bg.c:.4f}  -> {path}")


def cmd_pseudo_label(args) -> None:
    doc = _config_doc(args)
    dataset = Dataset.load(args.dataset)
    fe = ForegroundEstimator.load(args.fe)
    if args.gamma is not None:
        fe = replace(fe, gamma=args.gamma)
    if args.proposals:
        src = FileProposalSource.load(args.proposals)
    else:
        emit = args.emit_prob if args.emit_prob is not None else doc.get("emit_prob", 0.6)
        seed = args.seed if args.seed is not None else doc.get("seed", 0)
        src = OracleProposalSource(dataset, emit, seed=seed)
    iterations = args.iterations if args.iterations is not None else doc.get("iterations", 2)
    store, log = run_pipeline(dataset, src, iterations, _filter_config(args, doc), fe, src.eta)
    path = jsonio.save({**store.to_dict(), "recall_log": log}, _out(args) / "pseudo_labels.json")
    print("novel AR50 per iteration: " + " ".join(f"{v:.3f}" for v in log))
    print(f"wrote {sum(len(a.pseudo) for a in store.images.values())} pseudo labels to {path}")


def cmd_match(args) -> None:
    doc = jsonio.load(args.input)
    if "cost" in doc:
        assignment = hungarian(doc["cost"])
    else:
        cfg = {**_config_doc(args), **_given(args, ("class_weight", "bbox_weight", "giou_weight"))}
        weights = LossWeights(
            cfg.get("class_weight", 2.0), cfg.get("bbox_weight", 5.0), cfg.get("giou_weight", 2.0)
        )
        targets = [(Box.from_array(t["box"]), int(t.get("label", 1))) for t in doc["targets"]]
        preds = [(Box.from_array(p["box"]), float(p["prob"])) for p in doc["preds"]]
        assignment = match_group(targets, preds, weights, FocalParams())
    result = {"pairs": [list(p) for p in assignment.pairs], "total_cost": assignment.total_cost}
    jsonio.save(result, _out(args) / "assignment.json")
    print(jsonio.dumps(result), end="")


def cmd_denoise(args) -> None:
    doc = _config_doc(args)
    store = AnnotationStore({})
    store.load_pseudo(jsonio.load(args.input))
    rho = args.rho if args.rho is not None else doc.get("rho", 0.25)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    images = []
    for idx, (image_id, ann) in enumerate(store.images.items()):
        rng = stage_rng(seed, STAGE_DENOISE, idx)
        n = pairs_per_object(len(ann.pseudo), args.queries, args.pairs)
        groups = []
        if n:
            for u in ann.pseudo:
                groups.append(label_denoise_queries(make_noise_group(u, n, rng), rho, args.base_count, rng))
        images.append({"id": image_id, "pairs": n, "groups": [g.to_dict() for g in groups]})
    path = jsonio.save({"images": images}, _out(args) / "denoise.json")
    print(f"wrote noise groups for {len(images)} images to {path}")


def cmd_select(args) -> None:
    doc = _config_doc(args)
    table = EmbeddingTable.load(args.embeddings)
    alpha = args.alpha if args.alpha is not None else doc.get("alpha", 0.45)
    data = jsonio.load(args.input)
    images = data["images"] if "images" in data else [{"id": 0, "proposals": data["proposals"]}]
    out_images = []
    for img in images:
        props = img["proposals"]
        boxes = [Box.from_array(p["box"]) for p in props]
        sims = region_similarity([p["feature"] for p in props], table)
        phi = roqis_criterion(sims, [p["objectness"] for p in props], alpha)
        idx = top_indices(phi, args.top_n)
        out_images.append(
            {"id": img["id"], "selected": [{"index": i, "box": boxes[i].to_list(), "phi": float(phi[i])} for i in idx]}
        )
    path = jsonio.save({"images": out_images}, _out(args) / "selection.json")
    print(f"selected top-{args.top_n} proposals for {len(out_images)} images -> {path}")


def cmd_evaluate(args) -> None:
    dataset = Dataset.load(args.dataset)
    doc = jsonio.load(args.detections)
    dets = [DetectionRecord.from_dict(d) for d in doc["detections"]]
    report = evaluate(
        dets,
        dataset.ground_truth(include_novel=True),
        dataset.base_ids(),
        dataset.novel_ids(),
        max_dets=args.max_dets,
    )
    jsonio.save(report.to_dict(), _out(args) / "report.json")
    print(report.table(dict(enumerate(dataset.vocabulary))))


def cmd_simulate(args) -> None:
    cfg = _sim_config(args)
    result = simulate(cfg, _out(args))
    names = cfg.scenario.base_names + cfg.scenario.novel_names
    print(result.report.table(dict(enumerate(names))))
    d = result.diagnostics
    print()
    print(f"novel AR50 of matched queries   {100 * d['novel_matched_ar50']:6.1f}")
    print(f"novel recall of selected props  {100 * d['novel_selection_recall']:6.1f}")
    print("pseudo-label novel AR50 log     " + " ".join(f"{100 * v:.1f}" for v in d["pseudo_label_recall_log"]))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")


def _add_hyper(p: argparse.ArgumentParser, names) -> None:
    for name in names:
        kind, text = HYPER_FLAGS[name]
        p.add_argument(f"--{name}", type=kind, help=text)


def _add_filter(p: argparse.ArgumentParser) -> None:
    for name, kind in FILTER_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovdkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset and embedding table")
    _add_common(p)
    p.add_argument("--images", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-fe", help="fit the foreground estimator")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    _add_hyper(p, ["gamma"])
    p.set_defaults(func=cmd_fit_fe)

    p = sub.add_parser("pseudo-label", help="run the iterative pseudo-labeling pipeline")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fe", required=True, help="foreground.json from fit-fe")
    p.add_argument("--proposals", help="proposal file; defaults to the synthetic oracle source")
    p.add_argument("--emit-prob", dest="emit_prob", type=float)
    _add_hyper(p, ["gamma", "iterations"])
    _add_filter(p)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("match", help="solve an assignment from a cost matrix or targets/predictions")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--class-weight", dest="class_weight", type=float)
    p.add_argument("--bbox-weight", dest="bbox_weight", type=float)
    p.add_argument("--giou-weight", dest="giou_weight", type=float)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("denoise", help="synthesize denoising groups for pseudo labels")
    _add_common(p)
    p.add_argument("--input", required=True, help="pseudo_labels.json")
    p.add_argument("--pairs", type=int, default=3)
    p.add_argument("--queries", type=int, default=900, help="vanilla query budget per image")
    p.add_argument("--base-count", dest="base_count", type=int, default=10)
    _add_hyper(p, ["rho"])
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("select", help="RoQIs proposal selection")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--top-n", dest="top_n", type=int, default=12)
    _add_hyper(p, ["alpha"])
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="AP50 / mAP / AR50 report")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--max-dets", dest="max_dets", type=int, help="per-image detection cap (COCO uses 100)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="end-to-end synthetic run")
    _add_common(p)
    _add_hyper(p, list(HYPER_FLAGS))
    _add_filter(p)
    p.add_argument("--top-n", dest="top_n", type=int)
    p.add_argument("--emit-prob", dest="emit_prob", type=float)
    p.add_argument("--no-wildcard", dest="no_wildcard", action="store_true", help="ablate wildcard supervision")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except StageError as exc:
        print(f"ovdkit {args.command}: error in stage '{exc.stage}': {exc.cause}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"ovdkit {args.command}: error in stage '{args.command}': {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
