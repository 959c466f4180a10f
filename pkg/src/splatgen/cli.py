"""Command-line surface: generate / render / evaluate / export-report.

Errors are reported as a single JSON object on stderr and a nonzero exit
code, so wrapping scripts can parse failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from splatgen import io as sio
from splatgen.errors import SplatgenError
from splatgen.guidance import AnalyticDenoiser, Prompt, RemoteScoreProvider, linear_schedule
from splatgen.metrics import FeatureSet, MetricReport, fid, inception_score, janus_detect, janus_frequency, r_precision
from splatgen.rasterizer import render
from splatgen.trainer import BoundProvider, TrainConfig, run_pipeline

PROVIDER_URL_ENV = "SPLATGEN_PROVIDER_URL"


def _read_labels_csv(path: str) -> list[int]:
    out = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0].strip().startswith("#"):
                continue
            out.append(int(row[-1]))
    return out


def cmd_generate(args) -> int:
    if args.config:
        with open(args.config) as f:
            config = sio.parse_config(f.read(), TrainConfig)
    else:
        config = TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.stage2_steps is not None:
        config.stage2_steps = args.stage2_steps

    prompt = Prompt(args.prompt)
    url = args.provider_url or os.environ.get(PROVIDER_URL_ENV)
    if args.mock_target:
        target_cloud = sio.load_ply(args.mock_target)
        schedule = linear_schedule()

        def target_fn(cam):
            return render(target_cloud, cam, background=(0.0, 0.0, 0.0)).rgb

        oracle = AnalyticDenoiser(target_fn, schedule)
        mv = BoundProvider(oracle, schedule, config.mv_guidance())
        sd = BoundProvider(oracle, schedule, config.sd_guidance())
    elif url:
        mv_provider = RemoteScoreProvider(url, mode="mv")
        schedule = mv_provider.fetch_schedule()
        mv = BoundProvider(mv_provider, schedule, config.mv_guidance())
        sd = BoundProvider(RemoteScoreProvider(url, mode="sd"), schedule, config.sd_guidance())
    else:
        raise SplatgenError(
            "no score provider: pass --provider-url, --mock-target, "
            f"or set {PROVIDER_URL_ENV}"
        )

    cloud, report = run_pipeline(prompt, mv, config, sd=sd)
    os.makedirs(args.out, exist_ok=True)
    sio.save_ply(cloud, os.path.join(args.out, "model.ply"))
    sio.save_json(report.to_dict(), os.path.join(args.out, "report.json"))
    print(os.path.join(args.out, "model.ply"))
    return 0


def cmd_render(args) -> int:
    cloud = sio.load_ply(args.ply)
    paths = sio.render_turntable(
        cloud, args.out, frames=args.frames, width=args.resolution, height=args.resolution
    )
    print(f"{len(paths)} frames -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    report = MetricReport()
    if args.fid_a and args.fid_b:
        report.fid = fid(
            FeatureSet(sio.load_features(args.fid_a), source="realism-a"),
            FeatureSet(sio.load_features(args.fid_b), source="realism-b"),
        )
    if args.class_probs:
        mean, std = inception_score(sio.load_features(args.class_probs), splits=args.is_splits)
        report.inception_score = mean
        report.inception_score_std = std
    if args.render_emb and args.prompt_emb:
        renders = FeatureSet(sio.load_features(args.render_emb), source="render-emb")
        prompts = FeatureSet(sio.load_features(args.prompt_emb), source="prompt-emb")
        if args.true_index:
            true_idx = np.asarray(_read_labels_csv(args.true_index))
        else:
            true_idx = np.arange(renders.count)
        report.r_precision_percent = r_precision(renders, prompts, true_idx)
    if args.janus_labels:
        # manual labels are authoritative when provided
        report.janus_frequency_percent = janus_frequency(_read_labels_csv(args.janus_labels))
    elif args.janus_features:
        verdicts = []
        for path in args.janus_features:
            fs = FeatureSet(sio.load_features(path), source="detector")
            verdicts.append(janus_detect(fs, rho=args.rho, min_run=args.min_run).has_janus)
        report.janus_frequency_percent = janus_frequency(verdicts)
    if args.alignment_labels:
        labels = _read_labels_csv(args.alignment_labels)
        report.good_alignment_percent = 100.0 * sum(labels) / len(labels)
    if args.run_report:
        with open(args.run_report) as f:
            report.gpu_hours = json.load(f)["gpu_hours"]
    sio.save_json(report.to_dict(), args.out)
    print(args.out)
    return 0


def cmd_export_report(args) -> int:
    rows = []
    for path in args.reports:
        with open(path) as f:
            data = json.load(f)
        rows.append({"name": os.path.splitext(os.path.basename(path))[0], **data})
    table = {
        "janus": [
            {"method": r["name"], "janus_frequency_percent": r.get("janus_frequency_percent")}
            for r in rows
        ],
        "alignment": [
            {
                "method": r["name"],
                "good_alignment_percent": r.get("good_alignment_percent"),
                "r_precision_percent": r.get("r_precision_percent"),
            }
            for r in rows
        ],
        "fidelity": [
            {
                "method": r["name"],
                "fid": r.get("fid"),
                "inception_score": r.get("inception_score"),
            }
            for r in rows
        ],
        "efficiency": [{"method": r["name"], "gpu_hours": r.get("gpu_hours")} for r in rows],
    }
    sio.save_json(table, args.out)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatgen")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run the two-stage text-to-3D pipeline")
    g.add_argument("--prompt", required=True)
    g.add_argument("--config", help="flat key=value config file")
    g.add_argument("--provider-url", help="guidance service base URL")
    g.add_argument("--mock-target", help="PLY scene; trains against an analytic denoiser of its renders")
    g.add_argument("--stage2-steps", type=int, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("render", help="export a turntable of PNG frames")
    r.add_argument("--ply", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--frames", type=int, default=120)
    r.add_argument("--resolution", type=int, default=256)
    r.add_argument("--seed", type=int, default=None)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("evaluate", help="compute the metric report")
    e.add_argument("--fid-a")
    e.add_argument("--fid-b")
    e.add_argument("--class-probs")
    e.add_argument("--is-splits", type=int, default=10)
    e.add_argument("--render-emb")
    e.add_argument("--prompt-emb")
    e.add_argument("--true-index")
    e.add_argument("--janus-features", nargs="*")
    e.add_argument("--janus-labels")
    e.add_argument("--alignment-labels")
    e.add_argument("--rho", type=float, default=1.5)
    e.add_argument("--min-run", type=int, default=2)
    e.add_argument("--run-report")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-report", help="merge metric reports into table-shaped JSON")
    x.add_argument("--reports", nargs="+", required=True)
    x.add_argument("--seed", type=int, default=None)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SplatgenError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "IOError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
