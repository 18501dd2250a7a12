"""Single entry point exposing the extract, identify, mitigate, sweep,
serve, replay, and synth subcommands.

A config file (INI-style [section] key=value, one section per subcommand)
supplies defaults; command-line flags override it. Exit codes: 0 success,
1 validation error, 2 I/O error. With --json, errors are printed as
{"error": code, "detail": ...} JSON.
"""

from __future__ import annotations

import configparser
import json
import sys
import warnings
from pathlib import Path

import click

from . import __version__
from .errors import GaitGuardError, ValidationError
from . import gait_extract, identity, keypoint_io, mitigate, privacy_eval
from . import stream_server, synthlab

SEED_ENVVAR = "GAITGUARD_SEED"


def _load_config(ctx, param, value):
    if not value:
        return None
    parser = configparser.ConfigParser()
    read = parser.read(value)
    if not read:
        raise click.FileError(value, hint="config file not found")
    ctx.default_map = ctx.default_map or {}
    for section in parser.sections():
        ctx.default_map.setdefault(section, {}).update(parser[section])
    return value


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__)
@click.option("--config", callback=_load_config, is_eager=True, expose_value=False,
              help="INI config file with one [section] per subcommand.")
@click.option("--json", "json_errors", is_flag=True,
              help="Print errors as machine-readable JSON.")
@click.option("-v", "--verbose", is_flag=True, help="Show warnings verbosely.")
@click.pass_context
def cli(ctx, json_errors, verbose):
    """Gait-privacy toolkit: extraction attack, identification, noise
    mitigation, privacy-utility sweep, and the streaming server."""
    ctx.ensure_object(dict)
    ctx.obj["json"] = json_errors
    if not verbose:
        warnings.simplefilter("ignore")


def _echo_result(ctx, payload: dict, text: str):
    if ctx.obj.get("json"):
        click.echo(json.dumps(payload, sort_keys=True))
    else:
        click.echo(text)


seed_option = click.option("--seed", type=int, default=0, show_default=True,
                           envvar=SEED_ENVVAR,
                           help=f"RNG seed (falls back to ${SEED_ENVVAR}).")


def _calibration(marker_a, marker_b, distance_m):
    if distance_m is None:
        return None
    if marker_a is None or marker_b is None:
        raise ValidationError("--marker-a and --marker-b are required with --distance-m")
    return keypoint_io.MarkerCalibration(marker_a, marker_b, distance_m)


@cli.command()
@click.option("--in", "inputs", multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Keypoint sequence JSONL (repeatable).")
@click.option("--out", "out_csv", required=True, type=click.Path(dir_okay=False),
              help="Feature CSV to write.")
@click.option("--marker-a", type=float, default=None, help="Marker A x (pixels).")
@click.option("--marker-b", type=float, default=None, help="Marker B x (pixels).")
@click.option("--distance-m", type=float, default=None,
              help="Real distance between markers (meters); enables step length.")
@click.option("--min-prominence", type=float, default=0.10, show_default=True,
              help="Peak prominence as a fraction of the signal range.")
@click.option("--min-separation", type=float, default=0.25, show_default=True,
              help="Minimum spacing between same-kind events (seconds).")
@click.option("--max-gap", type=int, default=5, show_default=True,
              help="Longest missing-sample gap bridged by interpolation (frames).")
@click.pass_context
def extract(ctx, inputs, out_csv, marker_a, marker_b, distance_m,
            min_prominence, min_separation, max_gap):
    """Extract gait feature rows from keypoint sequences."""
    cal = _calibration(marker_a, marker_b, distance_m)
    params = gait_extract.EventParams(min_prominence, min_separation, max_gap)
    rows = []
    rejected = 0
    for path in inputs:
        seq = keypoint_io.read_keypoint_sequence(path)
        report = gait_extract.extract_features(seq, cal, params)
        if report.rejected:
            rejected += 1
        rows.extend(report.rows)
    gait_extract.write_feature_csv(rows, out_csv)
    _echo_result(ctx, {"rows": len(rows), "rejected_sequences": rejected,
                       "out": str(out_csv)},
                 f"wrote {len(rows)} feature rows to {out_csv} "
                 f"({rejected} sequences rejected)")


@cli.command()
@click.option("--features", "features_csv", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Feature CSV from `extract`.")
@click.option("--folds", type=int, default=3, show_default=True)
@click.option("--repeats", type=int, default=2, show_default=True)
@click.option("--no-step-length", is_flag=True,
              help="Drop the two step-length columns before training.")
@click.option("--stages", type=int, default=100, show_default=True)
@click.option("--learning-rate", type=float, default=0.1, show_default=True)
@click.option("--max-depth", type=int, default=3, show_default=True)
@click.option("--out", "out_json", required=True, type=click.Path(dir_okay=False),
              help="Report JSON to write.")
@click.option("--confusion", "confusion_csv", type=click.Path(dir_okay=False),
              default=None, help="Optional confusion-matrix CSV.")
@seed_option
@click.pass_context
def identify(ctx, features_csv, folds, repeats, no_step_length, stages,
             learning_rate, max_depth, out_json, confusion_csv, seed):
    """Evaluate subject identification with repeated stratified k-fold CV."""
    rows = gait_extract.read_feature_csv(features_csv)
    data = identity.dataset_from_rows(rows, include_step_length=not no_step_length)
    hyper = identity.Hyperparams(stages, learning_rate, max_depth)
    report = identity.evaluate_cv(data, hyper, folds, repeats, seed)
    Path(out_json).write_text(report.to_json())
    if confusion_csv:
        identity.write_confusion_csv(report, confusion_csv)
    _echo_result(ctx, {"weighted_f1_mean": report.weighted_f1_mean,
                       "classes": len(report.classes), "out": str(out_json)},
                 f"weighted F1 {report.weighted_f1_mean:.4f} over "
                 f"{len(report.classes)} subjects -> {out_json}")


def _noise_config(approach, dist, lam, patch, seed):
    return mitigate.NoiseConfig(
        approach=mitigate.Approach(approach),
        distribution=mitigate.Distribution.parse(dist),
        lam=lam,
        kpm_patch_px=patch,
        seed=seed,
    )


@cli.command("mitigate")
@click.option("--in", "in_dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory of PNG or .rgb frames.")
@click.option("--regions", "regions_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Region JSONL keyed by frame id.")
@click.option("--approach", type=click.Choice(["lbm", "kpm"]), default="lbm",
              show_default=True)
@click.option("--dist", type=click.Choice(["uniform", "normal", "laplace", "exp"]),
              default="laplace", show_default=True)
@click.option("--lambda", "lam", type=float, default=150.0, show_default=True,
              help="Noise scale.")
@click.option("--patch", type=int, default=48, show_default=True,
              help="KPM patch side (pixels).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Directory for mitigated frames.")
@seed_option
@click.pass_context
def mitigate_cmd(ctx, in_dir, regions_path, approach, dist, lam, patch, out_dir, seed):
    """Apply noise mitigation to frames on disk."""
    cfg = _noise_config(approach, dist, lam, patch, seed)
    provider = mitigate.RegionProvider.from_file(regions_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for path in keypoint_io.list_frame_files(in_dir):
        frame = keypoint_io.read_frame(path)
        rec = provider.get(frame.frame_id)
        box = rec.boxes[0] if rec and rec.boxes else None
        kps = rec.keypoints if rec else None
        out = mitigate.mitigate_frame(frame, cfg, region=box, keypoints=kps)
        keypoint_io.write_frame(out, out_dir / path.name)
        count += 1
    _echo_result(ctx, {"frames": count, "out": str(out_dir)},
                 f"mitigated {count} frames -> {out_dir}")


@cli.command()
@click.option("--corpus", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSON array of walker specs.")
@click.option("--grid", type=click.Choice(["default"]), default="default",
              show_default=True)
@click.option("--out", "out_csv", required=True, type=click.Path(dir_okay=False),
              help="Sweep CSV to write.")
@click.option("--json-out", type=click.Path(dir_okay=False), default=None,
              help="Optional JSON mirror of the sweep.")
@click.option("--plot", "plot_svg", type=click.Path(dir_okay=False), default=None,
              help="Optional SVG chart of the PUT curves.")
@click.option("--duration", type=float, default=5.0, show_default=True)
@click.option("--fps", type=float, default=15.0, show_default=True)
@click.option("--canvas", default="320x240", show_default=True,
              help="Render canvas, WxH.")
@click.option("--clips", type=int, default=2, show_default=True,
              help="Clips per subject.")
@click.option("--bins", type=int, default=10, show_default=True)
@click.option("--folds", type=int, default=3, show_default=True)
@click.option("--repeats", type=int, default=2, show_default=True)
@seed_option
@click.pass_context
def sweep(ctx, corpus, grid, out_csv, json_out, plot_svg, duration, fps, canvas,
          clips, bins, folds, repeats, seed):
    """Run the privacy-utility sweep over approaches x distributions x lambda."""
    specs = synthlab.load_walker_specs(corpus)
    try:
        width, height = (int(v) for v in canvas.lower().split("x"))
    except ValueError:
        raise ValidationError(f"--canvas must look like 320x240, got {canvas!r}")
    params = privacy_eval.SweepParams(
        duration_s=duration, fps=fps, canvas=(width, height),
        clips_per_subject=clips, bins=bins, folds=folds, repeats=repeats, seed=seed)
    cells = privacy_eval.run_put_sweep(specs, privacy_eval.SweepGrid(), params)
    privacy_eval.write_sweep_csv(cells, out_csv)
    if json_out:
        Path(json_out).write_text(
            json.dumps(privacy_eval.sweep_to_dicts(cells), indent=2, sort_keys=True)
            + "\n")
    if plot_svg:
        privacy_eval.plot_sweep_svg(cells, plot_svg)
    _echo_result(ctx, {"cells": len(cells), "out": str(out_csv)},
                 f"wrote {len(cells)} sweep rows (grid + baseline) to {out_csv}")


@cli.command()
@click.option("--bind", default="127.0.0.1:7001", show_default=True,
              help="Address to listen on, host:port.")
@click.option("--approach", type=click.Choice(["lbm", "kpm"]), default="lbm",
              show_default=True)
@click.option("--dist", type=click.Choice(["uniform", "normal", "laplace", "exp"]),
              default="laplace", show_default=True)
@click.option("--lambda", "lam", type=float, default=150.0, show_default=True)
@click.option("--patch", type=int, default=48, show_default=True)
@click.option("--regions", "regions_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Server-side region JSONL fallback.")
@seed_option
def serve(bind, approach, dist, lam, patch, regions_path, seed):
    """Run the streaming mitigation server until interrupted."""
    host, _, port = bind.rpartition(":")
    cfg = _noise_config(approach, dist, lam, patch, seed)
    provider = (mitigate.RegionProvider.from_file(regions_path)
                if regions_path else None)
    click.echo(f"serving on {host}:{port} ({approach}/{dist}, lambda={lam})")
    stream_server.serve((host, int(port)), cfg, provider)


@cli.command()
@click.option("--connect", default="127.0.0.1:7001", show_default=True,
              help="Server address, host:port.")
@click.option("--frames", "frames_dir", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Directory of PNG or .rgb frames to stream.")
@click.option("--fps", type=float, default=30.0, show_default=True)
@click.option("--regions", "regions_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Region JSONL to ride the frame trailers.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Optional directory for the mitigated replies.")
@click.option("--stats-out", type=click.Path(dir_okay=False), default=None,
              help="Optional JSON file for (wall-clock) replay statistics.")
@click.pass_context
def replay(ctx, connect, frames_dir, fps, regions_path, out_dir, stats_out):
    """Stream frames from disk to a running server at a fixed rate."""
    host, _, port = connect.rpartition(":")
    frames = [keypoint_io.read_frame(p) for p in keypoint_io.list_frame_files(frames_dir)]
    if not frames:
        raise ValidationError(f"no frame files in {frames_dir}")
    records = None
    if regions_path:
        provider = mitigate.RegionProvider.from_file(regions_path)
        records = {f.frame_id: provider.get(f.frame_id) for f in frames
                   if provider.get(f.frame_id) is not None}
    result = stream_server.replay((host, int(port)), frames, fps, records,
                                  collect_replies=True)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for reply in result.replies:
            keypoint_io.write_frame(reply, out / f"frame_{reply.frame_id:06d}.png")
    stats = {"sent": result.sent, "received": result.received, "lost": result.lost,
             "in_fps": result.in_fps, "out_fps": result.out_fps}
    if stats_out:
        Path(stats_out).write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    _echo_result(ctx, stats,
                 f"sent {result.sent}, received {result.received} "
                 f"(lost {result.lost}), in {result.in_fps:.1f} fps, "
                 f"out {result.out_fps:.1f} fps")


@cli.command()
@click.option("--spec", "spec_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON array of walker specs.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Output directory.")
@click.option("--duration", type=float, default=5.0, show_default=True)
@click.option("--fps", type=float, default=30.0, show_default=True)
@click.option("--render/--no-render", default=False, show_default=True,
              help="Also render PNG frames and a region file per walker.")
@click.option("--canvas", default="320x240", show_default=True)
@seed_option
@click.pass_context
def synth(ctx, spec_path, out_dir, duration, fps, render, canvas, seed):
    """Generate synthetic walker corpora with analytic ground truth."""
    specs = synthlab.load_walker_specs(spec_path)
    try:
        width, height = (int(v) for v in canvas.lower().split("x"))
    except ValueError:
        raise ValidationError(f"--canvas must look like 320x240, got {canvas!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    style = synthlab.MarkerStyle()
    written = []
    for i, spec in enumerate(specs):
        seq, truth = synthlab.generate_walker(
            spec, duration, fps, seed=seed + i,
            start_x=synthlab.fit_start_x(spec, duration, width, style.radius))
        base = out / spec.subject_id
        keypoint_io.write_keypoint_sequence(seq, base.with_suffix(".jsonl"))
        truth_obj = {
            "subject_id": spec.subject_id,
            "direction": truth.direction.value,
            "features": truth.features,
            "events": [
                {"time_s": e.time_s, "frame_index": e.frame_index,
                 "leg": e.leg.value, "kind": e.kind.value}
                for e in truth.events
            ],
        }
        base.with_suffix(".truth.json").write_text(
            json.dumps(truth_obj, indent=2, sort_keys=True) + "\n")
        if render:
            frames, records = synthlab.render_frames(seq, (width, height), style)
            frame_dir = out / f"{spec.subject_id}_frames"
            frame_dir.mkdir(exist_ok=True)
            for fr in frames:
                keypoint_io.write_frame(fr, frame_dir / f"frame_{fr.frame_id:06d}.png")
            mitigate.write_region_file(records, out / f"{spec.subject_id}_regions.jsonl")
        written.append(spec.subject_id)
    _echo_result(ctx, {"subjects": written, "out": str(out)},
                 f"generated {len(written)} walkers in {out}")


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    json_errors = "--json" in (argv if argv is not None else sys.argv[1:])
    try:
        cli.main(args=argv, standalone_mode=False, obj={})
        return 0
    except click.exceptions.Exit as exc:
        return 0 if exc.exit_code == 0 else 1
    except click.UsageError as exc:
        _print_error("usage", exc.format_message(), json_errors)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return 1
    except GaitGuardError as exc:
        _print_error(exc.code, str(exc), json_errors)
        return 1
    except OSError as exc:
        _print_error("io", str(exc), json_errors)
        return 2
    except KeyboardInterrupt:
        return 130


def _print_error(code: str, detail: str, as_json: bool):
    if as_json:
        click.echo(json.dumps({"error": code, "detail": detail}), err=True)
    else:
        click.echo(f"error ({code}): {detail}", err=True)


if __name__ == "__main__":
    sys.exit(main())
