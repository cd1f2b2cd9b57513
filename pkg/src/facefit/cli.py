"""Command-line pipeline: fit, reenact, render, eval, synth-fixture.

Every command is a pure function of its inputs plus configuration: repeated
invocations produce bitwise-identical artifacts (no timestamps, no ambient
randomness). Settings resolve as flags > environment > config file > defaults;
the config file is JSON. Exit codes: 1 configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import click
import numpy as np

from .conditioning import load_gaze_frames, render_conditioning_sequence, save_gaze_frames
from .errors import (
    ConfigError,
    DegenerateModelError,
    DegeneratePoseError,
    FaceFitError,
    FormatError,
    ValidationError,
)
from .fitting import (
    FitConfig,
    fit_video,
    load_landmarks,
    load_trajectory,
    save_landmarks_csv,
    save_trajectory,
)
from .model import load_model, save_model
from .reenactment import adapt_gaze, compose_hybrid, sequence_error
from .synthetic import make_synthetic_model, make_synthetic_performance

ENV_OUTPUT_DIR = "FACEFIT_OUTPUT_DIR"
ENV_WORKERS = "FACEFIT_WORKERS"

_CONFIG_KEYS = {
    "model",
    "landmarks",
    "gaze",
    "trajectory",
    "output",
    "output_dir",
    "report",
    "width",
    "height",
    "workers",
    "recenter_translation",
    "emit_heatmaps",
    "landmark_weight",
    "prior_weight",
    "smoothness_weight",
    "bound_sigmas",
    "max_iterations",
    "grad_tolerance",
    "pose_alternations",
}


def _load_config(path):
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError("config file not found: %s" % path) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config file %s is not valid JSON: %s" % (path, exc)) from exc
    if not isinstance(payload, dict):
        raise ConfigError("config file %s: expected a JSON object" % path)
    unknown = sorted(set(payload) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError("config file %s: unknown keys %s" % (path, ", ".join(unknown)))
    return payload


def _resolve(flag, config, key, env=None, default=None):
    if flag is not None:
        return flag
    if env is not None:
        value = os.environ.get(env)
        if value:
            return value
    if key in config and config[key] is not None:
        return config[key]
    return default


def _require(value, name):
    if value is None:
        raise ConfigError("%s: required (flag or config key)" % name)
    return value


def _require_file(path, name):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError("%s: file not found: %s" % (name, path))
    return path


def _int_setting(value, name, minimum=None):
    try:
        out = int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError("%s: expected an integer, got %r" % (name, value)) from exc
    if float(out) != float(value):
        raise ConfigError("%s: expected an integer, got %r" % (name, value))
    if minimum is not None and out < minimum:
        raise ConfigError("%s: must be >= %d, got %d" % (name, minimum, out))
    return out


def _image_size(width, height):
    width = _int_setting(width, "width", minimum=16)
    height = _int_setting(height, "height", minimum=16)
    return width, height


def _fit_config(config, **flags):
    kwargs = {}
    for key in (
        "landmark_weight",
        "prior_weight",
        "smoothness_weight",
        "bound_sigmas",
        "max_iterations",
        "grad_tolerance",
        "pose_alternations",
    ):
        value = _resolve(flags.get(key), config, key)
        if value is not None:
            kwargs[key] = value
    return FitConfig(**kwargs).validate()


def _run(body):
    try:
        body()
    except ConfigError as exc:
        click.echo("config error: %s" % exc, err=True)
        raise SystemExit(1)
    except (DegenerateModelError, DegeneratePoseError, FloatingPointError, np.linalg.LinAlgError) as exc:
        click.echo("numerical error: %s" % exc, err=True)
        raise SystemExit(3)
    except (FormatError, ValidationError, FaceFitError, OSError) as exc:
        click.echo("data error: %s" % exc, err=True)
        raise SystemExit(2)


def _write_json(payload, path):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


@click.group()
def main():
    """Facial performance fitting, reenactment, and conditioning rendering."""


@main.command("fit")
@click.option("--config", "config_path", default=None, help="JSON config file.")
@click.option("--model", "model_path", default=None, help="Model container (.h2hm).")
@click.option("--landmarks", "landmarks_path", default=None, help="Landmark sequence (.csv or .json).")
@click.option("--output", "output_path", default=None, help="Trajectory output (.h2ht).")
@click.option("--report", "report_path", default=None, help="Fit report JSON output.")
@click.option("--landmark-weight", type=float, default=None)
@click.option("--prior-weight", type=float, default=None)
@click.option("--smoothness-weight", type=float, default=None)
@click.option("--bound-sigmas", type=float, default=None)
@click.option("--max-iterations", type=int, default=None)
@click.option("--grad-tolerance", type=float, default=None)
@click.option("--pose-alternations", type=int, default=None)
def cmd_fit(config_path, model_path, landmarks_path, output_path, report_path, **weight_flags):
    """Fit identity, expressions, and poses to a landmark sequence."""

    def body():
        config = _load_config(config_path)
        fit_cfg = _fit_config(config, **weight_flags)
        model_file = _require_file(_require(_resolve(model_path, config, "model"), "model"), "model")
        lm_file = _require_file(
            _require(_resolve(landmarks_path, config, "landmarks"), "landmarks"), "landmarks"
        )
        out_file = _require(_resolve(output_path, config, "output"), "output")

        model = load_model(model_file)
        landmarks = load_landmarks(lm_file)
        result = fit_video(model, landmarks, fit_cfg)
        save_trajectory(result.trajectory, out_file)

        report = {
            "frames": result.trajectory.n_frames,
            "converged": result.converged,
            "iterations": result.iterations,
            "mean_reprojection_px": result.mean_reprojection_px,
            "energy": {
                "landmark": result.energy.landmark,
                "prior": result.energy.prior,
                "smoothness": result.energy.smoothness,
                "total": result.energy.total,
            },
        }
        report_file = _resolve(report_path, config, "report")
        if report_file is not None:
            _write_json(report, report_file)
        click.echo(
            "fit: %d frames, mean reprojection %.6f px, %s"
            % (report["frames"], report["mean_reprojection_px"],
               "converged" if report["converged"] else "not converged")
        )

    _run(body)


@main.command("reenact")
@click.option("--config", "config_path", default=None, help="JSON config file.")
@click.option("--source", "source_path", required=True, help="Driving trajectory (.h2ht).")
@click.option("--target", "target_path", required=True, help="Identity-providing trajectory (.h2ht).")
@click.option("--output", "output_path", required=True, help="Hybrid trajectory output (.h2ht).")
@click.option("--model", "model_path", default=None, help="Model container; needed for gaze adaptation.")
@click.option("--gaze", "gaze_path", default=None, help="Source gaze frames (.json) to re-anchor.")
@click.option("--adapted-gaze", "adapted_gaze_path", default=None,
              help="Output for re-anchored gaze frames (defaults next to --output).")
@click.option("--recenter/--no-recenter", "recenter", default=None,
              help="Recenter source translations onto the mean target position (default on).")
def cmd_reenact(config_path, source_path, target_path, output_path, model_path, gaze_path,
                adapted_gaze_path, recenter):
    """Compose a hybrid trajectory: source performance on target identity."""

    def body():
        config = _load_config(config_path)
        recenter_flag = _resolve(recenter, config, "recenter_translation", default=True)
        source = load_trajectory(_require_file(source_path, "source"))
        target = load_trajectory(_require_file(target_path, "target"))
        hybrid = compose_hybrid(source, target, recenter_translation=bool(recenter_flag))
        save_trajectory(hybrid, output_path)

        provenance = {
            "source": str(source_path),
            "target": str(target_path),
            "frames": hybrid.n_frames,
            "recenter_translation": bool(recenter_flag),
            "scale": float(hybrid.cameras[0].scale),
        }
        gaze_file = _resolve(gaze_path, config, "gaze")
        if gaze_file is not None:
            model_file = _require_file(
                _require(_resolve(model_path, config, "model"), "model"), "model"
            )
            gaze = load_gaze_frames(_require_file(gaze_file, "gaze"))
            adapted = adapt_gaze(gaze, source, hybrid, load_model(model_file))
            out = adapted_gaze_path or str(Path(output_path).with_suffix("")) + "_gaze.json"
            save_gaze_frames(adapted, out)
            provenance["adapted_gaze"] = str(out)
        _write_json(provenance, str(output_path) + ".provenance.json")
        click.echo("reenact: %d frames -> %s" % (hybrid.n_frames, output_path))

    _run(body)


@main.command("render")
@click.option("--config", "config_path", default=None, help="JSON config file.")
@click.option("--model", "model_path", default=None, help="Model container (.h2hm).")
@click.option("--trajectory", "trajectory_path", default=None, help="Trajectory to render (.h2ht).")
@click.option("--gaze", "gaze_path", default=None, help="Gaze frames (.json) to render alongside.")
@click.option("--out-dir", "out_dir", default=None, help="Output directory for PNG frames.")
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--workers", type=int, default=None, help="Render worker threads.")
def cmd_render(config_path, model_path, trajectory_path, gaze_path, out_dir, width, height, workers):
    """Render conditioning-image pairs for a trajectory."""

    def body():
        config = _load_config(config_path)
        model_file = _require_file(_require(_resolve(model_path, config, "model"), "model"), "model")
        traj_file = _require_file(
            _require(_resolve(trajectory_path, config, "trajectory"), "trajectory"), "trajectory"
        )
        out = _require(_resolve(out_dir, config, "output_dir", env=ENV_OUTPUT_DIR), "out-dir")
        w, h = _image_size(
            _resolve(width, config, "width", default=256),
            _resolve(height, config, "height", default=256),
        )
        n_workers = _int_setting(
            _resolve(workers, config, "workers", env=ENV_WORKERS, default=1), "workers", minimum=1
        )

        gaze_file = _resolve(gaze_path, config, "gaze")
        gaze = load_gaze_frames(_require_file(gaze_file, "gaze")) if gaze_file is not None else None
        model = load_model(model_file)
        trajectory = load_trajectory(traj_file)
        manifest = render_conditioning_sequence(
            model, trajectory, gaze, width=w, height=h, out_dir=out, workers=n_workers
        )
        click.echo("render: %d frames -> %s" % (manifest["frames"], out))

    _run(body)


@main.command("eval")
@click.option("--dir-a", "dir_a", required=True, help="First rendered sequence directory.")
@click.option("--dir-b", "dir_b", required=True, help="Second rendered sequence directory.")
@click.option("--metrics", "metrics_path", default=None, help="Metrics JSON output.")
@click.option("--emit-heatmaps", is_flag=True, default=False, help="Write per-frame error heat maps.")
@click.option("--heatmap-dir", "heatmap_dir", default=None,
              help="Heat map directory (defaults to <dir-a>_heatmaps).")
def cmd_eval(dir_a, dir_b, metrics_path, emit_heatmaps, heatmap_dir):
    """Compare two rendered sequences with the per-pixel color error."""

    def body():
        for name, d in (("dir-a", dir_a), ("dir-b", dir_b)):
            if not Path(d).is_dir():
                raise FileNotFoundError("%s: directory not found: %s" % (name, d))
        heat_out = None
        if emit_heatmaps:
            heat_out = heatmap_dir or (str(Path(dir_a)).rstrip("/") + "_heatmaps")
        result = sequence_error(dir_a, dir_b, heatmap_dir=heat_out)
        payload = {"perFrame": result.per_frame, "overall": result.overall}
        if heat_out is not None:
            payload["heatmaps"] = ["heat_%06d.png" % i for i in range(len(result.per_frame))]
            payload["heatmapDir"] = str(heat_out)
        if metrics_path is not None:
            _write_json(payload, metrics_path)
        click.echo("eval: %d frames, overall error %.6f" % (len(result.per_frame), result.overall))

    _run(body)


@main.command("synth-fixture")
@click.option("--out-dir", "out_dir", default=None, help="Fixture output directory.")
@click.option("--frames", type=int, default=50, show_default=True)
@click.option("--vertices", type=int, default=500, show_default=True)
@click.option("--n-id", type=int, default=20, show_default=True)
@click.option("--n-exp", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--noise", type=float, default=0.0, show_default=True,
              help="Landmark noise sigma in pixels.")
@click.option("--width", type=int, default=256, show_default=True)
@click.option("--height", type=int, default=256, show_default=True)
def cmd_synth_fixture(out_dir, frames, vertices, n_id, n_exp, seed, noise, width, height):
    """Generate a synthetic model, landmark sequence, gaze frames, and ground truth."""

    def body():
        out = _require(_resolve(out_dir, {}, "output_dir", env=ENV_OUTPUT_DIR), "out-dir")
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        if frames < 1:
            raise ConfigError("frames: must be >= 1")
        model = make_synthetic_model(n_vertices=vertices, n_id=n_id, n_exp=n_exp, seed=seed)
        trajectory, landmarks, gaze = make_synthetic_performance(
            model, n_frames=frames, seed=seed + 1, noise_px=noise, image_size=(width, height)
        )
        save_model(model, out / "model.h2hm")
        save_landmarks_csv(landmarks, out / "landmarks.csv")
        save_gaze_frames(gaze, out / "gaze.json")
        save_trajectory(trajectory, out / "truth.h2ht")
        _write_json(
            {
                "model": "model.h2hm",
                "landmarks": "landmarks.csv",
                "gaze": "gaze.json",
                "truth": "truth.h2ht",
                "frames": frames,
                "vertices": vertices,
                "n_id": n_id,
                "n_exp": n_exp,
                "seed": seed,
                "noise_px": noise,
                "width": width,
                "height": height,
            },
            out / "fixture.json",
        )
        click.echo("synth-fixture: %d frames -> %s" % (frames, out))

    _run(body)


if __name__ == "__main__":
    main()
