"""Command-line front end for the attention-chain toolkit.

Subcommands cover the full pipeline on directory archives of attention
tensors: ``synth`` fabricates a scene and writes such an archive (with an
analytic ground-truth sidecar), ``animate`` turns an archive into an
animated OBJ sequence plus a stage timing report, ``track2d`` /
``track4d`` / ``pose`` read the archive's image-patch tensors to produce
pixel tracks, camera-space 3D tracks and per-frame camera poses,
``rollout`` runs long windowed sequences with optional attention
reinforcement, and ``eval`` scores exported tracks or OBJ sequences
against ground truth.

Every command resolves its settings from built-in defaults, then an
optional YAML config file (``--config``), then explicit flags — and
prints the resolved values line by line before doing any work, so a run
can be reproduced from its log alone. Exit codes: 0 on success, 1 when
input violates a contract, 2 when a computation reaches a numerically
hopeless state.
"""

from __future__ import annotations

import contextlib
import dataclasses
from pathlib import Path

import click
import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .animation import AnimationConfig, animate_archive, load_scene
from .archive import (
    read_archive,
    read_obj_mesh,
    read_tracks,
    write_archive,
    write_obj_mesh,
    write_poses,
    write_tracks,
)
from .chain import ChainConfig
from .errors import NumericalError, ValidationError
from .geom import RowStochasticMap, SurfaceSampleSet
from .metrics import (
    chamfer4d,
    chamfer_motion,
    chamfer_per_frame,
    format_geometry_report,
    normal_consistency,
)
from .pnp import CameraIntrinsics, CameraPose, PnPConfig, ransac_pnp
from .rollout import (
    BackboneInterface,
    DenoiseStepTrace,
    WindowConfig,
    ar_rollout,
    format_window_log,
    reinforce,
)
from .synth import (
    NoiseSchedule,
    SyntheticBackbone,
    emit_attention,
    emit_patch_attention,
    generate_scene,
    scene_kinds,
)
from .trackeval import (
    apd3d_per_threshold,
    format_report_2d,
    format_report_3d,
    score_tracks_2d,
)
from .tracking import (
    PatchGrid,
    bridge_foreground,
    collect_pnp_matches,
    lift_pixel,
    track2d,
    track4d,
)

__all__ = ["cli", "main", "ArchiveBackbone", "format_timing_report"]


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

_CHAIN_DEFAULTS = dataclasses.asdict(ChainConfig())
_ANIMATE_DEFAULTS = dataclasses.asdict(AnimationConfig())
_POSE_DEFAULTS = dataclasses.asdict(PnPConfig())
_WINDOW_DEFAULTS = dataclasses.asdict(WindowConfig())
_SYNTH_DEFAULTS = {
    "tokens": 128,
    "vertex_budget": 800,
    "bundle": 16,
    "sparse": False,
}

# named size presets: "ci" keeps every stage in test-suite territory,
# "paper-scale" matches the large benchmark profile (sparse rows, no
# location bundling, 20k vertices)
_PROFILES = {
    "ci": {
        "synth": {"tokens": 128, "vertex_budget": 800,
                  "bundle": 16, "sparse": False},
        "animate": {"landmark_count": 120},
    },
    "paper-scale": {
        "synth": {"tokens": 2048, "vertex_budget": 20000,
                  "bundle": 1, "sparse": True},
        "animate": {"landmark_count": 1000},
    },
}


@contextlib.contextmanager
def _exit_codes():
    """Map the package's two failure families onto process exit codes."""
    try:
        yield
    except ValidationError as exc:
        click.echo(f"validation error: {exc}", err=True)
        raise SystemExit(1) from exc
    except NumericalError as exc:
        click.echo(f"numerical error: {exc}", err=True)
        raise SystemExit(2) from exc


@contextlib.contextmanager
def _thread_cap(threads):
    if threads is None:
        yield
        return
    if int(threads) < 1:
        raise ValidationError(f"--threads must be >= 1, got {threads}")
    with threadpool_limits(limits=int(threads)):
        yield


def _load_config(path):
    if path is None:
        return {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ValidationError(f"config file {path} does not parse: {exc}") \
            from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationError(
            f"config file {path} must hold a mapping of sections")
    return data


def _resolve(section, defaults, file_cfg, profile_values=None, **overrides):
    """defaults < profile preset < config file < explicit flags."""
    out = dict(defaults)
    out.update(profile_values or {})
    extra = file_cfg.get(section) or {}
    if not isinstance(extra, dict):
        raise ValidationError(f"config section {section!r} must be a mapping")
    for key, value in extra.items():
        if key not in out:
            raise ValidationError(f"unknown config key {section}.{key}")
        out[key] = value
    for key, value in overrides.items():
        if value is not None:
            out[key] = value
    return out


def _announce(sections):
    for section in sections:
        values = sections[section]
        for key in sorted(values):
            click.echo(f"config {section}.{key} = {values[key]}")


def _profile_section(profile, section):
    if profile is None:
        return {}
    return _PROFILES[profile].get(section, {})


def _read_query_lines(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = []
    for lineno, raw in enumerate(lines, start=1):
        stripped = raw.split("#", 1)[0].strip()
        if stripped:
            rows.append((lineno, stripped.split()))
    if not rows:
        raise ValidationError(f"{path}: no queries found")
    return rows


def _parse_number(path, lineno, token, kind):
    try:
        return int(token) if kind is int else float(token)
    except ValueError:
        raise ValidationError(
            f"{path}:{lineno}: {token!r} is not a valid "
            f"{'integer' if kind is int else 'number'}") from None


def _vertex_queries(path):
    out = []
    for lineno, tokens in _read_query_lines(path):
        if len(tokens) != 1:
            raise ValidationError(
                f"{path}:{lineno}: expected one vertex index per line")
        out.append(_parse_number(path, lineno, tokens[0], int))
    return np.asarray(out, dtype=np.int64)


def _pixel_queries(path):
    out = []
    for lineno, tokens in _read_query_lines(path):
        if len(tokens) != 2:
            raise ValidationError(
                f"{path}:{lineno}: expected an `x y` pixel pair per line")
        out.append([_parse_number(path, lineno, t, float) for t in tokens])
    return np.asarray(out, dtype=float)


def _patch_queries(path, grid):
    out = []
    for lineno, tokens in _read_query_lines(path):
        if len(tokens) == 1:
            out.append(_parse_number(path, lineno, tokens[0], int))
        elif len(tokens) == 2:
            pixel = [_parse_number(path, lineno, t, float) for t in tokens]
            out.append(grid.patch_at(pixel))
        else:
            raise ValidationError(
                f"{path}:{lineno}: expected a patch index or an "
                f"`x y` pixel pair")
    return out


def _parse_patch_grid(text):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValidationError(
            f"--patch-grid must look like HxWxP (patch rows x patch "
            f"columns x pixels per patch), got {text!r}")
    try:
        height, width, patch_px = (int(p) for p in parts)
    except ValueError:
        raise ValidationError(
            f"--patch-grid needs three integers, got {text!r}") from None
    return height, width, patch_px


def _camera_from_meta(archive, focal=None):
    cam = (archive.meta or {}).get("camera")
    if not cam:
        raise ValidationError(
            "archive records no camera parameters; write it with the synth "
            "command or supply an archive whose meta block carries a "
            "'camera' entry")
    pose = CameraPose(np.asarray(cam["rotation"], dtype=float),
                      np.asarray(cam["translation"], dtype=float))
    intrinsics = CameraIntrinsics(
        focal=float(focal) if focal is not None else float(cam["focal"]),
        principal=tuple(float(x) for x in cam.get("principal", (0.0, 0.0))),
        width=int(cam.get("width", 512)),
        height=int(cam.get("height", 512)))
    return pose, intrinsics


def _patch_tensors(archive):
    meta = archive.meta or {}
    if "patch_grid" not in meta or "P_anchor" not in archive:
        raise ValidationError(
            "archive carries no image-patch attention; generate it with "
            "`synth --patch-grid HxWxP`")
    height, width, patch_px = (int(x) for x in meta["patch_grid"])
    grid = PatchGrid(height, width, patch_px)
    anchor_rows = RowStochasticMap(archive.f64("P_anchor"))
    frame_rows, foreground = [], []
    for f in range(archive.frames):
        frame_rows.append(
            RowStochasticMap(archive.f64(archive.frame_name("P", f))))
        foreground.append(
            archive.f64(archive.frame_name("FG", f)).astype(bool))
    return grid, anchor_rows, frame_rows, foreground


def _temporal_maps(archive):
    stacked = archive.f64("A_za_zf")
    if stacked.ndim != 3 or stacked.shape[0] != archive.frames:
        raise ValidationError(
            f"temporal attention must be (F, N, N) with F={archive.frames}, "
            f"got {stacked.shape}")
    return [RowStochasticMap(stacked[f]) for f in range(stacked.shape[0])]


def format_timing_report(timings) -> str:
    """Stage timing block: one `<stage> <seconds> s` line per stage."""
    order = ["decode", "fps", "correspondence", "filter_smooth",
             "skinning", "total"]
    lines = ["stage           seconds"]
    for key in order:
        if key in timings:
            lines.append(f"{key:<15s} {timings[key]:9.4f} s")
    for key in sorted(timings):
        if key not in order:
            lines.append(f"{key:<15s} {timings[key]:9.4f} s")
    return "\n".join(lines)


def _load_obj_dir(path):
    files = sorted(Path(path).glob("*.obj"))
    if not files:
        raise ValidationError(f"{path}: no .obj files found")
    return [read_obj_mesh(f) for f in files]


class ArchiveBackbone(BackboneInterface):
    """Replays the recorded attention stack of one archive window.

    Every denoising step returns the same recorded tensors (with the
    reinforcement override applied when one is given). Re-anchoring is
    impossible — a recording carries no tensors for any other anchor — so
    rollouts through this backbone must fit in a single window.
    """

    def __init__(self, archive):
        mesh, anchor, temporal, samples = load_scene(archive)
        self._mesh = mesh
        self._anchor = anchor
        self._temporal = [RowStochasticMap(temporal[f])
                          for f in range(temporal.shape[0])]
        self._samples = list(samples)

    @property
    def n_vertices(self) -> int:
        return self._anchor.rows

    @property
    def frame_count(self) -> int:
        return len(self._temporal)

    def run_step(self, frames, step, override=None) -> DenoiseStepTrace:
        maps, samples = [], []
        for local, frame in enumerate(frames):
            frame = int(frame)
            if not 0 <= frame < len(self._temporal):
                raise ValidationError(
                    f"frame {frame} outside the {len(self._temporal)} "
                    f"recorded frames")
            tmap = self._temporal[frame]
            if override is not None:
                tmap = reinforce(tmap, override.for_frame(local))
            maps.append(tmap)
            recorded = self._samples[frame]
            samples.append(SurfaceSampleSet(
                frame=local, points=recorded.points,
                token_attention=recorded.token_attention))
        return DenoiseStepTrace(step=int(step), frames=tuple(frames),
                                anchor_map=self._anchor,
                                temporal=tuple(maps),
                                samples=tuple(samples))

    def re_anchor(self, frame):
        raise ValidationError(
            "a recorded archive cannot re-anchor; pick a window that covers "
            "the whole rollout")


# ---------------------------------------------------------------------------
# command group
# ---------------------------------------------------------------------------

@click.group(name="chain4d")
def cli():
    """Attention-chain correspondence, animation, tracking and camera
    recovery on directory archives of attention tensors."""


_config_opt = click.option(
    "--config", type=click.Path(exists=True, dir_okay=False), default=None,
    help="YAML file of config sections overriding built-in defaults.")
_threads_opt = click.option(
    "--threads", type=int, default=None,
    help="Cap the numeric library worker pool at this many threads.")
_profile_opt = click.option(
    "--profile", type=click.Choice(sorted(_PROFILES)), default=None,
    help="Named size preset filling flags that were not given explicitly.")


# -- synth ------------------------------------------------------------------

@cli.command()
@click.option("--kind", type=click.Choice(scene_kinds()),
              default="rigid-orbit", show_default=True,
              help="Deformation program driving the scene.")
@click.option("--frames", type=int, default=16, show_default=True)
@click.option("--tokens", type=int, default=None,
              help="Surface token count N (default from profile).")
@click.option("--vertex-budget", type=int, default=None,
              help="Approximate mesh vertex count (default from profile).")
@click.option("--magnitude", type=float, default=1.0, show_default=True,
              help="Deformation amplitude scale.")
@click.option("--noise", type=float, default=0.0, show_default=True,
              help="Attention corruption level in [0, 1].")
@click.option("--steps", type=int, default=1, show_default=True,
              help="Denoising steps to emit per frame.")
@click.option("--bundle", type=int, default=None,
              help="Copies of each candidate location (default from "
                   "profile).")
@click.option("--sparse/--dense", "sparse", default=None,
              help="Truncate attention rows to the sites carrying mass.")
@click.option("--patch-grid", type=str, default=None,
              help="Also emit image-patch attention on an HxWxP grid.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True,
              help="Archive directory to write.")
@_config_opt
@_profile_opt
@_threads_opt
def synth(kind, frames, tokens, vertex_budget, magnitude, noise, steps,
          bundle, sparse, patch_grid, seed, out, config, profile, threads):
    """Generate a synthetic scene archive with a ground-truth sidecar."""
    with _exit_codes(), _thread_cap(threads):
        file_cfg = _load_config(config)
        sizes = _resolve("synth", _SYNTH_DEFAULTS, file_cfg,
                         _profile_section(profile, "synth"),
                         tokens=tokens, vertex_budget=vertex_budget,
                         bundle=bundle, sparse=sparse)
        settings = dict(sizes)
        settings.update(kind=kind, frames=frames, magnitude=magnitude,
                        noise=noise, steps=steps, seed=seed,
                        patch_grid=patch_grid)
        _announce({"synth": settings})

        scene = generate_scene(kind, frames, seed,
                               vertex_budget=int(sizes["vertex_budget"]),
                               magnitude=magnitude)
        _, archive = emit_attention(
            scene, int(sizes["tokens"]), noise, steps=steps,
            bundle=int(sizes["bundle"]), sparse=bool(sizes["sparse"]),
            with_archive=True)
        cam, intr = scene.camera, scene.intrinsics
        archive.meta["camera"] = {
            "rotation": [[float(x) for x in row] for row in cam.rotation],
            "translation": [float(x) for x in cam.translation],
            "focal": float(intr.focal),
            "principal": [float(x) for x in intr.principal],
            "width": int(intr.width),
            "height": int(intr.height),
        }
        if patch_grid is not None:
            height, width, patch_px = _parse_patch_grid(patch_grid)
            grid = PatchGrid(height, width, patch_px)
            patches = emit_patch_attention(scene, int(sizes["tokens"]), grid)
            archive.add("P_anchor", np.asarray(patches.anchor_rows.data),
                        row_stochastic=True)
            for f in range(scene.frame_count):
                archive.add(archive.frame_name("P", f),
                            np.asarray(patches.frame_rows[f].data),
                            row_stochastic=True)
                archive.add(archive.frame_name("FG", f),
                            np.asarray(patches.foreground[f],
                                       dtype=np.int32))
            archive.meta["patch_grid"] = [height, width, patch_px]
        write_archive(archive, out)
        click.echo(
            f"wrote archive {out}: kind={kind} frames={scene.frame_count} "
            f"tokens={int(sizes['tokens'])} "
            f"vertices={scene.mesh.vertices.shape[0]}")


# -- animate ----------------------------------------------------------------

def _animate_options(fn):
    for opt in reversed([
        click.option("--landmarks", type=int, default=None,
                     help="Landmark count driving the skinning."),
        click.option("--alpha", type=float, default=None,
                     help="Curvature boost for landmark sampling."),
        click.option("--sigma-landmark", type=float, default=None,
                     help="Temporal smoothing width for landmark tracks."),
        click.option("--sigma-final", type=float, default=None,
                     help="Temporal smoothing width for final vertex "
                          "trajectories."),
        click.option("--knn", type=int, default=None,
                     help="Nearest landmarks per vertex (graph distance)."),
        click.option("--tau", type=float, default=None,
                     help="Blend softmax temperature."),
        click.option("--topk", type=int, default=None,
                     help="Neighborhood size of the correspondence blend."),
    ]):
        fn = opt(fn)
    return fn


def _resolve_animate(file_cfg, profile, landmarks, alpha, sigma_landmark,
                     sigma_final, knn, tau, topk):
    anim_vals = _resolve(
        "animate", _ANIMATE_DEFAULTS, file_cfg,
        _profile_section(profile, "animate"),
        landmark_count=landmarks, curvature_boost=alpha,
        sigma_landmark=sigma_landmark, sigma_final=sigma_final, k_nn=knn)
    chain_vals = _resolve("chain", _CHAIN_DEFAULTS, file_cfg,
                          tau=tau, k=topk)
    return anim_vals, chain_vals


@cli.command()
@click.option("--archive", "archive_path",
              type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(), required=True,
              help="Directory for the per-frame OBJ sequence.")
@click.option("--step", type=int, default=None,
              help="Read the temporal stack of this denoising step instead "
                   "of the default one.")
@_animate_options
@_config_opt
@_profile_opt
@_threads_opt
def animate(archive_path, out, step, landmarks, alpha, sigma_landmark,
            sigma_final, knn, tau, topk, config, profile, threads):
    """Animate the anchor mesh through every frame of an archive."""
    with _exit_codes(), _thread_cap(threads):
        file_cfg = _load_config(config)
        anim_vals, chain_vals = _resolve_animate(
            file_cfg, profile, landmarks, alpha, sigma_landmark,
            sigma_final, knn, tau, topk)
        _announce({"animate": anim_vals, "chain": chain_vals})

        archive = read_archive(archive_path)
        result = animate_archive(archive, AnimationConfig(**anim_vals),
                                 ChainConfig(**chain_vals), step=step)
        outdir = Path(out)
        outdir.mkdir(parents=True, exist_ok=True)
        for f, mesh in enumerate(result.meshes):
            write_obj_mesh(mesh, outdir / f"frame_{f:04d}.obj")
        click.echo(format_timing_report(result.timings))
        click.echo(f"wrote {len(result.meshes)} meshes under {outdir}")


# -- track2d ----------------------------------------------------------------

@cli.command("track2d")
@click.option("--archive", "archive_path",
              type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--queries", "queries_path",
              type=click.Path(exists=True, dir_okay=False), required=True,
              help="One query per line: a patch index or an `x y` pixel "
                   "pair.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--refine/--no-refine", default=True, show_default=True,
              help="Blend the 3x3 block around each winning patch into a "
                   "sub-patch pixel position.")
@_config_opt
@_threads_opt
def track2d_cmd(archive_path, queries_path, out, refine, config, threads):
    """Track image patches across frames; export pixel tracks."""
    with _exit_codes(), _thread_cap(threads):
        _load_config(config)
        _announce({"track2d": {"refine": refine}})
        archive = read_archive(archive_path)
        grid, anchor_rows, frame_rows, _ = _patch_tensors(archive)
        temporal = _temporal_maps(archive)
        queries = _patch_queries(queries_path, grid)
        tracks = [track2d(q, anchor_rows, temporal, frame_rows,
                          grid=grid, refine=refine) for q in queries]
        positions = np.stack([t.pixels for t in tracks])
        confidence = np.stack([t.confidences for t in tracks])
        write_tracks(out, queries, positions, confidence, units="pixels")
        click.echo(f"tracked {len(queries)} queries over "
                   f"{len(temporal)} frames -> {out}")


# -- track4d ----------------------------------------------------------------

@cli.command("track4d")
@click.option("--archive", "archive_path",
              type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--queries", "queries_path",
              type=click.Path(exists=True, dir_okay=False), required=True,
              help="One `x y` pixel pair per line, on the anchor frame.")
@click.option("--out", type=click.Path(), required=True)
@click.option("--focal", type=float, default=None,
              help="Override the archive's recorded focal length.")
@_animate_options
@_config_opt
@_profile_opt
@_threads_opt
def track4d_cmd(archive_path, queries_path, out, focal, landmarks, alpha,
                sigma_landmark, sigma_final, knn, tau, topk, config,
                profile, threads):
    """Lift anchor-frame pixels onto the surface and export their 3D
    trajectories in anchor-camera coordinates."""
    with _exit_codes(), _thread_cap(threads):
        file_cfg = _load_config(config)
        anim_vals, chain_vals = _resolve_animate(
            file_cfg, profile, landmarks, alpha, sigma_landmark,
            sigma_final, knn, tau, topk)
        _announce({"animate": anim_vals, "chain": chain_vals})

        archive = read_archive(archive_path)
        pose, intrinsics = _camera_from_meta(archive, focal)
        pixels = _pixel_queries(queries_path)
        result = animate_archive(archive, AnimationConfig(**anim_vals),
                                 ChainConfig(**chain_vals))
        mesh = archive.anchor_mesh()
        anchors = [lift_pixel(px, pose, intrinsics, mesh) for px in pixels]
        tracks = [track4d(a, result.meshes, pose) for a in anchors]
        positions = np.stack([t.points for t in tracks])
        visible = np.stack([t.visible for t in tracks])
        confidence = np.ones(positions.shape[:2])
        write_tracks(out, list(range(len(tracks))), positions, confidence,
                     visible=visible, units="camera")
        click.echo(f"lifted {len(tracks)} pixels and tracked them over "
                   f"{positions.shape[1]} frames -> {out}")


# -- pose -------------------------------------------------------------------

@cli.command()
@click.option("--archive", "archive_path",
              type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--focal", type=float, default=None,
              help="Override the archive's recorded focal length.")
@click.option("--ransac-iters", type=int, default=None,
              help="Robust estimation iteration budget.")
@click.option("--inlier-px", type=float, default=None,
              help="Inlier reprojection threshold in pixels.")
@click.option("--seed", type=int, default=None,
              help="Seed of the robust estimator's sampling.")
@_config_opt
@_threads_opt
def pose(archive_path, out, focal, ransac_iters, inlier_px, seed, config,
         threads):
    """Estimate a robust camera pose for every frame of an archive."""
    with _exit_codes(), _thread_cap(threads):
        file_cfg = _load_config(config)
        pose_vals = _resolve("pose", _POSE_DEFAULTS, file_cfg,
                             iterations=ransac_iters,
                             threshold_px=inlier_px, seed=seed)
        _announce({"pose": pose_vals})

        archive = read_archive(archive_path)
        _, intrinsics = _camera_from_meta(archive, focal)
        grid, _, frame_rows, foreground = _patch_tensors(archive)
        cfg = PnPConfig(**pose_vals)
        rotations = np.zeros((archive.frames, 3, 3))
        translations = np.zeros((archive.frames, 3))
        extras = []
        for f in range(archive.frames):
            sample_rows = RowStochasticMap(
                archive.f64(archive.frame_name("B", f)))
            sample_points = archive.f64(archive.frame_name("S", f))
            bridges = bridge_foreground(frame_rows[f], sample_rows,
                                        foreground[f])
            matches = collect_pnp_matches(grid, bridges, sample_points)
            est, _, info = ransac_pnp(matches.pixels, matches.points,
                                      intrinsics, cfg)
            rotations[f] = est.rotation
            translations[f] = est.translation
            extras.append({"inliers": float(info["inliers"]),
                           "matches": float(info["matches"]),
                           "rmse_px": float(info["rmse_px"])})
        write_poses(out, rotations, translations, extras)
        click.echo(f"estimated {archive.frames} poses -> {out}")


# -- rollout ----------------------------------------------------------------

@cli.command()
@click.option("--archive", "archive_path",
              type=click.Path(exists=True, file_okay=False), default=None,
              help="Replay a recorded archive (single-window rollouts "
                   "only).")
@click.option("--kind", type=click.Choice(scene_kinds()), default=None,
              help="Drive the rollout from a synthetic scene instead of an "
                   "archive.")
@click.option("--total", type=int, required=True,
              help="Total rollout frames T.")
@click.option("--window", type=int, default=16, show_default=True)
@click.option("--steps", type=int, default=None,
              help="Denoising steps per window.")
@click.option("--reinforce-after", type=int, default=None,
              help="Step whose correspondences seed the reinforcement.")
@click.option("--reinforce/--no-reinforce", "reinforce_flag", default=None,
              help="Inject traced attention pairs into later steps.")
@click.option("--ping-pong", is_flag=True, default=False,
              help="Fold the window's frames back and forth instead of "
                   "advancing monotonically.")
@click.option("--tokens", type=int, default=None)
@click.option("--vertex-budget", type=int, default=None)
@click.option("--bundle", type=int, default=None)
@click.option("--sparse/--dense", "sparse", default=None)
@click.option("--magnitude", type=float, default=1.0, show_default=True)
@click.option("--noise", type=float, default=0.0, show_default=True,
              help="Base attention corruption level.")
@click.option("--drift", type=float, default=0.0, show_default=True,
              help="Corruption added per re-anchored window.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--queries", "queries_path",
              type=click.Path(exists=True, dir_okay=False), default=None,
              help="Vertex indices to track (default: every vertex).")
@click.option("--tau", type=float, default=None)
@click.option("--topk", type=int, default=None)
@click.option("--out", type=click.Path(), required=True,
              help="Track export of the stitched trajectories.")
@_config_opt
@_profile_opt
@_threads_opt
def rollout(archive_path, kind, total, window, steps, reinforce_after,
            reinforce_flag, ping_pong, tokens, vertex_budget, bundle,
            sparse, magnitude, noise, drift, seed, queries_path, tau, topk,
            out, config, profile, threads):
    """Roll out long sequences window by window; print per-window
    diagnostics and export the stitched trajectories."""
    with _exit_codes(), _thread_cap(threads):
        if (archive_path is None) == (kind is None):
            raise ValidationError(
                "provide exactly one input: --archive or --kind")
        file_cfg = _load_config(config)
        window_vals = _resolve("rollout", _WINDOW_DEFAULTS, file_cfg,
                               steps=steps, reinforce_after=reinforce_after,
                               reinforce=reinforce_flag)
        chain_vals = _resolve("chain", _CHAIN_DEFAULTS, file_cfg,
                              tau=tau, k=topk)
        sections = {"rollout": {**window_vals, "window": window,
                                "total": total, "ping_pong": ping_pong},
                    "chain": chain_vals}

        if kind is not None:
            sizes = _resolve("synth", _SYNTH_DEFAULTS, file_cfg,
                             _profile_section(profile, "synth"),
                             tokens=tokens, vertex_budget=vertex_budget,
                             bundle=bundle, sparse=sparse)
            sections["synth"] = {**sizes, "kind": kind, "noise": noise,
                                 "drift": drift, "seed": seed,
                                 "magnitude": magnitude}
            _announce(sections)
            scene_frames = window if ping_pong else total
            scene = generate_scene(kind, scene_frames, seed,
                                   vertex_budget=int(sizes["vertex_budget"]),
                                   magnitude=magnitude)
            backbone = SyntheticBackbone(
                scene, int(sizes["tokens"]),
                NoiseSchedule(level=noise, drift=drift),
                bundle=int(sizes["bundle"]), sparse=bool(sizes["sparse"]))
            n_vertices = scene.mesh.vertices.shape[0]
        else:
            _announce(sections)
            archive = read_archive(archive_path)
            if total > window:
                raise ValidationError(
                    f"a recorded archive replays exactly one window; "
                    f"{total} total frames exceed the window of {window}")
            backbone = ArchiveBackbone(archive)
            if window > backbone.frame_count:
                raise ValidationError(
                    f"window of {window} frames exceeds the "
                    f"{backbone.frame_count} recorded frames")
            n_vertices = backbone.n_vertices

        queries = None
        if queries_path is not None:
            queries = _vertex_queries(queries_path)
        result = ar_rollout(backbone, total, window=window,
                            ping_pong=ping_pong, queries=queries,
                            cfg=WindowConfig(**window_vals),
                            chain_cfg=ChainConfig(**chain_vals))
        click.echo(format_window_log(result.diagnostics))
        ids = queries if queries is not None \
            else np.arange(n_vertices, dtype=np.int64)
        write_tracks(out, ids, result.trajectories.transpose(1, 0, 2),
                     result.confidence.T, units="object")
        click.echo(f"rolled out {total} frames in "
                   f"{len(result.diagnostics)} windows -> {out}")


# -- eval -------------------------------------------------------------------

@cli.command("eval")
@click.option("--pred", type=click.Path(exists=True), required=True,
              help="Predicted tracks file, or OBJ directory for geometry.")
@click.option("--gt", type=click.Path(exists=True), required=True,
              help="Ground-truth tracks file, or OBJ directory.")
@click.option("--metric-set",
              type=click.Choice(["tracks2d", "tracks3d", "geometry"]),
              required=True)
@click.option("--scale", type=float, default=1.0, show_default=True,
              help="Scene scale multiplying the 3D thresholds.")
@click.option("--samples", type=int, default=2000, show_default=True,
              help="Surface samples per frame for normal agreement.")
@_threads_opt
def eval_cmd(pred, gt, metric_set, scale, samples, threads):
    """Score predictions against ground truth and print the report."""
    with _exit_codes(), _thread_cap(threads):
        _announce({"eval": {"metric_set": metric_set, "scale": scale,
                            "samples": samples}})
        if metric_set == "geometry":
            pred_meshes = _load_obj_dir(pred)
            gt_meshes = _load_obj_dir(gt)
            if len(pred_meshes) != len(gt_meshes):
                raise ValidationError(
                    f"sequences disagree on frame count: "
                    f"{len(pred_meshes)} vs {len(gt_meshes)}")
            pred_seq = [m.vertices for m in pred_meshes]
            gt_seq = [m.vertices for m in gt_meshes]
            per_frame = chamfer_per_frame(pred_seq, gt_seq)
            cd4d = chamfer4d(pred_seq, gt_seq)
            cdm = chamfer_motion(pred_seq, gt_seq)
            normals = float(np.mean([
                normal_consistency(p, g, samples=samples)
                for p, g in zip(pred_meshes, gt_meshes)]))
            click.echo(format_geometry_report(per_frame, cd4d, cdm, normals))
            return

        _, pred_pos, _, pred_vis, _ = read_tracks(pred)
        _, gt_pos, _, gt_vis, _ = read_tracks(gt)
        dims = 2 if metric_set == "tracks2d" else 3
        for name, arr in (("predictions", pred_pos),
                          ("ground truth", gt_pos)):
            if arr.shape[2] != dims:
                raise ValidationError(
                    f"{name} carry {arr.shape[2]} coordinates, but "
                    f"{metric_set} scoring needs {dims}")
        if pred_pos.shape != gt_pos.shape:
            raise ValidationError(
                f"predictions {pred_pos.shape} and ground truth "
                f"{gt_pos.shape} disagree")
        if metric_set == "tracks2d":
            score = score_tracks_2d(pred_pos, pred_vis.astype(bool),
                                    gt_pos, gt_vis.astype(bool))
            click.echo(format_report_2d(score))
        else:
            per = apd3d_per_threshold(pred_pos, gt_pos,
                                      gt_vis.astype(bool), scale=scale)
            click.echo(format_report_3d(per, scale))


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    """Invoke the command group with the documented exit-code contract."""
    try:
        cli.main(args=argv, prog_name="chain4d", standalone_mode=False)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"validation error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 130
    except ValidationError as exc:
        click.echo(f"validation error: {exc}", err=True)
        return 1
    except NumericalError as exc:
        click.echo(f"numerical error: {exc}", err=True)
        return 2
    return 0
