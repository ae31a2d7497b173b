"""Command-line interface.

Exit codes: 0 success, 1 runtime or pipeline failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from slatmorph.assets import AssetDescriptor, build_asset, read_asset, write_asset
from slatmorph.flow_model import AttentionConfig, ModelConfig, SlatDecoder, decode_slat, read_slat
from slatmorph.mesh import obj_text
from slatmorph.metrics import gaps_csv, metrics_json, sequence_metrics
from slatmorph.orientation import estimate_orientation, orientation_stats
from slatmorph.pipeline import MorphConfig, MorphError, Morpher, run_to_dir

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# --- config ------------------------------------------------------------------------

MODES = ("morph", "disentangled", "style")
_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"seed"}
_ATTN_KEYS = {"cross_mode", "self_mode", "beta", "self_stages", "cross_layers"}
_MORPH_KEYS = {"N", "oc_enabled", "ss_alpha_mode", "slat_alpha_mode", "seed"}
_OBJECT_KEYS = {"source", "target", "ss_target", "slat_target", "style"}
CONFIG_KEYS = _MODEL_KEYS | _ATTN_KEYS | _MORPH_KEYS | _OBJECT_KEYS | {"mode", "model_seed"}

_TYPES = {"N": int, "seed": int, "model_seed": int, "beta": (int, float), "oc_enabled": bool,
          "self_stages": list, "cross_layers": list, **{k: int for k in _MODEL_KEYS}}


def load_config(path) -> dict:
    """Read a flat TOML config and check every key and value type."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    for key, value in raw.items():
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}: unknown field {key!r}")
        want = _TYPES.get(key, str)
        # bool is an int subclass; keep the two apart
        if (want is not bool and isinstance(value, bool)) or not isinstance(value, want):
            raise UsageError(f"{path}: field {key!r} has the wrong type ({type(value).__name__})")
    for key in ("source", "target"):
        if key not in raw and not (key == "target" and raw.get("mode") == "style"):
            raise UsageError(f"{path}: missing required field {key!r}")
    raw["_dir"] = path.parent
    return raw


def resolve_object(ref: str, base: Path, model_cfg: ModelConfig):
    """``asset:<descriptor>`` builds a procedural asset in memory; anything
    else is an asset directory or ``.ctok`` path relative to the config."""
    if ref.startswith("asset:"):
        return build_asset(AssetDescriptor.parse(ref[len("asset:"):]), model_cfg)
    p = Path(ref)
    if not p.is_absolute():
        p = base / p
    return read_asset(p)


def build_run(raw: dict, seed_override: int | None = None):
    """Turn a loaded config into a :class:`Morpher` plus its input echo."""
    mode = raw.get("mode", "morph")
    if mode not in MODES:
        raise UsageError(f"field 'mode' must be one of {MODES}, got {mode!r}")
    try:
        model_cfg = ModelConfig(seed=raw.get("model_seed", 0), **{k: raw[k] for k in _MODEL_KEYS if k in raw})
        attn = AttentionConfig(**{k: raw[k] for k in _ATTN_KEYS if k in raw})
        base = raw["_dir"]
        objects = {}
        for key in _OBJECT_KEYS:
            if key in raw:
                try:
                    objects[key] = resolve_object(raw[key], base, model_cfg)
                except FileNotFoundError as exc:
                    raise UsageError(f"field {key!r}: {exc}") from None
        seed = raw.get("seed", 0)
        if os.environ.get("MORPH_SEED"):
            seed = int(os.environ["MORPH_SEED"])
        if seed_override is not None:
            seed = seed_override
        kwargs = {k: raw[k] for k in _MORPH_KEYS - {"seed"} if k in raw}
        for key in ("ss_target", "slat_target"):
            if key in objects:
                kwargs[key] = objects[key].condition
        if mode == "style":
            if "style" not in objects:
                raise UsageError("style mode needs a 'style' field")
            kwargs.update(ss_alpha_mode="frozen_0", slat_alpha_mode="schedule",
                          slat_target=objects["style"].condition)
            objects.setdefault("target", objects["source"])
        cfg = MorphConfig(attn=attn, seed=seed, model=model_cfg, **kwargs)
        if mode == "disentangled":
            frozen = [m != "schedule" for m in (cfg.ss_alpha_mode, cfg.slat_alpha_mode)]
            if sum(frozen) != 1:
                raise UsageError("nothing morphs: both stages are frozen" if all(frozen)
                                 else "disentangled mode needs exactly one frozen stage")
        morpher = Morpher(objects["source"], objects["target"], cfg,
                          slat_noise_from_source=(mode == "style"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    echo = {"mode": mode, **{k: raw[k] for k in sorted(_OBJECT_KEYS) if k in raw}}
    return morpher, echo


# --- frame loading -------------------------------------------------------------------

def frame_files(path) -> list[Path]:
    p = Path(path)
    if (p / "frames").is_dir():
        p = p / "frames"
    if not p.is_dir():
        raise UsageError(f"not a frames directory: {path}")
    return sorted(p.glob("*.slat"))


def _run_dir(path: Path) -> Path:
    return path.parent.parent if path.parent.name == "frames" else path.parent


def decoder_for(slat_path: Path, channels: int) -> SlatDecoder:
    """The decoder of the model that produced a frame, taken from the run's
    ``sequence.json`` when present (default model seed otherwise)."""
    seq = _run_dir(slat_path) / "sequence.json"
    seed = 0
    if seq.is_file():
        seed = json.loads(seq.read_text())["config"]["model"]["seed"]
    return SlatDecoder.seeded(channels, seed)


def load_grids(path) -> list:
    files = frame_files(path)
    grids = []
    for f in files:
        try:
            slat = read_slat(f)
        except ValueError as exc:
            raise UsageError(f"{f}: {exc}") from None
        grids.append(decode_slat(slat, decoder_for(f, slat.latents.shape[1])))
    return grids


def sequence_alphas(path, n: int) -> list[float]:
    p = Path(path)
    seq = (p if (p / "frames").is_dir() else p.parent) / "sequence.json"
    if seq.is_file():
        frames = json.loads(seq.read_text())["frames"]
        if len(frames) == n:
            return [float(f["alpha"]) for f in frames]
    return [i / max(n - 1, 1) for i in range(n)]


# --- subcommands ---------------------------------------------------------------------

def cmd_gen_asset(args) -> int:
    try:
        desc = AssetDescriptor.parse(args.descriptor)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model_cfg = load_config_model_only(args.config) if args.config else ModelConfig()
    write_asset(args.out, build_asset(desc, model_cfg))
    print(f"wrote asset {desc.family} to {args.out}")
    return EXIT_OK


def load_config_model_only(path) -> ModelConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except (FileNotFoundError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    try:
        return ModelConfig(seed=raw.get("model_seed", 0), **{k: raw[k] for k in _MODEL_KEYS if k in raw})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_morph(args) -> int:
    raw = load_config(args.config)
    morpher, echo = build_run(raw, args.seed)
    N = morpher.cfg.N
    stop = N if args.stop is None else args.stop
    if not 0 <= args.start <= stop <= N:
        raise UsageError(f"frame range {args.start}..{stop} outside 0..{N}")
    try:
        seq = run_to_dir(morpher, args.out, start=args.start, stop=stop, extra=echo)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    total = sum(sum(f.timings.values()) for f in seq.frames)
    print(f"wrote frames {args.start}..{stop} to {args.out} ({total:.1f}s)")
    return EXIT_OK


def cmd_metrics(args) -> int:
    grids = load_grids(args.frames)
    if len(grids) < 3:
        raise UsageError(f"need at least 3 frames, found {len(grids)} in {args.frames}")
    reference = None
    if args.reference:
        reference = load_grids(args.reference)
        if len(reference) < 2:
            raise UsageError("the reference set needs at least 2 frames")
    record, gaps = sequence_metrics(grids, reference)
    out = Path(args.out) if args.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(metrics_json(record))
        (out / "gaps.csv").write_text(gaps_csv(gaps))
    sys.stdout.write(metrics_json(record))
    return EXIT_OK


def cmd_analyze_orient(args) -> int:
    sequences, skipped = [], 0
    for d in args.frames:
        grids = load_grids(d)
        alphas = sequence_alphas(d, len(grids))
        seq = []
        for alpha, grid in zip(alphas, grids):
            try:
                seq.append((alpha, estimate_orientation(grid, args.estimator)))
            except ValueError:
                skipped += 1
        if len(seq) >= 2:
            sequences.append(seq)
        else:
            print(f"warning: {d} has fewer than two frames with a defined orientation", file=sys.stderr)
    if not sequences:
        raise UsageError("no sequence with at least two orientable frames")
    report = orientation_stats(sequences, threshold=args.threshold)
    text = report.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"sequences: {report.n_sequences}  jumps: {report.n_jumps}  skipped frames: {skipped}",
          file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_export(args) -> int:
    path = Path(args.slat)
    try:
        slat = read_slat(path)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    text = obj_text(decode_slat(slat, decoder_for(path, slat.latents.shape[1])))
    out = Path(args.out) if args.out else path.with_suffix(".obj")
    out.write_text(text)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slatmorph", description="Training-free 3D voxel morphing.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-asset", help="write a procedural source/target asset")
    p.add_argument("descriptor", help="family[,size=..][,height=..][,yaw=..][,color_seed=..]")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="TOML config whose model fields set the grid")
    p.set_defaults(func=cmd_gen_asset)

    p = sub.add_parser("morph", help="run a morph described by a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="noise seed (overrides MORPH_SEED and the config)")
    p.add_argument("--start", type=int, default=0, help="resume from this frame")
    p.add_argument("--stop", type=int, help="last frame to generate")
    p.set_defaults(func=cmd_morph)

    p = sub.add_parser("metrics", help="PPL / PDV (and FFD) of a frame sequence")
    p.add_argument("--frames", required=True, help="run directory or its frames/ directory")
    p.add_argument("--reference", help="frames for the FFD reference set")
    p.add_argument("--out", help="directory for metrics.json and gaps.csv")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("analyze-orient", help="orientation jump statistics")
    p.add_argument("--frames", required=True, nargs="+", help="one or more run directories")
    p.add_argument("--out", help="CSV output path (stdout if omitted)")
    p.add_argument("--estimator", default="pca", choices=("pca",))
    p.add_argument("--threshold", type=float, default=45.0)
    p.set_defaults(func=cmd_analyze_orient)

    p = sub.add_parser("export", help="write a .slat frame as a vertex-coloured OBJ mesh")
    p.add_argument("slat")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
