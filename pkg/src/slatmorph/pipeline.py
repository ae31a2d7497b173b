"""Frame-by-frame morph orchestration.

For every frame ``n`` the interpolation weight ``alpha = n / N`` is mapped
to a per-stage weight (scheduled or frozen), the initial noise of each stage
is slerped between the source and target objects, the SS stage produces a
structure, orientation correction optionally snaps it to the previous
frame's yaw, and the SLAT stage fills in per-voxel latents. Each frame's
self-attention keys/values become the TFSA context of the next frame.

Objects are identified by their :class:`ConditionTokens`; their initial
noise is derived from the token fingerprint and the run seed.
"""

from __future__ import annotations

import functools
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from slatmorph.flow_model import (
    AttentionConfig,
    ConditionTokens,
    FrameCache,
    ModelConfig,
    Slat,
    ToyFlowModel,
    decode_slat,
    gather_slat_noise,
    object_noise,
    sample_slat,
    sample_ss,
    slerp,
    write_slat,
)
from slatmorph.geometry import ColoredVoxelGrid, SparseStructure, read_ssv, write_ssv
from slatmorph.mesh import obj_text
from slatmorph.metrics import feature_embed, frechet_feature_distance, sequence_metrics
from slatmorph.orientation import correct_orientation

ALPHA_MODES = ("schedule", "frozen_0", "frozen_1")
VANILLA = AttentionConfig(cross_mode="vanilla_src", self_mode="vanilla")


class MorphError(RuntimeError):
    """A frame failed to generate; ``frame`` is its index."""

    def __init__(self, frame: int, message: str):
        super().__init__(f"frame {frame}: {message}")
        self.frame = frame


@dataclass(frozen=True)
class MorphConfig:
    """Everything that determines a morph besides the two objects.

    ``ss_target`` / ``slat_target`` replace the target object for one stage
    (dual-target morphing). ``*_alpha_mode`` pins a stage at the source
    (``frozen_0``) or target (``frozen_1``) end of the schedule.
    """

    N: int = 49
    attn: AttentionConfig = field(default_factory=AttentionConfig)
    oc_enabled: bool = True
    ss_alpha_mode: str = "schedule"
    slat_alpha_mode: str = "schedule"
    ss_target: ConditionTokens | None = None
    slat_target: ConditionTokens | None = None
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if int(self.N) < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        for name in ("ss_alpha_mode", "slat_alpha_mode"):
            if getattr(self, name) not in ALPHA_MODES:
                raise ValueError(f"{name} must be one of {ALPHA_MODES}, got {getattr(self, name)!r}")

    @property
    def beta(self) -> float:
        return self.attn.beta

    @property
    def frames(self) -> int:
        return self.N + 1

    def stage_alpha(self, stage: str, alpha: float) -> float:
        mode = self.ss_alpha_mode if stage == "ss" else self.slat_alpha_mode
        return {"schedule": float(alpha), "frozen_0": 0.0, "frozen_1": 1.0}[mode]

    def to_dict(self) -> dict:
        def target(c):
            return None if c is None else f"{c.fingerprint():016x}"

        return {"N": self.N, "attn": asdict(self.attn), "oc_enabled": self.oc_enabled,
                "ss_alpha_mode": self.ss_alpha_mode, "slat_alpha_mode": self.slat_alpha_mode,
                "ss_target": target(self.ss_target), "slat_target": target(self.slat_target),
                "seed": self.seed, "model": asdict(self.model)}


@dataclass(frozen=True)
class FrameRecord:
    index: int
    alpha: float
    alpha_ss: float
    alpha_slat: float
    slat: Slat
    rotation: int
    timings: dict

    @property
    def structure(self) -> SparseStructure:
        return self.slat.structure

    def grid(self, decoder=None) -> ColoredVoxelGrid:
        return decode_slat(self.slat, decoder)

    def summary(self) -> dict:
        return {"index": self.index, "alpha": self.alpha, "alpha_ss": self.alpha_ss,
                "alpha_slat": self.alpha_slat, "rotation": self.rotation,
                "voxels": len(self.structure), "timings": dict(self.timings)}


@dataclass
class MorphSequence:
    """Frames of one run in index order. ``last_cache`` holds the final
    frame's self-attention record, the state needed to resume."""

    config: MorphConfig
    frames: list = field(default_factory=list)
    last_cache: FrameCache | None = None

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> FrameRecord:
        return self.frames[i]

    def grids(self, decoder=None) -> list[ColoredVoxelGrid]:
        return [f.grid(decoder) for f in self.frames]


@functools.lru_cache(maxsize=4)
def get_model(config: ModelConfig) -> ToyFlowModel:
    return ToyFlowModel(config)


def _tokens(obj) -> ConditionTokens:
    cond = getattr(obj, "condition", obj)
    if not isinstance(cond, ConditionTokens):
        raise TypeError(f"expected ConditionTokens or an asset, got {type(obj).__name__}")
    return cond


@dataclass(frozen=True)
class Generation:
    structure: SparseStructure
    slat: Slat
    cache: FrameCache


def generate(cond, seed: int = 0, model: ToyFlowModel | None = None) -> Generation:
    """Plain single-object generation (no morphing)."""
    model = model or get_model(ModelConfig())
    cond = _tokens(cond)
    f_ss, f_slat = object_noise(model, cond, seed)
    P, ss_rec = sample_ss(model, f_ss, (cond, cond), VANILLA, 0.0)
    slat, slat_rec = sample_slat(model, P, gather_slat_noise(model, f_slat, P), (cond, cond), VANILLA, 0.0)
    return Generation(P, slat, ss_rec.merged(slat_rec))


class Morpher:
    """Runs the frames of one morph. Frames may be produced in chunks; pass
    the previous frame's structure and cache to continue a run."""

    def __init__(self, src, tgt, cfg: MorphConfig | None = None, slat_noise_from_source: bool = False):
        self.cfg = cfg or MorphConfig()
        self.model = get_model(self.cfg.model)
        self.src = _tokens(src)
        tgt = _tokens(tgt)
        self.targets = {"ss": _tokens(self.cfg.ss_target) if self.cfg.ss_target is not None else tgt,
                        "slat": _tokens(self.cfg.slat_target) if self.cfg.slat_target is not None else tgt}
        seed = self.cfg.seed
        src_ss, src_slat = object_noise(self.model, self.src, seed)
        tgt_ss, _ = object_noise(self.model, self.targets["ss"], seed)
        _, tgt_slat = object_noise(self.model, self.targets["slat"], seed)
        if slat_noise_from_source:
            tgt_slat = src_slat
        self.noise = {"ss": (src_ss, tgt_ss), "slat": (src_slat, tgt_slat)}
        self._refs = None

    @property
    def uses_tfsa(self) -> bool:
        return self.cfg.attn.self_mode == "tfsa"

    def references(self):
        """Source-only and target-only self-attention records, needed by
        KV-fused self-attention."""
        if self._refs is None:
            seed = self.cfg.seed
            src = generate(self.src, seed, self.model).cache
            tgt_ss = generate(self.targets["ss"], seed, self.model).cache.stage("ss")
            tgt_slat = generate(self.targets["slat"], seed, self.model).cache.stage("slat")
            self._refs = (src, tgt_ss.merged(tgt_slat))
        return self._refs

    def frame(self, n: int, prev_structure=None, prev_cache=None) -> tuple[FrameRecord, FrameCache]:
        cfg = self.cfg
        if not 0 <= n <= cfg.N:
            raise ValueError(f"frame index {n} outside 0..{cfg.N}")
        alpha = n / cfg.N
        attn = cfg.attn
        if n == 0 and attn.self_mode == "tfsa":
            attn = replace(attn, self_mode="vanilla")
        refs = self.references() if attn.self_mode == "kv_fused" else None
        if attn.self_mode == "tfsa" and prev_cache is None:
            raise ValueError(f"frame {n} needs frame {n - 1}'s attention cache")
        a_ss, a_slat = cfg.stage_alpha("ss", alpha), cfg.stage_alpha("slat", alpha)
        timings = {}
        try:
            t0 = time.perf_counter()
            f_ss = slerp(*self.noise["ss"], a_ss)
            P, ss_rec = sample_ss(self.model, f_ss, (self.src, self.targets["ss"]), attn, a_ss,
                                  cache=prev_cache, refs=refs)
            q = 0
            if cfg.oc_enabled and n >= 1:
                if prev_structure is None:
                    raise ValueError("orientation correction needs the previous frame's structure")
                P, q = correct_orientation(P, prev_structure)
            t1 = time.perf_counter()
            f_slat = gather_slat_noise(self.model, slerp(*self.noise["slat"], a_slat), P)
            slat, slat_rec = sample_slat(self.model, P, f_slat, (self.src, self.targets["slat"]), attn,
                                         a_slat, cache=prev_cache, refs=refs)
            t2 = time.perf_counter()
        except ValueError as exc:
            raise MorphError(n, str(exc)) from exc
        timings["ss"] = t1 - t0
        timings["slat"] = t2 - t1
        record = FrameRecord(n, alpha, a_ss, a_slat, slat, q, timings)
        return record, ss_rec.merged(slat_rec)

    def run(self, start: int = 0, stop: int | None = None, prev_structure=None, prev_cache=None,
            on_frame=None) -> MorphSequence:
        """Generate frames ``start..stop`` (inclusive) in order. ``on_frame``
        is called with each record and its cache as soon as it exists."""
        stop = self.cfg.N if stop is None else stop
        if not 0 <= start <= stop <= self.cfg.N:
            raise ValueError(f"bad frame range {start}..{stop} for N={self.cfg.N}")
        seq = MorphSequence(self.cfg)
        for n in range(start, stop + 1):
            record, cache = self.frame(n, prev_structure, prev_cache)
            seq.frames.append(record)
            prev_structure, prev_cache = record.structure, cache
            if on_frame is not None:
                on_frame(record, cache)
        seq.last_cache = prev_cache
        return seq


def morph(src, tgt, cfg: MorphConfig | None = None) -> MorphSequence:
    return Morpher(src, tgt, cfg).run()


def morph_disentangled(src, tgt, cfg: MorphConfig) -> MorphSequence:
    """Morph only one stage: the frozen stage keeps the source (``frozen_0``)
    or target (``frozen_1``) for every frame."""
    frozen = [m != "schedule" for m in (cfg.ss_alpha_mode, cfg.slat_alpha_mode)]
    if all(frozen):
        raise ValueError("nothing morphs: both stages are frozen")
    if not any(frozen):
        raise ValueError("disentangled morphing needs exactly one frozen stage")
    return morph(src, tgt, cfg)


def style_transfer(src, style: ConditionTokens, cfg: MorphConfig | None = None) -> MorphSequence:
    """Keep the source structure and morph its appearance towards ``style``.

    The SLAT stage keeps the source noise: a style condition has no 3-D
    latent of its own.
    """
    cfg = replace(cfg or MorphConfig(), ss_alpha_mode="frozen_0", slat_alpha_mode="schedule",
                  ss_target=None, slat_target=_tokens(style))
    return Morpher(src, src, cfg, slat_noise_from_source=True).run()


# --- output directory ---------------------------------------------------------------

def frame_stem(n: int) -> str:
    return f"{n:03d}"


def write_frame(out_dir, record: FrameRecord, decoder=None) -> None:
    frames = Path(out_dir) / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    stem = frame_stem(record.index)
    write_ssv(frames / f"{stem}.ssv", record.structure)
    write_slat(frames / f"{stem}.slat", record.slat)
    (frames / f"{stem}.obj").write_text(obj_text(record.grid(decoder)))


def _write_sequence_json(out: Path, cfg: MorphConfig, summaries: list, extra: dict | None):
    doc = {"config": cfg.to_dict(), "frames": sorted(summaries, key=lambda s: s["index"])}
    if extra:
        doc["inputs"] = extra
    (out / "sequence.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_to_dir(morpher: Morpher, out_dir, start: int = 0, stop: int | None = None,
               extra: dict | None = None) -> MorphSequence:
    """Run a morph writing frames, ``sequence.json`` and the resume cache.

    With ``start > 0`` the run resumes from frame ``start - 1`` as found in
    ``out_dir``. When TFSA is on, ``cache/NNN.kvc`` holds the latest frame's
    keys/values; older cache files are removed once the next one is written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache_dir = out / "cache"
    cache_dir.mkdir(exist_ok=True)
    decoder = morpher.model.decoder
    prev_structure = prev_cache = None
    summaries = []
    if start > 0:
        prev_structure = read_ssv(out / "frames" / f"{frame_stem(start - 1)}.ssv")
        if morpher.uses_tfsa:
            path = cache_dir / f"{frame_stem(start - 1)}.kvc"
            if not path.is_file():
                raise FileNotFoundError(f"cannot resume: {path} is missing")
            prev_cache = FrameCache.load(path)
        seq_path = out / "sequence.json"
        if seq_path.is_file():
            summaries = [s for s in json.loads(seq_path.read_text())["frames"] if s["index"] < start]

    def on_frame(record, cache):
        write_frame(out, record, decoder)
        summaries.append(record.summary())
        if morpher.uses_tfsa:
            path = cache_dir / f"{frame_stem(record.index)}.kvc"
            cache.save(path)
            for old in cache_dir.glob("*.kvc"):
                if old != path:
                    old.unlink()
        _write_sequence_json(out, morpher.cfg, summaries, extra)

    return morpher.run(start, stop, prev_structure, prev_cache, on_frame=on_frame)


# --- ablation -------------------------------------------------------------------------

ABLATION_VARIANTS = {
    "kv_fused_ca": dict(cross_mode="kv_fused", self_mode="vanilla", oc=False),
    "mca": dict(cross_mode="mca", self_mode="vanilla", oc=False),
    "mca+tfsa": dict(cross_mode="mca", self_mode="tfsa", oc=False),
    "mca+tfsa+oc": dict(cross_mode="mca", self_mode="tfsa", oc=True),
}


def ablation(src, tgt, cfg: MorphConfig | None = None, reference=None, variants=None) -> dict:
    """Metrics for the incremental component stack on one source/target pair.

    ``reference`` is a list of grids for FFD; by default the decoded
    source-only and target-only generations.
    """
    cfg = cfg or MorphConfig()
    model = get_model(cfg.model)
    if reference is None:
        reference = [decode_slat(generate(o, cfg.seed, model).slat, model.decoder) for o in (src, tgt)]
    ref_feats = [feature_embed(g) for g in reference]
    results = {}
    for name in variants or ABLATION_VARIANTS:
        v = ABLATION_VARIANTS[name]
        run_cfg = replace(cfg, oc_enabled=v["oc"],
                          attn=replace(cfg.attn, cross_mode=v["cross_mode"], self_mode=v["self_mode"]))
        grids = morph(src, tgt, run_cfg).grids(model.decoder)
        record, _ = sequence_metrics(grids)
        record["ffd"] = frechet_feature_distance([feature_embed(g) for g in grids], ref_feats)
        results[name] = record
    return results

