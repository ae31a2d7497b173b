"""A small deterministic two-stage rectified-flow transformer.

Stage one (SS) denoises a dense per-voxel occupancy latent patchified into
``(G/patch)³`` tokens and thresholds it into a :class:`SparseStructure`.
Stage two (SLAT) denoises one ``C``-vector per active voxel. Both stages run
``layers`` pre-norm blocks of self-attention, cross-attention against
condition tokens, and an MLP. Every attention call goes through an
:class:`AttentionProcessor`, which is where the morphing modes live.

The weights are not trained. Head 0 of every attention layer is wired so
that queries and keys carry sinusoidal position features: cross-attention
reads the condition token covering the same ``(x, y)`` footprint cell, and
self-attention averages over spatial neighbours. The remaining heads, the
MLP and small perturbations on head 0 are seeded Gaussian weights. The
residual stream is laid out as::

    [0, 8)    token content (the noisy latent values of the token)
    [8, 16)   condition read-out: height, r, g, b, 4 style channels
    [16, W)   hidden features

which lets the output heads turn the read-out into occupancy logits (SS)
or decoder-aligned colour latents (SLAT).

Rectified-flow convention: t=0 is noise, t=1 is data. The network predicts
the clean sample ``D`` and the velocity is ``(D - x) / (1 - t)``.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from slatmorph.attention import (
    attention,
    kv_fused_attention,
    morphing_cross_attention,
    multi_head,
    temporal_fused_self_attention,
)
from slatmorph.geometry import ColoredVoxelGrid, SparseStructure, sinusoid_features

HEAD_DIM = 16
READOUT = slice(8, 16)

# structured-weight constants
CROSS_GAIN = 2.5
SELF_GAIN = 2.0
SEMANTIC = 0.3
SMOOTH = 0.3
DETAIL = 0.15
SHAPE_SLOPE = 4.0
LEAK = 0.05

CROSS_MODES = ("vanilla_src", "vanilla_tgt", "kv_fused", "mca")
SELF_MODES = ("vanilla", "kv_fused", "tfsa")
STAGES = ("ss", "slat")


@dataclass(frozen=True)
class ModelConfig:
    grid: int = 16
    patch: int = 2
    width: int = 32
    heads: int = 2
    layers: int = 4
    slat_channels: int = 8
    steps: int = 16
    cond_tokens: int = 16
    cond_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.grid % self.patch:
            raise ValueError(f"grid {self.grid} not divisible by patch {self.patch}")
        if self.patch ** 3 > 8 or self.slat_channels > 8:
            raise ValueError("token content is limited to 8 channels (patch <= 2, slat_channels <= 8)")
        if self.slat_channels < 4:
            raise ValueError("slat_channels must be at least 4 to carry colour")
        if self.heads < 2 or self.width != HEAD_DIM * self.heads:
            raise ValueError(f"width must equal {HEAD_DIM} * heads with heads >= 2")
        side = math.isqrt(self.cond_tokens)
        if side * side != self.cond_tokens or self.grid % side:
            raise ValueError("cond_tokens must be a square whose side divides grid")
        if self.cond_dim < HEAD_DIM + 16:
            raise ValueError(f"cond_dim must be at least {HEAD_DIM + 16}")
        if self.layers < 1 or self.steps < 1:
            raise ValueError("layers and steps must be positive")

    @property
    def cond_side(self) -> int:
        return math.isqrt(self.cond_tokens)


@dataclass(frozen=True)
class AttentionConfig:
    """Which attention kernel runs where.

    ``self_stages`` lists the stages in which ``self_mode`` applies (other
    stages use vanilla self-attention). ``cross_layers``, when set, limits
    ``cross_mode`` to those layer indices; the other layers use KV-fused
    cross-attention.
    """

    cross_mode: str = "mca"
    self_mode: str = "tfsa"
    beta: float = 0.2
    self_stages: tuple = STAGES
    cross_layers: tuple | None = None

    def __post_init__(self):
        if self.cross_mode not in CROSS_MODES:
            raise ValueError(f"cross_mode must be one of {CROSS_MODES}, got {self.cross_mode!r}")
        if self.self_mode not in SELF_MODES:
            raise ValueError(f"self_mode must be one of {SELF_MODES}, got {self.self_mode!r}")
        if not 0.0 <= float(self.beta) <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        bad = set(self.self_stages) - set(STAGES)
        if bad:
            raise ValueError(f"unknown stages {sorted(bad)}")
        object.__setattr__(self, "self_stages", tuple(self.self_stages))
        if self.cross_layers is not None:
            object.__setattr__(self, "cross_layers", tuple(int(i) for i in self.cross_layers))


# --- condition tokens ---------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ConditionTokens:
    """Per-object condition token matrix (rows = patch tokens).

    Values are held at float32 precision so the ``.ctok`` round trip is exact.
    """

    tokens: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.tokens, dtype=np.float32).astype(np.float64)
        if t.ndim != 2 or not np.all(np.isfinite(t)):
            raise ValueError("condition tokens must be a finite 2-D matrix")
        t.setflags(write=False)
        object.__setattr__(self, "tokens", t)

    def __eq__(self, other):
        if not isinstance(other, ConditionTokens):
            return NotImplemented
        return np.array_equal(self.tokens, other.tokens)

    def __hash__(self):
        return hash(self.tokens.tobytes())

    def to_bytes(self) -> bytes:
        rows, cols = self.tokens.shape
        return b"CTOK1" + struct.pack("<II", rows, cols) + self.tokens.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ConditionTokens":
        if data[:5] != b"CTOK1" or len(data) < 13:
            raise ValueError("not a CTOK1 file")
        rows, cols = struct.unpack_from("<II", data, 5)
        body = data[13:]
        if len(body) != rows * cols * 4:
            raise ValueError(f"CTOK1 payload is {len(body)} bytes, expected {rows * cols * 4}")
        return cls(np.frombuffer(body, dtype="<f4").reshape(rows, cols))

    def fingerprint(self) -> int:
        return int.from_bytes(hashlib.sha256(self.to_bytes()).digest()[:8], "little")


def cond_patch_centers(cfg: ModelConfig) -> np.ndarray:
    side = cfg.cond_side
    cell = cfg.grid // side
    u, v = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1) * cell + cell / 2.0


def cond_position_block(cfg: ModelConfig) -> np.ndarray:
    return sinusoid_features(cond_patch_centers(cfg), HEAD_DIM, cfg.grid)


def condition_from_image(cfg: ModelConfig, height, rgb, style, texture) -> ConditionTokens:
    """Assemble condition tokens from per-patch attributes.

    ``height`` (n,), ``rgb`` (n, 3), ``style`` (n, 4) and ``texture``
    (n, cond_dim - HEAD_DIM - 8) are given per footprint patch in row-major
    patch order.
    """
    n = cfg.cond_tokens
    content = np.concatenate(
        [np.reshape(height, (n, 1)), np.reshape(rgb, (n, 3)), np.reshape(style, (n, 4)),
         np.reshape(texture, (n, cfg.cond_dim - HEAD_DIM - 8))], axis=1)
    return ConditionTokens(np.concatenate([cond_position_block(cfg), content], axis=1))


# --- structured latents --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Slat:
    """Per-voxel latent vectors on a sparse structure (canonical row order)."""

    structure: SparseStructure
    latents: np.ndarray = field(repr=False)

    def __post_init__(self):
        z = np.asarray(self.latents, dtype=np.float32)
        if z.ndim != 2 or z.shape[0] != len(self.structure):
            raise ValueError(f"latent rows {z.shape} do not match {len(self.structure)} voxels")
        z.setflags(write=False)
        object.__setattr__(self, "latents", z)

    def __eq__(self, other):
        if not isinstance(other, Slat):
            return NotImplemented
        return self.structure == other.structure and np.array_equal(self.latents, other.latents)

    def to_bytes(self) -> bytes:
        P = self.structure
        L, C = self.latents.shape
        return (b"SLAT1" + struct.pack("<III", P.resolution, L, C)
                + P.voxels.astype("<u2").tobytes() + self.latents.astype("<f4").tobytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Slat":
        if data[:5] != b"SLAT1" or len(data) < 17:
            raise ValueError("not a SLAT1 file")
        G, L, C = struct.unpack_from("<III", data, 5)
        expected = 17 + L * 6 + L * C * 4
        if len(data) != expected:
            raise ValueError(f"SLAT1 file is {len(data)} bytes, expected {expected}")
        pos = np.frombuffer(data, dtype="<u2", count=L * 3, offset=17).reshape(L, 3)
        lat = np.frombuffer(data, dtype="<f4", count=L * C, offset=17 + L * 6).reshape(L, C)
        P = SparseStructure(G, pos.astype(np.int64))
        if not np.array_equal(P.voxels, pos):
            raise ValueError("SLAT1 positions are not in canonical order")
        return cls(P, lat)


def write_slat(path, slat: Slat) -> None:
    Path(path).write_bytes(slat.to_bytes())


def read_slat(path) -> Slat:
    return Slat.from_bytes(Path(path).read_bytes())


def write_ctok(path, cond: ConditionTokens) -> None:
    Path(path).write_bytes(cond.to_bytes())


def read_ctok(path) -> ConditionTokens:
    return ConditionTokens.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class SlatDecoder:
    """Fixed linear map from a latent vector to RGB, clamped to [0, 1]."""

    matrix: np.ndarray
    bias: np.ndarray

    @classmethod
    def seeded(cls, channels: int, seed: int = 0) -> "SlatDecoder":
        rng = np.random.default_rng([seed, 0x5EC0DE])
        M = rng.standard_normal((3, channels)) / math.sqrt(channels)
        b = 0.5 + 0.1 * rng.standard_normal(3)
        return cls(M, b)

    def __call__(self, latents: np.ndarray) -> np.ndarray:
        z = np.asarray(latents, dtype=np.float64)
        return np.clip(z @ self.matrix.T + self.bias, 0.0, 1.0)

    def encoder(self) -> tuple[np.ndarray, np.ndarray]:
        """(colour inverse, style basis) such that ``matrix @ inverse == I``
        and ``matrix @ style_basis == 0``."""
        inv = np.linalg.pinv(self.matrix)
        _, _, vt = np.linalg.svd(self.matrix)
        null = vt[3:].T
        return inv, null[:, :4] if null.shape[1] >= 4 else np.pad(null, ((0, 0), (0, 4 - null.shape[1])))


def decode_slat(slat: Slat, decoder: SlatDecoder | None = None) -> ColoredVoxelGrid:
    if decoder is None:
        decoder = SlatDecoder.seeded(slat.latents.shape[1])
    return ColoredVoxelGrid(slat.structure, decoder(slat.latents))


# --- schedules and interpolation -------------------------------------------------

def alpha_schedule(N: int) -> np.ndarray:
    """Linearly spaced deformation weights ``n / N`` for n = 0..N."""
    N = int(N)
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    return np.arange(N + 1, dtype=np.float64) / N


SLERP_EPS = 1e-4


def slerp(x0, x1, alpha) -> np.ndarray:
    """Spherical interpolation between two flat vectors.

    Falls back to linear interpolation when the angle between them is below
    ``SLERP_EPS`` radians. Endpoints and identical inputs are returned exactly.
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    x1 = np.asarray(x1, dtype=np.float64).ravel()
    alpha = float(alpha)
    if x0.shape != x1.shape:
        raise ValueError(f"length mismatch: {x0.size} vs {x1.size}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    n0, n1 = np.linalg.norm(x0), np.linalg.norm(x1)
    if n0 == 0.0 or n1 == 0.0:
        raise ValueError("slerp of a zero-norm vector")
    if alpha == 0.0 or np.array_equal(x0, x1):
        return x0.copy()
    if alpha == 1.0:
        return x1.copy()
    theta = math.acos(min(1.0, max(-1.0, float(x0 @ x1) / (n0 * n1))))
    if theta < SLERP_EPS:
        return (1.0 - alpha) * x0 + alpha * x1
    s = math.sin(theta)
    return (math.sin((1.0 - alpha) * theta) / s) * x0 + (math.sin(alpha * theta) / s) * x1


# --- frame cache -------------------------------------------------------------------

class FrameCache:
    """Self-attention keys/values of one frame, indexed by (stage, layer, step)."""

    _STAGE_CODE = {"ss": 0, "slat": 1}

    def __init__(self, slots=None):
        self.slots: dict[tuple[str, int, int], tuple[np.ndarray, np.ndarray]] = dict(slots or {})

    def __len__(self):
        return len(self.slots)

    def __contains__(self, key):
        return key in self.slots

    def __getitem__(self, key):
        try:
            return self.slots[key]
        except KeyError:
            raise KeyError(f"frame cache has no slot {key}") from None

    def put(self, stage, layer, step, K, V):
        self.slots[(stage, int(layer), int(step))] = (K, V)

    def merged(self, other: "FrameCache") -> "FrameCache":
        return FrameCache({**self.slots, **other.slots})

    def stage(self, stage: str) -> "FrameCache":
        return FrameCache({k: v for k, v in self.slots.items() if k[0] == stage})

    def __eq__(self, other):
        if not isinstance(other, FrameCache) or self.slots.keys() != other.slots.keys():
            return False
        return all(np.array_equal(a, c) and np.array_equal(b, d)
                   for (a, b), (c, d) in ((self.slots[k], other.slots[k]) for k in self.slots))

    def to_bytes(self) -> bytes:
        out = [b"KVC1", struct.pack("<I", len(self.slots))]
        for (stage, layer, step) in sorted(self.slots, key=lambda k: (self._STAGE_CODE[k[0]], k[1], k[2])):
            K, V = self.slots[(stage, layer, step)]
            if K.shape != V.shape:
                raise ValueError("cached K and V must share a shape")
            out.append(struct.pack("<BHHII", self._STAGE_CODE[stage], layer, step, *K.shape))
            out.append(np.ascontiguousarray(K, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(V, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FrameCache":
        if data[:4] != b"KVC1":
            raise ValueError("not a KVC1 cache file")
        (count,) = struct.unpack_from("<I", data, 4)
        names = {v: k for k, v in cls._STAGE_CODE.items()}
        off = 8
        cache = cls()
        for _ in range(count):
            code, layer, step, rows, cols = struct.unpack_from("<BHHII", data, off)
            off += struct.calcsize("<BHHII")
            n = rows * cols
            K = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(rows, cols).copy()
            off += 8 * n
            V = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(rows, cols).copy()
            off += 8 * n
            cache.put(names[code], layer, step, K, V)
        if off != len(data):
            raise ValueError("trailing bytes in KVC1 cache file")
        return cache

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FrameCache":
        return cls.from_bytes(Path(path).read_bytes())


# --- attention processor ------------------------------------------------------------

class AttentionProcessor:
    """Routes the model's attention calls to the configured kernels and
    records this frame's self-attention keys/values.

    ``prev`` is the previous frame's cache (needed for TFSA); ``refs`` is a
    pair of caches from plain source and target generations (needed for
    KV-fused self-attention).
    """

    def __init__(self, cfg: AttentionConfig, stage: str, alpha: float, heads: int,
                 prev: FrameCache | None = None, refs=None, same_conditions: bool = False):
        self.cfg = cfg
        self.stage = stage
        self.alpha = float(alpha)
        self.heads = heads
        self.prev = prev
        self.refs = refs
        self.same_conditions = same_conditions
        self.record = FrameCache()
        self.self_mode = cfg.self_mode if stage in cfg.self_stages else "vanilla"
        if self.self_mode == "tfsa" and prev is None:
            raise ValueError("TFSA requires the previous frame's cache")
        if self.self_mode == "kv_fused" and refs is None:
            raise ValueError("KV-fused self-attention requires source/target reference caches")

    def self_attention(self, layer, step, Q, K, V):
        self.record.put(self.stage, layer, step, K, V)
        mode = self.self_mode
        if mode == "tfsa":
            K_prev, V_prev = self.prev[(self.stage, layer, step)]
            return multi_head(temporal_fused_self_attention, self.heads, Q, K, V, K_prev, V_prev,
                              beta=self.cfg.beta)
        if mode == "kv_fused":
            K_s, V_s = self.refs[0][(self.stage, layer, step)]
            K_t, V_t = self.refs[1][(self.stage, layer, step)]
            return multi_head(kv_fused_attention, self.heads, Q, K_s, V_s, K_t, V_t, alpha=self.alpha)
        return multi_head(attention, self.heads, Q, K, V)

    def cross_mode(self, layer) -> str:
        mode = self.cfg.cross_mode
        if self.cfg.cross_layers is not None and layer not in self.cfg.cross_layers:
            mode = "kv_fused"
        if self.same_conditions and mode in ("kv_fused", "mca"):
            mode = "vanilla_src"
        return mode

    def cross_attention(self, layer, Q, src, tgt):
        mode = self.cross_mode(layer)
        if mode == "vanilla_src":
            return multi_head(attention, self.heads, Q, *src)
        if mode == "vanilla_tgt":
            return multi_head(attention, self.heads, Q, *tgt)
        if mode == "kv_fused":
            return multi_head(kv_fused_attention, self.heads, Q, *src, *tgt, alpha=self.alpha)
        return multi_head(morphing_cross_attention, self.heads, Q, *src, *tgt, alpha=self.alpha)


# --- the model ------------------------------------------------------------------------

def _layer_norm(h):
    mu = h.mean(axis=1, keepdims=True)
    var = h.var(axis=1, keepdims=True)
    return (h - mu) / np.sqrt(var + 1e-5)


def _time_features(t: float) -> np.ndarray:
    f = np.arange(1, 9, dtype=np.float64)
    return np.concatenate([np.sin(math.pi * f * t), np.cos(math.pi * f * t)])


class _StageWeights:
    def __init__(self, rng, cfg: ModelConfig, content: int):
        W, hid, hd, cd = cfg.width, cfg.width - 16, HEAD_DIM, cfg.cond_dim
        rest = W - hd

        def g(*shape, scale=1.0):
            return rng.standard_normal(shape) * (scale / math.sqrt(shape[0]))

        self.w_in = g(content, hid)
        self.w_pos = g(hd, hid)
        self.w_time = g(16, hid)
        self.layers = []
        for _ in range(cfg.layers):
            self.layers.append(dict(
                sa_q0=g(W, hd), sa_k0=g(W, hd),
                sa_q=g(W, rest), sa_k=g(W, rest), sa_v=g(W, rest), sa_o=g(rest, hid, scale=0.5),
                ca_q0=g(W, hd), ca_k0=g(cd - hd, hd),
                ca_q=g(W, rest), ca_k=g(cd, rest), ca_v=g(cd, rest), ca_o=g(rest, hid, scale=0.5),
                ca_tex=g(hd - 8, hid, scale=0.5),
                mlp_1=g(W, 2 * W), mlp_2=g(2 * W, hid, scale=0.5),
            ))
        self.w_out = g(hid, content, scale=LEAK)


class ToyFlowModel:
    """Seeded toy stand-in for the SS and SLAT flow transformers."""

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 0xF10])
        self.ss = _StageWeights(rng, cfg, cfg.patch ** 3)
        self.slat = _StageWeights(rng, cfg, cfg.slat_channels)
        self.decoder = SlatDecoder.seeded(cfg.slat_channels, cfg.seed)
        self.color_inverse, self.style_basis = self.decoder.encoder()
        self.cond_positions = cond_position_block(cfg)

        G, p = cfg.grid, cfg.patch
        n = G // p
        idx = np.stack(np.meshgrid(*(np.arange(n),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        self.ss_token_centers = idx * p + p / 2.0
        self.ss_self_pos = sinusoid_features(self.ss_token_centers, HEAD_DIM, G)
        self.ss_plane_pos = sinusoid_features(self.ss_token_centers[:, :2], HEAD_DIM, G)
        sub = np.stack(np.meshgrid(*(np.arange(p),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        # z centre of each sub-voxel of each token, shape (tokens, p³)
        self.ss_voxel_z = (idx[:, None, 2] * p + sub[None, :, 2]) + 0.5

    # -- latent layout --
    def patchify(self, dense: np.ndarray) -> np.ndarray:
        G, p = self.config.grid, self.config.patch
        n = G // p
        x = dense.reshape(n, p, n, p, n, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(n ** 3, p ** 3)

    def unpatchify(self, tokens: np.ndarray) -> np.ndarray:
        G, p = self.config.grid, self.config.patch
        n = G // p
        x = tokens.reshape(n, n, n, p, p, p).transpose(0, 3, 1, 4, 2, 5)
        return x.reshape(G ** 3)

    # -- one network evaluation --
    def _forward(self, w: _StageWeights, stage, content, t, step, self_pos, plane_pos,
                 conds, proc: AttentionProcessor):
        cfg = self.config
        n, k = content.shape
        L = cfg.layers
        h = np.zeros((n, cfg.width))
        h[:, :k] = content
        h[:, 16:] = content @ w.w_in + self_pos @ w.w_pos + _time_features(t) @ w.w_time
        hd = HEAD_DIM
        c_src, c_tgt = conds
        for layer, lw in enumerate(w.layers):
            hn = _layer_norm(h)
            Q = np.concatenate([SELF_GAIN * self_pos + SEMANTIC * hn @ lw["sa_q0"], hn @ lw["sa_q"]], axis=1)
            K = np.concatenate([SELF_GAIN * self_pos + SEMANTIC * hn @ lw["sa_k0"], hn @ lw["sa_k"]], axis=1)
            V = np.concatenate([h[:, :hd], hn @ lw["sa_v"]], axis=1)
            out = proc.self_attention(layer, step, Q, K, V)
            h[:, :hd] += SMOOTH * (out[:, :hd] - h[:, :hd])
            h[:, 16:] += out[:, hd:] @ lw["sa_o"]

            hn = _layer_norm(h)
            Q = np.concatenate([CROSS_GAIN * plane_pos + SEMANTIC * hn @ lw["ca_q0"], hn @ lw["ca_q"]], axis=1)
            kv = []
            for c in (c_src, c_tgt):
                pos, body = c[:, :hd], c[:, hd:]
                Kc = np.concatenate([CROSS_GAIN * pos + SEMANTIC * body @ lw["ca_k0"], c @ lw["ca_k"]], axis=1)
                Vc = np.concatenate([body[:, :hd], c @ lw["ca_v"]], axis=1)
                kv.append((Kc, Vc))
            out = proc.cross_attention(layer, Q, kv[0], kv[1])
            h[:, READOUT] += out[:, :8] / L
            h[:, 16:] += out[:, 8:hd] @ lw["ca_tex"] + out[:, hd:] @ lw["ca_o"]

            hn = _layer_norm(h)
            h[:, 16:] += np.maximum(hn @ lw["mlp_1"], 0.0) @ lw["mlp_2"]
        leak = _layer_norm(h)[:, 16:] @ w.w_out
        return h, leak

    def _integrate(self, stage, x0, token_fn, predict, proc):
        T = self.config.steps
        x = np.array(x0, dtype=np.float64)
        for step in range(T):
            t = step / T
            D = predict(token_fn(x), t, step)
            x = x + (1.0 / T) * ((D - x) / (1.0 - t))
        return x

    def _conds(self, conds):
        c_src, c_tgt = conds
        cfg = self.config
        for c in (c_src, c_tgt):
            if c.tokens.shape[1] != cfg.cond_dim:
                raise ValueError(f"condition width {c.tokens.shape[1]} != model cond_dim {cfg.cond_dim}")
        return (c_src.tokens, c_tgt.tokens), c_src == c_tgt

    def integrate_ss(self, f_ss_init, conds, attn: AttentionConfig, alpha, cache=None, refs=None):
        """Run the SS sampler; returns the final dense latent and the recorded cache."""
        cfg = self.config
        x0 = np.asarray(f_ss_init, dtype=np.float64).reshape(-1)
        if x0.size != cfg.grid ** 3:
            raise ValueError(f"f_ss has {x0.size} values, expected {cfg.grid ** 3}")
        (cs, ct), same = self._conds(conds)
        proc = AttentionProcessor(attn, "ss", alpha, cfg.heads, prev=cache, refs=refs, same_conditions=same)
        G = cfg.grid

        def predict(tokens, t, step):
            h, leak = self._forward(self.ss, "ss", tokens, t, step, self.ss_self_pos,
                                    self.ss_plane_pos, (cs, ct), proc)
            height = h[:, 8:9]
            # surface sits a quarter voxel outside the read-out half extent
            shape = SHAPE_SLOPE * (height * (G / 2.0) + 0.25 - np.abs(self.ss_voxel_z - G / 2.0))
            D = (1.0 - DETAIL) * shape + DETAIL * h[:, :tokens.shape[1]] + leak
            return self.unpatchify(D)

        x = self._integrate("ss", x0, self.patchify, predict, proc)
        return x, proc.record

    def integrate_slat(self, P: SparseStructure, f_slat_init, conds, attn: AttentionConfig, alpha,
                       cache=None, refs=None):
        cfg = self.config
        x0 = np.asarray(f_slat_init, dtype=np.float64)
        if x0.ndim != 2 or x0.shape[0] != len(P) or x0.shape[1] != cfg.slat_channels:
            raise ValueError(f"f_slat has shape {x0.shape}, expected ({len(P)}, {cfg.slat_channels})")
        if P.resolution != cfg.grid:
            raise ValueError(f"structure resolution {P.resolution} != model grid {cfg.grid}")
        (cs, ct), same = self._conds(conds)
        proc = AttentionProcessor(attn, "slat", alpha, cfg.heads, prev=cache, refs=refs, same_conditions=same)
        centers = P.voxels.astype(np.float64) + 0.5
        self_pos = sinusoid_features(P.voxels.astype(np.float64), HEAD_DIM, cfg.grid)
        plane_pos = sinusoid_features(centers[:, :2], HEAD_DIM, cfg.grid)

        def predict(tokens, t, step):
            h, leak = self._forward(self.slat, "slat", tokens, t, step, self_pos, plane_pos, (cs, ct), proc)
            rgb, style = h[:, 9:12], h[:, 12:16]
            target = (rgb - self.decoder.bias) @ self.color_inverse.T + style @ self.style_basis.T
            return (1.0 - DETAIL) * target + DETAIL * h[:, :tokens.shape[1]] + leak

        x = self._integrate("slat", x0, lambda x: x, predict, proc)
        return x, proc.record


def sample_ss(model: ToyFlowModel, f_ss_init, conds, attn: AttentionConfig, alpha,
              cache: FrameCache | None = None, refs=None):
    """Generate a sparse structure; returns ``(structure, recorded_cache)``."""
    x, record = model.integrate_ss(f_ss_init, conds, attn, alpha, cache=cache, refs=refs)
    G = model.config.grid
    P = SparseStructure.from_dense(x.reshape(G, G, G) > 0.0)
    if len(P) == 0:
        raise ValueError("degenerate structure: no voxel has a positive occupancy logit")
    return P, record


def sample_slat(model: ToyFlowModel, P: SparseStructure, f_slat_init, conds, attn: AttentionConfig,
                alpha, cache: FrameCache | None = None, refs=None):
    """Generate per-voxel latents on ``P``; returns ``(Slat, recorded_cache)``."""
    x, record = model.integrate_slat(P, f_slat_init, conds, attn, alpha, cache=cache, refs=refs)
    return Slat(P, x), record


def object_noise(model: ToyFlowModel, cond: ConditionTokens, seed: int):
    """Initial noise ``(f_ss, f_slat_dense)`` for one object.

    Keyed on the object's condition fingerprint so the same object always
    receives the same noise for a given seed.
    """
    cfg = model.config
    rng = np.random.default_rng([int(seed), cond.fingerprint()])
    f_ss = rng.standard_normal(cfg.grid ** 3)
    f_slat = rng.standard_normal(cfg.grid ** 3 * cfg.slat_channels)
    return f_ss, f_slat


def gather_slat_noise(model: ToyFlowModel, dense: np.ndarray, P: SparseStructure) -> np.ndarray:
    C = model.config.slat_channels
    return np.asarray(dense).reshape(-1, C)[P.flat_indices()]


def with_mode(attn: AttentionConfig, **changes) -> AttentionConfig:
    return replace(attn, **changes)
