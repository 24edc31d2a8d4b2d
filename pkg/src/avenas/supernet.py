"""View-decoupled searchable avatar encoder.

Each camera view (left eye, right eye, mouth) owns an independent column: a
fixed convolutional stem, two searchable backbone blocks, and per-task
branches (latent feature for every view; gaze and keypoints for the eyes
only). Per-view 128-d latent features are concatenated and regressed into the
final latent code, so the only cross-view traffic is three small vectors.

Every searchable block mixes three candidate operators under Gumbel-softmax
weights, and realises width search as a weighted sum of binary channel masks
over the widest output. ``discrete_forward`` is the slicing-based reference
path used to cross-check the mask-based mixture.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import kernels
from .tensor_core import (
    ShapeError, Tensor,
    add, concat, conv2d, global_avg_pool, matmul, mul, relu, reshape,
    resize_bilinear, scale, silu, softmax,
)

OPS = ("fuse-mb", "conv", "skip")

ArchKey = tuple[str, str, int]          # (view, branch, block index)

CHANNEL_SCALES = (0.5, 0.53125, 0.5625, 0.59375, 0.625,
                  0.6875, 0.75, 0.8125, 0.875, 0.9375, 1.0)

RESOLUTIONS = (32, 48, 64, 80, 96, 128, 192)

EYE_VIEWS = ("left_eye", "right_eye")
VIEWS = ("left_eye", "right_eye", "mouth")


def scaled_channels(scale: float, c_max: int) -> int:
    """Effective width at a channel scale: the leading ceil(scale*max) channels."""
    return int(math.ceil(scale * c_max))


@dataclass(frozen=True)
class SearchSpace:
    operators: tuple[str, ...] = OPS
    channel_scales: tuple[float, ...] = CHANNEL_SCALES
    resolutions: tuple[int, ...] = RESOLUTIONS

    def __post_init__(self):
        if list(self.channel_scales) != sorted(set(self.channel_scales)):
            raise ValueError("channel_scales must be strictly increasing")
        if not (self.channel_scales[0] >= 0.5 - 1e-12 and self.channel_scales[-1] <= 1.0):
            raise ValueError("channel_scales must lie in [0.5, 1.0]")
        if list(self.resolutions) != sorted(set(self.resolutions)):
            raise ValueError("resolutions must be strictly increasing")
        unknown = set(self.operators) - set(OPS)
        if unknown:
            raise ValueError(f"unknown operators {sorted(unknown)}")


@dataclass(frozen=True)
class SupernetSpec:
    """Structure constants of the searchable encoder plus its dimensional profile."""

    search_space: SearchSpace = field(default_factory=SearchSpace)
    views: tuple[str, ...] = VIEWS
    stem_channels: int = 64
    backbone_channels: tuple[int, ...] = (64, 64)
    backbone_strides: tuple[int, ...] = (1, 2)
    latent_channels: tuple[int, ...] = (64, 64, 256, 256, 512, 512)
    latent_strides: tuple[int, ...] = (1, 1, 2, 1, 2, 2)
    gaze_channels: tuple[int, ...] = (256, 256, 128, 128, 32, 32)
    gaze_strides: tuple[int, ...] = (1, 1, 2, 1, 2, 2)
    keypoint_channels: tuple[int, ...] = (128, 64)
    keypoint_strides: tuple[int, ...] = (2, 1)
    latent_feat_dim: int = 128
    z_dim: int = 256
    gaze_dim: int = 3              # per eye
    n_keypoints: int = 19          # per eye, regressed as (x, y) pairs
    early_channels: int = 4
    fused_expansion: float = 1.0   # internal width of fuse-mb vs its output width

    @property
    def eye_views(self) -> tuple[str, ...]:
        return tuple(v for v in self.views if v in EYE_VIEWS)

    def branches(self, view: str) -> dict[str, tuple[tuple[int, ...], tuple[int, ...]]]:
        out = {"backbone": (self.backbone_channels, self.backbone_strides),
               "latent": (self.latent_channels, self.latent_strides)}
        if view in EYE_VIEWS:
            out["gaze"] = (self.gaze_channels, self.gaze_strides)
            out["keypoint"] = (self.keypoint_channels, self.keypoint_strides)
        return out

    def backbone_out_channels(self) -> int:
        return self.backbone_channels[-1] if self.backbone_channels else self.stem_channels

    def blocks(self) -> Iterator[tuple[str, str, int, int, int, int]]:
        """Yield (view, branch, index, c_in_max, c_out_max, stride) for every
        searchable block, in a fixed global order."""
        for view in self.views:
            for branch, (chans, strides) in self.branches(view).items():
                c_in = self.stem_channels if branch == "backbone" else self.backbone_out_channels()
                for i, (c_out, s) in enumerate(zip(chans, strides)):
                    yield view, branch, i, c_in, c_out, s
                    c_in = c_out

    def fused_mid(self, c_out: int) -> int:
        return max(1, round(self.fused_expansion * c_out))

    def head_dim(self, branch: str) -> int:
        return {"latent": self.latent_feat_dim,
                "gaze": self.gaze_dim,
                "keypoint": 2 * self.n_keypoints}[branch]

    def gaze_total_dim(self) -> int:
        return self.gaze_dim * len(self.eye_views)


def paper_spec() -> SupernetSpec:
    spec = SupernetSpec()
    if spec.search_space.resolutions[-1] != 192:
        raise ValueError("paper-dims profile expects the resolution ladder to top out at 192")
    return spec


def toy_spec(resolutions: tuple[int, ...] = (12, 16, 24),
             channel_scales: tuple[float, ...] = CHANNEL_SCALES,
             z_dim: int = 8) -> SupernetSpec:
    """Small profile with the full three-view topology, sized for fast tests."""
    return SupernetSpec(
        search_space=SearchSpace(channel_scales=channel_scales, resolutions=resolutions),
        stem_channels=8,
        backbone_channels=(8, 8),
        latent_channels=(8, 8, 16, 16, 16, 16),
        gaze_channels=(16, 16, 8, 8, 8, 8),
        keypoint_channels=(8, 8),
        latent_feat_dim=8,
        z_dim=z_dim,
        n_keypoints=4,
        early_channels=2,
    )


def micro_spec() -> SupernetSpec:
    """Single-view, two-block profile whose search space has exactly
    2 ops x 2 scales per block and 2 resolutions: 32 architectures in total,
    small enough to enumerate."""
    return SupernetSpec(
        search_space=SearchSpace(operators=("conv", "skip"),
                                 channel_scales=(0.5, 1.0),
                                 resolutions=(8, 12)),
        views=("mouth",),
        stem_channels=4,
        backbone_channels=(), backbone_strides=(),
        latent_channels=(4, 4), latent_strides=(1, 2),
        latent_feat_dim=4, z_dim=4, n_keypoints=1, early_channels=2)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _block_param_shapes(spec: SupernetSpec, c_in: int, c_out: int) -> dict[str, tuple]:
    mid = spec.fused_mid(c_out)
    shapes = {
        "fuse-mb/expand": (mid, c_in, 3, 3),
        "fuse-mb/expand_bias": (mid, 1, 1),
        "fuse-mb/project": (c_out, mid, 1, 1),
        "fuse-mb/project_bias": (c_out, 1, 1),
        "conv/kernel": (c_out, c_in, 3, 3),
        "conv/bias": (c_out, 1, 1),
    }
    return shapes


def supernet_param_shapes(spec: SupernetSpec) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    for view in spec.views:
        shapes[f"{view}/stem/kernel"] = (spec.stem_channels, 1, 3, 3)
        shapes[f"{view}/stem/bias"] = (spec.stem_channels, 1, 1)
        shapes[f"{view}/early/kernel"] = (spec.early_channels, spec.stem_channels, 3, 3)
        shapes[f"{view}/early/bias"] = (spec.early_channels, 1, 1)
    for view, branch, i, c_in, c_out, stride in spec.blocks():
        base = f"{view}/{branch}/b{i}"
        for k, shp in _block_param_shapes(spec, c_in, c_out).items():
            shapes[f"{base}/{k}"] = shp
        if c_in != c_out or stride != 1:
            shapes[f"{base}/skip/kernel"] = (c_out, c_in, 1, 1)
    for view in spec.views:
        for branch, (chans, _) in spec.branches(view).items():
            if branch == "backbone":
                continue
            d = spec.head_dim(branch)
            shapes[f"{view}/{branch}/head/weight"] = (chans[-1], d)
            shapes[f"{view}/{branch}/head/bias"] = (d,)
    shapes["head/weight"] = (len(spec.views) * spec.latent_feat_dim, spec.z_dim)
    shapes["head/bias"] = (spec.z_dim,)
    shapes["early_head/weight"] = (len(spec.views) * spec.early_channels, spec.z_dim)
    shapes["early_head/bias"] = (spec.z_dim,)
    return shapes


def init_supernet_weights(spec: SupernetSpec, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in supernet_param_shapes(spec).items():
        if name.endswith("bias"):
            data = np.zeros(shape)
        elif len(shape) == 4:
            data = _he(rng, shape, shape[1] * shape[2] * shape[3])
        else:
            data = rng.normal(0.0, math.sqrt(1.0 / shape[0]), size=shape)
        weights[name] = Tensor(data, requires_grad=True)
    return weights


# ---------------------------------------------------------------------------
# gumbel sampling
# ---------------------------------------------------------------------------

def gumbel_weights(logits: Tensor, noise: np.ndarray, temperature: float) -> Tensor:
    """Relaxed categorical sample softmax((logits + noise) / temperature).

    ``noise`` is i.i.d. Gumbel(0,1) from the caller's seeded generator; the
    result is differentiable w.r.t. ``logits``.
    """
    if temperature <= 0:
        raise ValueError(f"gumbel temperature must be positive, got {temperature}")
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("gumbel_weights: non-finite logits")
    return softmax(scale(add(logits, Tensor(np.asarray(noise))), 1.0 / temperature))


def sample_hard(logits: np.ndarray, rng: np.random.Generator) -> int:
    """Hard categorical draw via the Gumbel-max trick (the temperature->0 limit)."""
    return int(np.argmax(logits + rng.gumbel(size=len(logits))))


# ---------------------------------------------------------------------------
# mixed (supernet) forward
# ---------------------------------------------------------------------------

def channel_masks(scales: tuple[float, ...], c_max: int) -> np.ndarray:
    """Binary mask per scale candidate; mask s keeps the leading ceil(s*c_max)."""
    m = np.zeros((len(scales), c_max))
    for i, s in enumerate(scales):
        m[i, :scaled_channels(s, c_max)] = 1.0
    return m


def weighted_sum(tensors: list[Tensor], wvec: Tensor) -> Tensor:
    """sum_i w_i * t_i with the scalar w_i sliced off the weight vector on-graph."""
    n = len(tensors)
    w_row = reshape(wvec, (1, n))
    acc = None
    for i, t in enumerate(tensors):
        e = np.zeros((n, 1))
        e[i, 0] = 1.0
        wi = matmul(w_row, Tensor(e))  # (1,1): broadcasts over any operand
        term = mul(t, wi)
        acc = term if acc is None else add(acc, term)
    return acc


def _conv_block(x, kern, bias, stride, padding):
    return add(conv2d(x, kern, stride=stride, padding=padding), bias)


def _candidate_outputs(x, weights, spec, view, branch, i, c_in, c_out, stride):
    base = f"{view}/{branch}/b{i}"
    outs = []
    for op in spec.search_space.operators:
        if op == "conv":
            h = relu(_conv_block(x, weights[f"{base}/conv/kernel"],
                                 weights[f"{base}/conv/bias"], stride, 1))
        elif op == "fuse-mb":
            h = silu(_conv_block(x, weights[f"{base}/fuse-mb/expand"],
                                 weights[f"{base}/fuse-mb/expand_bias"], stride, 1))
            h = _conv_block(h, weights[f"{base}/fuse-mb/project"],
                            weights[f"{base}/fuse-mb/project_bias"], 1, 0)
        elif op == "skip":
            if c_in == c_out and stride == 1:
                h = x
            else:
                h = conv2d(x, weights[f"{base}/skip/kernel"], stride=stride, padding=0)
        outs.append(h)
    return outs


def mixed_block_forward(x: Tensor, op_weights: Tensor, ch_weights: Tensor,
                        spec: SupernetSpec, weights: dict[str, Tensor],
                        view: str, branch: str, i: int,
                        c_in: int, c_out: int, stride: int) -> Tensor:
    outs = _candidate_outputs(x, weights, spec, view, branch, i, c_in, c_out, stride)
    mixed = weighted_sum(outs, op_weights)
    masks = channel_masks(spec.search_space.channel_scales, c_out)
    mask_mix = matmul(reshape(ch_weights, (1, len(masks))), Tensor(masks))  # (1, c_out)
    return mul(mixed, reshape(mask_mix, (c_out, 1, 1)))


@dataclass
class EncoderOutput:
    z: Tensor
    gaze: dict[str, Tensor]
    g: Tensor
    keypoints: dict[str, Tensor]
    view_feats: dict[str, Tensor]
    z_early: Tensor | None = None


def _affine(x, w, b):
    return add(matmul(x, w), b)


def supernet_forward(spec: SupernetSpec, weights: dict[str, Tensor],
                     frames: dict[str, Tensor],
                     arch_weights: dict[tuple[str, str, int], tuple[Tensor, Tensor]],
                     resolutions: dict[str, int],
                     with_early: bool = False) -> EncoderOutput:
    """Mixed forward pass of the whole supernet at the sampled resolutions."""
    missing = [v for v in spec.views if v not in frames]
    if missing:
        raise ShapeError(f"supernet_forward: missing views {missing}")
    feats, early_feats = {}, {}
    gaze, kpts = {}, {}
    for view in spec.views:
        x = frames[view]
        res = resolutions[view]
        if x.shape[2] != res or x.shape[3] != res:
            x = resize_bilinear(x, res, res)
        s0 = relu(_conv_block(x, weights[f"{view}/stem/kernel"],
                              weights[f"{view}/stem/bias"], 2, 1))
        if with_early:
            e = relu(_conv_block(s0, weights[f"{view}/early/kernel"],
                                 weights[f"{view}/early/bias"], 2, 1))
            early_feats[view] = global_avg_pool(e)
        h = s0
        for branch, (chans, strides) in spec.branches(view).items():
            if branch != "backbone":
                continue
            c_in = spec.stem_channels
            for i, (c_out, st) in enumerate(zip(chans, strides)):
                ow, cw = arch_weights[(view, branch, i)]
                h = mixed_block_forward(h, ow, cw, spec, weights, view, branch, i,
                                        c_in, c_out, st)
                c_in = c_out
        backbone_out = h
        for branch, (chans, strides) in spec.branches(view).items():
            if branch == "backbone":
                continue
            b = backbone_out
            c_in = spec.backbone_out_channels()
            for i, (c_out, st) in enumerate(zip(chans, strides)):
                ow, cw = arch_weights[(view, branch, i)]
                b = mixed_block_forward(b, ow, cw, spec, weights, view, branch, i,
                                        c_in, c_out, st)
                c_in = c_out
            pooled = global_avg_pool(b)
            proj = _affine(pooled, weights[f"{view}/{branch}/head/weight"],
                           weights[f"{view}/{branch}/head/bias"])
            if branch == "latent":
                feats[view] = proj
            elif branch == "gaze":
                gaze[view] = proj
            else:
                kpts[view] = proj
    z = _affine(concat([feats[v] for v in spec.views], axis=1),
                weights["head/weight"], weights["head/bias"])
    batch = z.shape[0]
    if spec.eye_views:
        g = concat([gaze[v] for v in spec.eye_views], axis=1)
    else:
        g = Tensor(np.zeros((batch, 0)))
    z_early = None
    if with_early:
        z_early = _affine(concat([early_feats[v] for v in spec.views], axis=1),
                          weights["early_head/weight"], weights["early_head/bias"])
    return EncoderOutput(z=z, gaze=gaze, g=g, keypoints=kpts, view_feats=feats,
                         z_early=z_early)


# ---------------------------------------------------------------------------
# sampled architectures
# ---------------------------------------------------------------------------

@dataclass
class SampledArch:
    """One concrete architecture: an operator and channel scale per block plus
    a per-view input resolution."""

    operators: dict[tuple[str, str], list[str]]
    channel_scales: dict[tuple[str, str], list[float]]
    resolutions: dict[str, int]
    name: str | None = None

    def op_at(self, view: str, branch: str, i: int) -> str:
        return self.operators[(view, branch)][i]

    def scale_at(self, view: str, branch: str, i: int) -> float:
        return self.channel_scales[(view, branch)][i]

    def to_json_dict(self) -> dict:
        views: dict[str, dict] = {}
        for (view, branch), ops in sorted(self.operators.items()):
            v = views.setdefault(view, {"input_resolution": self.resolutions[view],
                                        "branches": {}})
            v["branches"][branch] = {
                "operators": list(ops),
                "channel_scales": list(self.channel_scales[(view, branch)]),
            }
        doc = {"views": views}
        if self.name:
            doc["name"] = self.name
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SampledArch":
        ops, scales, res = {}, {}, {}
        for view, v in doc["views"].items():
            res[view] = int(v["input_resolution"])
            for branch, b in v["branches"].items():
                ops[(view, branch)] = [str(o) for o in b["operators"]]
                scales[(view, branch)] = [float(s) for s in b["channel_scales"]]
        return cls(operators=ops, channel_scales=scales, resolutions=res,
                   name=doc.get("name"))

    def save(self, path, extra: dict | None = None) -> None:
        doc = self.to_json_dict()
        if extra:
            doc.update(extra)
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "SampledArch":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


def validate_arch(spec: SupernetSpec, arch: SampledArch) -> None:
    space = spec.search_space
    for view in spec.views:
        if view not in arch.resolutions:
            raise ValueError(f"architecture is missing view {view!r}")
        if arch.resolutions[view] not in space.resolutions:
            raise ValueError(
                f"resolution {arch.resolutions[view]} of {view} not in {space.resolutions}")
    for view, branch, i, _, _, _ in spec.blocks():
        try:
            op = arch.op_at(view, branch, i)
            sc = arch.scale_at(view, branch, i)
        except (KeyError, IndexError):
            raise ValueError(f"architecture is missing block {view}/{branch}/b{i}") from None
        if op not in space.operators:
            raise ValueError(f"operator {op!r} at {view}/{branch}/b{i} not searchable")
        if sc not in space.channel_scales:
            raise ValueError(f"channel scale {sc} at {view}/{branch}/b{i} not searchable")


# ---------------------------------------------------------------------------
# discrete reference path (slicing instead of masking; runs on numpy only)
# ---------------------------------------------------------------------------

def _np_conv(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return kernels.conv2d_forward(np.ascontiguousarray(x), np.ascontiguousarray(k), stride)


def _np_silu(x):
    return x / (1.0 + np.exp(-x))


def discrete_forward(spec: SupernetSpec, weights: dict[str, Tensor],
                     arch: SampledArch, frames: dict[str, np.ndarray],
                     with_early: bool = False):
    """Forward pass of one sampled architecture, taking the supernet weights
    and slicing them to the chosen widths.

    Independent of the mixed path: channel selection is realised by slicing
    (plus zero-padding where a skip narrows), never by masks, so it serves as
    the mixture-consistency reference.
    """
    feats, early_feats, gaze, kpts = {}, {}, {}, {}
    for view in spec.views:
        x = np.asarray(frames[view], dtype=np.float64)
        res = arch.resolutions[view]
        if x.shape[2] != res or x.shape[3] != res:
            x = kernels.resize_bilinear(np.ascontiguousarray(x), res, res)
        s0 = np.maximum(_np_conv(x, weights[f"{view}/stem/kernel"].data, 2, 1)
                        + weights[f"{view}/stem/bias"].data, 0.0)
        if with_early:
            e = np.maximum(_np_conv(s0, weights[f"{view}/early/kernel"].data, 2, 1)
                           + weights[f"{view}/early/bias"].data, 0.0)
            early_feats[view] = e.mean(axis=(2, 3))
        h, c_eff = s0, spec.stem_channels
        outputs = {}
        backbone_out, backbone_eff = h, c_eff
        for branch, (chans, strides) in spec.branches(view).items():
            if branch == "backbone":
                b, ce = h, c_eff
            else:
                b, ce = backbone_out, backbone_eff
            c_in_max = spec.stem_channels if branch == "backbone" else spec.backbone_out_channels()
            for i, (c_out_max, st) in enumerate(zip(chans, strides)):
                base = f"{view}/{branch}/b{i}"
                op = arch.op_at(view, branch, i)
                co = scaled_channels(arch.scale_at(view, branch, i), c_out_max)
                if op == "conv":
                    k = weights[f"{base}/conv/kernel"].data[:co, :ce]
                    bias = weights[f"{base}/conv/bias"].data[:co]
                    b = np.maximum(_np_conv(b, k, st, 1) + bias, 0.0)
                elif op == "fuse-mb":
                    ke = weights[f"{base}/fuse-mb/expand"].data[:, :ce]
                    be = weights[f"{base}/fuse-mb/expand_bias"].data
                    kp = weights[f"{base}/fuse-mb/project"].data[:co]
                    bp = weights[f"{base}/fuse-mb/project_bias"].data[:co]
                    b = _np_silu(_np_conv(b, ke, st, 1) + be)
                    b = _np_conv(b, kp, 1, 0) + bp
                else:
                    if c_in_max == c_out_max and st == 1:
                        if co <= ce:
                            b = b[:, :co]
                        else:
                            pad = np.zeros((b.shape[0], co - ce) + b.shape[2:])
                            b = np.concatenate([b, pad], axis=1)
                    else:
                        k = weights[f"{base}/skip/kernel"].data[:co, :ce]
                        b = _np_conv(b, k, st, 0)
                ce, c_in_max = co, c_out_max
            if branch == "backbone":
                backbone_out, backbone_eff = b, ce
                continue
            pooled = b.mean(axis=(2, 3))
            w = weights[f"{view}/{branch}/head/weight"].data[:ce]
            bias = weights[f"{view}/{branch}/head/bias"].data
            proj = pooled @ w + bias
            outputs[branch] = proj
        feats[view] = outputs["latent"]
        if view in EYE_VIEWS:
            gaze[view] = outputs["gaze"]
            kpts[view] = outputs["keypoint"]
    fcat = np.concatenate([feats[v] for v in spec.views], axis=1)
    z = fcat @ weights["head/weight"].data + weights["head/bias"].data
    if spec.eye_views:
        g = np.concatenate([gaze[v] for v in spec.eye_views], axis=1)
    else:
        g = np.zeros((z.shape[0], 0))
    out = {"z": z, "g": g, "gaze": gaze, "keypoints": kpts, "view_feats": feats}
    if with_early:
        ecat = np.concatenate([early_feats[v] for v in spec.views], axis=1)
        out["z_early"] = ecat @ weights["early_head/weight"].data + weights["early_head/bias"].data
    return out


def random_arch(spec: SupernetSpec, rng: np.random.Generator,
                name: str | None = None) -> SampledArch:
    """Uniform draw from the search space (used by enumeration-style checks)."""
    space = spec.search_space
    ops: dict[tuple[str, str], list[str]] = {}
    scales: dict[tuple[str, str], list[float]] = {}
    for view, branch, i, _, _, _ in spec.blocks():
        ops.setdefault((view, branch), []).append(
            space.operators[rng.integers(len(space.operators))])
        scales.setdefault((view, branch), []).append(
            space.channel_scales[rng.integers(len(space.channel_scales))])
    resolutions = {v: int(space.resolutions[rng.integers(len(space.resolutions))])
                   for v in spec.views}
    return SampledArch(operators=ops, channel_scales=scales,
                       resolutions=resolutions, name=name)


def one_hot_arch_weights(spec: SupernetSpec, arch: SampledArch):
    """Exact one-hot weight tensors reproducing ``arch`` through the mixed path."""
    space = spec.search_space
    aw = {}
    for view, branch, i, _, _, _ in spec.blocks():
        ow = np.zeros(len(space.operators))
        ow[space.operators.index(arch.op_at(view, branch, i))] = 1.0
        cw = np.zeros(len(space.channel_scales))
        cw[space.channel_scales.index(arch.scale_at(view, branch, i))] = 1.0
        aw[(view, branch, i)] = (Tensor(ow), Tensor(cw))
    return aw


# ---------------------------------------------------------------------------
# per-block cost primitive and architecture derivation
# ---------------------------------------------------------------------------

def conv_out_hw(h: int, k: int, stride: int, padding: int) -> int:
    return (h + 2 * padding - k) // stride + 1


def block_macs(spec: SupernetSpec, op: str, c_in_eff: int, c_out_eff: int,
               stride: int, h_in: int) -> tuple[int, int]:
    """Multiply-accumulate count of one discrete block; returns (macs, h_out).

    The fuse-mb internal width follows the block's effective output width so
    block cost is exactly quadratic in the (input, output) scale pair.
    """
    h = conv_out_hw(h_in, 3, stride, 1)
    if op == "conv":
        return 9 * c_in_eff * c_out_eff * h * h, h
    if op == "skip":
        if c_in_eff == c_out_eff and stride == 1:
            return 0, h_in
        h1 = conv_out_hw(h_in, 1, stride, 0)
        return c_in_eff * c_out_eff * h1 * h1, h1
    if op == "fuse-mb":
        mid = spec.fused_mid(c_out_eff)
        return (9 * c_in_eff * mid + mid * c_out_eff) * h * h, h
    raise ValueError(f"unknown operator {op!r}")


def derive_arch(spec: SupernetSpec,
                op_logits: dict[tuple[str, str, int], np.ndarray],
                ch_logits: dict[tuple[str, str, int], np.ndarray],
                res_logits: dict[str, np.ndarray]) -> SampledArch:
    """Discretise search logits by argmax; ties break toward the cheaper
    candidate (fewer MACs), and for scales/resolutions toward the smaller one.
    """
    space = spec.search_space
    resolutions = {}
    for view in spec.views:
        r = res_logits[view]
        resolutions[view] = space.resolutions[int(np.argmax(r))]  # argmax: first max wins
    ops: dict[tuple[str, str], list[str]] = {}
    scales: dict[tuple[str, str], list[float]] = {}
    eff_in: dict[tuple[str, str], int] = {}
    h_in: dict[tuple[str, str], int] = {}
    for view, branch, i, c_in_max, c_out_max, stride in spec.blocks():
        key = (view, branch)
        if i == 0:
            bb = (view, "backbone")
            stem_eff = spec.stem_channels
            stem_h = conv_out_hw(resolutions[view], 3, 2, 1)
            if branch == "backbone":
                eff_in[key], h_in[key] = stem_eff, stem_h
            else:
                # falls back to the stem when the backbone has no blocks
                eff_in[key] = eff_in.get(bb, stem_eff)
                h_in[key] = h_in.get(bb, stem_h)
        cl = ch_logits[(view, branch, i)]
        sc = space.channel_scales[int(np.argmax(cl))]  # first max = smaller scale
        c_out_eff = scaled_channels(sc, c_out_max)
        ol = op_logits[(view, branch, i)]
        best = np.flatnonzero(ol == ol.max())
        if len(best) > 1:
            costs = [block_macs(spec, space.operators[j], eff_in[key], c_out_eff,
                                stride, h_in[key])[0] for j in best]
            chosen = space.operators[best[int(np.argmin(costs))]]
        else:
            chosen = space.operators[int(best[0])]
        ops.setdefault(key, []).append(chosen)
        scales.setdefault(key, []).append(sc)
        _, h = block_macs(spec, chosen, eff_in[key], c_out_eff, stride, h_in[key])
        eff_in[key], h_in[key] = c_out_eff, h
    return SampledArch(operators=ops, channel_scales=scales, resolutions=resolutions)


# ---------------------------------------------------------------------------
# standalone realization of one sampled architecture
# ---------------------------------------------------------------------------

class DiscreteEncoder:
    """A sampled architecture built from scratch at its effective widths.

    This is the deployable network: each block keeps only its chosen operator,
    sized to ceil(scale * max) channels (a skip with mismatched effective
    dimensions or a stride becomes a 1x1 convolution). The FLOPs counter
    describes exactly this computation.
    """

    def __init__(self, spec: SupernetSpec, arch: SampledArch, seed: int):
        validate_arch(spec, arch)
        self.spec = spec
        self.arch = arch
        self.weights: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def conv_param(name, co, ci, k):
            self.weights[name] = Tensor(_he(rng, (co, ci, k, k), ci * k * k),
                                        requires_grad=True)
            self.weights[name + "_bias"] = Tensor(np.zeros((co, 1, 1)),
                                                  requires_grad=True)

        def affine_param(name, ci, d):
            self.weights[name] = Tensor(
                rng.normal(0.0, math.sqrt(1.0 / ci), size=(ci, d)), requires_grad=True)
            self.weights[name + "_bias"] = Tensor(np.zeros(d), requires_grad=True)

        self._eff: dict[tuple[str, str], list[int]] = {}
        for view in spec.views:
            conv_param(f"{view}/stem", spec.stem_channels, 1, 3)
            conv_param(f"{view}/early", spec.early_channels, spec.stem_channels, 3)
            bb_out = spec.stem_channels
            for branch, (chans, strides) in spec.branches(view).items():
                eff = spec.stem_channels if branch == "backbone" else bb_out
                effs = []
                for i, (c_max, stride) in enumerate(zip(chans, strides)):
                    op = arch.op_at(view, branch, i)
                    co = scaled_channels(arch.scale_at(view, branch, i), c_max)
                    base = f"{view}/{branch}/b{i}"
                    if op == "conv":
                        conv_param(base + "/conv", co, eff, 3)
                    elif op == "fuse-mb":
                        mid = spec.fused_mid(co)
                        conv_param(base + "/expand", mid, eff, 3)
                        conv_param(base + "/project", co, mid, 1)
                    elif eff != co or stride != 1:
                        self.weights[base + "/skip"] = Tensor(
                            _he(rng, (co, eff, 1, 1), eff), requires_grad=True)
                    eff = co
                    effs.append(co)
                self._eff[(view, branch)] = effs
                if branch == "backbone":
                    bb_out = eff
                else:
                    affine_param(f"{view}/{branch}/head", eff, spec.head_dim(branch))
        affine_param("head", len(spec.views) * spec.latent_feat_dim, spec.z_dim)
        affine_param("early_head", len(spec.views) * spec.early_channels, spec.z_dim)

    def parameters(self) -> list[Tensor]:
        return list(self.weights.values())

    def _block(self, x, view, branch, i, stride):
        op = self.arch.op_at(view, branch, i)
        base = f"{view}/{branch}/b{i}"
        w = self.weights
        if op == "conv":
            return relu(add(conv2d(x, w[base + "/conv"], stride=stride, padding=1),
                            w[base + "/conv_bias"]))
        if op == "fuse-mb":
            h = silu(add(conv2d(x, w[base + "/expand"], stride=stride, padding=1),
                         w[base + "/expand_bias"]))
            return add(conv2d(h, w[base + "/project"], stride=1, padding=0),
                       w[base + "/project_bias"])
        if base + "/skip" in w:
            return conv2d(x, w[base + "/skip"], stride=stride, padding=0)
        return x

    def _stem(self, frame: Tensor, view: str) -> Tensor:
        x = frame if isinstance(frame, Tensor) else Tensor(frame)
        res = self.arch.resolutions[view]
        if x.shape[2] != res or x.shape[3] != res:
            x = resize_bilinear(x, res, res)
        return relu(add(conv2d(x, self.weights[f"{view}/stem"], stride=2, padding=1),
                        self.weights[f"{view}/stem_bias"]))

    def _early_feat(self, s0: Tensor, view: str) -> Tensor:
        e = relu(add(conv2d(s0, self.weights[f"{view}/early"], stride=2, padding=1),
                     self.weights[f"{view}/early_bias"]))
        return global_avg_pool(e)

    def forward(self, frames: dict, with_early: bool = False) -> EncoderOutput:
        spec = self.spec
        missing = [v for v in spec.views if v not in frames]
        if missing:
            raise ShapeError(f"DiscreteEncoder.forward: missing views {missing}")
        feats, early_feats, gaze, kpts = {}, {}, {}, {}
        for view in spec.views:
            s0 = self._stem(frames[view], view)
            if with_early:
                early_feats[view] = self._early_feat(s0, view)
            h = s0
            for i, stride in enumerate(spec.backbone_strides):
                h = self._block(h, view, "backbone", i, stride)
            for branch, (chans, strides) in spec.branches(view).items():
                if branch == "backbone":
                    continue
                b = h
                for i, stride in enumerate(strides):
                    b = self._block(b, view, branch, i, stride)
                proj = _affine(global_avg_pool(b),
                               self.weights[f"{view}/{branch}/head"],
                               self.weights[f"{view}/{branch}/head_bias"])
                if branch == "latent":
                    feats[view] = proj
                elif branch == "gaze":
                    gaze[view] = proj
                else:
                    kpts[view] = proj
        z = _affine(concat([feats[v] for v in spec.views], axis=1),
                    self.weights["head"], self.weights["head_bias"])
        if spec.eye_views:
            g = concat([gaze[v] for v in spec.eye_views], axis=1)
        else:
            g = Tensor(np.zeros((z.shape[0], 0)))
        z_early = None
        if with_early:
            z_early = _affine(concat([early_feats[v] for v in spec.views], axis=1),
                              self.weights["early_head"], self.weights["early_head_bias"])
        return EncoderOutput(z=z, gaze=gaze, g=g, keypoints=kpts, view_feats=feats,
                             z_early=z_early)

    def forward_early(self, frames: dict) -> Tensor:
        """Just the early prediction path: stem, one conv, pool, one affine."""
        feats = [self._early_feat(self._stem(frames[v], v), v) for v in self.spec.views]
        return _affine(concat(feats, axis=1),
                       self.weights["early_head"], self.weights["early_head_bias"])
