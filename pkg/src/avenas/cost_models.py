"""Cost accounting: the measured-latency lookup table and the MAC/FLOPs counter.

Latency tables are CSV files keyed by (view, branch, block, operator,
channel-scale, resolution); an architecture's latency is the plain sum of its
chosen entries, mirroring how per-operator device measurements compose. The
FLOPs counter reports multiply-accumulates (1 MAC = 1 FLOP) per branch for one
discrete architecture, with the fixed stem and projection heads broken out
separately from the searchable blocks.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib.resources import files

from .supernet import (
    SampledArch, SupernetSpec,
    block_macs, conv_out_hw, scaled_channels, validate_arch,
)

LUT_COLUMNS = ("view", "branch", "block", "op", "scale", "resolution", "latency_ms")

LutKey = tuple[str, str, int, str, float, int]


class LatencyTableError(ValueError):
    pass


@dataclass
class LatencyTable:
    entries: dict[LutKey, float]
    device: str = "unknown"
    notes: str = ""

    def query(self, view: str, branch: str, block: int, op: str,
              scale: float, resolution: int) -> float:
        key = (view, branch, block, op, scale, resolution)
        try:
            return self.entries[key]
        except KeyError:
            raise LatencyTableError(f"latency table has no entry for {key}") from None

    def validate_coverage(self, spec: SupernetSpec) -> None:
        space = spec.search_space
        missing = []
        for view, branch, i, *_ in spec.blocks():
            for op in space.operators:
                for sc in space.channel_scales:
                    for res in space.resolutions:
                        if (view, branch, i, op, sc, res) not in self.entries:
                            missing.append((view, branch, i, op, sc, res))
        if missing:
            raise LatencyTableError(
                f"latency table misses {len(missing)} entries; first: {missing[0]}")

    def save(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LUT_COLUMNS)
            for (view, branch, block, op, scale, res), ms in self.entries.items():
                w.writerow([view, branch, block, op, repr(scale), res, repr(ms)])


def load_latency_table(path) -> LatencyTable:
    entries: dict[LutKey, float] = {}
    first_row: dict[LutKey, int] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise LatencyTableError(f"{path}: empty file, expected header row") from None
        if tuple(h.strip() for h in header) != LUT_COLUMNS:
            raise LatencyTableError(
                f"{path}: bad header {header}, expected {list(LUT_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(LUT_COLUMNS):
                raise LatencyTableError(f"{path}:{lineno}: expected "
                                        f"{len(LUT_COLUMNS)} columns, got {len(row)}")
            try:
                key = (row[0], row[1], int(row[2]), row[3], float(row[4]), int(row[5]))
                ms = float(row[6])
            except ValueError as e:
                raise LatencyTableError(f"{path}:{lineno}: {e}") from None
            if ms < 0:
                raise LatencyTableError(f"{path}:{lineno}: negative latency {ms}")
            if key in entries:
                raise LatencyTableError(
                    f"{path}:{lineno}: duplicate key {key} (first seen at row "
                    f"{first_row[key]})")
            entries[key] = ms
            first_row[key] = lineno
    return LatencyTable(entries=entries)


def _block_spatial(spec: SupernetSpec, res: int) -> dict[tuple[str, int], int]:
    """Input spatial size of every (branch, block) at one input resolution."""
    h = conv_out_hw(res, 3, 2, 1)           # stem
    sizes = {}
    backbone_out = h
    for branch in ("backbone", "latent", "gaze", "keypoint"):
        chans, strides = {
            "backbone": (spec.backbone_channels, spec.backbone_strides),
            "latent": (spec.latent_channels, spec.latent_strides),
            "gaze": (spec.gaze_channels, spec.gaze_strides),
            "keypoint": (spec.keypoint_channels, spec.keypoint_strides),
        }[branch]
        cur = h if branch == "backbone" else backbone_out
        for i, s in enumerate(strides):
            sizes[(branch, i)] = cur
            cur = conv_out_hw(cur, 3, s, 1)
        if branch == "backbone":
            backbone_out = cur
    return sizes


def single_block_macs(spec: SupernetSpec, view: str, branch: str, block: int,
                      op: str, scale: float, resolution: int,
                      c_in: int | None = None) -> int:
    """MACs of one block in isolation; input width defaults to the nominal
    schedule (this is the convention synthetic latency entries use)."""
    chans = dict(spec.branches(view))[branch][0]
    strides = dict(spec.branches(view))[branch][1]
    c_in_max = (spec.stem_channels if branch == "backbone"
                else spec.backbone_out_channels()) if block == 0 else chans[block - 1]
    c_out = scaled_channels(scale, chans[block])
    h_in = _block_spatial(spec, resolution)[(branch, block)]
    macs, _ = block_macs(spec, op, c_in if c_in is not None else c_in_max,
                         c_out, strides[block], h_in)
    return macs


def synthetic_latency_table(spec: SupernetSpec, device: str = "synthetic",
                            per_mac_ns: dict[str, float] | None = None,
                            overhead_ms: float = 0.002) -> LatencyTable:
    """Deterministic stand-in for device measurements: latency proportional to
    the block's MAC count with a per-operator device factor plus a fixed
    dispatch overhead."""
    per_mac = per_mac_ns or {"conv": 1.0e-6, "fuse-mb": 1.2e-6, "skip": 0.6e-6}
    space = spec.search_space
    entries: dict[LutKey, float] = {}
    for view, branch, i, *_ in spec.blocks():
        for op in space.operators:
            for sc in space.channel_scales:
                for res in space.resolutions:
                    macs = single_block_macs(spec, view, branch, i, op, sc, res)
                    entries[(view, branch, i, op, sc, res)] = \
                        overhead_ms + macs * per_mac[op]
    return LatencyTable(entries=entries, device=device,
                        notes="synthetic MAC-proportional model")


def score_arch(spec: SupernetSpec, arch: SampledArch, lut: LatencyTable) -> float:
    """Summed-up latency of the chosen entries, in block order."""
    total = 0.0
    for view, branch, i, *_ in spec.blocks():
        total += lut.query(view, branch, i, arch.op_at(view, branch, i),
                           arch.scale_at(view, branch, i), arch.resolutions[view])
    return total


# ---------------------------------------------------------------------------
# FLOPs accounting
# ---------------------------------------------------------------------------

@dataclass
class FlopsReport:
    branches: dict[str, float]      # "view/branch" -> MFLOPs of searchable blocks
    fixed: dict[str, float]         # stems, projection heads, final latent head
    total_mflops: float = field(init=False)

    def __post_init__(self):
        self.total_mflops = sum(self.branches.values()) + sum(self.fixed.values())

    def to_json_dict(self) -> dict:
        return {"branches": dict(sorted(self.branches.items())),
                "fixed": dict(sorted(self.fixed.items())),
                "total_mflops": self.total_mflops}


def count_flops(arch: SampledArch, spec: SupernetSpec) -> FlopsReport:
    """Per-branch multiply-accumulate counts of one discrete architecture."""
    validate_arch(spec, arch)
    branches: dict[str, float] = {}
    fixed: dict[str, float] = {}
    for view in spec.views:
        res = arch.resolutions[view]
        stem_h = conv_out_hw(res, 3, 2, 1)
        fixed[f"{view}/stem"] = 9 * 1 * spec.stem_channels * stem_h * stem_h / 1e6
        spatial = _block_spatial(spec, res)
        eff = {"backbone": spec.stem_channels}
        for branch, (chans, strides) in spec.branches(view).items():
            c_in = eff["backbone"] if branch == "backbone" else eff["backbone_out"]
            macs = 0
            for i, s in enumerate(strides):
                op = arch.op_at(view, branch, i)
                c_out = scaled_channels(arch.scale_at(view, branch, i), chans[i])
                m, _ = block_macs(spec, op, c_in, c_out, s, spatial[(branch, i)])
                macs += m
                c_in = c_out
            branches[f"{view}/{branch}"] = macs / 1e6
            if branch == "backbone":
                eff["backbone_out"] = c_in
            else:
                fixed[f"{view}/{branch}_head"] = c_in * spec.head_dim(branch) / 1e6
    fixed["shared/latent_head"] = (len(spec.views) * spec.latent_feat_dim * spec.z_dim) / 1e6
    return FlopsReport(branches=branches, fixed=fixed)


REFERENCE_ARCHS = ("ave_s", "ave_m", "ave_l")


def load_reference_arch(name: str) -> tuple[SampledArch, dict]:
    """One of the bundled encoder encodings plus its published MFLOPs figures."""
    if name not in REFERENCE_ARCHS:
        raise ValueError(f"unknown reference architecture {name!r}; "
                         f"have {list(REFERENCE_ARCHS)}")
    doc = json.loads((files("avenas") / "reference_archs" / f"{name}.json").read_text())
    return SampledArch.from_json_dict(doc), doc.get("reported_mflops", {})


def early_head_mflops(arch: SampledArch, spec: SupernetSpec) -> float:
    """FLOPs of the early-prediction head (conv after the stem, pool, affine).

    Its conv input is the fixed-width stem output, so the cost depends only on
    the input resolutions, never on the searched choices.
    """
    total = 0
    for view in spec.views:
        stem_h = conv_out_hw(arch.resolutions[view], 3, 2, 1)
        conv_h = conv_out_hw(stem_h, 3, 2, 1)
        total += 9 * spec.stem_channels * spec.early_channels * conv_h * conv_h
    total += len(spec.views) * spec.early_channels * spec.z_dim
    return total / 1e6
