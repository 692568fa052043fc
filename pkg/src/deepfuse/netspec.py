"""Base-network architectures, block divisions, and fused-net specs.

A base network is a linear chain of conv stages separated by 2x2 max
pools, closed by a shared classification head (1x1 fc conv, global avg
pool, 1x1 classifier). A block division partitions the chain's conv
layers into B contiguous blocks; fusing K divided networks stage by
stage yields a fused-net spec.

Conv layers are addressed as C<scale><index>: scale counts pool-delimited
segments from 1, index counts convs within the segment from 1 (so C116 is
scale 1, conv 16). A block that starts at the first conv of scale 2 or 3
carries the preceding pool; that pool is evaluated once per stage and
shared by all members, since every member sees the same fused input.

Config files are UTF-8 JSON:

    {"fusion": "sum|max|concat", "fuse_point": "before_relu|after_relu",
     "classes": 10 | 100,
     "members": [{"network": "N13"},
                 {"network": "inline",
                  "stages": [["conv3x3", 32, 5], ["maxpool2", 0, 1], ...],
                  "blocks": [["C11", "C15"], ...]}]}

A member naming a builtin division pulls its stages and blocks from the
catalog. A block entry may be ["C11", "C15"], ["C11"] for a single conv,
or [] for an identity block that owns no layers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum


class SpecError(ValueError):
    """Malformed or unresolvable fused-net configuration."""

    def __init__(self, message: str, where: str = ""):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class FusionKind(str, Enum):
    SUM = "sum"
    MAX = "max"
    CONCAT = "concat"


FUSE_POINTS = ("before_relu", "after_relu")
UNIT_KINDS = ("conv3x3", "conv1x1", "maxpool2")


@dataclass(frozen=True)
class StageDef:
    """One run of identical layers: (kind, out_channels, repeat)."""

    kind: str
    channels: int
    repeat: int


@dataclass(frozen=True)
class NetworkSpec:
    """A base network: ordered stage defs plus the classifier widths."""

    name: str
    stages: tuple[StageDef, ...]
    fc_channels: int = 100

    def conv_seq(self) -> list[tuple[str, str, int]]:
        """Flatten to [(conv_id, kind, out_channels)] in chain order."""
        seq = []
        scale, idx = 1, 0
        for sd in self.stages:
            if sd.kind == "maxpool2":
                if idx == 0:
                    raise SpecError(f"network {self.name}: pool before any conv")
                scale += 1
                idx = 0
                continue
            for _ in range(sd.repeat):
                idx += 1
                seq.append((f"C{scale}{idx}", sd.kind, sd.channels))
        return seq

    def pool_positions(self) -> set[int]:
        """Indices into conv_seq() before which a pool sits."""
        positions = set()
        count = 0
        for sd in self.stages:
            if sd.kind == "maxpool2":
                positions.add(count)
            else:
                count += sd.repeat
        return positions

    @property
    def layer_count(self) -> int:
        """Convs plus the two classifier layers (fc and final 1x1)."""
        return sum(sd.repeat for sd in self.stages if sd.kind != "maxpool2") + 2


@dataclass(frozen=True)
class BlockDivision:
    """Partition of a network's convs into ordered blocks.

    Each block is a tuple of conv ids (possibly empty for an identity
    block). `note` carries a catalog caveat, surfaced by validate().
    """

    name: str
    network: str
    blocks: tuple[tuple[str, ...], ...]
    note: str | None = None

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)


@dataclass(frozen=True)
class Member:
    spec: NetworkSpec
    division: BlockDivision


@dataclass(frozen=True)
class FusedNetSpec:
    members: tuple[Member, ...]
    fusion: FusionKind = FusionKind.SUM
    fuse_point: str = "before_relu"
    num_classes: int = 10

    @property
    def num_stages(self) -> int:
        return self.members[0].division.num_blocks


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    where: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.where}: {self.message}"


# --- builtin catalog ----------------------------------------------------------

_SCALE_CHANNELS = (32, 80, 128)

_NETWORK_REPEATS = {
    "N1": (5, 6, 6),
    "N2": (16, 16, 16),
    "N3": (1, 1, 1),
    "N4": (2, 2, 2),
    "N5": (2, 3, 3),
    "N6": (3, 3, 3),
    "N7": (4, 4, 4),
}

_DIVISION_RANGES = {
    "N13": [("C11", "C15"), ("C21", "C26"), ("C31", "C36")],
    "N33": [("C11", "C11"), ("C21", "C21"), ("C31", "C31")],
    "N43": [("C11", "C12"), ("C21", "C22"), ("C31", "C32")],
    "N63": [("C11", "C13"), ("C21", "C23"), ("C31", "C33")],
    "N73": [("C11", "C14"), ("C21", "C24"), ("C31", "C34")],
    "N16": [("C11", "C12"), ("C13", "C15"), ("C21", "C23"), ("C24", "C26"),
            ("C31", "C33"), ("C34", "C36")],
    "N26": [("C11", "C18"), ("C19", "C116"), ("C21", "C28"), ("C29", "C216"),
            ("C31", "C38"), ("C39", "C316")],
    "N46": [("C11", "C11"), ("C12", "C12"), ("C21", "C21"), ("C22", "C22"),
            ("C31", "C31"), ("C32", "C32")],
    "N18": [("C11", "C12"), ("C13", "C15"), ("C21", "C22"), ("C23", "C24"),
            ("C25", "C26"), ("C31", "C32"), ("C33", "C34"), ("C35", "C36")],
    "N28": [("C11", "C18"), ("C19", "C116"), ("C21", "C25"), ("C26", "C210"),
            ("C211", "C216"), ("C31", "C35"), ("C36", "C310"), ("C311", "C316")],
    "N58": [("C11", "C11"), ("C12", "C12"), ("C21", "C21"), ("C22", "C22"),
            ("C23", "C23"), ("C31", "C31"), ("C32", "C32"), ("C33", "C33")],
}

# The printed 8-block table swaps two third-scale cells between N18 and N28
# (as printed, N18 would reference convs past its network's depth and N28
# would leave a gap). The catalog stores the unique repair that satisfies
# the coverage invariant and flags both divisions.
_DIVISION_NOTES = {
    "N18": "third-scale ranges repaired from an inconsistent source table",
    "N28": "third-scale ranges repaired from an inconsistent source table",
}

_CONV_ID = re.compile(r"^C([1-9])(\d+)$")


def _conv_id_key(conv_id: str) -> tuple[int, int]:
    m = _CONV_ID.match(conv_id)
    if not m:
        raise SpecError(f"malformed conv id {conv_id!r} (expected C<scale><index>)")
    return int(m.group(1)), int(m.group(2))


def _network_spec(name: str) -> NetworkSpec:
    reps = _NETWORK_REPEATS[name]
    stages = []
    for i, (reps_i, ch) in enumerate(zip(reps, _SCALE_CHANNELS)):
        if i > 0:
            stages.append(StageDef("maxpool2", 0, 1))
        stages.append(StageDef("conv3x3", ch, reps_i))
    return NetworkSpec(name=name, stages=tuple(stages))


def _division(name: str) -> BlockDivision:
    network = "N" + name[1]
    net = _network_spec(network)
    ids = [cid for cid, _, _ in net.conv_seq()]
    order = {cid: i for i, cid in enumerate(ids)}
    blocks = []
    for start, end in _DIVISION_RANGES[name]:
        blocks.append(tuple(ids[order[start] : order[end] + 1]))
    return BlockDivision(name=name, network=network, blocks=tuple(blocks),
                         note=_DIVISION_NOTES.get(name))


def builtin_catalog() -> dict[str, NetworkSpec | BlockDivision]:
    """All builtin base networks (N1..N7) and block divisions."""
    catalog: dict[str, NetworkSpec | BlockDivision] = {
        name: _network_spec(name) for name in _NETWORK_REPEATS
    }
    for name in _DIVISION_RANGES:
        catalog[name] = _division(name)
    return catalog


def fused_spec_from_name(name: str, num_classes: int = 10,
                         fusion: FusionKind | str = FusionKind.SUM,
                         fuse_point: str = "before_relu") -> FusedNetSpec:
    """Resolve a concatenated division name like 'N13N33' into a spec."""
    if len(name) % 3 != 0:
        raise SpecError(f"cannot split {name!r} into division names")
    members = []
    for i in range(0, len(name), 3):
        div_name = name[i : i + 3]
        if div_name not in _DIVISION_RANGES:
            raise SpecError(f"unknown block division {div_name!r} in {name!r}")
        div = _division(div_name)
        members.append(Member(spec=_network_spec(div.network), division=div))
    spec = FusedNetSpec(members=tuple(members), fusion=FusionKind(fusion),
                        fuse_point=fuse_point, num_classes=num_classes)
    _check_stage_counts(spec)
    return spec


def scale_width(spec: FusedNetSpec, factor: float) -> FusedNetSpec:
    """Shrink or grow every channel count by `factor` (minimum 1)."""
    if factor <= 0:
        raise SpecError(f"width factor must be positive, got {factor}")

    def scale(c: int) -> int:
        return max(1, round(c * factor))

    members = []
    for m in spec.members:
        stages = tuple(
            sd if sd.kind == "maxpool2" else replace(sd, channels=scale(sd.channels))
            for sd in m.spec.stages)
        members.append(Member(
            spec=replace(m.spec, stages=stages, fc_channels=scale(m.spec.fc_channels)),
            division=m.division))
    return replace(spec, members=tuple(members))


# --- parsing and serialization -------------------------------------------------


def parse_spec(document: str) -> FusedNetSpec:
    """Parse a JSON config into a fully resolved FusedNetSpec.

    Every member's block ranges are expanded to explicit conv-id lists.
    Structural problems raise SpecError carrying the offending field path
    (or the JSON line/column for syntax errors); deeper compatibility
    checks live in validate().
    """
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as e:
        raise SpecError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}")
    if not isinstance(doc, dict):
        raise SpecError("top level must be a JSON object")
    known = {"fusion", "fuse_point", "classes", "members"}
    for key in doc:
        if key not in known:
            raise SpecError(f"unknown field {key!r}", where=key)

    fusion_raw = doc.get("fusion", "sum")
    try:
        fusion = FusionKind(fusion_raw)
    except ValueError:
        raise SpecError(f"unknown fusion kind {fusion_raw!r}", where="fusion")
    fuse_point = doc.get("fuse_point", "before_relu")
    if fuse_point not in FUSE_POINTS:
        raise SpecError(f"fuse_point must be one of {FUSE_POINTS}", where="fuse_point")
    classes = doc.get("classes", 10)
    if not isinstance(classes, int) or classes < 2:
        raise SpecError(f"classes must be an integer >= 2, got {classes!r}",
                        where="classes")

    raw_members = doc.get("members")
    if not isinstance(raw_members, list) or not raw_members:
        raise SpecError("at least one base network is required", where="members")
    members = tuple(
        _parse_member(m, f"members[{i}]") for i, m in enumerate(raw_members))

    spec = FusedNetSpec(members=members, fusion=fusion, fuse_point=fuse_point,
                        num_classes=classes)
    _check_stage_counts(spec)
    return spec


def _parse_member(raw, where: str) -> Member:
    if not isinstance(raw, dict):
        raise SpecError("member must be an object", where=where)
    name = raw.get("network", "inline")
    has_inline = "stages" in raw or "blocks" in raw
    if not has_inline:
        if name in _DIVISION_RANGES:
            div = _division(name)
            return Member(spec=_network_spec(div.network), division=div)
        raise SpecError(f"unknown network name {name!r} and no inline stages",
                        where=f"{where}.network")
    if "stages" not in raw or "blocks" not in raw:
        raise SpecError("inline member needs both 'stages' and 'blocks'", where=where)

    stages = []
    for j, entry in enumerate(raw["stages"]):
        w = f"{where}.stages[{j}]"
        if not (isinstance(entry, list) and len(entry) == 3):
            raise SpecError("stage must be [kind, channels, repeat]", where=w)
        kind, channels, repeat = entry
        if kind not in UNIT_KINDS:
            raise SpecError(f"unknown layer kind {kind!r}", where=w)
        if not isinstance(repeat, int) or repeat < 1:
            raise SpecError(f"repeat must be a positive integer, got {repeat!r}", where=w)
        if kind != "maxpool2" and (not isinstance(channels, int) or channels < 1):
            raise SpecError(f"channels must be a positive integer, got {channels!r}",
                            where=w)
        if kind == "maxpool2":
            stages.extend(StageDef("maxpool2", 0, 1) for _ in range(repeat))
        else:
            stages.append(StageDef(kind, channels, repeat))
    net = NetworkSpec(name=name, stages=tuple(stages),
                      fc_channels=int(raw.get("fc_channels", 100)))

    ids = [cid for cid, _, _ in net.conv_seq()]
    order = {cid: i for i, cid in enumerate(ids)}
    blocks = []
    for j, entry in enumerate(raw["blocks"]):
        w = f"{where}.blocks[{j}]"
        if entry is None:
            entry = []
        if isinstance(entry, str):
            entry = [entry]
        if not isinstance(entry, list) or len(entry) > 2:
            raise SpecError("block must be [], [conv], or [first, last]", where=w)
        if not entry:
            blocks.append(())
            continue
        start, end = entry[0], entry[-1]
        for cid in (start, end):
            if cid not in order:
                raise SpecError(f"conv id {cid!r} not in this network", where=w)
        if order[start] > order[end]:
            raise SpecError(f"malformed range {start}-{end}", where=w)
        blocks.append(tuple(ids[order[start] : order[end] + 1]))
    division = BlockDivision(name=raw.get("division", f"{name}/inline"),
                             network=net.name, blocks=tuple(blocks))
    return Member(spec=net, division=division)


def serialize(spec: FusedNetSpec) -> str:
    """Canonical JSON for a spec; parse_spec(serialize(s)) == s."""
    members = []
    for m in spec.members:
        stages = [[sd.kind, sd.channels, sd.repeat] for sd in m.spec.stages]
        blocks = []
        for blk in m.division.blocks:
            if not blk:
                blocks.append([])
            elif len(blk) == 1:
                blocks.append([blk[0]])
            else:
                blocks.append([blk[0], blk[-1]])
        members.append({
            "network": m.spec.name,
            "division": m.division.name,
            "fc_channels": m.spec.fc_channels,
            "stages": stages,
            "blocks": blocks,
        })
    doc = {
        "fusion": spec.fusion.value,
        "fuse_point": spec.fuse_point,
        "classes": spec.num_classes,
        "members": members,
    }
    return json.dumps(doc, indent=2)


def _check_stage_counts(spec: FusedNetSpec) -> None:
    counts = {m.division.name: m.division.num_blocks for m in spec.members}
    if len(set(counts.values())) > 1:
        detail = ", ".join(f"{name}={b}" for name, b in counts.items())
        raise SpecError(f"members disagree on block count: {detail}", where="members")


# --- expansion to an executable plan -------------------------------------------


@dataclass(frozen=True)
class UnitPlan:
    """One layer inside a block: a conv (with resolved channels) or a pool."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0


@dataclass(frozen=True)
class BlockPlan:
    owner: int
    stage: int
    units: tuple[UnitPlan, ...]
    conv_ids: tuple[str, ...]

    @property
    def size(self) -> int:
        """Parameterized (conv) layers in this block; pools don't count."""
        return sum(1 for u in self.units if u.kind != "maxpool2")

    @property
    def out_channels(self) -> int:
        for u in reversed(self.units):
            if u.kind != "maxpool2":
                return u.out_channels
        return self.in_channels_of_stage

    # set during expansion so identity blocks know their pass-through width
    in_channels_of_stage: int = 0


@dataclass(frozen=True)
class StagePlan:
    index: int
    prepool: bool
    blocks: tuple[BlockPlan, ...]
    out_channels: int


@dataclass(frozen=True)
class NetPlan:
    spec: FusedNetSpec
    stages: tuple[StagePlan, ...]
    head_in: int
    fc_channels: int
    num_classes: int
    input_channels: int = 3


def expand(spec: FusedNetSpec, input_channels: int = 3) -> NetPlan:
    """Resolve a spec into per-stage block plans with concrete channels.

    Raises SpecError where the spec cannot be laid out at all; softer
    compatibility findings are validate()'s business.
    """
    diags = validate(spec, input_channels=input_channels)
    errors = [d for d in diags if d.severity == "error"]
    if errors:
        raise SpecError("; ".join(str(d) for d in errors))
    return _expand_unchecked(spec, input_channels)


def _member_block_layout(m: Member, where: str):
    """Per block: (conv entries, mid-block pool slots, starts_after_pool)."""
    seq = m.spec.conv_seq()
    order = {cid: i for i, (cid, _, _) in enumerate(seq)}
    pools = m.spec.pool_positions()
    covered = []
    layout = []
    cursor = 0
    for j, blk in enumerate(m.division.blocks):
        w = f"{where}.blocks[{j}]"
        if not blk:
            layout.append(([], [], False))
            continue
        idxs = []
        for cid in blk:
            if cid not in order:
                raise SpecError(f"conv id {cid!r} not in network {m.spec.name}", where=w)
            idxs.append(order[cid])
        if idxs != list(range(idxs[0], idxs[-1] + 1)):
            raise SpecError(f"block convs are not contiguous: {blk}", where=w)
        if idxs[0] != cursor:
            raise SpecError(
                f"block starts at conv {idxs[0] + 1}, expected {cursor + 1} "
                "(blocks must tile the chain in order)", where=w)
        cursor = idxs[-1] + 1
        starts_after_pool = idxs[0] in pools and idxs[0] > 0
        mid_pools = [i for i in range(idxs[0] + 1, idxs[-1] + 1) if i in pools]
        entries = [seq[i] for i in idxs]
        covered.extend(idxs)
        layout.append((entries, mid_pools, starts_after_pool))
    if cursor != len(seq):
        raise SpecError(
            f"division {m.division.name} covers {cursor} of {len(seq)} convs",
            where=where)
    return layout


def _expand_unchecked(spec: FusedNetSpec, input_channels: int) -> NetPlan:
    layouts = [
        _member_block_layout(m, f"members[{k}]") for k, m in enumerate(spec.members)
    ]
    b_total = spec.num_stages
    stages = []
    fused_channels = input_channels
    for b in range(b_total):
        prepool = any(layout[b][2] for layout in layouts)
        blocks = []
        for k, layout in enumerate(layouts):
            entries, mid_pools, _ = layout[b]
            seq = spec.members[k].spec.conv_seq()
            order = {cid: i for i, (cid, _, _) in enumerate(seq)}
            units = []
            in_ch = fused_channels
            for cid, kind, out_ch in entries:
                if order[cid] in mid_pools:
                    # pool carried inside the block; private to this member
                    units.append(UnitPlan("maxpool2", in_ch, in_ch))
                units.append(UnitPlan(kind, in_ch, out_ch))
                in_ch = out_ch
            conv_ids = tuple(cid for cid, _, _ in entries)
            blk = BlockPlan(owner=k, stage=b, units=tuple(units),
                            conv_ids=conv_ids, in_channels_of_stage=fused_channels)
            blocks.append(blk)
        outs = [blk.out_channels for blk in blocks]
        if spec.fusion == FusionKind.CONCAT:
            stage_out = sum(outs)
        else:
            stage_out = outs[0]
        stages.append(StagePlan(index=b, prepool=prepool, blocks=tuple(blocks),
                                out_channels=stage_out))
        fused_channels = stage_out
    fc = max(m.spec.fc_channels for m in spec.members)
    return NetPlan(spec=spec, stages=tuple(stages), head_in=fused_channels,
                   fc_channels=fc, num_classes=spec.num_classes,
                   input_channels=input_channels)


def validate(spec: FusedNetSpec, input_channels: int = 3) -> list[Diagnostic]:
    """Compatibility diagnostics for a parsed spec; empty means valid."""
    diags: list[Diagnostic] = []
    if not spec.members:
        return [Diagnostic("error", "members", "at least one base network is required")]

    counts = {m.division.name: m.division.num_blocks for m in spec.members}
    if len(set(counts.values())) > 1:
        detail = ", ".join(f"{n}={b}" for n, b in counts.items())
        diags.append(Diagnostic("error", "members", f"block counts differ: {detail}"))
        return diags

    layouts = []
    for k, m in enumerate(spec.members):
        where = f"members[{k}]"
        try:
            layouts.append(_member_block_layout(m, where))
        except SpecError as e:
            diags.append(Diagnostic("error", e.where or where, str(e)))
            return diags
        if m.division.note:
            diags.append(Diagnostic("warning", f"{where}.division",
                                    f"{m.division.name}: {m.division.note}"))

    if spec.num_classes not in (10, 100):
        diags.append(Diagnostic("warning", "classes",
                                f"{spec.num_classes} classes is outside the usual 10/100"))

    b_total = spec.num_stages
    fused_channels = input_channels
    spatial_div = 1
    for b in range(b_total):
        flags = {}
        for k, layout in enumerate(layouts):
            entries, _, starts_after_pool = layout[b]
            if entries:
                flags[k] = starts_after_pool
        if len(set(flags.values())) > 1:
            diags.append(Diagnostic(
                "error", f"stage {b + 1}",
                "members disagree on whether the stage starts with a pool: "
                + ", ".join(f"member {k}={'pool' if v else 'no pool'}"
                            for k, v in flags.items())))
            return diags
        prepool = any(flags.values())
        spatial_div *= 2 if prepool else 1

        outs, divs = [], []
        for k, layout in enumerate(layouts):
            entries, mid_pools, _ = layout[b]
            out_ch = entries[-1][2] if entries else fused_channels
            outs.append(out_ch)
            divs.append(spatial_div * (2 ** len(mid_pools)))
        if len(set(divs)) > 1:
            diags.append(Diagnostic(
                "error", f"stage {b + 1}",
                f"members produce different spatial sizes (downsample factors {divs})"))
            return diags
        spatial_div = divs[0]

        if spec.fusion in (FusionKind.SUM, FusionKind.MAX):
            if len(set(outs)) > 1:
                diags.append(Diagnostic(
                    "error", f"stage {b + 1}",
                    f"{spec.fusion.value} fusion requires equal stage channels, got {outs}"))
                return diags
            fused_channels = outs[0]
        else:
            fused_channels = sum(outs)
    return diags
