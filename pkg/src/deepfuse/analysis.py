"""Structural analyses of fused nets: block exchange and grouping
enumeration, shortest-path information flow, receptive fields, and
parameter counting.

All analyses are read-only over specs and nets and safe to run
concurrently; exchange_blocks returns a fresh net and leaves its
argument untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

from .fusenet import FusedNet
from .netspec import FusedNetSpec, NetPlan, NetworkSpec, expand


@dataclass(frozen=True)
class Grouping:
    """Block-ownership assignment: assignment[b][k] is the original member
    whose stage-b block sits in chain k. Every row is a permutation of the
    member indices; the first row is pinned to quotient out whole-chain
    relabeling."""

    assignment: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class PathMetrics:
    """Conv-layer path lengths through the block graph.

    shortest_to_output[b]: fewest convs from the b-th fused output to the
    final representation (0 for the last stage). shortest_from_input[b]:
    fewest convs from the input to the b-th fused output. block_sizes[k][b]
    is member k's stage-b conv count; pools and identity links count 0.
    """

    shortest_to_output: tuple[int, ...]
    shortest_from_input: tuple[int, ...]
    block_sizes: tuple[tuple[int, ...], ...]


def enumerate_groupings(num_members: int, num_stages: int) -> list[Grouping]:
    """All distinct block-ownership assignments modulo whole-chain
    relabeling; at most (K!)^(B-1) of them.

    Pinning the first stage's row to the identity removes exactly the
    relabeling freedom, leaving one representative per equivalence class.
    """
    if num_members < 1 or num_stages < 1:
        raise ValueError("need at least one member and one stage")
    identity = tuple(range(num_members))
    if num_stages == 1 or num_members == 1:
        return [Grouping(assignment=tuple([identity] * num_stages))]
    perms = [tuple(p) for p in permutations(range(num_members))]
    out: list[Grouping] = []

    def rec(prefix: list[tuple[int, ...]]):
        if len(prefix) == num_stages:
            out.append(Grouping(assignment=tuple(prefix)))
            return
        for p in perms:
            rec(prefix + [p])

    rec([identity])
    return out


def exchange_blocks(net: FusedNet, stage: int, i: int, j: int) -> FusedNet:
    """Swap ownership of the stage's blocks between member chains i and j.

    Indices are 0-based. Under sum or max fusion the fused forward function
    is unchanged; only the bookkeeping of which chain owns which block
    moves. The input net is left untouched.
    """
    if not 0 <= stage < net.num_stages:
        raise IndexError(f"stage {stage} outside [0, {net.num_stages})")
    if not (0 <= i < net.num_members and 0 <= j < net.num_members):
        raise IndexError(f"member index outside [0, {net.num_members})")
    if i == j:
        raise ValueError("exchange needs two distinct members")
    twin = net.clone()
    blocks = twin.stages[stage].blocks
    blocks[i], blocks[j] = blocks[j], blocks[i]
    blocks[i].owner, blocks[j].owner = i, j
    # keep the plan's bookkeeping aligned with the live layout
    from dataclasses import replace

    sp = twin.plan.stages[stage]
    plan_blocks = list(sp.blocks)
    plan_blocks[i], plan_blocks[j] = (replace(plan_blocks[j], owner=i),
                                      replace(plan_blocks[i], owner=j))
    new_stages = list(twin.plan.stages)
    new_stages[stage] = replace(sp, blocks=tuple(plan_blocks))
    twin.plan = replace(twin.plan, stages=tuple(new_stages))
    return twin


def apply_grouping(net: FusedNet, grouping: Grouping) -> FusedNet:
    """Regroup a net's blocks per the assignment via pairwise exchanges."""
    out = net.clone()
    for b, row in enumerate(grouping.assignment):
        # place the block of original member row[k] into chain k
        current = list(range(net.num_members))  # current[pos] = original owner
        for k in range(net.num_members):
            src = current.index(row[k])
            if src != k:
                out = exchange_blocks(out, b, k, src)
                current[k], current[src] = current[src], current[k]
    return out


def path_metrics(spec: FusedNetSpec, input_channels: int = 3) -> PathMetrics:
    """Shortest conv paths through the fused block graph, per stage."""
    plan = expand(spec, input_channels=input_channels)
    k_members = len(spec.members)
    b_stages = len(plan.stages)
    sizes = [[plan.stages[b].blocks[k].size for b in range(b_stages)]
             for k in range(k_members)]
    mins = [min(sizes[k][b] for k in range(k_members)) for b in range(b_stages)]
    to_output = tuple(sum(mins[t] for t in range(b + 1, b_stages))
                      for b in range(b_stages))
    from_input = tuple(sum(mins[t] for t in range(b + 1)) for b in range(b_stages))
    return PathMetrics(
        shortest_to_output=to_output,
        shortest_from_input=from_input,
        block_sizes=tuple(tuple(row) for row in sizes),
    )


def receptive_field(path: list[str]) -> tuple[int, int]:
    """Receptive-field size and jump of a layer-kind chain.

    Standard recurrence: a kernel of extent k grows the field by (k-1)
    times the current jump; a strided layer multiplies the jump.
    """
    size, jump = 1, 1
    for kind in path:
        if kind == "conv3x3":
            size += 2 * jump
        elif kind == "conv1x1":
            pass
        elif kind == "maxpool2":
            size += 1 * jump
            jump *= 2
        elif kind in ("avgpool-global", "linear", "batchnorm", "relu"):
            pass
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return size, jump


def chain_kinds(spec: FusedNetSpec, choice: list[int] | int,
                input_channels: int = 3) -> list[str]:
    """Layer kinds along one chain through the fused net: one block per
    stage plus the shared stage pools. `choice` picks the member per stage
    (a single index means one original chain throughout)."""
    plan = expand(spec, input_channels=input_channels)
    if isinstance(choice, int):
        choice = [choice] * len(plan.stages)
    kinds: list[str] = []
    for b, sp in enumerate(plan.stages):
        if sp.prepool:
            kinds.append("maxpool2")
        for u in sp.blocks[choice[b]].units:
            kinds.append(u.kind)
    return kinds


def count_params(obj, num_classes: int = 10, input_channels: int = 3) -> int:
    """Trainable parameter count: conv weights and biases, batchnorm scale
    and shift, classifier weights and biases. Batchnorm running statistics
    are state, not parameters, and are excluded."""
    if isinstance(obj, NetworkSpec):
        from .netspec import BlockDivision, Member

        whole = tuple(cid for cid, _, _ in obj.conv_seq())
        member = Member(spec=obj, division=BlockDivision(
            name=f"{obj.name}/whole", network=obj.name, blocks=(whole,)))
        obj = FusedNetSpec(members=(member,), num_classes=num_classes)
    if isinstance(obj, FusedNetSpec):
        obj = expand(obj, input_channels=input_channels)
    if isinstance(obj, NetPlan):
        total = 0
        for sp in obj.stages:
            for blk in sp.blocks:
                for u in blk.units:
                    if u.kind == "maxpool2":
                        continue
                    k = 3 if u.kind == "conv3x3" else 1
                    total += k * k * u.in_channels * u.out_channels  # weights
                    total += u.out_channels                          # bias
                    total += 2 * u.out_channels                      # bn gamma/beta
        fc, classes = obj.fc_channels, obj.num_classes
        total += obj.head_in * fc + fc + 2 * fc                      # fc conv + bn
        total += fc * classes + classes                              # classifier
        return total
    # a live net: FusedNet or UnidirectionalNet
    return int(sum(arr.size for arr in obj.params().values()))


def analysis_report(spec: FusedNetSpec, input_channels: int = 3) -> dict:
    """JSON-ready structural report for a spec."""
    plan = expand(spec, input_channels=input_channels)
    pm = path_metrics(spec, input_channels)
    k = len(spec.members)
    b = len(plan.stages)
    rf = {}
    for m_idx, member in enumerate(spec.members):
        kinds = chain_kinds(spec, m_idx, input_channels)
        size, jump = receptive_field(kinds)
        rf[member.division.name] = {"size": size, "jump": jump}
    return {
        "members": [m.division.name for m in spec.members],
        "fusion": spec.fusion.value,
        "fuse_point": spec.fuse_point,
        "classes": spec.num_classes,
        "stages": b,
        "grouping_count": len(enumerate_groupings(k, b)),
        "grouping_bound": _factorial(k) ** (b - 1),
        "block_sizes": [list(row) for row in pm.block_sizes],
        "shortest_to_output": list(pm.shortest_to_output),
        "shortest_from_input": list(pm.shortest_from_input),
        "receptive_fields": rf,
        "param_count": count_params(spec, input_channels=input_channels),
    }


def _factorial(n: int) -> int:
    out = 1
    for i in range(2, n + 1):
        out *= i
    return out


def describe_text(spec: FusedNetSpec, input_channels: int = 3) -> str:
    """Aligned plain-text tables: member chains, block division, totals."""
    plan = expand(spec, input_channels=input_channels)
    lines = []
    lines.append(f"fused net: {'+'.join(m.division.name for m in spec.members)}  "
                 f"fusion={spec.fusion.value}  fuse_point={spec.fuse_point}  "
                 f"classes={spec.num_classes}")
    lines.append("")
    header = f"{'member':<12}{'#layers':>8}{'convs':>7}  stages"
    lines.append(header)
    lines.append("-" * len(header))
    for m in spec.members:
        convs = len(m.spec.conv_seq())
        stages_txt = " ".join(
            f"[{sd.kind}x{sd.repeat},{sd.channels}]" if sd.kind != "maxpool2" else "pool"
            for sd in m.spec.stages)
        lines.append(f"{m.spec.name:<12}{m.spec.layer_count:>8}{convs:>7}  {stages_txt}")
    lines.append("")
    col = max(len(m.division.name) for m in spec.members) + 2
    lines.append("block division (convs per block; '-' = identity)")
    head2 = "".join(f"{'b' + str(b + 1):>6}" for b in range(len(plan.stages)))
    lines.append(f"{'':<{col}}{head2}{'prepool':>9}")
    for k, m in enumerate(spec.members):
        cells = ""
        for sp in plan.stages:
            blk = sp.blocks[k]
            cells += f"{blk.size if blk.units else '-':>6}"
        lines.append(f"{m.division.name:<{col}}{cells}")
    pools = "".join(f"{('yes' if sp.prepool else ''):>6}" for sp in plan.stages)
    lines.append(f"{'pool before':<{col}}{pools}")
    lines.append("")
    lines.append(f"parameters: {count_params(spec, input_channels=input_channels):,}")
    return "\n".join(lines)
