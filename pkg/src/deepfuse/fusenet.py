"""Executable fused networks: deep, shallow, unidirectional, decision modes.

A fused net holds K member chains split into B blocks each. The deep
forward fuses the K block outputs at every stage and feeds the fused
tensor to every member's next block; backward applies, stage by stage,
the sum of the member blocks' vector-Jacobian products, so the gradient
reaching x0 is the right-to-left product of those per-stage sums.

Pools sitting at a stage boundary are evaluated once on the fused input
and shared by all members; pools buried inside a block belong to that
member alone. With fuse_point "before_relu" the blocks' final activations
are dropped and one ReLU is applied to the fused tensor; "after_relu"
keeps the per-member activations and fuses the results directly.
Identity blocks contribute their input unchanged under either setting.
"""

from __future__ import annotations

import numpy as np

from .layers import (
    BatchNorm2d,
    Conv2d,
    Fuse,
    GlobalAvgPool,
    GradBundle,
    MaxPool2,
    ReLU,
    ShapeError,
    nchw_to_nhwc,
    nhwc_to_nchw,
    softmax_probs,
    softmax_xent,
)
from .netspec import (
    BlockDivision,
    FusedNetSpec,
    FusionKind,
    Member,
    NetPlan,
    NetworkSpec,
    SpecError,
    StageDef,
    expand,
)


class ConvUnit:
    """conv + batchnorm (+ trailing relu), the repeating cell of a block."""

    def __init__(self, kind: str, in_ch: int, out_ch: int, final_relu: bool, dtype):
        self.conv = Conv2d(in_ch, out_ch, 3 if kind == "conv3x3" else 1, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)
        self.relu = ReLU() if final_relu else None

    def forward(self, x, train):
        h = self.bn.forward(self.conv.forward(x, train), train)
        return self.relu.forward(h) if self.relu else h

    def backward(self, dy):
        if self.relu:
            dy = self.relu.backward(dy)
        return self.conv.backward(self.bn.backward(dy))

    def sublayers(self):
        return {"conv": self.conv, "bn": self.bn}


class PoolUnit:
    """A member-private 2x2 max pool carried inside a block."""

    def __init__(self):
        self.pool = MaxPool2()

    def forward(self, x, train):
        return self.pool.forward(x)

    def backward(self, dy):
        return self.pool.backward(dy)

    def sublayers(self):
        return {}


class Block:
    """One member's contiguous sub-chain between two fusion stages.

    An empty unit list is an identity block: it passes its input through
    untouched and owns no parameters.
    """

    def __init__(self, owner: int, stage: int, units: list, conv_ids: tuple[str, ...]):
        self.owner = owner
        self.stage = stage
        self.units = units
        self.conv_ids = conv_ids

    @property
    def size(self) -> int:
        return sum(1 for u in self.units if isinstance(u, ConvUnit))

    def forward(self, x, train):
        if not self.units:
            return x
        for i, unit in enumerate(self.units):
            try:
                x = unit.forward(x, train)
            except ShapeError as e:
                raise ShapeError(
                    f"member {self.owner}, stage {self.stage + 1}, unit {i}: {e}") from e
        return x

    def backward(self, dy):
        for unit in reversed(self.units):
            dy = unit.backward(dy)
        return dy


class StageRun:
    def __init__(self, prepool: bool, blocks: list[Block], fusion: FusionKind,
                 post_relu: bool):
        self.prepool = MaxPool2() if prepool else None
        self.blocks = blocks
        self.fuse = Fuse(fusion.value)
        self.post_relu = ReLU() if post_relu else None


class Head:
    """Shared classification head: 1x1 fc conv + global avg pool + 1x1 classifier."""

    def __init__(self, in_ch: int, fc_channels: int, num_classes: int, dtype):
        self.fc = ConvUnit("conv1x1", in_ch, fc_channels, final_relu=True, dtype=dtype)
        self.pool = GlobalAvgPool()
        self.ip = Conv2d(fc_channels, num_classes, 1, dtype=dtype)

    def forward(self, x, train):
        return self.ip.forward(self.pool.forward(self.fc.forward(x, train)), train)

    def backward(self, d_scores):
        return self.fc.backward(self.pool.backward(self.ip.backward(d_scores)))


class AuxHead:
    """Per-stage auxiliary classifier: global avg pool + 1x1 linear."""

    def __init__(self, in_ch: int, num_classes: int, dtype):
        self.pool = GlobalAvgPool()
        self.ip = Conv2d(in_ch, num_classes, 1, dtype=dtype)

    def forward(self, x, train):
        return self.ip.forward(self.pool.forward(x), train)

    def backward(self, d_scores):
        return self.pool.backward(self.ip.backward(d_scores))


def _build_block(plan_block, fuse_point: str, dtype) -> Block:
    units = []
    n_convs = sum(1 for u in plan_block.units if u.kind != "maxpool2")
    seen = 0
    for u in plan_block.units:
        if u.kind == "maxpool2":
            units.append(PoolUnit())
            continue
        seen += 1
        final = seen == n_convs
        trailing_relu = (not final) or fuse_point == "after_relu"
        units.append(ConvUnit(u.kind, u.in_channels, u.out_channels,
                              final_relu=trailing_relu, dtype=dtype))
    return Block(plan_block.owner, plan_block.stage, units, plan_block.conv_ids)


class _ParamContainer:
    """Name-keyed access to every layer's parameters, gradients, and state.

    Subclasses provide _named_layers() yielding (name, layer); arrays are
    updated in place so optimizer and checkpoint writes stay visible to
    the layers that own them.
    """

    def _named_layers(self):
        raise NotImplementedError

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._named_layers():
            for pname, arr in layer.params().items():
                out[f"{name}.{pname}"] = arr
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._named_layers():
            for pname, arr in layer.grads().items():
                out[f"{name}.{pname}"] = arr
        return out

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._named_layers():
            for sname, arr in layer.state().items():
                out[f"{name}.{sname}"] = arr
        return out

    def decay_param_names(self) -> set[str]:
        out = set()
        for name, layer in self._named_layers():
            for pname in layer.decay_names():
                out.add(f"{name}.{pname}")
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        params = self.params()
        for name, arr in values.items():
            if name not in params:
                raise KeyError(f"unknown parameter {name!r}")
            if params[name].shape != np.shape(arr):
                raise ShapeError(
                    f"parameter {name}: shape {np.shape(arr)} != {params[name].shape}")
            params[name][...] = arr

    def set_state(self, values: dict[str, np.ndarray]) -> None:
        state = self.state()
        for name, arr in values.items():
            if name not in state:
                raise KeyError(f"unknown state array {name!r}")
            state[name][...] = arr

    def zero_grads(self) -> None:
        for g in self.grads().values():
            g[...] = 0

    def _check_input(self, x0: np.ndarray) -> None:
        if x0.ndim != 4:
            raise ShapeError(f"input must be rank 4 NCHW, got rank {x0.ndim}")
        if x0.shape[1] != self.plan.input_channels:
            raise ShapeError(
                f"input has {x0.shape[1]} channels, spec expects "
                f"{self.plan.input_channels}")
        if x0.dtype != self.dtype:
            raise ShapeError(
                f"input dtype {x0.dtype} does not match net dtype {self.dtype}")


class FusedNet(_ParamContainer):
    """K member chains fused at B stages plus a shared classification head.

    Single-writer: forward/backward mutate retained per-layer state, so one
    instance must not run concurrently with itself. Distinct instances are
    fully independent.
    """

    def __init__(self, plan: NetPlan, dtype=np.float32, aux_heads: bool = False):
        self.plan = plan
        self.spec = plan.spec
        self.dtype = np.dtype(dtype)
        self.num_members = len(plan.spec.members)
        self.num_stages = len(plan.stages)
        fuse_point = plan.spec.fuse_point
        self.stages: list[StageRun] = []
        for sp in plan.stages:
            blocks = [_build_block(bp, fuse_point, dtype) for bp in sp.blocks]
            post = fuse_point == "before_relu"
            self.stages.append(StageRun(sp.prepool, blocks, plan.spec.fusion, post))
        self.head = Head(plan.head_in, plan.fc_channels, plan.num_classes, dtype)
        self.aux_heads = None
        if aux_heads:
            self.aux_heads = [
                AuxHead(sp.out_channels, plan.num_classes, dtype) for sp in plan.stages
            ]
        self._fwd_path: str | None = None
        self._fwd_train = False
        self._xbar: list[np.ndarray] = []
        self._shallow = None

    def _named_layers(self):
        for k in range(self.num_members):
            for b, stage in enumerate(self.stages):
                block = stage.blocks[k]
                u_idx = 0
                for unit in block.units:
                    subs = unit.sublayers()
                    if not subs:
                        continue
                    prefix = f"m{k}.b{b}.u{u_idx}"
                    u_idx += 1
                    for sub_name, layer in subs.items():
                        yield f"{prefix}.{sub_name}", layer
        yield "head.fc.conv", self.head.fc.conv
        yield "head.fc.bn", self.head.fc.bn
        yield "head.ip", self.head.ip
        if self.aux_heads:
            for b, aux in enumerate(self.aux_heads):
                yield f"aux{b}.ip", aux.ip

    # -- deep fusion -------------------------------------------------------

    def forward_deep(self, x0: np.ndarray, train: bool = False,
                     with_aux: bool = False):
        """Fuse member blocks at every stage; returns NCHW (N, classes, 1, 1).

        With `with_aux` (net built with auxiliary heads) also returns the
        per-stage auxiliary score tensors.
        """
        if with_aux and self.aux_heads is None:
            raise RuntimeError("net was built without auxiliary heads")
        self._check_input(x0)
        x = nchw_to_nhwc(x0)
        self._xbar = []
        aux_scores = []
        for b, stage in enumerate(self.stages):
            if stage.prepool is not None:
                x = stage.prepool.forward(x)
            outs = [blk.forward(x, train) for blk in stage.blocks]
            x = stage.fuse.forward(outs)
            if stage.post_relu is not None:
                x = stage.post_relu.forward(x)
            self._xbar.append(x)
            if with_aux:
                aux_scores.append(nhwc_to_nchw(self.aux_heads[b].forward(x, train)))
        scores = nhwc_to_nchw(self.head.forward(x, train))
        self._fwd_path, self._fwd_train = "deep", train
        if with_aux:
            return scores, aux_scores
        return scores

    def backward_deep(self, d_scores: np.ndarray,
                      d_aux_scores: list[np.ndarray] | None = None) -> GradBundle:
        """Backpropagate through the fused graph.

        Per stage the incoming gradient fans out through the fusion node and
        the member blocks, and the branch results are summed in ascending
        member order: that sum is the fused block gradient, and iterating it
        right-to-left realizes the product form down to x0.
        """
        if self._fwd_path != "deep":
            raise RuntimeError("backward_deep needs a preceding forward_deep")
        if not self._fwd_train:
            raise RuntimeError("backward_deep requires a train-mode forward")
        if d_aux_scores is not None and self.aux_heads is None:
            raise RuntimeError("net was built without auxiliary heads")
        self.zero_grads()
        d = self.head.backward(nchw_to_nhwc(d_scores))
        for b in range(self.num_stages - 1, -1, -1):
            stage = self.stages[b]
            if d_aux_scores is not None:
                d = d + self.aux_heads[b].backward(nchw_to_nhwc(d_aux_scores[b]))
            if stage.post_relu is not None:
                d = stage.post_relu.backward(d)
            branch = stage.fuse.backward(d)
            d = None
            for k, blk in enumerate(stage.blocks):
                dk = blk.backward(branch[k])
                d = dk if d is None else d + dk
            if stage.prepool is not None:
                d = stage.prepool.backward(d)
        return GradBundle(d_input=nhwc_to_nchw(d), d_params=self.grads())

    @property
    def stage_outputs(self) -> list[np.ndarray]:
        """Retained fused stage outputs from the last forward, as NCHW."""
        return [nhwc_to_nchw(x) for x in self._xbar]

    # -- shallow fusion ----------------------------------------------------

    def forward_shallow(self, x0: np.ndarray, train: bool = False) -> np.ndarray:
        """Run every member chain to completion, fuse once, classify.

        Reuses the member blocks' parameters; pools and activations that the
        deep path shares across members get private instances here.
        """
        self._check_input(x0)
        if self._shallow is None:
            self._shallow = {
                "pools": [[MaxPool2() for _ in self.stages]
                          for _ in range(self.num_members)],
                "relus": [[ReLU() for _ in self.stages]
                          for _ in range(self.num_members)],
                "fuse": Fuse(self.spec.fusion.value),
                "post_relu": ReLU(),
            }
        sh = self._shallow
        before = self.spec.fuse_point == "before_relu"
        outs = []
        for k in range(self.num_members):
            x = nchw_to_nhwc(x0)
            for b, stage in enumerate(self.stages):
                if stage.prepool is not None:
                    x = sh["pools"][k][b].forward(x)
                blk = stage.blocks[k]
                x = blk.forward(x, train)
                if before and b < self.num_stages - 1 and blk.units:
                    # mid-chain stage ends lack their ReLU under before_relu
                    # fusion; a plain chain needs it back
                    x = sh["relus"][k][b].forward(x)
            outs.append(x)
        fused = sh["fuse"].forward(outs)
        if before:
            fused = sh["post_relu"].forward(fused)
        self._fwd_path, self._fwd_train = "shallow", train
        return nhwc_to_nchw(self.head.forward(fused, train))

    def clone(self) -> "FusedNet":
        """Independent deep copy: parameters, state, and block layout
        (which may differ from the original plan after block exchanges)."""
        import copy

        return copy.deepcopy(self)


def build(spec: FusedNetSpec, seed: int = 0, init=None, dtype=np.float32,
          input_channels: int = 3, aux_heads: bool = False) -> FusedNet:
    """Instantiate and initialize a FusedNet from a validated spec.

    `init` is a callable (params_dict, rng) -> None writing values in
    place; the default is He initialization. Identical seeds produce
    bit-identical parameters.
    """
    plan = expand(spec, input_channels=input_channels)
    net = FusedNet(plan, dtype=dtype, aux_heads=aux_heads)
    if init is None:
        from .train import he_init as init  # default initializer
    init(net.params(), np.random.default_rng(seed))
    return net


# -- unidirectional fusion ---------------------------------------------------


class UnidirectionalNet(_ParamContainer):
    """Two chains where the outer feeds the inner but not the other way.

    Member 0 of the spec is the outer chain (a plain network, its own
    activations intact); member 1 is the inner chain. At every stage the
    inner output is the sum of the outer stage output and the inner block
    output, combined before or after the activation per fuse_point. The
    classifier reads the inner chain's final output; nothing flows back
    from the inner to the outer chain in the forward direction.
    """

    def __init__(self, plan: NetPlan, dtype=np.float32):
        if len(plan.spec.members) != 2:
            raise SpecError("unidirectional fusion needs exactly 2 members")
        self.plan = plan
        self.spec = plan.spec
        self.dtype = np.dtype(dtype)
        self.num_stages = len(plan.stages)
        self.before = plan.spec.fuse_point == "before_relu"
        self.outer_blocks, self.inner_blocks = [], []
        self.outer_pools, self.inner_pools = [], []
        self.outer_relus, self.inner_relus = [], []
        self.adds = []
        for sp in plan.stages:
            self.outer_blocks.append(_build_block(sp.blocks[0], "before_relu", dtype))
            self.inner_blocks.append(_build_block(sp.blocks[1], "before_relu", dtype))
            self.outer_pools.append(MaxPool2() if sp.prepool else None)
            self.inner_pools.append(MaxPool2() if sp.prepool else None)
            self.outer_relus.append(ReLU())
            self.inner_relus.append(ReLU())
            self.adds.append(Fuse("sum"))
        self.head = Head(plan.head_in, plan.fc_channels, plan.num_classes, dtype)
        self._fwd_train: bool | None = None

    def _named_layers(self):
        for side, blocks in (("m0", self.outer_blocks), ("m1", self.inner_blocks)):
            for b, block in enumerate(blocks):
                u_idx = 0
                for unit in block.units:
                    subs = unit.sublayers()
                    if not subs:
                        continue
                    prefix = f"{side}.b{b}.u{u_idx}"
                    u_idx += 1
                    for sub_name, layer in subs.items():
                        yield f"{prefix}.{sub_name}", layer
        yield "head.fc.conv", self.head.fc.conv
        yield "head.fc.bn", self.head.fc.bn
        yield "head.ip", self.head.ip

    def forward(self, x0: np.ndarray, train: bool = False) -> np.ndarray:
        self._check_input(x0)
        xo = nchw_to_nhwc(x0)
        xi = xo
        for b in range(self.num_stages):
            if self.outer_pools[b] is not None:
                xo = self.outer_pools[b].forward(xo)
                xi = self.inner_pools[b].forward(xi)
            blk_o, blk_i = self.outer_blocks[b], self.inner_blocks[b]
            pre_o = blk_o.forward(xo, train)
            xo = self.outer_relus[b].forward(pre_o)
            pre_i = blk_i.forward(xi, train)
            if self.before:
                s = self.adds[b].forward([pre_o, pre_i])
                xi = self.inner_relus[b].forward(s)
            else:
                ri = self.inner_relus[b].forward(pre_i) if blk_i.units else pre_i
                xi = self.adds[b].forward([xo, ri])
        self._fwd_train = train
        return nhwc_to_nchw(self.head.forward(xi, train))

    def backward(self, d_scores: np.ndarray) -> GradBundle:
        if self._fwd_train is None:
            raise RuntimeError("backward called before forward")
        if not self._fwd_train:
            raise RuntimeError("backward requires a train-mode forward")
        self.zero_grads()
        d_xi = self.head.backward(nchw_to_nhwc(d_scores))
        d_xo = None
        for b in range(self.num_stages - 1, -1, -1):
            blk_o, blk_i = self.outer_blocks[b], self.inner_blocks[b]
            if self.before:
                ds = self.inner_relus[b].backward(d_xi)
                d_pre_o_add, d_pre_i = self.adds[b].backward(ds)
                d_o_rel = d_xo  # None at the last stage: xo goes nowhere else
            else:
                d_o_rel_add, d_ri = self.adds[b].backward(d_xi)
                d_pre_i = (self.inner_relus[b].backward(d_ri) if blk_i.units else d_ri)
                d_o_rel = d_o_rel_add if d_xo is None else d_o_rel_add + d_xo
                d_pre_o_add = None
            d_xi_prev = blk_i.backward(d_pre_i)
            d_pre_o = (self.outer_relus[b].backward(d_o_rel)
                       if d_o_rel is not None else None)
            if d_pre_o_add is not None:
                d_pre_o = d_pre_o_add if d_pre_o is None else d_pre_o + d_pre_o_add
            d_xo_prev = blk_o.backward(d_pre_o)
            if self.outer_pools[b] is not None:
                d_xo_prev = self.outer_pools[b].backward(d_xo_prev)
                d_xi_prev = self.inner_pools[b].backward(d_xi_prev)
            d_xo, d_xi = d_xo_prev, d_xi_prev
        return GradBundle(d_input=nhwc_to_nchw(d_xo + d_xi), d_params=self.grads())


def build_unidirectional(spec: FusedNetSpec, seed: int = 0, init=None,
                         dtype=np.float32,
                         input_channels: int = 3) -> UnidirectionalNet:
    plan = expand(spec, input_channels=input_channels)
    net = UnidirectionalNet(plan, dtype=dtype)
    if init is None:
        from .train import he_init as init
    init(net.params(), np.random.default_rng(seed))
    return net


def forward_unidirectional(net: UnidirectionalNet, x0: np.ndarray,
                           train: bool = False) -> np.ndarray:
    return net.forward(x0, train=train)


# -- decision fusion ----------------------------------------------------------


def decision_fuse(score_sets: list[np.ndarray], mode: str,
                  labels: np.ndarray | None = None):
    """Combine member classifier outputs.

    mode "separate": arithmetic mean of the members' softmax probabilities,
    for evaluating independently trained members. mode "joint": the joint
    training objective, the mean of member cross-entropies; requires labels
    and returns (loss, [d_scores per member]).
    """
    if not score_sets:
        raise ShapeError("decision_fuse: empty score list")
    base = score_sets[0].shape
    for i, s in enumerate(score_sets[1:], start=1):
        if s.shape != base:
            raise ShapeError(f"decision_fuse: member {i} shape {s.shape} != {base}")
    if mode == "separate":
        probs = [softmax_probs(s) for s in score_sets]
        out = probs[0].copy()
        for p in probs[1:]:
            out += p
        return out / len(probs)
    if mode == "joint":
        if labels is None:
            raise ValueError("decision_fuse: joint mode needs labels")
        k = len(score_sets)
        losses, grads = [], []
        for s in score_sets:
            loss, d = softmax_xent(s, labels)
            losses.append(loss)
            grads.append(d / k)
        return float(np.mean(losses)), grads
    raise ValueError(f"decision_fuse: unknown mode {mode!r}")


# -- residual-network construction --------------------------------------------


def make_resnet_equivalent(plain: NetworkSpec,
                           shortcut_stages: BlockDivision | list,
                           input_channels: int = 3) -> FusedNetSpec:
    """Pair a plain network with a shortcut member so deep fusion
    reproduces a residual network.

    `shortcut_stages` divides the plain chain into the residual blocks
    (a BlockDivision or a list of [first, last] conv-id ranges). The second
    member gets an identity block where a stage preserves the channel count
    and a 1x1 projection block where it changes; shared stage pools handle
    the spatial changes. Every scale change must fall on a block boundary.
    """
    if isinstance(shortcut_stages, BlockDivision):
        division = shortcut_stages
    else:
        seq = plain.conv_seq()
        ids = [cid for cid, _, _ in seq]
        order = {cid: i for i, cid in enumerate(ids)}
        blocks = []
        for rng_ in shortcut_stages:
            pair = (rng_, rng_) if isinstance(rng_, str) else (rng_[0], rng_[-1])
            blocks.append(tuple(ids[order[pair[0]] : order[pair[1]] + 1]))
        division = BlockDivision(name=f"{plain.name}/res", network=plain.name,
                                 blocks=tuple(blocks))

    member1 = Member(spec=plain, division=division)
    probe = FusedNetSpec(members=(member1,), fusion=FusionKind.SUM,
                         fuse_point="before_relu")
    plan = expand(probe, input_channels=input_channels)
    for sp in plan.stages:
        for u in sp.blocks[0].units[1:]:
            if u.kind == "maxpool2":
                raise SpecError(
                    f"stage {sp.index + 1}: scale change inside a residual block; "
                    "shortcut boundaries must align with pools")

    # shortcut chain: a 1x1 projection wherever the stage changes channels,
    # nothing (identity) elsewhere; a pool def precedes a projection exactly
    # when that stage starts with the shared pool
    in_ch = plan.input_channels
    stage_defs: list[StageDef] = []
    is_projection: list[bool] = []
    for sp in plan.stages:
        out_ch = sp.out_channels
        if out_ch != in_ch:
            if sp.prepool:
                stage_defs.append(StageDef("maxpool2", 0, 1))
            stage_defs.append(StageDef("conv1x1", out_ch, 1))
            is_projection.append(True)
        else:
            is_projection.append(False)
        in_ch = out_ch

    shortcut_net = NetworkSpec(name=f"{plain.name}-short", stages=tuple(stage_defs),
                               fc_channels=plain.fc_channels)
    conv_ids = iter(cid for cid, _, _ in shortcut_net.conv_seq())
    short_blocks = tuple((next(conv_ids),) if proj else () for proj in is_projection)
    member2 = Member(
        spec=shortcut_net,
        division=BlockDivision(name=f"{plain.name}-short/res",
                               network=shortcut_net.name, blocks=short_blocks))
    return FusedNetSpec(members=(member1, member2), fusion=FusionKind.SUM,
                        fuse_point="before_relu", num_classes=probe.num_classes)
