"""Optimization harness: He init, SGD with momentum and weight decay,
staged learning-rate decay, the training modes, and gradient checking.

Weight decay applies to conv and classifier weights only (biases and
batchnorm affine parameters are exempt). The learning-rate schedule is
parameterized by epoch fractions so the canonical 400-epoch protocol
(drops after epochs 200/300/350) scales down proportionally.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import fusenet as fn
from .data import AugmentConfig, Dataset, augment, global_contrast_normalize
from .layers import MaxPool2, ReLU, softmax_probs, softmax_xent
from .netspec import FusedNetSpec

MODES = ("plain", "deep", "decision_joint", "decision_separate", "dsn_aux")


class TrainDivergence(RuntimeError):
    """Loss or gradient went non-finite; carries the last finite state."""

    def __init__(self, message: str, state: "TrainState | None" = None):
        super().__init__(message)
        self.state = state


@dataclass
class TrainConfig:
    lr0: float = 0.1
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch: int = 100
    epochs: int = 40
    lr_drop_points: tuple[float, ...] = (0.5, 0.75, 0.875)
    mode: str = "deep"
    seed: int = 0
    precision: str = "single"
    augment: bool = True
    aux_weight: float = 1.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        pts = tuple(self.lr_drop_points)
        if any(not 0 < p < 1 for p in pts) or list(pts) != sorted(set(pts)):
            raise ValueError("lr_drop_points must be strictly increasing within (0, 1)")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    decay_names: set[str]
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    log: list[dict] = field(default_factory=list)


def he_init(params: dict[str, np.ndarray], rng: np.random.Generator) -> None:
    """In-place He initialization keyed by parameter name suffix.

    Weights draw from Normal(0, sqrt(2 / fan_in)); biases and batchnorm
    shifts zero; batchnorm scales one.
    """
    for name, arr in params.items():
        if name.endswith(".w"):
            fan_in = int(np.prod(arr.shape[:-1]))
            arr[...] = (rng.standard_normal(arr.shape)
                        * np.sqrt(2.0 / fan_in)).astype(arr.dtype)
        elif name.endswith(".b") or name.endswith(".beta"):
            arr[...] = 0
        elif name.endswith(".gamma"):
            arr[...] = 1
        else:
            raise ValueError(f"no initialization rule for parameter {name!r}")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for an epoch: lr0 cut by 10x at each drop point."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    drops = sum(epoch >= int(p * cfg.epochs) for p in cfg.lr_drop_points)
    return cfg.lr0 * (0.1 ** drops)


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], lr: float) -> TrainState:
    """v <- momentum*v - lr*(g + wd*w); w <- w + v. Mutates state in place."""
    mom = state.config.momentum
    wd = state.config.weight_decay
    for name, w in state.params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainDivergence(
                f"non-finite gradient in {name!r} at step {state.step}", state)
        v = state.velocity[name]
        if name in state.decay_names and wd:
            v[...] = mom * v - lr * (g + wd * w)
        else:
            v[...] = mom * v - lr * g
        w += v
    state.step += 1
    return state


# -- evaluation ----------------------------------------------------------------


def _iter_batches(n: int, batch: int):
    for start in range(0, n, batch):
        yield slice(start, min(start + batch, n))


def evaluate(net: "fn.FusedNet", dataset: Dataset, batch: int = 100) -> tuple[float, float]:
    """Top-1 error rate and mean cross-entropy, eval mode (running BN stats)."""
    wrong = 0
    loss_sum = 0.0
    images, labels = dataset.images, dataset.labels
    for sl in _iter_batches(len(dataset), batch):
        x = images[sl].astype(net.dtype, copy=False)
        scores = net.forward_deep(x, train=False)
        loss, _ = softmax_xent(scores, labels[sl])
        loss_sum += loss * (sl.stop - sl.start)
        pred = scores.reshape(scores.shape[0], -1).argmax(axis=1)
        wrong += int((pred != labels[sl]).sum())
    n = len(dataset)
    return wrong / n, loss_sum / n


def evaluate_ensemble(nets: list, dataset: Dataset, batch: int = 100) -> tuple[float, float]:
    """Decision-fused evaluation: mean member softmax, NLL of the mean."""
    wrong = 0
    loss_sum = 0.0
    images, labels = dataset.images, dataset.labels
    for sl in _iter_batches(len(dataset), batch):
        x = images[sl].astype(nets[0].dtype, copy=False)
        scores = [net.forward_deep(x, train=False) for net in nets]
        probs = fn.decision_fuse(scores, "separate")
        pred = probs.argmax(axis=1)
        wrong += int((pred != labels[sl]).sum())
        p = np.clip(probs[np.arange(len(probs)), labels[sl]], 1e-12, None)
        loss_sum += float(-np.log(p).sum())
    n = len(dataset)
    return wrong / n, loss_sum / n


# -- training ------------------------------------------------------------------


def _member_specs(spec: FusedNetSpec) -> list[FusedNetSpec]:
    return [replace(spec, members=(m,)) for m in spec.members]


def _prepare_images(ds: Dataset, use_gcn: bool) -> np.ndarray:
    return global_contrast_normalize(ds.images) if use_gcn else ds.images


def train(spec_or_net, dataset: Dataset, cfg: TrainConfig,
          test_dataset: Dataset | None = None):
    """Run the configured training mode; returns (model, TrainState).

    The model is a FusedNet for plain/deep/dsn_aux or a list of member
    FusedNets for the decision modes. Preprocessing is global contrast
    normalization once per split plus per-epoch pad/crop/flip augmentation
    on the training images. Identical configs and seeds give identical
    metric logs; the per-epoch log rows carry
    (epoch, lr, train_loss, train_err, test_err).
    """
    if cfg.mode == "decision_separate":
        return _train_decision_separate(spec_or_net, dataset, cfg, test_dataset)

    if isinstance(spec_or_net, FusedNetSpec):
        if cfg.mode in ("plain", "deep"):
            net = fn.build(spec_or_net, seed=cfg.seed, dtype=cfg.dtype)
        elif cfg.mode == "dsn_aux":
            net = fn.build(spec_or_net, seed=cfg.seed, dtype=cfg.dtype, aux_heads=True)
        else:  # decision_joint
            net = [fn.build(ms, seed=cfg.seed + k, dtype=cfg.dtype)
                   for k, ms in enumerate(_member_specs(spec_or_net))]
    else:
        net = spec_or_net

    nets = net if isinstance(net, list) else [net]
    aug_cfg = AugmentConfig(seed=cfg.seed)
    train_images = _prepare_images(dataset, aug_cfg.gcn)
    test_ready = None
    if test_dataset is not None:
        test_ready = Dataset(_prepare_images(test_dataset, aug_cfg.gcn),
                             test_dataset.labels, split=test_dataset.split)
    labels = dataset.labels
    n = len(dataset)
    state = TrainState(
        params=_merged_params(nets),
        velocity={k: np.zeros_like(v) for k, v in _merged_params(nets).items()},
        decay_names=_merged_decay(nets),
        config=cfg,
    )

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        loss_sum = 0.0
        wrong = 0
        for sl in _iter_batches(n, cfg.batch):
            idx = order[sl]
            x = train_images[idx]
            x = augment(x, aug_cfg, rng) if cfg.augment else x
            x = x.astype(cfg.dtype, copy=False)
            y = labels[idx]
            loss, preds = _step(nets, state, x, y, lr, cfg)
            if not np.isfinite(loss):
                raise TrainDivergence(
                    f"loss diverged at epoch {epoch}, step {state.step}", state)
            loss_sum += loss * len(idx)
            wrong += int((preds != y).sum())
        state.epoch = epoch + 1
        test_err = float("nan")
        if test_ready is not None:
            if len(nets) > 1:
                test_err, _ = evaluate_ensemble(nets, test_ready, cfg.batch)
            else:
                test_err, _ = evaluate(nets[0], test_ready, cfg.batch)
        state.log.append({
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / n,
            "train_err": wrong / n,
            "test_err": test_err,
        })
    return net, state


def _merged_params(nets: list) -> dict[str, np.ndarray]:
    if len(nets) == 1:
        return nets[0].params()
    out = {}
    for k, net in enumerate(nets):
        for name, arr in net.params().items():
            out[f"net{k}.{name}"] = arr
    return out


def _merged_decay(nets: list) -> set[str]:
    if len(nets) == 1:
        return nets[0].decay_param_names()
    out = set()
    for k, net in enumerate(nets):
        out |= {f"net{k}.{name}" for name in net.decay_param_names()}
    return out


def _merged_grads(nets: list) -> dict[str, np.ndarray]:
    if len(nets) == 1:
        return nets[0].grads()
    out = {}
    for k, net in enumerate(nets):
        for name, arr in net.grads().items():
            out[f"net{k}.{name}"] = arr
    return out


def _step(nets: list, state: TrainState, x, y, lr: float, cfg: TrainConfig):
    if cfg.mode in ("plain", "deep"):
        net = nets[0]
        scores = net.forward_deep(x, train=True)
        loss, d = softmax_xent(scores, y)
        net.backward_deep(d)
    elif cfg.mode == "dsn_aux":
        net = nets[0]
        scores, aux_scores = net.forward_deep(x, train=True, with_aux=True)
        loss, d = softmax_xent(scores, y)
        d_aux = []
        for s in aux_scores:
            aux_loss, da = softmax_xent(s, y)
            loss += cfg.aux_weight * aux_loss
            d_aux.append(cfg.aux_weight * da)
        net.backward_deep(d, d_aux)
    elif cfg.mode == "decision_joint":
        member_scores = [net.forward_deep(x, train=True) for net in nets]
        loss, grads = fn.decision_fuse(member_scores, "joint", y)
        for net, d in zip(nets, grads):
            net.backward_deep(d)
        scores = fn.decision_fuse(member_scores, "separate")
        preds = scores.argmax(axis=1)
        sgd_step(state, _merged_grads(nets), lr)
        return loss, preds
    else:
        raise ValueError(f"unsupported step mode {cfg.mode}")
    preds = scores.reshape(scores.shape[0], -1).argmax(axis=1)
    sgd_step(state, _merged_grads(nets), lr)
    return loss, preds


def _train_decision_separate(spec: FusedNetSpec, dataset: Dataset, cfg: TrainConfig,
                             test_dataset: Dataset | None):
    """Train each member independently, then evaluate them decision-fused."""
    if not isinstance(spec, FusedNetSpec):
        raise ValueError("decision_separate trains from a spec, not a prebuilt net")
    nets = []
    member_states = []
    for k, ms in enumerate(_member_specs(spec)):
        sub_cfg = replace(cfg, mode="plain", seed=cfg.seed + k)
        net, st = train(ms, dataset, sub_cfg, test_dataset=None)
        nets.append(net)
        member_states.append(st)

    state = TrainState(
        params=_merged_params(nets),
        velocity={k: np.zeros_like(v) for k, v in _merged_params(nets).items()},
        decay_names=_merged_decay(nets),
        config=cfg,
        epoch=cfg.epochs,
        step=sum(st.step for st in member_states),
    )
    aug_cfg = AugmentConfig(seed=cfg.seed)
    train_ready = Dataset(_prepare_images(dataset, aug_cfg.gcn), dataset.labels)
    train_err, train_loss = evaluate_ensemble(nets, train_ready, cfg.batch)
    test_err = float("nan")
    if test_dataset is not None:
        test_ready = Dataset(_prepare_images(test_dataset, aug_cfg.gcn),
                             test_dataset.labels, split=test_dataset.split)
        test_err, _ = evaluate_ensemble(nets, test_ready, cfg.batch)
    for e in range(cfg.epochs):
        row = {
            "epoch": e,
            "lr": lr_at(cfg, e),
            "train_loss": np.mean([st.log[e]["train_loss"] for st in member_states]),
            "train_err": np.mean([st.log[e]["train_err"] for st in member_states]),
            "test_err": float("nan"),
        }
        state.log.append(row)
    state.log[-1]["train_err"] = train_err
    state.log[-1]["test_err"] = test_err
    return nets, state


# -- metrics CSV ----------------------------------------------------------------


def write_metrics_csv(path: str, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "lr", "train_loss", "train_err", "test_err"])
        writer.writeheader()
        for row in log:
            writer.writerow(row)


def read_metrics_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            rows.append({
                "epoch": int(row["epoch"]),
                "lr": float(row["lr"]),
                "train_loss": float(row["train_loss"]),
                "train_err": float(row["train_err"]),
                "test_err": float(row["test_err"]),
            })
        return rows


# -- checkpoints -----------------------------------------------------------------

_MAGIC = b"DFN1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _write_section(fh, tag: bytes, arrays: dict[str, np.ndarray]) -> None:
    fh.write(tag)
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", _TAG_FOR[np.dtype(arr.dtype)], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_section(fh, expect_tag: bytes) -> dict[str, np.ndarray]:
    tag = fh.read(4)
    if tag != expect_tag:
        raise ValueError(f"bad section tag {tag!r}, expected {expect_tag!r}")
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode("utf-8")
        dtype_tag, rank = struct.unpack("<BB", fh.read(2))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        dtype = _DTYPE_TAGS[dtype_tag]
        n_bytes = int(np.prod(shape)) * dtype.itemsize if rank else dtype.itemsize
        data = np.frombuffer(fh.read(n_bytes), dtype=dtype).reshape(shape)
        out[name] = data.astype(dtype.newbyteorder("="))
    return out


def save_checkpoint(path: str, params: dict[str, np.ndarray],
                    velocity: dict[str, np.ndarray] | None = None) -> None:
    """Flat binary checkpoint: magic, a parameter section, and optionally a
    velocity section (same entry encoding, different tag)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        _write_section(fh, b"PARA", params)
        if velocity is not None:
            _write_section(fh, b"VELO", velocity)


def load_checkpoint(path: str):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a DFN1 checkpoint")
        params = _read_section(fh, b"PARA")
        velocity = None
        pos = fh.tell()
        if fh.read(4) == b"VELO":
            fh.seek(pos)
            velocity = _read_section(fh, b"VELO")
        return params, velocity


# -- gradient checking -----------------------------------------------------------


@dataclass
class GradCheckCoord:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_err: float
    per_kind: dict[str, float]
    worst: list[GradCheckCoord]
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _param_kind(name: str, arr: np.ndarray) -> str:
    if name.endswith(".w"):
        if arr.ndim == 4 and arr.shape[0] == 3:
            return "conv3x3.w"
        return "conv1x1.w"
    if name.endswith(".b"):
        return "bias"
    if name.endswith(".gamma"):
        return "bn.gamma"
    if name.endswith(".beta"):
        return "bn.beta"
    return "other"


def _mask_nodes(net) -> list:
    """Every layer whose backward routing depends on a forward-time mask."""
    nodes = []
    if isinstance(net, fn.FusedNet):
        for stage in net.stages:
            if stage.prepool is not None:
                nodes.append(stage.prepool)
            for blk in stage.blocks:
                for unit in blk.units:
                    if isinstance(unit, fn.PoolUnit):
                        nodes.append(unit.pool)
                    elif unit.relu is not None:
                        nodes.append(unit.relu)
            if stage.fuse.kind == "max":
                nodes.append(stage.fuse)
            if stage.post_relu is not None:
                nodes.append(stage.post_relu)
        nodes.append(net.head.fc.relu)
    else:  # UnidirectionalNet
        for group in (net.outer_blocks, net.inner_blocks):
            for blk in group:
                for unit in blk.units:
                    if isinstance(unit, fn.PoolUnit):
                        nodes.append(unit.pool)
                    elif unit.relu is not None:
                        nodes.append(unit.relu)
        for pool in net.outer_pools + net.inner_pools:
            if pool is not None:
                nodes.append(pool)
        nodes.extend(net.outer_relus)
        nodes.extend(net.inner_relus)
        nodes.append(net.head.fc.relu)
    return nodes


def _mask_snapshot(nodes) -> list[np.ndarray]:
    snap = []
    for node in nodes:
        if isinstance(node, ReLU):
            snap.append(node._mask.copy())
        elif isinstance(node, MaxPool2):
            snap.append(node._cache[0].copy())
        else:  # max Fuse
            snap.append(node._cache[1].copy())
    return snap


def _masks_equal(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(spec: FusedNetSpec, tolerance: float = 1e-4, kind: str = "deep",
               seed: int = 0, batch: int = 2, input_hw: int = 8,
               samples_per_kind: int = 200, h: float = 1e-5,
               aux_weight: float = 1.0, input_channels: int = 3) -> GradCheckReport:
    """Central-difference check of every gradient path at double precision.

    Samples coordinates per parameter kind, skips ones whose perturbation
    flips a ReLU or pooling mask (the objective is not differentiable
    there), and reports the worst relative errors.
    """
    if kind not in ("deep", "dsn_aux", "unidirectional"):
        raise ValueError(f"unknown grad_check kind {kind!r}")
    rng = np.random.default_rng(seed)
    if kind == "unidirectional":
        net = fn.build_unidirectional(spec, seed=seed, dtype=np.float64,
                                      input_channels=input_channels)
    else:
        net = fn.build(spec, seed=seed, dtype=np.float64, aux_heads=kind == "dsn_aux",
                       input_channels=input_channels)
    x = rng.standard_normal((batch, input_channels, input_hw, input_hw))
    y = rng.integers(0, spec.num_classes, size=batch)

    def objective() -> float:
        if kind == "deep":
            scores = net.forward_deep(x, train=True)
            return softmax_xent(scores, y)[0]
        if kind == "dsn_aux":
            scores, aux_scores = net.forward_deep(x, train=True, with_aux=True)
            loss = softmax_xent(scores, y)[0]
            for s in aux_scores:
                loss += aux_weight * softmax_xent(s, y)[0]
            return loss
        scores = net.forward(x, train=True)
        return softmax_xent(scores, y)[0]

    # analytic pass
    if kind == "deep":
        scores = net.forward_deep(x, train=True)
        _, d = softmax_xent(scores, y)
        net.backward_deep(d)
    elif kind == "dsn_aux":
        scores, aux_scores = net.forward_deep(x, train=True, with_aux=True)
        _, d = softmax_xent(scores, y)
        d_aux = [aux_weight * softmax_xent(s, y)[1] for s in aux_scores]
        net.backward_deep(d, d_aux)
    else:
        scores = net.forward(x, train=True)
        _, d = softmax_xent(scores, y)
        net.backward(d)
    analytic = {name: g.copy() for name, g in net.grads().items()}

    params = net.params()
    pools: dict[str, list[tuple[str, int]]] = {}
    for name, arr in params.items():
        pools.setdefault(_param_kind(name, arr), []).extend(
            (name, i) for i in range(arr.size))
    nodes = _mask_nodes(net)

    per_kind: dict[str, float] = {}
    worst: list[GradCheckCoord] = []
    checked = skipped = 0
    for kind_name, pool in sorted(pools.items()):
        take = min(samples_per_kind, len(pool))
        chosen = [pool[i] for i in rng.choice(len(pool), size=take, replace=False)]
        kind_max = 0.0
        for name, idx in chosen:
            flat = params[name].reshape(-1)
            old = flat[idx]
            flat[idx] = old + h
            f_plus = objective()
            masks_plus = _mask_snapshot(nodes)
            flat[idx] = old - h
            f_minus = objective()
            masks_minus = _mask_snapshot(nodes)
            flat[idx] = old
            if not _masks_equal(masks_plus, masks_minus):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic[name].reshape(-1)[idx])
            # the 1e-5 floor turns the check absolute for near-zero
            # gradients (conv biases ahead of batchnorm are exactly zero),
            # where central differences only deliver ~1e-10
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-5)
            checked += 1
            kind_max = max(kind_max, rel)
            worst.append(GradCheckCoord(name, idx, a, numeric, rel))
        per_kind[kind_name] = kind_max
    worst.sort(key=lambda c: -c.rel_err)
    max_rel = max(per_kind.values()) if per_kind else 0.0
    return GradCheckReport(tolerance=tolerance, max_rel_err=max_rel,
                           per_kind=per_kind, worst=worst[:10],
                           checked=checked, skipped=skipped)
