"""The correspondence-filtering network: residual point blocks with
context normalization, differentiable pool/unpool onto learned clusters,
the soft-threshold noise-filtering block, the inlier-probability head,
and the training loss (class-balanced classification plus sign-invariant
essential-matrix regression).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
import numpy as np

from . import diffcore as dc
from . import geometry as geo
from .diffcore import (
    BatchNorm,
    Parameter,
    SoftThresholdKind,
    Tensor,
)
from .serialize import fmt_float_list

__all__ = [
    "FNNetConfig",
    "Module",
    "Linear",
    "ResidualContextBlock",
    "FNBlock",
    "DiffPool",
    "DiffUnpool",
    "FNNet",
    "Prediction",
    "loss",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class FNNetConfig:
    channels: int = 32
    n_clusters: int = 16
    n_blocks_pre: int = 3
    n_blocks_post: int = 3
    n_fn_blocks: int = 2
    threshold_kind: str = "linear"
    loss_alpha: float = 0.1
    alpha_warmup_epochs: int = 2
    use_fn_blocks: bool = True      # False swaps FN blocks for plain blocks (ablation)

    def __post_init__(self):
        if self.channels < 4:
            raise dc.ContractError("channels must be at least 4")
        if self.n_clusters < 2:
            raise dc.ContractError("n_clusters must be at least 2")
        if min(self.n_blocks_pre, self.n_blocks_post, self.n_fn_blocks) < 1:
            raise dc.ContractError("block counts must be at least 1")
        SoftThresholdKind.from_string(self.threshold_kind)

    @property
    def kind(self):
        return SoftThresholdKind.from_string(self.threshold_kind)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise dc.ContractError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)


class Module:
    """Lightweight container with recursive parameter/state discovery."""

    def _items(self):
        for k, v in self.__dict__.items():
            yield k, v

    def named_parameters(self, prefix=""):
        for k, v in self._items():
            path = f"{prefix}{k}"
            if isinstance(v, Parameter):
                yield path, v
            elif isinstance(v, (Module, BatchNorm)):
                yield from v.named_parameters(f"{path}.")
            elif isinstance(v, list):
                for i, item in enumerate(v):
                    if isinstance(item, (Module, BatchNorm)):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def _named_batchnorms(self, prefix=""):
        for k, v in self._items():
            path = f"{prefix}{k}"
            if isinstance(v, BatchNorm):
                yield path, v
            elif isinstance(v, Module):
                yield from v._named_batchnorms(f"{path}.")
            elif isinstance(v, list):
                for i, item in enumerate(v):
                    if isinstance(item, BatchNorm):
                        yield f"{path}.{i}", item
                    elif isinstance(item, Module):
                        yield from item._named_batchnorms(f"{path}.{i}.")

    def state_dict(self):
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, bn in self._named_batchnorms():
            state[f"{name}.running_mean"] = bn.running_mean.copy()
            state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        for name, p in own.items():
            if name not in state:
                raise dc.ContractError(f"checkpoint missing parameter '{name}'")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise dc.ShapeError(
                    f"parameter '{name}' shape {arr.shape} != {p.data.shape}"
                )
            p.data = arr.copy()
        for name, bn in self._named_batchnorms():
            for key in ("running_mean", "running_var"):
                full = f"{name}.{key}"
                if full not in state:
                    raise dc.ContractError(f"checkpoint missing buffer '{full}'")
                setattr(bn, key, np.asarray(state[full], dtype=np.float64).copy())


class Linear(Module):
    """Per-point shared linear map; uniform init scaled by 1/sqrt(fan_in)."""

    def __init__(self, c_in, c_out, rng):
        a = 1.0 / np.sqrt(c_in)
        self.weight = Parameter(rng.uniform(-a, a, (c_out, c_in)))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x):
        return dc.linear_map(x, self.weight, self.bias)


class ResidualContextBlock(Module):
    """Residual block: f + B2(B1(f)), B = ReLU(BN(CN(linear(.))))."""

    def __init__(self, channels, rng):
        self.lin1 = Linear(channels, channels, rng)
        self.bn1 = BatchNorm(channels)
        self.lin2 = Linear(channels, channels, rng)
        self.bn2 = BatchNorm(channels)

    def __call__(self, f, mode="train"):
        h = dc.relu(self.bn1(dc.context_normalize(self.lin1(f)), mode))
        h = dc.relu(self.bn2(dc.context_normalize(self.lin2(h)), mode))
        return f + h


class FNBlock(Module):
    """Noise-filtering block operating on ordered cluster features.

    Context is extracted by a residual point block, a per-channel
    threshold is learned from the mean absolute feature through a small
    bottleneck (FC -> BN -> ReLU -> FC -> sigmoid), the features pass a
    soft threshold with that per-channel dead zone, and a closing
    residual block re-extracts context.
    """

    def __init__(self, channels, kind, rng):
        self.pre = ResidualContextBlock(channels, rng)
        self.fc1 = Linear(channels, channels, rng)
        self.bn = BatchNorm(channels)
        self.fc2 = Linear(channels, channels, rng)
        self.post = ResidualContextBlock(channels, rng)
        self.kind = kind

    def __call__(self, f, mode="train"):
        g = self.pre(f, mode)
        f_c = dc.reshape(dc.mean_axis(dc.abs_(g), 1), (g.shape[0], 1))
        lam = self.fc2(dc.relu(self.bn(self.fc1(f_c), mode)))
        t_s = dc.sigmoid(lam) * f_c
        h = dc.soft_threshold(g, t_s, self.kind)
        return self.post(h, mode)


class DiffPool(Module):
    """Soft-assign N points to M clusters; permutation-invariant over N."""

    def __init__(self, channels, n_clusters, rng):
        self.assign = Linear(channels, n_clusters, rng)

    def __call__(self, f):
        s = dc.softmax_axis(self.assign(f), axis=1)
        return dc.matmul(f, dc.transpose(s))


class DiffUnpool(Module):
    """Distribute M cluster features back onto N points, driven by the
    original (pre-pool) features; permutation-equivariant over N."""

    def __init__(self, channels, n_clusters, rng):
        self.assign = Linear(channels, n_clusters, rng)

    def __call__(self, f_orig, f_clustered):
        t = dc.softmax_axis(self.assign(f_orig), axis=0)
        return dc.matmul(f_clustered, t)


@dataclass
class Prediction:
    logits: np.ndarray              # (N,)
    weights: np.ndarray             # (N,), in [0, 1)
    essential: geo.EssentialMatrix
    degenerate: bool                # True when the solve fell back to uniform weights
    logits_t: Tensor = None
    weights_t: Tensor = None
    essential_t: Tensor = None      # flat 9-vector node, None when degenerate


def eight_point_op(weights, x_design):
    """Differentiable weighted eight-point node: weights tensor -> vec(E)."""
    e9, vals, vecs, sign = geo.weighted_eight_point_solve(
        x_design, weights.data.reshape(-1)
    )

    def vjp(g):
        dw = geo.eight_point_weight_gradient(
            x_design, weights.data.reshape(-1), vals, vecs, sign, g
        )
        return (dw.reshape(weights.shape),)

    return dc.from_op(e9, (weights,), vjp, "eight_point")


class FNNet(Module):
    def __init__(self, config=FNNetConfig(), seed=0):
        self.config = config
        c, m = config.channels, config.n_clusters
        rng = np.random.default_rng(seed)
        self.lift = Linear(4, c, rng)
        self.pre = [ResidualContextBlock(c, rng) for _ in range(config.n_blocks_pre)]
        self.pool = DiffPool(c, m, rng)
        if config.use_fn_blocks:
            self.fn = [FNBlock(c, config.kind, rng) for _ in range(config.n_fn_blocks)]
        else:
            self.fn = [ResidualContextBlock(c, rng) for _ in range(config.n_fn_blocks)]
        self.unpool = DiffUnpool(c, m, rng)
        self.merge = Linear(2 * c, c, rng)
        self.post = [ResidualContextBlock(c, rng) for _ in range(config.n_blocks_post)]
        self.head = Linear(c, 1, rng)

    def _items(self):
        # config is plain data, not graph state
        for k, v in self.__dict__.items():
            if k != "config":
                yield k, v

    def forward(self, corrs, mode="eval"):
        """Predict per-correspondence inlier weights and the essential matrix.

        ``corrs`` holds normalized coordinates.  When fewer than 8
        weights are positive or the eigenproblem is degenerate, the
        essential matrix falls back to uniform weights and the
        prediction is flagged degenerate (no gradient through it).
        """
        pts = corrs.points if isinstance(corrs, geo.CorrespondenceSet) else np.asarray(corrs)
        n = pts.shape[0]
        if n < 8:
            raise geo.InsufficientSupportError("forward needs at least 8 correspondences")
        f = self.lift(Tensor(pts.T))
        for blk in self.pre:
            f = blk(f, mode)
        f0 = f
        p = self.pool(f0)
        for blk in self.fn:
            p = blk(p, mode)
        u = self.unpool(f0, p)
        f = self.merge(dc.concat_rows(f0, u))
        for blk in self.post:
            f = blk(f, mode)
        logits = self.head(f)                       # (1, N)
        w = dc.relu(dc.tanh(logits))
        wflat = dc.reshape(w, (n,))
        x_design = geo.build_design_matrix(pts)
        essential_t = None
        degenerate = False
        if np.count_nonzero(wflat.data > 0) >= 8:
            try:
                essential_t = eight_point_op(wflat, x_design)
                e = geo.EssentialMatrix(essential_t.data.reshape(3, 3))
            except geo.DegenerateGeometryError:
                essential_t = None
        if essential_t is None:
            degenerate = True
            e9, _, _, _ = geo.weighted_eight_point_solve(x_design, np.ones(n))
            e = geo.EssentialMatrix(e9.reshape(3, 3))
        return Prediction(
            logits=logits.data.reshape(-1).copy(),
            weights=wflat.data.copy(),
            essential=e,
            degenerate=degenerate,
            logits_t=logits,
            weights_t=wflat,
            essential_t=essential_t,
        )


def loss(pred, record, epoch, config):
    """Classification + warmup-gated essential regression loss.

    The classification term is a binary cross-entropy on the logits with
    per-class weights inversely proportional to class frequency in the
    record.  The regression term is the squared Frobenius distance of
    the predicted essential matrix to the closer of +/- the ground
    truth; it is skipped for degenerate predictions and before the
    warmup epoch.
    """
    labels = record.labels.astype(np.float64)
    n = labels.shape[0]
    n_pos = float(labels.sum())
    n_neg = float(n - n_pos)
    w_pos = n / (2.0 * n_pos) if n_pos > 0 else 0.0
    w_neg = n / (2.0 * n_neg) if n_neg > 0 else 0.0
    wvec = np.where(labels > 0, w_pos, w_neg).reshape(1, n)
    y = Tensor(labels.reshape(1, n))
    z = pred.logits_t
    bce = dc.softplus(z) - z * y
    l_cls = dc.sum_all(Tensor(wvec) * bce) * (1.0 / n)
    alpha = 0.0 if epoch < config.alpha_warmup_epochs else config.loss_alpha
    if alpha == 0.0 or pred.degenerate or pred.essential_t is None:
        return l_cls
    e_gt = essential_target(record)
    e_hat = pred.essential_t
    d_minus = np.linalg.norm(e_hat.data - e_gt)
    d_plus = np.linalg.norm(e_hat.data + e_gt)
    target = e_gt if d_minus <= d_plus else -e_gt
    diff = e_hat - Tensor(target)
    l_ess = dc.sum_all(diff * diff)
    return l_cls + alpha * l_ess


def essential_target(record):
    """Ground-truth essential matrix of a record, as a flat unit 9-vector."""
    e = geo.essential_from_pose(record.pose)
    return e.m.reshape(-1)


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(path, model, epoch):
    """JSON checkpoint: config, epoch, and every parameter/buffer array."""
    state = model.state_dict()
    parts = [f'"config": {json.dumps(model.config.to_dict())}', f'"epoch": {int(epoch)}']
    entries = []
    for name in state:
        arr = state[name]
        entries.append(
            f'{json.dumps(name)}: {{"shape": {json.dumps(list(arr.shape))}, '
            f'"data": {fmt_float_list(arr.reshape(-1))}}}'
        )
    parts.append('"params": {' + ", ".join(entries) + "}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("{" + ", ".join(parts) + "}\n")


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, epoch)."""
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    for key in ("config", "epoch", "params"):
        if key not in obj:
            raise dc.ContractError(f"checkpoint missing '{key}'")
    config = FNNetConfig.from_dict(obj["config"])
    model = FNNet(config)
    state = {}
    for name, entry in obj["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        state[name] = arr
    model.load_state_dict(state)
    return model, int(obj["epoch"])
