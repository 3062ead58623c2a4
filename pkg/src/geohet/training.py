"""Optimiser, training loop, checkpoints and the finite-difference gradient checker.

Gradients come from torch's reverse-mode autograd in float64.  Calling
``backward`` twice without zeroing accumulates, as usual; the loop zeroes
once per batch.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch.optim import Optimizer

from .decoder import loss as joint_loss
from .geodata import TEST, Dataset, compute_metrics
from .model import PARAM_GROUPS, GeoHetNet, ModelConfig, group_of

CHECKPOINT_MAGIC = b"GEOHETCK"
CHECKPOINT_VERSION = 1
METRIC_COLUMNS = ("epoch", "train_loss", "L_dep", "L_interp", "test_rmse", "test_r2")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, history: list, state: dict):
        super().__init__(f"loss became non-finite in epoch {epoch}; restored last good parameters")
        self.epoch = epoch
        self.history = history
        self.state = state


class NonFiniteGradient(FloatingPointError):
    def __init__(self, group: str, name: str):
        super().__init__(f"non-finite gradient in parameter group {group!r} ({name})")
        self.group = group
        self.name = name


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch: int = 64
    epochs: int = 20
    lr: float = 1e-3
    lr_decay_epoch: int = 10
    lr_decayed: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    seed: int = 0
    deterministic: bool = False
    grad_clip: float | None = None
    threads: int | None = None

    def __post_init__(self):
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")
        if self.lr < 0 or self.lr_decayed < 0 or self.weight_decay < 0:
            raise ValueError("learning rates and weight decay must be >= 0")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: ``lr`` for epochs before ``lr_decay_epoch`` (0-based), ``lr_decayed`` after."""
    return config.lr if epoch < config.lr_decay_epoch else config.lr_decayed


class AdamW(Optimizer):
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr, (beta1, beta2) = group["lr"], group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]
                m, v = state["exp_avg"], state["exp_avg_sq"]
                p.mul_(1.0 - lr * group["weight_decay"])
                m.mul_(beta1).add_(p.grad, alpha=1.0 - beta1)
                v.mul_(beta2).addcmul_(p.grad, p.grad, value=1.0 - beta2)
                m_hat = m / (1.0 - beta1 ** t)
                v_hat = v / (1.0 - beta2 ** t)
                p.sub_(lr * m_hat / (v_hat.sqrt() + group["eps"]))
        return loss


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> AdamW:
    return AdamW(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
                 eps=config.eps_opt, weight_decay=config.weight_decay)


def set_lr(optimizer: Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


@contextlib.contextmanager
def numeric_mode(deterministic: bool, threads: int | None = None):
    """Pin torch's intra-op thread count; deterministic mode forces one thread."""
    previous = torch.get_num_threads()
    wanted = 1 if deterministic else threads
    if wanted:
        torch.set_num_threads(wanted)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


# ---------------------------------------------------------------- data plumbing


@dataclass
class Batchable:
    """Dataset tensors with precomputed node assignments."""

    features: torch.Tensor
    node: torch.Tensor
    t_index: torch.Tensor
    target: torch.Tensor

    @classmethod
    def from_dataset(cls, dataset: Dataset, model: GeoHetNet) -> "Batchable":
        return cls(
            torch.as_tensor(dataset.features, dtype=torch.float64),
            torch.as_tensor(model.assign(dataset.lon, dataset.lat), dtype=torch.int64),
            torch.as_tensor(dataset.t_index, dtype=torch.int64),
            torch.as_tensor(dataset.target, dtype=torch.float64),
        )

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx) -> tuple:
        idx = torch.as_tensor(idx, dtype=torch.int64)
        return self.features[idx], self.node[idx], self.t_index[idx], self.target[idx]


def check_gradients(model: torch.nn.Module) -> None:
    for name, p in model.named_parameters():
        if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteGradient(group_of(name), name)


@torch.no_grad()
def predict_arrays(model: GeoHetNet, data: Batchable, batch: int = 1024):
    """Run the model over every sample: (y_hat, raw_weights, y_interp) as numpy arrays."""
    model.eval()
    v_final = model.condenc()
    outs = []
    for start in range(0, len(data), batch):
        x, node, t, _ = data.take(np.arange(start, min(start + batch, len(data))))
        tokens = model.encoder(x)
        memory = model.condenc.memory(node, t, v_final)
        outs.append(model.decoder(tokens, memory, x.mean(dim=-2)))
    model.train()
    return tuple(torch.cat([o[i] for o in outs]).numpy() for i in range(3))


# ---------------------------------------------------------------- training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    L_dep: float
    L_interp: float
    test_rmse: float
    test_r2: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in METRIC_COLUMNS[1:]]


@dataclass
class TrainResult:
    model: GeoHetNet
    optimizer: AdamW
    history: list[EpochRecord]
    best_epoch: int
    best_state: dict
    best_optimizer: dict
    epochs_done: int

    def best_model(self) -> GeoHetNet:
        model = copy.deepcopy(self.model)
        model.load_state_dict(self.best_state)
        return model


def train(dataset: Dataset, model: GeoHetNet, config: TrainConfig,
          optimizer: AdamW | None = None, start_epoch: int = 0,
          history: list[EpochRecord] | None = None,
          on_epoch: Callable[[EpochRecord, "TrainResult"], None] | None = None) -> TrainResult:
    """Mini-batch AdamW on the train split, evaluating the test split every epoch.

    The shuffle for epoch ``e`` is drawn from ``default_rng([seed, e])`` so a
    resumed run visits samples in the same order as an uninterrupted one.
    """
    train_idx = np.flatnonzero(dataset.train_mask())
    if len(train_idx) == 0:
        raise ValueError("no training samples")
    test_idx = np.flatnonzero(dataset.split == TEST) if dataset.split is not None else np.array([], int)
    data = Batchable.from_dataset(dataset, model)
    test = Batchable(*data.take(test_idx)) if len(test_idx) else None
    optimizer = optimizer or make_optimizer(model, config)
    history = list(history or [])
    weights = model.config.decoder.loss_weights

    best_rmse = min((h.test_rmse for h in history), default=math.inf)
    best_epoch = min(history, key=lambda h: h.test_rmse).epoch if history else -1
    best_state = copy.deepcopy(model.state_dict())
    best_opt = copy.deepcopy(optimizer.state_dict())
    result = TrainResult(model, optimizer, history, best_epoch, best_state, best_opt, start_epoch)

    with numeric_mode(config.deterministic, config.threads):
        for epoch in range(start_epoch, config.epochs):
            set_lr(optimizer, lr_at(epoch, config))
            good_state = copy.deepcopy(model.state_dict())
            order = train_idx[np.random.default_rng([config.seed, epoch]).permutation(len(train_idx))]
            sums = np.zeros(3)
            for start in range(0, len(order), config.batch):
                x, node, t, y = data.take(order[start:start + config.batch])
                optimizer.zero_grad(set_to_none=True)
                y_hat, _, y_interp = model(x, node, t)
                l_dep, l_interp, total = joint_loss(y, y_hat, y_interp, weights)
                if not bool(torch.isfinite(total)):
                    model.load_state_dict(good_state)
                    raise TrainingDiverged(epoch, history, good_state)
                total.backward()
                check_gradients(model)
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                sums += len(y) * np.array([total.item(), l_dep.item(), l_interp.item()])
            sums /= len(order)
            if test is not None:
                m = compute_metrics(test.target.numpy(), predict_arrays(model, test)[0])
                rmse, r2 = m.rmse, m.r2
            else:
                rmse = r2 = math.nan
            record = EpochRecord(epoch, *map(float, sums), float(rmse), float(r2))
            history.append(record)
            score = rmse if test is not None else sums[0]
            if best_epoch < 0 or score < best_rmse:
                best_rmse, best_epoch = score, epoch
                result.best_state = copy.deepcopy(model.state_dict())
                result.best_optimizer = copy.deepcopy(optimizer.state_dict())
            result.best_epoch = best_epoch
            result.epochs_done = epoch + 1
            if on_epoch is not None:
                on_epoch(record, result)
    return result


def write_metric_log(history: list[EpochRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for rec in history:
            w.writerow(rec.row())


def read_metric_log(path) -> list[EpochRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [EpochRecord(int(r["epoch"]), *(float(r[k]) for k in METRIC_COLUMNS[1:])) for r in rows]


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    header: dict
    tensors: dict[str, np.ndarray]

    @property
    def config(self) -> dict:
        return self.header["config"]

    @property
    def epoch(self) -> int:
        return self.header["epoch"]


def save_checkpoint(path, model: GeoHetNet, optimizer: Optimizer | None = None,
                    state: dict | None = None, optimizer_state: dict | None = None,
                    epoch: int = 0, config: dict | None = None, extra: dict | None = None) -> None:
    """Binary container: magic, u64 header length, JSON header, little-endian float64 payload.

    The payload holds model tensors in ``named_parameters`` order followed by
    the optimiser moments (``opt.exp_avg.<name>``, ``opt.exp_avg_sq.<name>``).
    """
    state = state if state is not None else model.state_dict()
    names = [n for n, _ in model.named_parameters()]
    entries = [(n, state[n].detach().cpu().numpy()) for n in names]
    opt_state = optimizer_state if optimizer_state is not None else (
        optimizer.state_dict() if optimizer is not None else None)
    steps = {}
    if opt_state is not None:
        for i, n in enumerate(names):
            s = opt_state["state"].get(i)
            if s:
                steps[n] = int(s["step"])
                entries.append((f"opt.exp_avg.{n}", s["exp_avg"].cpu().numpy()))
                entries.append((f"opt.exp_avg_sq.{n}", s["exp_avg_sq"].cpu().numpy()))
    graph = model.graph.to_dict()
    graph.pop("embeddings")
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config or {},
        "epoch": int(epoch),
        "groups": {n: group_of(n) for n in names},
        "shapes": [{"name": n, "shape": list(a.shape)} for n, a in entries],
        "optimizer": None if opt_state is None else {
            "steps": steps, "hyper": {k: v for k, v in opt_state["param_groups"][0].items() if k != "params"}},
        "graph": graph,
        "embed_shape": list(model.graph.node_embed.shape),
    }
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate([a.ravel() for _, a in entries]).astype("<f8") if entries else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = np.frombuffer(raw[16 + n:], dtype="<f8")
    tensors, offset = {}, 0
    for entry in header["shapes"]:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        tensors[entry["name"]] = payload[offset:offset + size].reshape(entry["shape"]).astype(np.float64)
        offset += size
    if offset != len(payload):
        raise CheckpointError(f"{path}: payload has {len(payload)} values, header declares {offset}")
    return Checkpoint(header, tensors)


def restore_model(ckpt: Checkpoint, model_config: ModelConfig, graph_cls=None) -> GeoHetNet:
    from .stcg import ConditionGraph

    g = dict(ckpt.header["graph"])
    g["embeddings"] = np.zeros(ckpt.header["embed_shape"])
    model = GeoHetNet(ConditionGraph.from_dict(g), model_config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(ckpt.tensors[name]))
    return model


def restore_optimizer(ckpt: Checkpoint, model: GeoHetNet, config: TrainConfig) -> AdamW:
    opt = make_optimizer(model, config)
    info = ckpt.header.get("optimizer")
    if not info:
        return opt
    for name, p in model.named_parameters():
        if name in info["steps"]:
            opt.state[p] = {
                "step": info["steps"][name],
                "exp_avg": torch.from_numpy(ckpt.tensors[f"opt.exp_avg.{name}"].copy()),
                "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"opt.exp_avg_sq.{name}"].copy()),
            }
    return opt


# -------------------------------------------------------------------- gradcheck


@dataclass
class GroupReport:
    max_rel_err: float
    mean_rel_err: float
    n_probed: int
    passed: bool


@dataclass
class GradcheckReport:
    groups: dict[str, GroupReport]
    tolerance: float
    h: float

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups.values())

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups.values() if g.n_probed), default=0.0)

    def failing_groups(self) -> list[str]:
        return [k for k, g in self.groups.items() if not g.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tolerance": self.tolerance, "h": self.h,
                "groups": {k: asdict(v) for k, v in self.groups.items()}}


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from dividing by ~0."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(model: GeoHetNet, batch: tuple, n_probe: int = 100, h: float = 1e-5,
              tolerance: float = 1e-4, seed: int = 0, per_group_min: int = 1,
              grad_hooks: dict[str, Callable] | None = None) -> GradcheckReport:
    """Compare autograd gradients of the joint loss against central differences.

    ``n_probe`` scalar parameters are drawn at random (at least
    ``per_group_min`` from every group).  ``grad_hooks`` maps a parameter
    name to a tensor hook applied to its gradient, which lets tests inject a
    faulty backward rule.
    """
    x, node, t, y = batch
    weights = model.config.decoder.loss_weights
    params = dict(model.named_parameters())

    def total_loss():
        y_hat, _, y_interp = model(x, node, t)
        return joint_loss(y, y_hat, y_interp, weights)[2]

    handles = [params[n].register_hook(fn) for n, fn in (grad_hooks or {}).items()]
    try:
        model.zero_grad(set_to_none=True)
        total_loss().backward()
    finally:
        for hnd in handles:
            hnd.remove()
    grads = {n: p.grad.detach().clone() for n, p in params.items()}

    rng = np.random.default_rng(seed)
    flat = [(n, i) for n, p in params.items() for i in range(p.numel())]
    by_group: dict[str, list[int]] = {g: [] for g in PARAM_GROUPS}
    for k, (n, _) in enumerate(flat):
        by_group[group_of(n)].append(k)
    chosen = set()
    for g, ks in by_group.items():
        if ks:
            chosen.update(rng.choice(ks, size=min(per_group_min, len(ks)), replace=False).tolist())
    rest = np.setdiff1d(np.arange(len(flat)), sorted(chosen))
    chosen.update(rng.choice(rest, size=max(0, min(n_probe - len(chosen), len(rest))), replace=False).tolist())

    errs: dict[str, list[float]] = {g: [] for g in PARAM_GROUPS}
    with torch.no_grad():
        for k in sorted(chosen):
            n, i = flat[k]
            p = params[n]
            pos = np.unravel_index(i, tuple(p.shape))
            orig = p[pos].item()
            p[pos] = orig + h
            up = total_loss().item()
            p[pos] = orig - h
            down = total_loss().item()
            p[pos] = orig
            numeric = (up - down) / (2 * h)
            errs[group_of(n)].append(relative_error(grads[n][pos].item(), numeric))
    groups = {
        g: GroupReport(max(e, default=0.0), float(np.mean(e)) if e else 0.0, len(e),
                       max(e, default=0.0) <= tolerance)
        for g, e in errs.items()
    }
    return GradcheckReport(groups, tolerance, h)
