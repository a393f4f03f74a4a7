"""Training: Adam with coupled weight decay, a deterministic epoch loop,
binary checkpoints and history CSVs.

Everything downstream of the seed is reproducible: epoch shuffles and
per-batch augmentation draw from counter-based streams keyed by (seed,
epoch, batch), so reruns produce byte-identical histories and
checkpoints.
"""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import data as dt
from . import net as nt
from .autodiff import backward
from .net import (_bool, _config_from_sections, _fmt, _parse_sections, _take,
                  net_config_from_text, net_config_to_text)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    lam: float = 0.5
    splits: tuple = (0.65, 0.15, 0.20)
    augment: bool = True

    def __post_init__(self):
        self.lr = float(self.lr)
        self.weight_decay = float(self.weight_decay)
        self.batch_size = int(self.batch_size)
        self.epochs = int(self.epochs)
        self.seed = int(self.seed)
        self.lam = float(self.lam)
        self.splits = tuple(float(f) for f in self.splits)
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if any(f < 0 for f in self.splits) or abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, "
                             f"got {self.splits}")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    main_loss: float
    aux_loss: float
    val_acc: float


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8):
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state, cfg):
    """One Adam update with L2 decay folded into the gradient.

    Decay applies uniformly to every parameter, BN scales and biases
    included. A non-finite gradient aborts, naming the parameter.
    """
    b1, b2 = state.betas
    state.t += 1
    t = state.t
    for (name, tensor), grad in zip(params, grads):
        if not np.isfinite(grad).all():
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
        g = grad + cfg.weight_decay * tensor.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        tensor.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


def train_loop(network, train_set, val_set, cfg, out_dir=None):
    """Seeded epoch loop; returns (history, best_epoch).

    Per epoch: fresh shuffle, optional augmentation, forward, combined
    loss, backward, Adam. The checkpoint with the best validation
    accuracy (earliest epoch on ties) is kept; with an empty validation
    set the last epoch wins. A non-finite loss or gradient aborts with
    TrainingDiverged after writing last.ckpt, preserving the state that
    diverged.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    params = network.parameters()
    adam = AdamState()
    history = []
    best_epoch = -1
    best_acc = -1.0

    for epoch in range(cfg.epochs):
        gen = np.random.Generator(np.random.Philox(key=(cfg.seed, (1 << 62) | epoch)))
        order = gen.permutation(len(train_set))
        sums = {"total": 0.0, "main": 0.0, "aux": 0.0}
        seen = 0
        for b_idx, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            images = train_set.images[idx]
            if cfg.augment:
                images = dt.augment(images, seed=(cfg.seed, (epoch << 32) | b_idx))
            batch = images.astype(np.float64) / 255.0
            labels = train_set.labels[idx]

            result = network.forward(batch, train=True)
            total, main, aux = nt.loss_terms(result, labels, cfg.lam)
            if not np.isfinite(total.data):
                if out_dir is not None:
                    checkpoint_save(network, os.path.join(out_dir, "last.ckpt"))
                raise TrainingDiverged(
                    f"non-finite loss {float(total.data)} at epoch {epoch + 1} "
                    f"batch {b_idx + 1}")
            network.zero_grad()
            backward(total)
            grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
                     for _, t in params]
            try:
                adam_step(params, grads, adam, cfg)
            except TrainingDiverged:
                if out_dir is not None:
                    checkpoint_save(network, os.path.join(out_dir, "last.ckpt"))
                raise
            sums["total"] += float(total.data) * len(idx)
            sums["main"] += float(main.data) * len(idx)
            sums["aux"] += float(aux.data) * len(idx) if aux is not None else 0.0
            seen += len(idx)

        val_acc = math.nan
        if len(val_set) > 0:
            val_acc = nt.evaluate(network, val_set.images.astype(np.float64) / 255.0,
                                  val_set.labels, batch_size=cfg.batch_size)
        history.append(EpochStats(
            epoch=epoch + 1,
            train_loss=sums["total"] / seen,
            main_loss=sums["main"] / seen,
            aux_loss=sums["aux"] / seen if cfg.lam > 0 else math.nan,
            val_acc=val_acc))

        improved = (len(val_set) > 0 and val_acc > best_acc) or len(val_set) == 0
        if improved:
            best_acc = val_acc if len(val_set) > 0 else 0.0
            best_epoch = epoch + 1
            if out_dir is not None:
                checkpoint_save(network, os.path.join(out_dir, "best.ckpt"))

    if out_dir is not None:
        checkpoint_save(network, os.path.join(out_dir, "last.ckpt"))
        write_history_csv(history, os.path.join(out_dir, "history.csv"))
    return history, best_epoch


# ---------------------------------------------------------------------
# history CSV
# ---------------------------------------------------------------------

_HISTORY_HEADER = "epoch,train_loss,main_loss,aux_loss,val_acc"


def history_to_csv(history):
    lines = [_HISTORY_HEADER]
    for row in history:
        lines.append(f"{row.epoch},{row.train_loss!r},{row.main_loss!r},"
                     f"{row.aux_loss!r},{row.val_acc!r}")
    return "\n".join(lines) + "\n"


def write_history_csv(history, path):
    with open(path, "wb") as fh:
        fh.write(history_to_csv(history).encode("utf-8"))


def read_history_csv(path):
    with open(path, "rb") as fh:
        lines = fh.read().decode("utf-8").splitlines()
    if not lines or lines[0] != _HISTORY_HEADER:
        raise ValueError(f"{path}: expected header {_HISTORY_HEADER!r}")
    out = []
    for line in lines[1:]:
        epoch, train_loss, main_loss, aux_loss, val_acc = line.split(",")
        out.append(EpochStats(int(epoch), float(train_loss), float(main_loss),
                              float(aux_loss), float(val_acc)))
    return out


# ---------------------------------------------------------------------
# run config text form: network sections plus one [train] section
# ---------------------------------------------------------------------

def train_config_to_text(cfg):
    lines = ["[train]"]
    for key, v in (("lr", cfg.lr), ("weight_decay", cfg.weight_decay),
                   ("batch_size", cfg.batch_size), ("epochs", cfg.epochs),
                   ("seed", cfg.seed), ("lambda", cfg.lam),
                   ("split_train", cfg.splits[0]), ("split_val", cfg.splits[1]),
                   ("split_test", cfg.splits[2]), ("augment", cfg.augment)):
        lines.append(f"{key} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def run_config_to_text(net_cfg, train_cfg):
    """Canonical full-run config: net, stages, optional block, then [train]."""
    return net_config_to_text(net_cfg) + "\n" + train_config_to_text(train_cfg)


def run_config_from_text(text):
    sections = _parse_sections(text)
    train_tabs = [tab for name, tab in sections if name == "train"]
    if len(train_tabs) != 1:
        raise ValueError("run config needs exactly one [train] section")
    net_cfg = _config_from_sections([(n, t) for n, t in sections if n != "train"])
    tab = dict(train_tabs[0])
    train_cfg = TrainConfig(
        lr=_take(tab, "train", "lr", float),
        weight_decay=_take(tab, "train", "weight_decay", float),
        batch_size=_take(tab, "train", "batch_size", int),
        epochs=_take(tab, "train", "epochs", int),
        seed=_take(tab, "train", "seed", int),
        lam=_take(tab, "train", "lambda", float),
        splits=(_take(tab, "train", "split_train", float),
                _take(tab, "train", "split_val", float),
                _take(tab, "train", "split_test", float)),
        augment=_take(tab, "train", "augment", _bool))
    if tab:
        raise ValueError(f"[train] has unknown key {next(iter(tab))!r}")
    return net_cfg, train_cfg


# ---------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------

_MAGIC = b"TMATCHCK"
_VERSION = 1


def checkpoint_bytes(network):
    """Serialize config text plus every named array, little-endian float64."""
    records = network.named_state()
    out = [_MAGIC, struct.pack("<I", _VERSION)]
    cfg_blob = net_config_to_text(network.cfg).encode("utf-8")
    out.append(struct.pack("<I", len(cfg_blob)))
    out.append(cfg_blob)
    out.append(struct.pack("<I", len(records)))
    for name, arr in records:
        blob = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(blob)))
        out.append(blob)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def checkpoint_save(network, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(network))


def checkpoint_load(path):
    """Rebuild the network a checkpoint describes; strict about its contents."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if view[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    offset = 8

    def take(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, view, offset)
        offset += size
        return values

    (version,) = take("<I")
    if version != _VERSION:
        raise ValueError(f"{path}: checkpoint version {version}, expected {_VERSION}")
    (cfg_len,) = take("<I")
    cfg_text = bytes(view[offset:offset + cfg_len]).decode("utf-8")
    offset += cfg_len
    (count,) = take("<I")
    records = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += size * 8
        if name in records:
            raise ValueError(f"{path}: duplicate record {name!r}")
        records[name] = arr.astype(np.float64)
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after last record")

    network = nt.build_network(net_config_from_text(cfg_text), seed=0)
    network.load_state(records)
    return network
