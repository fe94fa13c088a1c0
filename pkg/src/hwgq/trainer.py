"""SGD training loop, evaluation, metric logging and checkpoints."""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import Dataset, augment, augmentation_for
from .layers import BatchNorm, softmax_cross_entropy
from .network import Network, NetworkSpec, SpecError, build_network
from .quantizer import QuantizerSpec
from .tensor import DTYPE, Rng, deterministic

CHECKPOINT_MAGIC = b"HWGQ-CKPT\n"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("iter", "split", "loss", "top1", "top5", "lr")


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    total_iters: int
    batch_size: int = 100
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "step"  # "step" or "poly"
    drop_every: int | None = None  # step schedule; default 40% of total_iters
    factor: float = 0.1
    power: float = 1.0  # poly schedule
    seed: int = 0
    backward_mode: str | None = None  # overrides the network's default
    log_every: int = 50
    eval_every: int | None = None  # default: one epoch of training data
    augment: bool | dict = True  # True: the dataset's standard recipe; or {"pad": .., "flip_p": ..}
    deterministic: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self, path: str = "train") -> None:
        if not isinstance(self.total_iters, int) or self.total_iters < 1:
            raise SpecError(f"{path}.total_iters: must be an integer >= 1")
        if not self.base_lr > 0:
            raise SpecError(f"{path}.base_lr: must be > 0")
        if not 0 <= self.momentum < 1:
            raise SpecError(f"{path}.momentum: must lie in [0, 1)")
        if self.weight_decay < 0:
            raise SpecError(f"{path}.weight_decay: must be >= 0")
        if self.batch_size < 1:
            raise SpecError(f"{path}.batch_size: must be >= 1")
        if self.schedule not in ("step", "poly"):
            raise SpecError(f"{path}.schedule: expected 'step' or 'poly', got {self.schedule!r}")
        if self.drop_every is not None and self.drop_every < 1:
            raise SpecError(f"{path}.drop_every: must be >= 1")
        if isinstance(self.augment, dict):
            for key in self.augment:
                if key not in ("pad", "flip_p"):
                    raise SpecError(f"{path}.augment.{key}: unknown field (expected pad, flip_p)")
            if int(self.augment.get("pad", 0)) < 0 or not 0 <= float(self.augment.get("flip_p", 0.0)) <= 1:
                raise SpecError(f"{path}.augment: need pad >= 0 and flip_p in [0, 1]")
        elif not isinstance(self.augment, bool):
            raise SpecError(f"{path}.augment: expected true, false or an object")
        if self.log_every < 1 or (self.eval_every is not None and self.eval_every < 1):
            raise SpecError(f"{path}.log_every/eval_every: must be >= 1")

    @property
    def step_size(self) -> int:
        return self.drop_every or max(1, math.ceil(0.4 * self.total_iters))

    @classmethod
    def from_dict(cls, d: dict, path: str = "train") -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise SpecError(f"{path}.{key}: unknown field")
        if "total_iters" not in d:
            raise SpecError(f"{path}.total_iters: required field missing")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(f"{path}: {exc}") from None
        except SpecError as exc:
            # __post_init__ reports against the default path
            msg = str(exc)
            raise SpecError(path + msg[len("train") :] if msg.startswith("train") else msg) from None

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(config: TrainConfig, it: int) -> float:
    if not 0 <= it < config.total_iters:
        raise ValueError(f"iteration {it} outside [0, {config.total_iters})")
    if config.schedule == "step":
        return config.base_lr * config.factor ** (it // config.step_size)
    return config.base_lr * (1.0 - it / config.total_iters) ** config.power


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class SGD:
    """SGD with momentum: v <- m v + (g + wd w); w <- w - lr v."""

    def __init__(self, network: Network):
        self.network = network
        self.velocity = {p.name: np.zeros_like(p.value) for p in network.params()}

    def step(self, config: TrainConfig, it: int, lr: float | None = None) -> None:
        lr = lr_at(config, it) if lr is None else lr
        params = self.network.params()
        for p in params:
            if p.grad is None:
                raise ValueError(f"{p.name}: no gradient")
            if p.grad.shape != p.value.shape:
                raise ValueError(f"{p.name}: gradient shape {p.grad.shape} != {p.value.shape}")
            if not np.isfinite(p.grad).all():
                raise NonFiniteGradient(f"non-finite gradient in {p.name}")
        # stage the whole update so an overflow leaves the network untouched
        staged = []
        for p in params:
            g = p.grad
            if p.decay and config.weight_decay:
                g = g + config.weight_decay * p.value
            v = DTYPE(config.momentum) * self.velocity[p.name] + g
            with np.errstate(over="ignore", invalid="ignore"):
                w = p.value - DTYPE(lr) * v
            if not (np.isfinite(v).all() and np.isfinite(w).all()):
                raise NonFiniteGradient(f"update of {p.name} overflowed")
            staged.append((p, v, w))
        for p, v, w in staged:
            self.velocity[p.name][...] = v
            p.value[...] = w


def sgd_step(network: Network, optimizer: SGD, config: TrainConfig, it: int) -> Network:
    optimizer.step(config, it)
    return network


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def config_digest(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict
    digest: str = ""

    @property
    def iteration(self) -> int:
        return int(self.meta["iteration"])

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.meta, sort_keys=True, separators=(",", ":")).encode()
        out = io.BytesIO()
        out.write(CHECKPOINT_MAGIC)
        out.write(f"version: {CHECKPOINT_VERSION}\n".encode())
        out.write(f"digest: {self.digest}\n".encode())
        out.write(f"meta: {len(meta)}\n".encode())
        out.write(f"tensors: {len(self.tensors)}\n\n".encode())
        out.write(meta)
        for name in sorted(self.tensors):
            arr = np.asarray(self.tensors[name])
            dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
            if dt not in _CODES:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            key = name.encode()
            out.write(struct.pack("<I", len(key)))
            out.write(key)
            out.write(struct.pack("<BB", _CODES[dt], arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if not data.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError("not a checkpoint: bad magic")
        buf = io.BytesIO(data)
        buf.readline()
        header = {}
        while True:
            line = buf.readline().decode()
            if line in ("\n", ""):
                break
            key, _, value = line.strip().partition(": ")
            header[key] = value
        version = int(header.get("version", -1))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} is not supported by this code (expects {CHECKPOINT_VERSION})"
            )
        meta = json.loads(buf.read(int(header["meta"])).decode())
        tensors = {}
        for _ in range(int(header["tensors"])):
            (klen,) = struct.unpack("<I", buf.read(4))
            name = buf.read(klen).decode()
            code, ndim = struct.unpack("<BB", buf.read(2))
            shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape)) * dt.itemsize
            raw = buf.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"{name}: truncated tensor data")
            tensors[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        return cls(tensors, meta, header.get("digest", ""))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def quantizer(self) -> QuantizerSpec | None:
        q = self.meta.get("quantizer")
        return None if q is None else QuantizerSpec.from_json(q)

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec.from_dict(self.meta["network"])

    def build(self) -> Network:
        net = build_network(self.network_spec(), self.quantizer())
        net.load_state_dict(self.tensors)
        return net


def make_checkpoint(network, optimizer, it, meta_base, digest, best_top1, pending=None) -> Checkpoint:
    tensors = {k: v.copy() for k, v in network.state_dict().items()}
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            tensors[f"momentum/{name}"] = v.copy()
    meta = dict(meta_base, iteration=it, best_top1=best_top1)
    if pending is not None:
        meta["pending_train"] = list(pending)
    return Checkpoint(tensors, meta, digest)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    k = min(k, logits.shape[1])
    # ties resolved toward the lower class index, stably
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def evaluate(network: Network, dataset: Dataset, batch_size: int = 500, packed: bool = False) -> dict:
    """Inference-mode loss, top-1 and (for >= 5 classes) top-5 accuracy."""
    out_classes = network.spec.num_classes if network.spec is not None else dataset.class_count
    if out_classes != dataset.class_count:
        raise ValueError(f"network predicts {out_classes} classes, dataset has {dataset.class_count}")
    loss_sum, top1, top5 = 0.0, 0, 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        x = dataset.images[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        logits = network.forward(x, training=False, packed=packed)
        loss, _ = softmax_cross_entropy(logits, y)
        loss_sum += loss * len(y)
        top1 += int(topk_hits(logits, y, 1).sum())
        top5 += int(topk_hits(logits, y, 5).sum())
    result = {"loss": loss_sum / n, "top1": top1 / n}
    result["top5"] = top5 / n if dataset.class_count >= 5 else None
    return result


def evaluate_checkpoint(checkpoint: Checkpoint, dataset: Dataset, packed: bool = False) -> dict:
    net = checkpoint.build()
    return evaluate(net, dataset, packed=packed)


def recompute_bn_stats(network: Network, dataset: Dataset, batch_size: int = 100, batches: int | None = None) -> None:
    """Replace every batch-norm layer's running statistics with averages over ``dataset``.

    Learned parameters are untouched.
    """
    bns = [l for l in network.layers if isinstance(l, BatchNorm)]
    saved = [(l.bn.momentum, l.gamma.value.copy(), l.beta.value.copy()) for l in bns]
    nb = len(dataset) // batch_size
    if batches is not None:
        nb = min(nb, batches)
    for k in range(1, nb + 1):
        for l in bns:
            l.bn.momentum = (k - 1) / k  # running average over batches seen so far
        x = dataset.images[(k - 1) * batch_size : k * batch_size]
        for layer in network.layers:
            if isinstance(layer, BatchNorm):
                x = layer.forward(x, training=True)
            else:
                x = layer.forward(x, training=False)
    for l, (m, g, b) in zip(bns, saved):
        l.bn.momentum = m
        l.gamma.value[...] = g
        l.beta.value[...] = b
        l.bn.cache = None


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(
                {
                    "iter": int(r["iter"]),
                    "split": r["split"],
                    "loss": float(r["loss"]),
                    "top1": float(r["top1"]),
                    "top5": float(r["top5"]) if r["top5"] else None,
                    "lr": float(r["lr"]),
                }
            )
    return rows


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint | None
    metrics: list[dict] = field(default_factory=list)

    def last(self, split: str) -> dict:
        return [r for r in self.metrics if r["split"] == split][-1]


def _batch_indices(n: int, batch: int, it: int, seed: int) -> np.ndarray:
    per_epoch = max(1, n // batch)
    epoch, pos = divmod(it, per_epoch)
    perm = Rng(seed).spawn(1, epoch).permutation(n)
    return perm[pos * batch : (pos + 1) * batch]


def train(
    network_spec: NetworkSpec,
    quantizer: QuantizerSpec | None,
    train_set: Dataset,
    test_set: Dataset,
    config: TrainConfig,
    run_dir=None,
    resume: Checkpoint | None = None,
    meta: dict | None = None,
    stop_at: int | None = None,
) -> TrainResult:
    """Run ``config.total_iters`` mini-batch SGD steps.

    Data order, augmentation and dropout draw from streams keyed on
    ``(seed, iteration)``, so a resumed run replays the uninterrupted one.
    ``stop_at`` ends the loop early (after that many iterations) as if the
    process had been interrupted there.
    """
    if config.backward_mode is not None:
        network_spec = NetworkSpec.from_dict({**network_spec.to_dict(), "backward": config.backward_mode})
    net = build_network(network_spec, quantizer, seed=config.seed)
    opt = SGD(net)
    meta_base = {
        "format": "hwgq-checkpoint",
        "network": network_spec.to_dict(),
        "train": config.to_dict(),
        "quantizer": None if quantizer is None else quantizer.to_json(),
        "normalization": {"mean": train_set.mean.tolist(), "std": train_set.std.tolist()},
        **(meta or {}),
    }
    digest = config_digest({k: v for k, v in meta_base.items() if k != "normalization"})
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)

    start, best_top1, rows = 0, -1.0, []
    best_ckpt = None
    # running sums of the current train-logging interval: loss, hits, count
    acc = [0.0, 0, 0]
    if resume is not None:
        if resume.digest != digest:
            raise CheckpointError("checkpoint was produced by a different configuration")
        net.load_state_dict(resume.tensors)
        for name in opt.velocity:
            opt.velocity[name][...] = resume.tensors[f"momentum/{name}"]
        start = resume.iteration
        best_top1 = float(resume.meta.get("best_top1", -1.0))
        acc = list(resume.meta.get("pending_train", acc))
        if run is not None and (run / "metrics.csv").exists():
            rows = [r for r in read_metrics(run / "metrics.csv") if r["iter"] <= start]
        if run is not None and (run / "ckpt_best").exists():
            best_ckpt = Checkpoint.load(run / "ckpt_best")

    eval_every = config.eval_every or max(1, len(train_set) // config.batch_size)
    aug = config.augment if isinstance(config.augment, dict) else augmentation_for(train_set.name)
    ctx = deterministic() if config.deterministic else contextlib.nullcontext()
    end = config.total_iters if stop_at is None else min(stop_at, config.total_iters)

    def checkpoint(it):
        return make_checkpoint(net, opt, it, meta_base, digest, best_top1, acc)

    def flush():
        if run is not None:
            write_metrics(rows, run / "metrics.csv")

    with ctx:
        for it in range(start, end):
            lr = lr_at(config, it)
            idx = _batch_indices(len(train_set), config.batch_size, it, config.seed)
            x = train_set.images[idx]
            y = train_set.labels[idx]
            if config.augment:
                x = augment(x, Rng(config.seed).spawn(2, it), fill=train_set.zero_level(), **aug)
            net.set_rng(Rng(config.seed).spawn(3, it))
            # a diverging forward pass also corrupts the batch-norm running statistics
            good_buffers = {k: v.copy() for k, v in net.buffers().items()}
            with np.errstate(over="ignore", invalid="ignore"):
                logits = net.forward(x, training=True)
                loss, grad = softmax_cross_entropy(logits, y)
            failure = None if math.isfinite(loss) else f"loss became {loss} at iteration {it}"
            if failure is None:
                net.backward(grad)
                try:
                    opt.step(config, it, lr)
                except NonFiniteGradient as exc:
                    failure = f"{exc} at iteration {it}"
            if failure is not None:
                for layer in net.layers:
                    layer.load_buffers(good_buffers)
                _abort(run, checkpoint(it), rows, failure)
            acc[0] += loss * len(y)
            acc[1] += int(topk_hits(logits, y, 1).sum())
            acc[2] += len(y)
            done = it + 1
            if done % config.log_every == 0 or done == config.total_iters:
                rows.append(
                    {"iter": done, "split": "train", "loss": acc[0] / acc[2], "top1": acc[1] / acc[2], "top5": None, "lr": lr}
                )
                acc = [0.0, 0, 0]
            if done % eval_every == 0 or done == config.total_iters:
                res = evaluate(net, test_set)
                rows.append({"iter": done, "split": "test", **res, "lr": lr})
                if res["top1"] > best_top1:
                    best_top1 = res["top1"]
                    best_ckpt = checkpoint(done)
                    if run is not None:
                        best_ckpt.save(run / "ckpt_best")
                flush()
    final = checkpoint(end)
    if run is not None:
        final.save(run / ("ckpt_final" if end == config.total_iters else "ckpt_last"))
        flush()
    return TrainResult(final, best_ckpt, rows)


def _abort(run, ckpt: Checkpoint, rows, message: str):
    if run is not None:
        ckpt.save(run / "ckpt_last_good")
        write_metrics(rows, run / "metrics.csv")
    raise TrainingDiverged(message)
