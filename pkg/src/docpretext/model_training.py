"""Encoders, task heads, losses, the pretraining loop and checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import nat_targets
from .errors import ConfigError, ContractError, DomainError
from .manifest import Manifest, load_images
from .nat_targets import TargetBank, nat_loss
from .permset import PermutationSet
from .pretext_geometry import (FLIPS, JIGSAW, LABEL_SPACE, LDA, NAT, RELATIVE, ROTATIONS,
                               GridSpec, make_flip_sample, make_jigsaw_whole,
                               make_relative_pair, make_rotation_sample, sample_rng)
from .seeding import derive_seed

TASKS = (JIGSAW, RELATIVE, ROTATIONS, FLIPS, LDA, NAT)
CLASSIFY = "classify"
TASK_ALIASES = {
    "jigsaw": JIGSAW, "relative": RELATIVE, "rotation": ROTATIONS, "rotate": ROTATIONS,
    "flip": FLIPS, "lda": LDA, "topics": LDA,
}
RELATIVE_HIDDEN = 512

_MAGIC = b"DPTXCK01"


def canonical_task(name: str) -> str:
    task = TASK_ALIASES.get(name, name)
    if task not in TASKS:
        raise ConfigError(f"unknown task {name!r}; choose from {', '.join(TASKS)}")
    return task


@dataclass(frozen=True)
class EncoderSpec:
    # (filters, kernel, stride) per conv stage
    stages: tuple = ((32, 3, 2), (64, 3, 2), (128, 3, 2), (256, 3, 2))
    min_input: int = 96
    # average-pool factor applied to the raw input before the first stage
    pool: int = 1
    arch: str = "conv"
    # conv -> batch norm -> ReLU per stage, as in Inception's basic conv block
    batch_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        if self.arch not in ("conv", "inception_v3"):
            raise ConfigError(f"unknown encoder arch {self.arch!r}")
        if self.arch == "conv" and not self.stages:
            raise ConfigError("conv encoder needs at least one stage")
        if self.pool < 1 or self.min_input < 1:
            raise ConfigError("pool and min_input must be positive")

    @property
    def feature_dim(self) -> int:
        return 2048 if self.arch == "inception_v3" else self.stages[-1][0]

    @classmethod
    def inception_v3(cls) -> "EncoderSpec":
        return cls(stages=(), min_input=299, arch="inception_v3")


class Encoder(nn.Module):
    """Conv stages (or InceptionV3) followed by global average pooling."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        if spec.arch == "inception_v3":
            from torchvision.models import inception_v3

            net = inception_v3(weights=None, aux_logits=False, init_weights=True)
            net.fc = nn.Identity()
            self.body = net
            self.probe_layers = [m for m in net.modules() if type(m).__name__ == "BasicConv2d"]
            return
        layers = []
        if spec.pool > 1:
            layers.append(nn.AvgPool2d(spec.pool))
        c = 1
        self.probe_layers = []
        for filters, kernel, stride in spec.stages:
            layers.append(nn.Conv2d(c, filters, kernel, stride, padding=kernel // 2, bias=not spec.batch_norm))
            if spec.batch_norm:
                layers.append(nn.BatchNorm2d(filters))
            layers.append(nn.ReLU())
            self.probe_layers.append(layers[-1])
            c = filters
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.spec.arch == "inception_v3":
            return self.body(x.repeat(1, 3, 1, 1))
        return self.body(x).mean(dim=(2, 3))


class TaskModel(nn.Module):
    """Shared encoder plus one task head."""

    def __init__(self, task: str, spec: EncoderSpec, n_out: int):
        super().__init__()
        self.task = task
        self.n_out = n_out
        self.encoder = Encoder(spec)
        fd = spec.feature_dim
        if task == RELATIVE:
            self.head = nn.Sequential(nn.Linear(2 * fd, RELATIVE_HIDDEN), nn.ReLU(),
                                      nn.Linear(RELATIVE_HIDDEN, n_out))
        else:
            self.head = nn.Linear(fd, n_out)

    def forward(self, x: torch.Tensor, other: torch.Tensor | None = None) -> torch.Tensor:
        if self.task == RELATIVE:
            if other is None:
                raise ContractError("relative_patches needs a pair of inputs")
            return self.siamese(x, other)
        out = self.head(self.encoder(x))
        if self.task == NAT:
            out = F.normalize(out, dim=1)
        return out

    def siamese(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        # one encoder, applied to both branches
        feats = torch.cat([self.encoder(a), self.encoder(b)], dim=1)
        return self.head(feats)


def head_width(task: str, perms: PermutationSet | None = None, n_topics: int | None = None,
               nat_dim: int | None = None) -> int:
    if task == JIGSAW:
        if perms is None:
            raise ConfigError("jigsaw_whole needs a permutation set")
        return len(perms)
    if task in LABEL_SPACE:
        return LABEL_SPACE[task]
    if task == LDA:
        if not n_topics:
            raise ConfigError("lda_topics needs a topic count")
        return n_topics
    if task == NAT:
        if not nat_dim:
            raise ConfigError("nat needs a target dimension")
        return nat_dim
    if task == CLASSIFY:
        raise ConfigError("classify head width comes from the label set")
    raise ConfigError(f"unknown task {task!r}")


# ---------------------------------------------------------------- losses

def ce_loss(logits, target) -> torch.Tensor:
    """Mean negative log-softmax probability of the target classes."""
    z = torch.as_tensor(logits)
    single = z.ndim == 1
    z = z.reshape(1, -1) if single else z
    t = torch.as_tensor(target, dtype=torch.long).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise DomainError("one target per row of logits")
    if torch.any(t < 0) or torch.any(t >= z.shape[1]):
        raise DomainError(f"target index outside 0..{z.shape[1] - 1}")
    return F.cross_entropy(z, t)


def _simplex_tol(dtype) -> float:
    return 1e-9 if dtype == torch.float64 else 1e-5


def soft_ce_loss(logits, theta) -> torch.Tensor:
    """Mean ``-sum_k theta_k log softmax(logits)_k``."""
    z = torch.as_tensor(logits)
    p = torch.as_tensor(theta, dtype=z.dtype)
    if z.shape != p.shape:
        raise DomainError(f"shape mismatch: {tuple(z.shape)} vs {tuple(p.shape)}")
    z, p = z.reshape(-1, z.shape[-1]), p.reshape(-1, p.shape[-1])
    if torch.any(p < 0) or torch.any(torch.abs(p.sum(dim=1) - 1) > _simplex_tol(p.dtype)):
        raise DomainError("theta rows must be probability vectors")
    return -(p * F.log_softmax(z, dim=1)).sum(dim=1).mean()


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


# ---------------------------------------------------------------- config + checkpoint

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    optimizer: str = "sgd"
    seed: int = 0
    image_size: int = 384
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    grid: GridSpec = field(default_factory=GridSpec)
    nat_dim: int | None = None
    permset_path: str | None = None
    topics_path: str | None = None
    thetas_path: str | None = None
    targets_path: str | None = None

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderSpec(**self.encoder)
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.image_size < 1:
            raise ConfigError("steps, batch_size, lr and image_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["stages"] = [list(s) for s in self.encoder.stages]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    task: str
    encoder: EncoderSpec
    n_out: int
    params: "OrderedDict[str, np.ndarray]"
    config: dict = field(default_factory=dict)
    step: int = 0
    rng: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    losses: list = field(default_factory=list, compare=False, repr=False)

    @property
    def config_digest(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_model(cls, model: TaskModel, **kw) -> "Checkpoint":
        params = OrderedDict(
            (k, v.detach().cpu().numpy().astype("<f4")) for k, v in model.state_dict().items()
        )
        return cls(task=model.task, encoder=model.encoder.spec, n_out=model.n_out, params=params, **kw)

    def build(self, dtype=torch.float32) -> TaskModel:
        model = TaskModel(self.task, self.encoder, self.n_out)
        state = model.state_dict()
        loaded = OrderedDict()
        for k, ref in state.items():
            if k not in self.params:
                raise DomainError(f"checkpoint lacks parameter {k}")
            loaded[k] = torch.from_numpy(np.array(self.params[k])).to(ref.dtype).reshape(ref.shape)
        model.load_state_dict(loaded)
        model.eval()
        return model.to(dtype) if dtype != torch.float32 else model

    def header(self) -> dict:
        return {
            "task": self.task,
            "config_digest": self.config_digest,
            "step": self.step,
            "config": self.config,
            "encoder": {**asdict(self.encoder), "stages": [list(s) for s in self.encoder.stages]},
            "n_out": self.n_out,
            "rng": self.rng,
            "meta": self.meta,
            "tensors": [[k, list(v.shape)] for k, v in self.params.items()],
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True).encode()
        blocks = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in self.params.values())
        return _MAGIC + struct.pack("<I", len(head)) + head + blocks

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:8] != _MAGIC:
            raise DomainError("not a checkpoint file")
        (n,) = struct.unpack("<I", raw[8:12])
        head = json.loads(raw[12:12 + n])
        offset = 12 + n
        params = OrderedDict()
        for name, shape in head["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
            offset += 4 * count
        if offset != len(raw):
            raise DomainError("trailing bytes in checkpoint")
        return cls(task=head["task"], encoder=EncoderSpec(**head["encoder"]), n_out=head["n_out"],
                   params=params, config=head["config"], step=head["step"], rng=head["rng"],
                   meta=head["meta"])

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def init_model(task: str, spec: EncoderSpec, n_out: int, seed: int) -> TaskModel:
    torch.manual_seed(derive_seed(seed, "init") % 2**63)
    return TaskModel(task, spec, n_out)


def _as_model(ckpt) -> TaskModel:
    if isinstance(ckpt, TaskModel):
        return ckpt
    if isinstance(ckpt, Checkpoint):
        return ckpt.build()
    raise TypeError(f"expected a Checkpoint or TaskModel, got {type(ckpt).__name__}")


def _to_tensor(images, spec: EncoderSpec, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images])
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise DomainError("encoder inputs must be square gray images")
    if arr.shape[1] < spec.min_input:
        raise DomainError(f"input size {arr.shape[1]} below encoder minimum {spec.min_input}")
    return torch.from_numpy(arr).to(dtype).unsqueeze(1)


def encoder_forward(ckpt, batch, chunk: int = 64) -> np.ndarray:
    """Pooled features, ``m x feature_dim``."""
    model = _as_model(ckpt)
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(batch), chunk):
            x = _to_tensor(batch[i:i + chunk], model.encoder.spec, dtype)
            out.append(model.encoder(x).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.encoder.spec.feature_dim))


def siamese_forward(ckpt, pair_batch) -> np.ndarray:
    """Relative-position logits for ``[(center, neighbour), ...]``."""
    model = _as_model(ckpt)
    if model.task != RELATIVE:
        raise ContractError(f"siamese_forward needs a relative_patches model, got {model.task}")
    spec = model.encoder.spec
    a = _to_tensor([p[0] for p in pair_batch], spec)
    b = _to_tensor([p[1] for p in pair_batch], spec)
    with torch.no_grad():
        return model.siamese(a, b).numpy()


# ---------------------------------------------------------------- pretraining

def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _resolve_resources(task, cfg, perms, thetas, bank, manifest):
    if task == JIGSAW and perms is None:
        if not cfg.permset_path:
            raise ConfigError("jigsaw_whole needs a permutation set")
        perms = PermutationSet.load(cfg.permset_path)
    if task == LDA and thetas is None:
        from . import topic_pipeline as tp

        if cfg.thetas_path:
            thetas = tp.read_soft_labels(cfg.thetas_path)
        elif cfg.topics_path:
            thetas = tp.manifest_thetas(tp.TopicModel.load(cfg.topics_path), manifest)
        else:
            raise ConfigError("lda_topics needs a topic model or a soft-label file")
    if task == LDA:
        missing = [k for k in manifest.ids if k not in thetas]
        if missing:
            raise ConfigError(f"no soft label for {len(missing)} images, e.g. {missing[0]}")
    if task == NAT and bank is None:
        if cfg.targets_path:
            bank = TargetBank.load(cfg.targets_path)
        else:
            d = cfg.nat_dim or cfg.encoder.feature_dim
            bank = nat_targets.sample_targets(len(manifest), d, derive_seed(cfg.seed, "nat"),
                                              ids=manifest.ids)
    return perms, thetas, bank


def _batch(task, keys, images, rng, cfg, perms, thetas):
    if task == RELATIVE:
        samples = [make_relative_pair(images[k], cfg.grid, rng) for k in keys]
        a = _to_tensor([s.inputs[0] for s in samples], cfg.encoder)
        b = _to_tensor([s.inputs[1] for s in samples], cfg.encoder)
        return (a, b), torch.tensor([s.target for s in samples])
    if task == JIGSAW:
        samples = [make_jigsaw_whole(images[k], perms, cfg.grid, rng) for k in keys]
    elif task == ROTATIONS:
        samples = [make_rotation_sample(images[k], rng) for k in keys]
    elif task == FLIPS:
        samples = [make_flip_sample(images[k], rng) for k in keys]
    else:
        x = _to_tensor([images[k] for k in keys], cfg.encoder)
        if task == LDA:
            return (x,), torch.from_numpy(np.stack([thetas[k] for k in keys])).float()
        return (x,), None
    x = _to_tensor([s.inputs[0] for s in samples], cfg.encoder)
    return (x,), torch.tensor([s.target for s in samples])


def pretrain(task: str, manifest: Manifest, cfg: TrainConfig, *, perms: PermutationSet | None = None,
             thetas: dict | None = None, bank: TargetBank | None = None,
             images: dict | None = None, log_path=None) -> Checkpoint:
    """Minibatch training of encoder + head on freshly generated pretext samples.

    Batch ``t`` draws its images and sample randomness from
    ``sample_rng(derive_seed(cfg.seed, "batches"), t)``, so the run depends
    only on ``(task, manifest, cfg, resources)``.
    """
    task = canonical_task(task)
    if len(manifest) == 0:
        raise ConfigError("empty manifest")
    perms, thetas, bank = _resolve_resources(task, cfg, perms, thetas, bank, manifest)
    if bank is not None:
        bank = copy.deepcopy(bank)
    n_topics = len(next(iter(thetas.values()))) if task == LDA else None
    n_out = head_width(task, perms, n_topics, bank.d if bank is not None else None)
    if images is None:
        images = load_images(manifest, cfg.image_size)

    model = init_model(task, cfg.encoder, n_out, cfg.seed)
    model.train()
    opt = make_optimizer(model.parameters(), cfg)
    keys = manifest.ids
    m = min(cfg.batch_size, len(keys))
    batch_seed = derive_seed(cfg.seed, "batches")
    losses = []
    for step in range(cfg.steps):
        rng = sample_rng(batch_seed, step)
        batch_keys = [keys[i] for i in rng.choice(len(keys), size=m, replace=False)]
        inputs, target = _batch(task, batch_keys, images, rng, cfg, perms, thetas)
        out = model(*inputs)
        if task == LDA:
            loss = soft_ce_loss(out, target)
        elif task == NAT:
            rows = nat_targets.reassign(bank, batch_keys, out.detach().double().numpy())
            loss = nat_loss(out, torch.from_numpy(bank.targets[rows]).float())
        else:
            loss = ce_loss(out, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))

    meta = {"n_images": len(keys)}
    if task == NAT:
        meta["nat_assignment"] = dict(sorted(bank.assignment.items()))
    if perms is not None:
        meta["permset_seed"] = perms.seed
    model.eval()
    ckpt = Checkpoint.from_model(model, config=cfg.to_dict(), step=cfg.steps,
                                 rng={"seed": cfg.seed, "next_step": cfg.steps}, meta=meta)
    ckpt.losses = losses
    if log_path is not None:
        write_loss_log(log_path, losses)
    return ckpt


def running_loss(losses, window: int = 20, end: bool = True) -> float:
    w = losses[-window:] if end else losses[:window]
    return float(np.mean(w))


def write_loss_log(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, repr(float(v))])


def read_loss_log(path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(row["loss"]) for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- visualization

def gradient_ascent(ckpt, layer: int, filt: int, steps: int = 50, step_size: float = 0.01,
                    seed: int = 0, size: int | None = None) -> tuple[np.ndarray, list[float]]:
    """Maximize one filter's mean activation; returns the image and the activation trace.

    ``trace[t]`` is the mean activation of the iterate after ``t`` steps.
    Iterates are not clipped; only the returned image is.
    """
    model = _as_model(ckpt)
    model = copy.deepcopy(model).double().eval()
    spec = model.encoder.spec
    probes = model.encoder.probe_layers
    if not 0 <= layer < len(probes):
        raise DomainError(f"layer must be in 0..{len(probes) - 1}")
    width = _probe_width(model.encoder, layer)
    if not 0 <= filt < width:
        raise DomainError(f"filter must be in 0..{width - 1} for layer {layer}")
    size = size or max(spec.min_input, 128)
    rng = np.random.default_rng(seed)
    img = rng.uniform(-0.05, 0.05, size=(size, size))
    for p in model.parameters():
        p.requires_grad_(False)

    captured = {}
    handle = probes[layer].register_forward_hook(lambda mod, inp, out: captured.__setitem__("a", out))
    x = torch.from_numpy(img).reshape(1, 1, size, size).requires_grad_(True)
    trace = []
    try:
        for t in range(steps + 1):
            model.encoder(x)
            act = captured["a"][0, filt].mean()
            trace.append(float(act.item()))
            if t == steps:
                break
            (g,) = torch.autograd.grad(act, x)
            norm = torch.linalg.vector_norm(g)
            if norm > 0:
                with torch.no_grad():
                    x += step_size * g / norm
    finally:
        handle.remove()
    out = np.clip(x.detach().numpy()[0, 0], -0.5, 0.5).astype(np.float32)
    return out, trace


def gradient_ascent_viz(ckpt, layer: int, filt: int, steps: int = 50, step_size: float = 0.01,
                        seed: int = 0, size: int | None = None) -> np.ndarray:
    return gradient_ascent(ckpt, layer, filt, steps, step_size, seed, size)[0]


def _probe_width(encoder: Encoder, layer: int) -> int:
    if encoder.spec.arch == "conv":
        return encoder.spec.stages[layer][0]
    return encoder.probe_layers[layer].conv.out_channels
