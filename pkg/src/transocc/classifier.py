"""n-way transformation classifier: networks, training, prediction, persistence."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataio import SampleBatch, atomic_write_bytes
from .transforms import TransformSet, apply

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"TOCCMDL\x00"
MODEL_FORMAT_VERSION = 1
ARCHITECTURES = ("small_conv", "wide_residual")


class DimensionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class ModelFileError(ValueError):
    pass


class CorruptModelError(ModelFileError):
    pass


class ModelVersionError(ModelFileError):
    pass


@dataclass
class ClassifierConfig:
    n_classes: int
    input_dims: tuple
    architecture: str = "small_conv"
    depth: int = 16
    width_factor: int = 4
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ValueError(f"input_dims must be (H, W, C), got {self.input_dims}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.depth < 1 or self.width_factor < 1:
            raise ValueError("depth and width_factor must be positive")
        if self.architecture == "wide_residual" and (self.depth - 4) % 6:
            raise ValueError(f"wide_residual depth must be 6k+4, got {self.depth}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 128
    epochs: int = 50
    optimizer: str = "adam"
    num_threads: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1 or self.num_threads < 1:
            raise ValueError("batch_size, epochs and num_threads must be >= 1")
        if self.optimizer != "adam":
            raise ValueError(f"only the 'adam' optimizer is supported, got {self.optimizer!r}")


# -- networks ------------------------------------------------------------------------

class SmallConv(nn.Module):
    """Three conv blocks and a linear head over globally pooled features."""

    def __init__(self, in_channels: int, n_classes: int, width: int = 16):
        super().__init__()
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), nn.ReLU(),
        )
        self.head = nn.Linear(4 * w, n_classes)

    def forward(self, x):
        x = self.features(x)
        return self.head(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


class WideBasic(nn.Module):
    def __init__(self, in_planes, planes, dropout, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, padding=1, bias=True)
        self.dropout = nn.Dropout(dropout)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=True)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(nn.Conv2d(in_planes, planes, 1, stride=stride, bias=True))

    def forward(self, x):
        out = self.dropout(self.conv1(F.relu(self.bn1(x))))
        out = self.conv2(F.relu(self.bn2(out)))
        return out + self.shortcut(x)


class WideResNet(nn.Module):
    def __init__(self, depth, widen_factor, dropout, n_classes, in_channels=3):
        super().__init__()
        n = (depth - 4) // 6
        stages = [16, 16 * widen_factor, 32 * widen_factor, 64 * widen_factor]
        self.conv1 = nn.Conv2d(in_channels, stages[0], 3, padding=1, bias=True)
        self.in_planes = stages[0]
        self.layer1 = self._wide_layer(stages[1], n, dropout, 1)
        self.layer2 = self._wide_layer(stages[2], n, dropout, 2)
        self.layer3 = self._wide_layer(stages[3], n, dropout, 2)
        self.bn = nn.BatchNorm2d(stages[3])
        self.linear = nn.Linear(stages[3], n_classes)

    def _wide_layer(self, planes, num_blocks, dropout, stride):
        layers = []
        for s in [stride] + [1] * (num_blocks - 1):
            layers.append(WideBasic(self.in_planes, planes, dropout, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = self.layer3(self.layer2(self.layer1(self.conv1(x))))
        out = F.relu(self.bn(out))
        return self.linear(torch.flatten(F.adaptive_avg_pool2d(out, 1), 1))


def build_network(config: ClassifierConfig) -> nn.Module:
    in_channels = config.input_dims[2]
    if config.architecture == "small_conv":
        return SmallConv(in_channels, config.n_classes)
    return WideResNet(config.depth, config.width_factor, config.dropout, config.n_classes, in_channels)


# -- model ------------------------------------------------------------------------

@dataclass
class TrainedModel:
    network: nn.Module
    classifier_config: ClassifierConfig
    train_config: TrainConfig
    transform_set: TransformSet
    loss_curve: list = field(default_factory=list)
    initial_loss: float = float("nan")
    dataset_hash: str = ""
    model_id: str = ""

    @property
    def n_classes(self) -> int:
        return self.classifier_config.n_classes

    @property
    def input_dims(self) -> tuple:
        return self.classifier_config.input_dims

    def _check_images(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1:] != self.input_dims:
            raise DimensionError(f"model expects images of shape {self.input_dims}, got {images.shape[1:]}")
        return images

    def logits(self, images, chunk_size: int = 256) -> torch.Tensor:
        images = self._check_images(images)
        self.network.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(images), chunk_size):
                outs.append(self.network(_to_tensor(images[start:start + chunk_size])))
        if not outs:
            return torch.empty((0, self.n_classes))
        return torch.cat(outs)

    def predict_proba(self, images, chunk_size: int = 256) -> np.ndarray:
        """Softmax class distributions, shape ``(N, n_classes)``, float64.

        Column ``j`` is the probability of transform label ``j + 1``.
        """
        return torch.softmax(self.logits(images, chunk_size).double(), dim=1).numpy()


def predict_proba(model: TrainedModel, images) -> np.ndarray:
    return model.predict_proba(images)


def _to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2), dtype=np.float32))


def dataset_hash(images: np.ndarray, transform_set: TransformSet) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype=np.float32).tobytes())
    h.update(json.dumps(transform_set.describe(), sort_keys=True).encode())
    return h.hexdigest()


def expanded_batch(images: np.ndarray, transform_set: TransformSet, pair_index: np.ndarray):
    """Materialise pairs ``k -> (images[k // n] transformed by spec k % n, k % n)``.

    Labels are 0-based class indices.
    """
    n = transform_set.n
    sample_idx, transform_idx = np.divmod(np.asarray(pair_index), n)
    out = np.empty((len(pair_index),) + images.shape[1:], dtype=np.float32)
    for t in np.unique(transform_idx):
        mask = transform_idx == t
        out[mask] = apply(images[sample_idx[mask]], transform_set.specs[t])
    return out, transform_idx


def _mean_loss(network, images, transform_set, batch_size) -> float:
    network.eval()
    total, count = 0.0, 0
    n_pairs = len(images) * transform_set.n
    with torch.no_grad():
        for start in range(0, n_pairs, batch_size):
            x, y = expanded_batch(images, transform_set, np.arange(start, min(start + batch_size, n_pairs)))
            total += F.cross_entropy(network(_to_tensor(x)), torch.from_numpy(y), reduction="sum").item()
            count += len(y)
    return total / count


def train(train_images, transform_set: TransformSet, cc: ClassifierConfig, tc: TrainConfig,
          progress=None) -> TrainedModel:
    """Train an n-way classifier on every (image, transform) pair of the majority set.

    ``train_images`` is a ``SampleBatch`` or an ``(N, H, W, C)`` array. Each epoch
    visits all ``N * n`` pairs once in a seeded random order; transformed images
    are produced batch by batch with the same functions used at scoring time.
    ``progress`` is called as ``progress(epoch, loss)`` after every epoch.
    """
    images = train_images.images if isinstance(train_images, SampleBatch) else train_images
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise ValueError(f"need a non-empty (N, H, W, C) training stack, got shape {images.shape}")
    if images.shape[1:] != cc.input_dims:
        raise DimensionError(f"training images have shape {images.shape[1:]}, config expects {cc.input_dims}")
    if cc.n_classes != transform_set.n:
        raise DimensionError(f"classifier has {cc.n_classes} classes but the transform set has {transform_set.n}")

    prev_threads = torch.get_num_threads()
    torch.set_num_threads(tc.num_threads)
    try:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cc.seed)
            network = build_network(cc)
            optimizer = torch.optim.Adam(network.parameters(), lr=tc.learning_rate)
            rng = np.random.default_rng(cc.seed)
            initial = _mean_loss(network, images, transform_set, max(tc.batch_size, 256))
            curve = []
            n_pairs = len(images) * transform_set.n
            for epoch in range(1, tc.epochs + 1):
                network.train()
                order = rng.permutation(n_pairs)
                total = 0.0
                for b, start in enumerate(range(0, n_pairs, tc.batch_size)):
                    x, y = expanded_batch(images, transform_set, order[start:start + tc.batch_size])
                    optimizer.zero_grad()
                    loss = F.cross_entropy(network(_to_tensor(x)), torch.from_numpy(y))
                    if not torch.isfinite(loss):
                        raise TrainingError(
                            f"non-finite loss {loss.item()} at epoch {epoch}, batch {b} "
                            f"(lr={tc.learning_rate}, batch_size={tc.batch_size}, arch={cc.architecture})"
                        )
                    loss.backward()
                    optimizer.step()
                    total += loss.item() * len(y)
                curve.append(total / n_pairs)
                logger.debug("epoch %d loss %.6f", epoch, curve[-1])
                if progress is not None:
                    progress(epoch, curve[-1])
    finally:
        torch.set_num_threads(prev_threads)

    network.eval()
    model = TrainedModel(
        network, cc, tc, transform_set, loss_curve=curve, initial_loss=initial,
        dataset_hash=dataset_hash(images, transform_set),
    )
    model.model_id = _state_hash(network)[:16]
    return model


def _state_bytes(network: nn.Module) -> bytes:
    buf = io.BytesIO()
    torch.save(network.state_dict(), buf)
    return buf.getvalue()


def _state_hash(network: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in network.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# -- persistence --------------------------------------------------------------------
# layout: magic | u32 version | u64 header_len | header json | u64 payload_len | payload | sha256

def model_to_bytes(model: TrainedModel) -> bytes:
    header = json.dumps({
        "format_version": MODEL_FORMAT_VERSION,
        "classifier_config": asdict(model.classifier_config),
        "train_config": asdict(model.train_config),
        "transform_set": model.transform_set.describe(),
        "loss_curve": model.loss_curve,
        "initial_loss": model.initial_loss,
        "dataset_hash": model.dataset_hash,
        "model_id": model.model_id,
    }).encode()
    payload = _state_bytes(model.network)
    body = (MODEL_MAGIC + struct.pack("<I", MODEL_FORMAT_VERSION)
            + struct.pack("<Q", len(header)) + header
            + struct.pack("<Q", len(payload)) + payload)
    return body + hashlib.sha256(body).digest()


def model_from_bytes(data: bytes) -> TrainedModel:
    if len(data) < len(MODEL_MAGIC) + 4 or not data.startswith(MODEL_MAGIC):
        raise CorruptModelError("not a model file (bad magic)")
    pos = len(MODEL_MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    if version != MODEL_FORMAT_VERSION:
        raise ModelVersionError(f"model file format version {version}, this build reads {MODEL_FORMAT_VERSION}")
    try:
        pos += 4
        (hlen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        header = json.loads(data[pos:pos + hlen])
        pos += hlen
        (plen,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        payload = data[pos:pos + plen]
        pos += plen
        digest = data[pos:pos + 32]
    except (struct.error, ValueError) as exc:
        raise CorruptModelError(f"truncated or corrupt model file: {exc}") from None
    if len(payload) != plen or len(digest) != 32 or hashlib.sha256(data[:pos]).digest() != digest:
        raise CorruptModelError("truncated or corrupt model file (checksum mismatch)")

    cc = ClassifierConfig(**header["classifier_config"])
    tc = TrainConfig(**header["train_config"])
    network = build_network(cc)
    network.load_state_dict(torch.load(io.BytesIO(payload), weights_only=True))
    network.eval()
    return TrainedModel(
        network, cc, tc, TransformSet.from_description(header["transform_set"]),
        loss_curve=list(header["loss_curve"]), initial_loss=header["initial_loss"],
        dataset_hash=header["dataset_hash"], model_id=header["model_id"],
    )


def save_model(model: TrainedModel, path: str | Path) -> str:
    """Write ``model`` atomically; returns the file's sha256."""
    data = model_to_bytes(model)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def load_model(path: str | Path) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise ModelFileError(f"model file not found: {path}")
    return model_from_bytes(path.read_bytes())


def write_loss_log(model: TrainedModel, path: str | Path) -> None:
    lines = ["epoch,loss", f"0,{model.initial_loss!r}"]
    lines += [f"{i},{loss!r}" for i, loss in enumerate(model.loss_curve, start=1)]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
