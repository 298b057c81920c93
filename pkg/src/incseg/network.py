"""Segmentation network, head extension and teacher/student snapshots."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ShapeError, SnapshotError

SNAPSHOT_MAGIC = b"INCSEGSN"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    widths: tuple[int, ...] = (8, 16, 32, 48)  # stem width, then one per downsampling stage
    groups: int = 4  # GroupNorm groups
    in_channels: int = 3

    @property
    def stride(self) -> int:
        return 2 ** (len(self.widths) - 1)


def _block(cin, cout, groups):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(min(groups, cout), cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(min(groups, cout), cout),
        nn.ReLU(inplace=True),
    )


class SegmentationModel(nn.Module):
    """Small U-Net style encoder-decoder with a growable 1x1 classifier.

    ``forward`` returns logits ``(B, class_count, H, W)``; the module-level
    :func:`forward` wraps it for single images and returns probabilities.
    All classes seen so far share one softmax.
    """

    def __init__(self, arch: ArchConfig, class_count: int, position: int = 1):
        super().__init__()
        if class_count < 1:
            raise ValueError("class_count must be >= 1")
        self.arch = arch
        self.position = position
        w = arch.widths
        self.stem = _block(arch.in_channels, w[0], arch.groups)
        self.down = nn.ModuleList(_block(w[i], w[i + 1], arch.groups) for i in range(len(w) - 1))
        self.up = nn.ModuleList(
            _block(w[i + 1] + w[i], w[i], arch.groups) for i in reversed(range(len(w) - 1)))
        self.head = nn.Conv2d(w[0], class_count, 1)

    @property
    def class_count(self) -> int:
        return self.head.out_channels

    def features(self, x):
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(F.max_pool2d(skips[-1], 2)))
        h = skips.pop()
        for block in self.up:
            skip = skips.pop()
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1))
        return h

    def forward(self, x):
        H, W = x.shape[-2:]
        s = self.arch.stride
        if H % s or W % s:
            raise ShapeError(f"input {H}x{W} is not divisible by the model stride {s}")
        return self.head(self.features(x))


def build_model(class_count: int, arch: ArchConfig | None = None, seed: int = 0) -> SegmentationModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegmentationModel(arch or ArchConfig(), class_count)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def images_to_tensor(images) -> torch.Tensor:
    """Stack uint8 ``(H, W, 3)`` images into a normalised float32 batch."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32)
    arr = (arr / 255.0 - 0.5) / 0.25
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def probs_from_logits(logits: torch.Tensor) -> np.ndarray:
    """Float64 softmax over channels, returned as ``(B, H, W, C)``."""
    return torch.softmax(logits.detach().double(), dim=1).permute(0, 2, 3, 1).numpy()


@torch.no_grad()
def predict_logits(model: SegmentationModel, images, batch_size: int = 32) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = [model(images_to_tensor(images[i:i + batch_size]))
           for i in range(0, len(images), batch_size)]
    model.train(was_training)
    return torch.cat(out)


def predict_proba(model: SegmentationModel, images, batch_size: int = 32) -> np.ndarray:
    """``(B, H, W, C)`` float64 probabilities for a list of images."""
    return probs_from_logits(predict_logits(model, images, batch_size))


def forward(model: SegmentationModel, image: np.ndarray) -> np.ndarray:
    """ProbMap ``(H, W, class_count)`` for one image."""
    if image.ndim != 3 or image.shape[2] != model.arch.in_channels:
        raise ShapeError(f"expected an (H, W, {model.arch.in_channels}) image, got {image.shape}")
    return predict_proba(model, [image])[0]


def extend_head(model: SegmentationModel, new_classes: int, seed: int = 0,
                init_scale: float = 0.01) -> SegmentationModel:
    """Grow the classifier by ``new_classes`` output channels in place.

    Existing channels keep their weights bit for bit; new ones get
    ``N(0, init_scale^2)`` weights and zero bias.
    """
    if new_classes < 1:
        raise ValueError("new_classes must be >= 1")
    old = model.head
    head = nn.Conv2d(old.in_channels, old.out_channels + new_classes, 1)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        head.weight[: old.out_channels] = old.weight
        head.bias[: old.out_channels] = old.bias
        head.weight[old.out_channels:] = torch.randn(
            (new_classes, old.in_channels, 1, 1), generator=gen) * init_scale
        head.bias[old.out_channels:] = 0.0
    model.head = head
    model.position += 1
    return model


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable copy of a model's parameters plus its schedule position."""

    arch: ArchConfig
    class_count: int
    position: int
    params: tuple[tuple[str, np.ndarray], ...]

    def to_bytes(self) -> bytes:
        entries = []
        blobs = []
        offset = 0
        for name, arr in self.params:
            raw = np.ascontiguousarray(arr).tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = json.dumps({
            "arch": asdict(self.arch),
            "class_count": self.class_count,
            "position": self.position,
            "params": entries,
        }, sort_keys=True).encode()
        body = struct.pack("<I", len(header)) + header + b"".join(blobs)
        digest = hashlib.sha256(body).digest()
        return SNAPSHOT_MAGIC + struct.pack("<H", SNAPSHOT_VERSION) + digest + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelSnapshot":
        head = len(SNAPSHOT_MAGIC)
        if len(data) < head + 2 + 32 + 4 or data[:head] != SNAPSHOT_MAGIC:
            raise SnapshotError("not a model snapshot")
        (version,) = struct.unpack_from("<H", data, head)
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"snapshot version {version}, expected {SNAPSHOT_VERSION}")
        digest = data[head + 2: head + 34]
        body = data[head + 34:]
        if hashlib.sha256(body).digest() != digest:
            raise SnapshotError("snapshot checksum mismatch (corrupted file)")
        (hlen,) = struct.unpack_from("<I", body, 0)
        try:
            meta = json.loads(body[4: 4 + hlen])
        except ValueError as exc:
            raise SnapshotError("unreadable snapshot header") from exc
        blob = body[4 + hlen:]
        params = []
        for e in meta["params"]:
            raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
            params.append((e["name"], arr))
        arch = ArchConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in meta["arch"].items()})
        return cls(arch, meta["class_count"], meta["position"], tuple(params))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelSnapshot":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


def snapshot(model: SegmentationModel) -> ModelSnapshot:
    params = tuple((k, v.detach().cpu().numpy().copy()) for k, v in model.state_dict().items())
    return ModelSnapshot(model.arch, model.class_count, model.position, params)


def restore(snap: ModelSnapshot) -> SegmentationModel:
    model = SegmentationModel(snap.arch, snap.class_count, snap.position)
    state = {k: torch.from_numpy(v.copy()) for k, v in snap.params}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise SnapshotError(f"snapshot does not fit the declared architecture: {exc}") from exc
    return model


def model_bytes_digest(model: SegmentationModel) -> str:
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]
