"""Multi-branch classifier: shared head, K independent branches, routing.

The head is a single dense layer (vector mode) or a single conv layer
(image mode). Each branch stacks configurable blocks (dense+relu, or
conv+relu+avgpool in image mode) and ends in a linear classifier. The first
block's output is the feature tap used by the orthogonality loss.
"""

from __future__ import annotations

import hashlib
import json
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .autodiff import Tensor, add, conv2d, flatten, matmul, relu

CHECKPOINT_MAGIC = b"BORT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Shape hyperparameters shared by every branch.

    ``input_shape`` is (D,) for vector data or (C, H, W) for images.
    """

    input_shape: tuple
    head_width: int
    block_widths: tuple
    num_classes: int
    num_branches: int
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        if self.num_branches < 1:
            raise ValueError(f"arch: num_branches must be >= 1, got {self.num_branches}")
        if self.num_classes < 2:
            raise ValueError(f"arch: num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) not in (1, 3):
            raise ValueError(f"arch: input_shape must be (D,) or (C,H,W), got {self.input_shape}")
        if self.head_width < 1 or any(w < 1 for w in self.block_widths):
            raise ValueError("arch: layer widths must be positive")
        if not self.block_widths:
            raise ValueError("arch: need at least one block per branch")
        if self.mode == "image":
            if self.kernel_size < 1 or self.kernel_size % 2 == 0:
                raise ValueError(
                    f"arch: kernel_size must be odd and positive, got {self.kernel_size}")
            h = self.input_shape[1]
            w = self.input_shape[2]
            for _ in self.block_widths:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ValueError(
                    f"arch: input {self.input_shape} too small for "
                    f"{len(self.block_widths)} pooling blocks")

    @property
    def mode(self) -> str:
        return "vector" if len(self.input_shape) == 1 else "image"

    def to_json(self) -> str:
        return json.dumps({
            "input_shape": list(self.input_shape),
            "head_width": self.head_width,
            "block_widths": list(self.block_widths),
            "num_classes": self.num_classes,
            "num_branches": self.num_branches,
            "kernel_size": self.kernel_size,
        }, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ArchConfig":
        d = json.loads(text)
        return ArchConfig(
            input_shape=tuple(d["input_shape"]),
            head_width=d["head_width"],
            block_widths=tuple(d["block_widths"]),
            num_classes=d["num_classes"],
            num_branches=d["num_branches"],
            kernel_size=d["kernel_size"],
        )


# routing modes ------------------------------------------------------------

@dataclass(frozen=True)
class Fixed:
    """Always route to branch ``k``."""
    k: int


class Random:
    """Uniform branch choice per forward call, drawn from a seeded stream."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng


RoutingMode = Union[Fixed, Random]


def route(mode: RoutingMode, num_branches: int) -> int:
    """Resolve a routing mode to a branch index. Never touches the tape."""
    if isinstance(mode, Fixed):
        if not 0 <= mode.k < num_branches:
            raise ValueError(f"route: branch {mode.k} out of range [0,{num_branches})")
        return mode.k
    if isinstance(mode, Random):
        return int(mode.rng.integers(num_branches))
    raise ValueError(f"route: unknown routing mode {mode!r}")


# layers -------------------------------------------------------------------

class DenseLayer:
    def __init__(self, w: Tensor, b: Tensor):
        self.w = w
        self.b = b

    def forward(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)

    def params(self):
        return [self.w, self.b]


class ConvLayer:
    def __init__(self, w: Tensor, b: Tensor, pad: int):
        self.w = w
        self.b = b
        self.pad = pad

    def forward(self, x: Tensor) -> Tensor:
        return add(conv2d(x, self.w, stride=1, pad=self.pad), self.b)

    def params(self):
        return [self.w, self.b]


_POOL_KERNELS: dict = {}


def _avg_pool_2x2(x: Tensor) -> Tensor:
    # average pooling as a fixed, non-trainable conv kernel (stride 2)
    channels = x.shape[1]
    kernel = _POOL_KERNELS.get(channels)
    if kernel is None:
        w = np.zeros((channels, channels, 2, 2))
        for c in range(channels):
            w[c, c] = 0.25
        kernel = Tensor(w)
        _POOL_KERNELS[channels] = kernel
    return conv2d(x, kernel, stride=2, pad=0)


class SharedHead:
    def __init__(self, layer, frozen: bool = False):
        self.layer = layer
        self.frozen = frozen

    def forward(self, x: Tensor) -> Tensor:
        return self.layer.forward(x)

    def params(self):
        return self.layer.params()


class Branch:
    """Block stack plus linear classifier; blocks[0] is the feature tap."""

    def __init__(self, blocks, classifier: DenseLayer, mode: str):
        self.blocks = blocks
        self.classifier = classifier
        self.mode = mode

    def block_out(self, i: int, h: Tensor) -> Tensor:
        h = relu(self.blocks[i].forward(h))
        if self.mode == "image":
            h = _avg_pool_2x2(h)
        return h

    def forward(self, h: Tensor) -> Tensor:
        for i in range(len(self.blocks)):
            h = self.block_out(i, h)
        if self.mode == "image":
            h = flatten(h)
        return self.classifier.forward(h)

    def params(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.params())
        out.extend(self.classifier.params())
        return out


class MultiBranchNet:
    def __init__(self, arch: ArchConfig, head: SharedHead, branches):
        self.arch = arch
        self.head = head
        self.branches = branches

    @property
    def num_branches(self) -> int:
        return len(self.branches)

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def parameters(self):
        out = list(self.head.params())
        for br in self.branches:
            out.extend(br.params())
        return out


# construction ---------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_net(arch: ArchConfig, seed: int) -> MultiBranchNet:
    """Build a net with fan-in-scaled uniform parameters, deterministically."""
    rng = np.random.default_rng(seed)
    if arch.mode == "vector":
        d = arch.input_shape[0]
        head = SharedHead(DenseLayer(
            _uniform(rng, (d, arch.head_width), d),
            _uniform(rng, (arch.head_width,), d)))
        branches = []
        for _ in range(arch.num_branches):
            blocks = []
            width_in = arch.head_width
            for width in arch.block_widths:
                blocks.append(DenseLayer(
                    _uniform(rng, (width_in, width), width_in),
                    _uniform(rng, (width,), width_in)))
                width_in = width
            classifier = DenseLayer(
                _uniform(rng, (width_in, arch.num_classes), width_in),
                _uniform(rng, (arch.num_classes,), width_in))
            branches.append(Branch(blocks, classifier, "vector"))
        return MultiBranchNet(arch, head, branches)

    c, h, w = arch.input_shape
    k = arch.kernel_size
    pad = k // 2
    fan = c * k * k
    head = SharedHead(ConvLayer(
        _uniform(rng, (arch.head_width, c, k, k), fan),
        _uniform(rng, (arch.head_width,), fan), pad))
    branches = []
    for _ in range(arch.num_branches):
        blocks = []
        ch_in, hh, ww = arch.head_width, h, w
        for width in arch.block_widths:
            fan = ch_in * k * k
            blocks.append(ConvLayer(
                _uniform(rng, (width, ch_in, k, k), fan),
                _uniform(rng, (width,), fan), pad))
            ch_in = width
            hh, ww = hh // 2, ww // 2
        feat = ch_in * hh * ww
        classifier = DenseLayer(
            _uniform(rng, (feat, arch.num_classes), feat),
            _uniform(rng, (arch.num_classes,), feat))
        branches.append(Branch(blocks, classifier, "image"))
    return MultiBranchNet(arch, head, branches)


# forward paths --------------------------------------------------------------

def _check_input(net: MultiBranchNet, x: Tensor) -> None:
    expected = net.arch.input_shape
    if x.shape[1:] != expected:
        raise ValueError(
            f"forward: input shape {x.shape} does not match arch "
            f"(N, {', '.join(map(str, expected))})")


def forward(net: MultiBranchNet, x: Tensor, mode: RoutingMode) -> Tensor:
    """Logits for a batch; one routing draw per call (whole batch, one branch)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(net, x)
    k = route(mode, net.num_branches)
    h = net.head.forward(x)
    return net.branches[k].forward(h)


def block1_features(net: MultiBranchNet, k: int, x: Tensor) -> Tensor:
    """First-block output of branch k, flattened to one vector per example."""
    if not 0 <= k < net.num_branches:
        raise ValueError(f"block1_features: branch {k} out of range")
    x = x if isinstance(x, Tensor) else Tensor(x)
    _check_input(net, x)
    h = net.branches[k].block_out(0, net.head.forward(x))
    if h.data.ndim > 2:
        h = flatten(h)
    return h


def forward_per_example(net: MultiBranchNet, x: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    """Evaluation-only forward with an independent routing draw per example.

    Returns plain logits; this path never participates in a tape.
    """
    x = np.asarray(x, dtype=np.float64)
    draws = rng.integers(net.num_branches, size=x.shape[0])
    with no_grad(net):
        per_branch = [forward(net, Tensor(x), Fixed(k)).data
                      for k in range(net.num_branches)]
    out = np.empty_like(per_branch[0])
    for i, k in enumerate(draws):
        out[i] = per_branch[k][i]
    return out


@contextmanager
def no_grad(net: MultiBranchNet) -> Iterator[None]:
    """Temporarily exclude all net parameters from gradient tracking."""
    params = net.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


# freezing and digests -------------------------------------------------------

def freeze_head(net: MultiBranchNet) -> None:
    """Exclude head parameters from gradients and optimizer updates. Idempotent."""
    net.head.frozen = True
    for p in net.head.params():
        p.requires_grad = False


def _digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def head_digest(net: MultiBranchNet) -> str:
    return _digest(net.head.params())


def branch_digest(net: MultiBranchNet, k: int) -> str:
    return _digest(net.branches[k].params())


def net_digest(net: MultiBranchNet) -> str:
    return _digest(net.parameters())


# checkpoint format ----------------------------------------------------------
# magic "BORT" | u32 version | u32 header length | header JSON (arch + frozen)
# then per parameter, declaration order: u32 ndim | ndim * u32 dims | f64 data
# all integers little-endian, floats little-endian f64

def save_checkpoint(net: MultiBranchNet, path) -> None:
    header = json.dumps({
        "arch": json.loads(net.arch.to_json()),
        "head_frozen": net.head.frozen,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in net.parameters():
            fh.write(struct.pack("<I", p.data.ndim))
            for d in p.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _take(buf: bytes, offset: int, n: int, path, what: str):
    if offset + n > len(buf):
        raise ValueError(
            f"{path}: truncated checkpoint, needed {n} bytes for {what} "
            f"at offset {offset}")
    return buf[offset:offset + n], offset + n


def load_checkpoint(path) -> MultiBranchNet:
    buf = Path(path).read_bytes()
    raw, off = _take(buf, 0, 4, path, "magic")
    if raw != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw!r} at offset 0, expected b'BORT'")
    raw, off = _take(buf, off, 4, path, "version")
    version = struct.unpack("<I", raw)[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {version}, "
            f"expected {CHECKPOINT_VERSION}")
    raw, off = _take(buf, off, 4, path, "header length")
    hlen = struct.unpack("<I", raw)[0]
    raw, off = _take(buf, off, hlen, path, "header")
    header = json.loads(raw.decode("utf-8"))
    arch = ArchConfig.from_json(json.dumps(header["arch"]))
    net = init_net(arch, seed=0)
    for p in net.parameters():
        raw, off = _take(buf, off, 4, path, "tensor rank")
        ndim = struct.unpack("<I", raw)[0]
        dims = []
        for _ in range(ndim):
            raw, off = _take(buf, off, 4, path, "tensor dim")
            dims.append(struct.unpack("<I", raw)[0])
        shape = tuple(dims)
        if shape != p.data.shape:
            raise ValueError(
                f"{path}: tensor shape {shape} at offset {off} does not match "
                f"architecture (expected {p.data.shape})")
        count = int(np.prod(shape)) if shape else 1
        raw, off = _take(buf, off, 8 * count, path, "tensor data")
        p.data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if off != len(buf):
        raise ValueError(
            f"{path}: {len(buf) - off} trailing bytes after offset {off}")
    if header.get("head_frozen"):
        freeze_head(net)
    return net
