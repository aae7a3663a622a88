"""Per-modality block networks with feature taps and internal classifiers."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import BinaryReader, DataFormatError, check_header
from .moddata import Modality
from .numcore import ShapeError, Tensor, dense_forward, relu

NUM_BLOCKS = 4
IC_ATTACH_POINTS = (1, 2, 3)
FC_EXIT = 4

DEFAULT_WIDTHS = {
    Modality.MV: (64, 64, 32, 32),
    Modality.R: (64, 64, 32, 32),
    Modality.IFRAME: (128, 96, 64, 64),
}


@dataclass
class Dense:
    W: Tensor
    b: Tensor

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return dense_forward(x, self.W, self.b)


def _init_dense(rng: np.random.Generator, fan_in: int, fan_out: int) -> Dense:
    W = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
    return Dense(Tensor(W, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True))


@dataclass
class InternalClassifier:
    """dense projection -> ReLU -> dense k-way head, reading one backbone tap."""

    attach_point: int
    proj: Dense
    head: Dense

    @property
    def in_dim(self) -> int:
        return self.proj.in_dim

    @property
    def hidden(self) -> int:
        return self.proj.out_dim

    def parameters(self) -> dict[str, Tensor]:
        return {"proj.W": self.proj.W, "proj.b": self.proj.b, "head.W": self.head.W, "head.b": self.head.b}


@dataclass
class BackboneNet:
    modality: Modality
    input_dim: int
    widths: tuple[int, ...]
    num_classes: int
    blocks: list[Dense]
    fc: Dense
    ics: list[InternalClassifier] = field(default_factory=list)
    frozen: bool = False
    metadata: dict = field(default_factory=dict)

    def backbone_parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, blk in enumerate(self.blocks, start=1):
            params[f"block{i}.W"] = blk.W
            params[f"block{i}.b"] = blk.b
        params["fc.W"] = self.fc.W
        params["fc.b"] = self.fc.b
        return params

    def ic_parameters(self) -> dict[str, Tensor]:
        return {f"ic{ic.attach_point}.{k}": v for ic in self.ics for k, v in ic.parameters().items()}

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.backbone_parameters(), **self.ic_parameters()}

    def ic(self, attach_point: int) -> InternalClassifier:
        for ic in self.ics:
            if ic.attach_point == attach_point:
                return ic
        raise KeyError(f"{self.modality.value} backbone has no IC at block {attach_point}")


def build_backbone(
    modality: Modality | str,
    input_dim: int,
    num_classes: int,
    widths: Sequence[int] | None = None,
    seed: int = 0,
) -> BackboneNet:
    modality = Modality.parse(modality)
    widths = tuple(widths or DEFAULT_WIDTHS[modality])
    if len(widths) != NUM_BLOCKS:
        raise ValueError(f"backbone needs exactly {NUM_BLOCKS} block widths, got {len(widths)}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 7, list(Modality).index(modality)])))
    dims = (input_dim, *widths)
    blocks = [_init_dense(rng, dims[i], dims[i + 1]) for i in range(NUM_BLOCKS)]
    fc = _init_dense(rng, widths[-1], num_classes)
    return BackboneNet(modality, input_dim, widths, num_classes, blocks, fc)


def attach_ics(net: BackboneNet, hidden: Sequence[int] | None = None, seed: int = 0) -> list[InternalClassifier]:
    """Attach one IC after each of blocks 1-3 (replacing any existing ones).

    Hidden width defaults to half the tapped block's width.
    """
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, 11, list(Modality).index(net.modality)]))
    )
    hidden = tuple(hidden) if hidden is not None else tuple(max(1, net.widths[a - 1] // 2) for a in IC_ATTACH_POINTS)
    if len(hidden) != len(IC_ATTACH_POINTS):
        raise ValueError(f"need {len(IC_ATTACH_POINTS)} IC hidden widths, got {len(hidden)}")
    net.ics = []
    for a, h in zip(IC_ATTACH_POINTS, hidden):
        width = net.widths[a - 1]
        net.ics.append(InternalClassifier(a, _init_dense(rng, width, h), _init_dense(rng, h, net.num_classes)))
    return net.ics


def _as_input(x, dim: int, what: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if t.data.ndim != 2 or t.shape[1] != dim:
        raise ShapeError(f"{what}: expected input dim {dim}, got shape {t.shape}")
    return t


def forward_with_taps(net: BackboneNet, x) -> tuple[list[Tensor], Tensor]:
    """Activations after blocks 1..4 and the final-classifier logits."""
    h = _as_input(x, net.input_dim, f"{net.modality.value} backbone")
    taps = []
    for blk in net.blocks:
        h = relu(blk(h))
        taps.append(h)
    return taps, net.fc(h)


def forward(net: BackboneNet, x) -> Tensor:
    return forward_with_taps(net, x)[1]


def ic_forward(ic: InternalClassifier, tap_features) -> Tensor:
    h = _as_input(tap_features, ic.in_dim, f"IC at block {ic.attach_point}")
    return ic.head(relu(ic.proj(h)))


def block_forward(net: BackboneNet, block_index: int, h) -> Tensor:
    """Apply a single block (1-based); used by the lazy early-exit walk."""
    blk = net.blocks[block_index - 1]
    return relu(blk(_as_input(h, blk.in_dim, f"{net.modality.value} block {block_index}")))


def freeze(net: BackboneNet) -> None:
    """Stop gradients for every backbone parameter (blocks and FC). ICs stay trainable."""
    net.frozen = True
    for p in net.backbone_parameters().values():
        p.requires_grad = False
        p.grad = None


def unfreeze(net: BackboneNet) -> None:
    net.frozen = False
    for p in net.backbone_parameters().values():
        p.requires_grad = True


def parameter_snapshot(net: BackboneNet, include_ics: bool = True) -> dict[str, np.ndarray]:
    params = net.named_parameters() if include_ics else net.backbone_parameters()
    return {k: v.data.copy() for k, v in params.items()}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


def save_checkpoint(net: BackboneNet, path: str | Path) -> None:
    meta = {
        "modality": net.modality.value,
        "input_dim": net.input_dim,
        "widths": list(net.widths),
        "num_classes": net.num_classes,
        "ic_hidden": [ic.hidden for ic in net.ics],
        "frozen": net.frozen,
        "training": net.metadata,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    params = net.named_parameters()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, t in params.items():
            enc = name.encode()
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(
    path: str | Path,
    expect_input_dim: int | None = None,
    expect_widths: Sequence[int] | None = None,
    expect_modality: Modality | str | None = None,
) -> BackboneNet:
    r = BinaryReader(Path(path).read_bytes(), f"checkpoint {path}")
    check_header(r, CKPT_MAGIC, CKPT_VERSION)
    blob = r.take(r.unpack("<I", "metadata length"), "metadata")
    try:
        meta = json.loads(blob.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt checkpoint metadata: {exc}") from None
    modality = Modality.parse(meta["modality"])
    if expect_modality is not None and Modality.parse(expect_modality) is not modality:
        raise DataFormatError(f"checkpoint holds a {modality.value} backbone, expected {Modality.parse(expect_modality).value}")
    if expect_input_dim is not None and meta["input_dim"] != expect_input_dim:
        raise DataFormatError(f"checkpoint input_dim {meta['input_dim']} does not match expected {expect_input_dim}")
    if expect_widths is not None and list(meta["widths"]) != list(expect_widths):
        raise DataFormatError(f"checkpoint widths {meta['widths']} do not match expected {list(expect_widths)}")

    net = build_backbone(modality, meta["input_dim"], meta["num_classes"], meta["widths"])
    if meta["ic_hidden"]:
        attach_ics(net, meta["ic_hidden"])
    expected = net.named_parameters()
    count = r.unpack("<I", "tensor count")
    if count != len(expected):
        raise DataFormatError(f"checkpoint has {count} tensors, architecture needs {len(expected)}")
    for _ in range(count):
        name = r.take(r.unpack("<H", "tensor name length"), "tensor name").decode(errors="replace")
        ndim = r.unpack("<B", f"{name} rank")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{name} shape"))
        if name not in expected:
            raise DataFormatError(f"unexpected tensor {name!r} in checkpoint")
        if tuple(shape) != expected[name].shape:
            raise DataFormatError(f"tensor {name}: shape {tuple(shape)} does not match architecture {expected[name].shape}")
        size = int(np.prod(shape)) if shape else 1
        expected[name].data = np.frombuffer(r.take(8 * size, f"{name} data"), dtype="<f8").reshape(shape).astype(np.float64)
    r.finish()
    net.metadata = meta.get("training", {})
    if meta.get("frozen"):
        freeze(net)
    return net
