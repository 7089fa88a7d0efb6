"""DCNO building blocks and the pattern-string model assembler.

A model is encoder -> processor -> decoder. The processor is spelled as a
string over ``{F, C}``: ``F`` is a spectral (Fourier) layer of width ``d``
and ``C`` is a residual stack of dilated-convolution blocks of width
``conv_width``, one block of three ``k x k`` conv + GELU units per entry of
the dilation tuple.

All layer code operates on tape node ids holding ``(B, H, W, C)`` arrays.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ParameterStore, Tape
from .tensor import Field2D, lattice_points

UNITS_PER_BLOCK = 3


@dataclass(frozen=True)
class ModelConfig:
    pattern: str = "FCFCFCF"
    width: int = 32
    modes: Tuple[int, int] = (12, 12)
    dilations: Tuple[int, ...] = (1, 3, 9, 3, 1)
    conv_width: int = 32
    kernel_size: int = 3
    padding: str = "zero"
    ffn_hidden: int = 128
    in_channels: int = 1
    out_channels: int = 1
    lattice: str = "cell"

    def __post_init__(self):
        if not self.pattern:
            raise ValueError("processor pattern must be nonempty")
        bad = set(self.pattern) - {"F", "C"}
        if bad:
            raise ValueError(f"invalid pattern character(s) {sorted(bad)} in {self.pattern!r}")
        if not self.dilations or min(self.dilations) < 1:
            raise ValueError("dilation entries must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be a positive odd integer")
        if self.padding not in ("zero", "circular"):
            raise ValueError(f"unknown padding {self.padding!r}")
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        object.__setattr__(self, "dilations", tuple(int(r) for r in self.dilations))

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for name, f in cls.__dataclass_fields__.items():
            if name not in values:
                continue
            raw = values[name]
            if name in ("modes", "dilations"):
                kwargs[name] = tuple(int(v) for v in str(raw).split(",") if v != "")
            elif f.type in ("int", int):
                kwargs[name] = int(raw)
            else:
                kwargs[name] = str(raw)
        return cls(**kwargs)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


@dataclass
class SpectralLayerParams:
    """Weights of one F layer; ``R`` is complex with shape ``(2, m1, m2, d, d)``."""

    R: np.ndarray
    W: np.ndarray
    b: np.ndarray
    activation: bool = True


@dataclass
class ConvBlockParams:
    """One dilation block: three ``(k, k, c, c)`` kernels with their biases."""

    dilation: int
    kernels: List[np.ndarray]
    biases: List[np.ndarray]


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------

def _spectral_shapes(prefix: str, d: int, modes) -> List[Tuple[str, tuple]]:
    m1, m2 = modes
    return [(f"{prefix}.R", (2, m1, m2, d, d, 2)), (f"{prefix}.W", (d, d)), (f"{prefix}.b", (d,))]


def c_layer_shapes(prefix: str, dilations: Sequence[int], kernel_size: int,
                   channels: int) -> List[Tuple[str, tuple]]:
    out = []
    k = kernel_size
    for j, _ in enumerate(dilations):
        for u in range(UNITS_PER_BLOCK):
            out.append((f"{prefix}.blk{j}.unit{u}.w", (k, k, channels, channels)))
            out.append((f"{prefix}.blk{j}.unit{u}.b", (channels,)))
    return out


def _processor_plan(cfg: ModelConfig) -> List[Tuple[str, int, int]]:
    """Layer sequence as ``(kind, in_width, out_width)``; kind ``A`` is an adapter."""
    plan = []
    cur = cfg.width
    for ch in cfg.pattern:
        need = cfg.width if ch == "F" else cfg.conv_width
        if cur != need:
            plan.append(("A", cur, need))
            cur = need
        plan.append((ch, cur, cur))
    if cur != cfg.width:
        plan.append(("A", cur, cfg.width))
    return plan


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Every trainable tensor in registration order."""
    d, k = cfg.width, cfg.kernel_size
    shapes: List[Tuple[str, tuple]] = [
        ("enc.conv0.w", (k, k, cfg.in_channels + 2, d)),
        ("enc.conv0.b", (d,)),
        ("enc.conv1.w", (k, k, d, d)),
        ("enc.conv1.b", (d,)),
    ]
    for i, (kind, cin, cout) in enumerate(_processor_plan(cfg)):
        prefix = f"proc{i}"
        if kind == "F":
            shapes += _spectral_shapes(f"{prefix}.F", d, cfg.modes)
        elif kind == "C":
            shapes += c_layer_shapes(f"{prefix}.C", cfg.dilations, k, cfg.conv_width)
        else:
            shapes.append((f"{prefix}.A", (cin, cout)))
    shapes += _spectral_shapes("dec.F0", d, cfg.modes)
    shapes += _spectral_shapes("dec.F1", d, cfg.modes)
    h = cfg.ffn_hidden
    shapes += [
        ("dec.ffn0.w", (d, h)), ("dec.ffn0.b", (h,)),
        ("dec.ffn1.w", (h, h)), ("dec.ffn1.b", (h,)),
        ("dec.ffn2.w", (h, cfg.out_channels)), ("dec.ffn2.b", (cfg.out_channels,)),
    ]
    return OrderedDict(shapes)


def count_parameters(selection: str = "all", cfg: Optional[ModelConfig] = None) -> int:
    """Exact parameter count.

    ``selection="all"`` counts the whole model; ``"c-layers"`` counts the
    blocks of a single C layer for ``cfg.dilations`` and ``cfg.kernel_size``.
    """
    cfg = cfg or ModelConfig()
    if selection == "all":
        shapes = parameter_shapes(cfg).values()
    elif selection in ("c-layers", "C-layers-only", "c"):
        shapes = [s for _, s in c_layer_shapes("C", cfg.dilations, cfg.kernel_size, cfg.conv_width)]
    else:
        raise ValueError(f"unknown parameter selection {selection!r}")
    return int(sum(int(np.prod(s)) for s in shapes))


def init_parameters(cfg: ModelConfig, seed: int) -> ParameterStore:
    """Deterministic initialization in registration order."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    for name, shape in parameter_shapes(cfg).items():
        kind = name.rsplit(".", 1)[-1]
        if kind == "b":
            value = np.zeros(shape)
        elif kind == "R":
            value = rng.standard_normal(shape) / cfg.width ** 2
        elif kind == "w" and len(shape) == 4:
            fan_in = shape[0] * shape[1] * shape[2]
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, shape)
        else:  # pointwise matrices: F-layer W, adapters, FFN
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, shape)
        store.register(name, value)
    return store


# ---------------------------------------------------------------------------
# Tape-level layers
# ---------------------------------------------------------------------------

def spectral_layer(tape: Tape, v: int, R: int, W: int, b: int, modes, activation: bool = True) -> int:
    """``act(ifft2(mix(fft2(v))) + v W + b)`` at the input resolution."""
    h, w = tape.value(v).shape[1:3]
    m1, m2 = modes
    if 2 * m1 > h or m2 > w // 2 + 1:
        raise ValueError(f"resolution {h}x{w} is below the mode cutoff {tuple(modes)}")
    spec = tape.mode_mix(tape.fft2(v), R, modes)
    out = tape.add(tape.add(tape.ifft2(spec, (h, w)), tape.channel_linear(v, W)), b)
    return tape.gelu(out) if activation else out


def conv_block(tape: Tape, v: int, kernels: Sequence[int], biases: Sequence[int],
               dilation: int, padding: str) -> int:
    for kern, bias in zip(kernels, biases):
        v = tape.gelu(tape.conv2d(v, kern, bias, dilation=dilation, padding=padding))
    return v


def conv_layer(tape: Tape, v: int, ids: Dict[str, int], prefix: str,
               dilations: Sequence[int], padding: str) -> int:
    """Residual stack ``v + g(v)`` with one block per dilation entry."""
    g = v
    for j, rate in enumerate(dilations):
        kernels = [ids[f"{prefix}.blk{j}.unit{u}.w"] for u in range(UNITS_PER_BLOCK)]
        biases = [ids[f"{prefix}.blk{j}.unit{u}.b"] for u in range(UNITS_PER_BLOCK)]
        g = conv_block(tape, g, kernels, biases, rate, padding)
    return tape.add(v, g)


def coordinate_channels(batch: int, h: int, w: int, lattice: str = "cell") -> np.ndarray:
    """Normalized lattice coordinates in ``[0, 1)``, shape ``(B, H, W, 2)``."""
    x1 = lattice_points(h, 1.0, lattice)
    x2 = lattice_points(w, 1.0, lattice)
    g1, g2 = np.meshgrid(x1, x2, indexing="ij")
    grid = np.stack([g1, g2], axis=-1)
    return np.broadcast_to(grid, (batch, h, w, 2)).copy()


def encoder(tape: Tape, a: int, ids: Dict[str, int], lattice: str, padding: str) -> int:
    b, h, w = tape.value(a).shape[:3]
    coords = tape.constant(coordinate_channels(b, h, w, lattice).astype(tape.value(a).dtype))
    x = tape.concat([a, coords])
    x = tape.gelu(tape.conv2d(x, ids["enc.conv0.w"], ids["enc.conv0.b"], padding=padding))
    return tape.conv2d(x, ids["enc.conv1.w"], ids["enc.conv1.b"], padding=padding)


def decoder(tape: Tape, v: int, ids: Dict[str, int], modes) -> int:
    v = spectral_layer(tape, v, ids["dec.F0.R"], ids["dec.F0.W"], ids["dec.F0.b"], modes, True)
    v = spectral_layer(tape, v, ids["dec.F1.R"], ids["dec.F1.W"], ids["dec.F1.b"], modes, False)
    v = tape.gelu(tape.add(tape.channel_linear(v, ids["dec.ffn0.w"]), ids["dec.ffn0.b"]))
    v = tape.gelu(tape.add(tape.channel_linear(v, ids["dec.ffn1.w"]), ids["dec.ffn1.b"]))
    return tape.add(tape.channel_linear(v, ids["dec.ffn2.w"]), ids["dec.ffn2.b"])


@dataclass
class Normalizer:
    """Fixed per-channel affine maps applied around the network."""

    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @classmethod
    def identity(cls, cin: int, cout: int) -> "Normalizer":
        return cls(np.zeros(cin), np.ones(cin), np.zeros(cout), np.ones(cout))

    @classmethod
    def fit(cls, inputs: np.ndarray, outputs: np.ndarray) -> "Normalizer":
        def stats(x):
            mean = x.mean(axis=(0, 1, 2))
            std = x.std(axis=(0, 1, 2))
            return mean, np.where(std > 0, std, 1.0)
        im, isd = stats(inputs)
        om, osd = stats(outputs)
        return cls(im, isd, om, osd)

    def to_mapping(self) -> Dict[str, str]:
        return {f"norm.{k}": ",".join(repr(float(x)) for x in getattr(self, k))
                for k in ("in_mean", "in_std", "out_mean", "out_std")}

    @classmethod
    def from_mapping(cls, values: Dict[str, str]) -> Optional["Normalizer"]:
        keys = ("in_mean", "in_std", "out_mean", "out_std")
        if not all(f"norm.{k}" in values for k in keys):
            return None
        return cls(*[np.array([float(x) for x in values[f"norm.{k}"].split(",")]) for k in keys])


class DCNO:
    """A built model: configuration, parameters and the forward program."""

    def __init__(self, cfg: ModelConfig, params: ParameterStore,
                 normalizer: Optional[Normalizer] = None):
        self.cfg = cfg
        self.params = params
        self.normalizer = normalizer or Normalizer.identity(cfg.in_channels, cfg.out_channels)

    def forward(self, tape: Tape, ids: Dict[str, int], x: np.ndarray) -> int:
        """Record the model on ``tape`` for a raw input batch ``(B, H, W, cin)``."""
        cfg = self.cfg
        norm = self.normalizer
        dtype = next(iter(self.params.items()))[1].dtype
        xin = ((x - norm.in_mean) / norm.in_std).astype(dtype)
        v = encoder(tape, tape.constant(xin), ids, cfg.lattice, cfg.padding)
        for i, (kind, _, _) in enumerate(_processor_plan(cfg)):
            prefix = f"proc{i}"
            if kind == "F":
                v = spectral_layer(tape, v, ids[f"{prefix}.F.R"], ids[f"{prefix}.F.W"],
                                   ids[f"{prefix}.F.b"], cfg.modes, True)
            elif kind == "C":
                v = conv_layer(tape, v, ids, f"{prefix}.C", cfg.dilations, cfg.padding)
            else:
                v = tape.channel_linear(v, ids[f"{prefix}.A"])
        out = decoder(tape, v, ids, cfg.modes)
        if np.any(norm.out_std != 1) or np.any(norm.out_mean != 0):
            out = tape.add(tape.scale(out, norm.out_std.astype(dtype)),
                           tape.constant(norm.out_mean.astype(dtype)))
        return out

    def predict(self, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
        outs = []
        for start in range(0, x.shape[0], batch_size):
            tape = Tape()
            ids = tape.leaves(self.params)
            outs.append(np.asarray(tape.value(self.forward(tape, ids, x[start:start + batch_size])),
                                   dtype=float))
        return np.concatenate(outs, axis=0)

    def layer_counts(self) -> Dict[str, int]:
        return {"F": self.cfg.pattern.count("F"), "C": self.cfg.pattern.count("C")}


def build_model(cfg: ModelConfig, seed: int = 0) -> DCNO:
    return DCNO(cfg, init_parameters(cfg, seed))


# ---------------------------------------------------------------------------
# Field-level conveniences (single sample, no gradients kept)
# ---------------------------------------------------------------------------

def _as_batch(v: Field2D) -> np.ndarray:
    return v.data[None]


def spectral_layer_forward(v: Field2D, p: SpectralLayerParams) -> Field2D:
    R = np.asarray(p.R)
    modes = R.shape[1:3]
    tape = Tape()
    r = tape.constant(np.stack([R.real, R.imag], axis=-1))
    out = spectral_layer(tape, tape.constant(_as_batch(v)), r, tape.constant(p.W),
                         tape.constant(p.b), modes, p.activation)
    return v.like(tape.value(out)[0])


def conv_layer_forward(v: Field2D, blocks: Sequence[ConvBlockParams], padding: str = "zero") -> Field2D:
    if blocks and v.channels != blocks[0].kernels[0].shape[2]:
        raise ValueError(f"C layer expects {blocks[0].kernels[0].shape[2]} channels, got {v.channels}")
    tape = Tape()
    x = tape.constant(_as_batch(v))
    g = x
    for blk in blocks:
        g = conv_block(tape, g, [tape.constant(k) for k in blk.kernels],
                       [tape.constant(b) for b in blk.biases], blk.dilation, padding)
    return v.like(tape.value(tape.add(x, g))[0])


def _subset_forward(params: ParameterStore, fn) -> np.ndarray:
    tape = Tape()
    ids = {name: tape.constant(value) for name, value in params.items()}
    return tape.value(fn(tape, ids))[0]


def encoder_forward(a: Field2D, params: ParameterStore, padding: str = "zero") -> Field2D:
    out = _subset_forward(params, lambda t, ids: encoder(t, t.constant(_as_batch(a)), ids,
                                                         a.lattice, padding))
    return a.like(out)


def decoder_forward(v: Field2D, params: ParameterStore, modes) -> Field2D:
    out = _subset_forward(params, lambda t, ids: decoder(t, t.constant(_as_batch(v)), ids, modes))
    return v.like(out)
