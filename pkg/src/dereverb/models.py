"""CBLDNN mask generator and BLCDNN discriminator."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .neural import (
    BLSTM,
    Activation,
    AddChannel,
    Concat,
    Conv2D,
    Dense,
    FrameFlatten,
    GlobalMaxPool,
    Log1p,
    ParamStore,
    Sequential,
)

# (in_ch, out_ch, kW, kH), shallow to deep
DEFAULT_CONV_STACK = ((1, 4, 10, 10), (4, 4, 5, 5), (4, 8, 7, 7), (8, 8, 5, 5), (8, 8, 3, 3))
# (kW, kH, out_ch)
DEFAULT_DISC_BRANCHES = ((5, 5, 4), (3, 3, 4), (1, 1, 4))


def _scaled(n: int, scale) -> int:
    return max(1, int(round(n * scale)))


def _parse_scale(value) -> Fraction:
    return Fraction(str(value)).limit_denominator(1000) if not isinstance(value, Fraction) else value


@dataclass
class GeneratorSpec:
    conv_stack: tuple = DEFAULT_CONV_STACK
    blstm_units: int = 256
    blstm_layers: int = 2
    freq_bins: int = 257
    fc_out: int = 257
    scale: Fraction = Fraction(1)
    compress: str = "none"

    def __post_init__(self):
        self.scale = _parse_scale(self.scale)
        self.conv_stack = tuple(tuple(int(v) for v in row) for row in self.conv_stack)
        if self.fc_out != self.freq_bins:
            raise ValueError("fc_out must equal freq_bins")
        for prev, row in zip(self.conv_stack, self.conv_stack[1:]):
            if prev[1] != row[0]:
                raise ValueError("conv chain channel counts are inconsistent")
        if self.scale <= 0 or self.blstm_units <= 0 or self.blstm_layers <= 0:
            raise ValueError("scale, units and layers must be positive")
        if self.compress not in ("log1p", "none"):
            raise ValueError(f"unknown compression {self.compress!r}")

    def scaled_conv_stack(self):
        rows = []
        in_ch = self.conv_stack[0][0]
        for _, out_ch, kw, kh in self.conv_stack:
            out = _scaled(out_ch, self.scale)
            rows.append((in_ch, out, kw, kh))
            in_ch = out
        return rows

    @property
    def units(self) -> int:
        return _scaled(self.blstm_units, self.scale)


@dataclass
class DiscriminatorSpec:
    blstm_units: int = 256
    blstm_layers: int = 2
    branches: tuple = DEFAULT_DISC_BRANCHES
    freq_bins: int = 257
    fc_out: int = 1
    scale: Fraction = Fraction(1)
    compress: str = "none"

    def __post_init__(self):
        self.scale = _parse_scale(self.scale)
        self.branches = tuple(tuple(int(v) for v in row) for row in self.branches)
        if not self.branches:
            raise ValueError("discriminator needs at least one conv branch")
        if self.fc_out != 1:
            raise ValueError("discriminator output must be a single scalar")
        if self.scale <= 0 or self.blstm_units <= 0 or self.blstm_layers <= 0:
            raise ValueError("scale, units and layers must be positive")

    @property
    def units(self) -> int:
        return _scaled(self.blstm_units, self.scale)

    def scaled_branches(self):
        return [(kw, kh, _scaled(c, self.scale)) for kw, kh, c in self.branches]


class Generator:
    """Maps a magnitude spectrogram ``[T, F]`` to a mask in ``[0, 1]``."""

    def __init__(self, spec: GeneratorSpec, seed=0, dtype=np.float32, prefix="gen"):
        self.spec = spec
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        F = spec.freq_bins
        front = [Log1p()] if spec.compress == "log1p" else []
        front.append(AddChannel())
        self.convs = []
        for i, (cin, cout, kw, kh) in enumerate(spec.scaled_conv_stack()):
            conv = Conv2D(self.store, f"{prefix}/conv{i}", cin, cout, kh, kw, rng)
            self.convs.append(conv)
            front += [conv, Activation("relu")]
        front.append(FrameFlatten())
        self.front = Sequential(front)
        U = spec.units
        dim = spec.scaled_conv_stack()[-1][1] * F
        self.blstms = []
        for i in range(spec.blstm_layers):
            self.blstms.append(BLSTM(self.store, f"{prefix}/blstm{i}", dim, U, rng))
            dim = 2 * U
        self.fc = Dense(self.store, f"{prefix}/fc", dim, spec.fc_out, rng)
        self.head = Sequential([self.fc, Activation("sigmoid")])

    def _check(self, magY):
        magY = np.asarray(magY)
        if magY.ndim != 2 or magY.shape[1] != self.spec.freq_bins:
            raise ValueError(f"bin mismatch: generator expects {self.spec.freq_bins} bins, got {magY.shape}")
        if magY.shape[0] < 1:
            raise ValueError("need at least one frame")
        return magY

    def forward(self, magY, state=None):
        """Mask for ``magY``. ``state`` optionally seeds the forward direction
        of each BLSTM layer (see :meth:`final_state`)."""
        x = self.front.forward(self._check(magY))
        for i, layer in enumerate(self.blstms):
            x = layer.forward(x, None if state is None else state[i])
        return self.head.forward(x)

    __call__ = forward

    def final_state(self):
        return [layer.final_state for layer in self.blstms]

    def backward(self, grad_mask):
        g = self.head.backward(grad_mask)
        for layer in reversed(self.blstms):
            g = layer.backward(g)
        return self.front.backward(g)

    @property
    def n_param_layers(self):
        return {"conv2d": len(self.convs), "blstm": len(self.blstms), "fc": 1}


class Discriminator:
    """Maps a magnitude spectrogram ``[T, F]`` to one raw score."""

    def __init__(self, spec: DiscriminatorSpec, seed=1, dtype=np.float32, prefix="disc"):
        self.spec = spec
        self.store = ParamStore(dtype)
        rng = np.random.default_rng(seed)
        layers = [Log1p()] if spec.compress == "log1p" else []
        dim, U = spec.freq_bins, spec.units
        self.blstms = []
        for i in range(spec.blstm_layers):
            b = BLSTM(self.store, f"{prefix}/blstm{i}", dim, U, rng)
            self.blstms.append(b)
            layers.append(b)
            dim = 2 * U
        layers.append(AddChannel())
        branches = []
        width = 0
        self.convs = []
        for j, (kw, kh, c) in enumerate(spec.scaled_branches()):
            conv = Conv2D(self.store, f"{prefix}/branch{j}", 1, c, kh, kw, rng)
            self.convs.append(conv)
            branches.append(Sequential([conv, Activation("relu"), GlobalMaxPool()]))
            width += c
        layers.append(Concat(branches))
        self.fc = Dense(self.store, f"{prefix}/fc", width, 1, rng)
        layers.append(self.fc)
        self.net = Sequential(layers)
        self.calls = 0

    def forward(self, mag) -> float:
        mag = np.asarray(mag)
        if mag.ndim != 2 or mag.shape[1] != self.spec.freq_bins:
            raise ValueError(f"bin mismatch: discriminator expects {self.spec.freq_bins} bins, got {mag.shape}")
        self.calls += 1
        return float(self.net.forward(mag)[0])

    __call__ = forward

    def backward(self, grad_out: float):
        return self.net.backward(np.array([grad_out], dtype=self.store.dtype))


def build_generator(spec: GeneratorSpec, seed=0, dtype=np.float32) -> Generator:
    return Generator(spec, seed, dtype)


def build_discriminator(spec: DiscriminatorSpec, seed=1, dtype=np.float32) -> Discriminator:
    return Discriminator(spec, seed, dtype)


def generator_forward(net: Generator, magY) -> np.ndarray:
    return net.forward(magY)


# --- config files ----------------------------------------------------------------


@dataclass
class ModelConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)

    @classmethod
    def at_scale(cls, scale, freq_bins=257):
        s = _parse_scale(scale)
        return cls(GeneratorSpec(scale=s, freq_bins=freq_bins, fc_out=freq_bins),
                   DiscriminatorSpec(scale=s, freq_bins=freq_bins))

    def dumps(self) -> str:
        g, d = self.generator, self.discriminator
        lines = [
            f"gen.scale = {g.scale}",
            f"gen.freq_bins = {g.freq_bins}",
            f"gen.blstm_units = {g.blstm_units}",
            f"gen.blstm_layers = {g.blstm_layers}",
            f"gen.compress = {g.compress}",
        ]
        lines += [f"gen.conv = {','.join(map(str, row))}" for row in g.conv_stack]
        lines += [
            f"disc.scale = {d.scale}",
            f"disc.freq_bins = {d.freq_bins}",
            f"disc.blstm_units = {d.blstm_units}",
            f"disc.blstm_layers = {d.blstm_layers}",
            f"disc.compress = {d.compress}",
        ]
        lines += [f"disc.branch = {','.join(map(str, row))}" for row in d.branches]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ModelConfig":
        g: dict = {"conv_stack": []}
        d: dict = {"branches": []}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"model config line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            net, _, name = key.partition(".")
            target = {"gen": g, "disc": d}.get(net)
            if target is None:
                raise ValueError(f"model config line {lineno}: unknown key {key!r}")
            if name == "conv":
                g["conv_stack"].append(tuple(int(v) for v in value.split(",")))
            elif name == "branch":
                d["branches"].append(tuple(int(v) for v in value.split(",")))
            elif name == "scale":
                target["scale"] = Fraction(value)
            elif name == "compress":
                target["compress"] = value
            elif name in ("freq_bins", "blstm_units", "blstm_layers"):
                target[name] = int(value)
            else:
                raise ValueError(f"model config line {lineno}: unknown key {key!r}")
        if not g["conv_stack"]:
            del g["conv_stack"]
        if not d["branches"]:
            del d["branches"]
        if "freq_bins" in g:
            g["fc_out"] = g["freq_bins"]
        return cls(GeneratorSpec(**g), DiscriminatorSpec(**d))

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.loads(Path(path).read_text())


def with_scale(spec, scale):
    return replace(spec, scale=_parse_scale(scale))
