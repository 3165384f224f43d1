"""Target autoencoder, alarm classifier, activation taps, and scoring.

The *target* network is a convolutional autoencoder: 2-D convs for images,
or a soft-ordering stage (linear + ELU, split into k channel rows) followed
by 1-D convs for tabular data.  The output of every encoder conv activation
is *tapped*; taps are adaptively average-pooled to the smallest tap spatial
shape, concatenated channel-wise, and fed to the *alarm* network, a small
CNN ending in a single sigmoid unit whose output is the anomaly score.

All hidden activations are ELU.  Image decoders end in a sigmoid (inputs
live in [0, 1]); tabular decoders end in an identity linear map (inputs are
standardized).  Parameters are initialized uniformly in ±1/sqrt(fan_in)
from a caller-supplied seeded generator, so builds are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .convops import (
    adaptive_avg_pool,
    concat_channels,
    conv1d,
    conv2d,
    conv_transpose1d,
    conv_transpose2d,
)
from .tensor import ShapeError, Tensor

__all__ = [
    "BuildError",
    "ImageInput",
    "TabularInput",
    "TargetConfig",
    "AlarmConfig",
    "ActivationBundle",
    "ModelBundle",
    "TargetNetwork",
    "AlarmNetwork",
    "build_target_image",
    "build_target_tabular",
    "build_model",
    "forward_with_taps",
    "stack_activations",
    "alarm_forward",
    "score",
    "SCORE_MODES",
]

SCORE_MODES = ("alarm", "recon", "combined")


class BuildError(ValueError):
    """A network configuration cannot be realized."""


@dataclass(frozen=True)
class ImageInput:
    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class TabularInput:
    dim: int


@dataclass(frozen=True)
class TargetConfig:
    """Architecture of the target autoencoder.

    ``soft_ordering_width``/``soft_ordering_k`` only apply to tabular
    inputs; ``tap_decoder`` additionally taps decoder conv activations.
    """

    input_kind: ImageInput | TabularInput
    encoder_channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    stride: int = 2
    latent_dim: int = 32
    soft_ordering_width: int = 64
    soft_ordering_k: int = 4
    variational: bool = False
    tap_decoder: bool = False

    def __post_init__(self):
        if not self.encoder_channels:
            raise BuildError("encoder_channels must be non-empty")
        if any(c < 1 for c in self.encoder_channels):
            raise BuildError(f"encoder_channels must be positive, got "
                             f"{self.encoder_channels}")
        if self.latent_dim < 1:
            raise BuildError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.kernel_size < 1 or self.stride < 1:
            raise BuildError("kernel_size and stride must be >= 1")
        if isinstance(self.input_kind, TabularInput):
            if self.soft_ordering_width % self.soft_ordering_k != 0:
                raise BuildError(
                    f"soft_ordering_k={self.soft_ordering_k} does not divide "
                    f"soft_ordering_width={self.soft_ordering_width}")

    @staticmethod
    def for_image(channels: int, height: int, width: int, **overrides) -> "TargetConfig":
        return TargetConfig(input_kind=ImageInput(channels, height, width),
                            **overrides)

    @staticmethod
    def for_tabular(dim: int, **overrides) -> "TargetConfig":
        defaults = dict(encoder_channels=(8, 16), latent_dim=8)
        defaults.update(overrides)
        return TargetConfig(input_kind=TabularInput(dim), **defaults)

    def to_dict(self) -> dict:
        kind = self.input_kind
        if isinstance(kind, ImageInput):
            ik = {"kind": "image", "channels": kind.channels,
                  "height": kind.height, "width": kind.width}
        else:
            ik = {"kind": "tabular", "dim": kind.dim}
        return {"input_kind": ik,
                "encoder_channels": list(self.encoder_channels),
                "kernel_size": self.kernel_size, "stride": self.stride,
                "latent_dim": self.latent_dim,
                "soft_ordering_width": self.soft_ordering_width,
                "soft_ordering_k": self.soft_ordering_k,
                "variational": self.variational,
                "tap_decoder": self.tap_decoder}

    @staticmethod
    def from_dict(d: dict) -> "TargetConfig":
        ik = d["input_kind"]
        if ik["kind"] == "image":
            kind = ImageInput(ik["channels"], ik["height"], ik["width"])
        elif ik["kind"] == "tabular":
            kind = TabularInput(ik["dim"])
        else:
            raise BuildError(f"unknown input kind {ik['kind']!r}")
        rest = {k: v for k, v in d.items() if k != "input_kind"}
        rest["encoder_channels"] = tuple(rest.get("encoder_channels", (16, 32)))
        return TargetConfig(input_kind=kind, **rest)


@dataclass(frozen=True)
class AlarmConfig:
    """Architecture of the alarm classifier (final layer is one sigmoid unit)."""

    conv_channels: tuple[int, ...] = (32, 16)
    kernel_size: int = 3
    hidden_dense: tuple[int, ...] = (64,)

    def __post_init__(self):
        widths = tuple(self.conv_channels) + tuple(self.hidden_dense)
        if any(w < 1 for w in widths):
            raise BuildError(f"alarm widths must be positive, got {widths}")
        if self.kernel_size < 1:
            raise BuildError("alarm kernel_size must be >= 1")

    def to_dict(self) -> dict:
        return {"conv_channels": list(self.conv_channels),
                "kernel_size": self.kernel_size,
                "hidden_dense": list(self.hidden_dense)}

    @staticmethod
    def from_dict(d: dict) -> "AlarmConfig":
        return AlarmConfig(conv_channels=tuple(d["conv_channels"]),
                           kernel_size=d["kernel_size"],
                           hidden_dense=tuple(d["hidden_dense"]))


# ---------------------------------------------------------------------------
# layers


def _uniform(rng, bound, shape):
    return Tensor(rng.uniform(-bound, bound, shape).astype(np.float32),
                  requires_grad=True)


class _Conv:
    def __init__(self, rank, c_in, c_out, kernel, stride, padding, rng):
        bound = 1.0 / math.sqrt(c_in * kernel ** rank)
        self.w = _uniform(rng, bound, (c_out, c_in) + (kernel,) * rank)
        self.b = _uniform(rng, bound, (c_out,))
        self.rank, self.stride, self.padding = rank, stride, padding

    def __call__(self, x):
        op = conv2d if self.rank == 2 else conv1d
        return op(x, self.w, self.b, stride=self.stride, padding=self.padding)


class _ConvTranspose:
    def __init__(self, rank, c_in, c_out, kernel, stride, output_padding, rng):
        bound = 1.0 / math.sqrt(c_out * kernel ** rank)
        self.w = _uniform(rng, bound, (c_in, c_out) + (kernel,) * rank)
        self.b = _uniform(rng, bound, (c_out,))
        self.rank, self.stride = rank, stride
        if isinstance(output_padding, (tuple, list)):
            output_padding = (tuple(int(p) for p in output_padding)
                              if rank == 2 else int(output_padding[0]))
        self.output_padding = output_padding

    def __call__(self, x):
        if self.rank == 2:
            return conv_transpose2d(x, self.w, self.b, stride=self.stride,
                                    output_padding=self.output_padding)
        return conv_transpose1d(x, self.w, self.b, stride=self.stride,
                                output_padding=self.output_padding)


class _Dense:
    def __init__(self, d_in, d_out, rng):
        bound = 1.0 / math.sqrt(d_in)
        self.w = _uniform(rng, bound, (d_in, d_out))
        self.b = _uniform(rng, bound, (d_out,))

    def __call__(self, x):
        return T.linear(x, self.w, self.b)


def _collect(params: dict, prefix: str, layer):
    params[f"{prefix}.w"] = layer.w
    params[f"{prefix}.b"] = layer.b


# ---------------------------------------------------------------------------
# target network


class TargetNetwork:
    """Convolutional autoencoder with tapped encoder activations."""

    def __init__(self, cfg: TargetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.kind = "image" if isinstance(cfg.input_kind, ImageInput) else "tabular"
        self._params: dict[str, Tensor] = {}
        if self.kind == "image":
            self._build_image(cfg, rng)
        else:
            self._build_tabular(cfg, rng)

    # -- construction

    def _encoder_shapes(self, spatial: tuple[int, ...], cfg) -> list[tuple[int, ...]]:
        """Spatial shape after each encoder conv; raises on collapse."""
        k, s = cfg.kernel_size, cfg.stride
        shapes = [spatial]
        for i in range(len(cfg.encoder_channels)):
            cur = shapes[-1]
            if any(dim < k for dim in cur):
                raise BuildError(
                    f"encoder conv {i}: spatial shape {cur} is smaller than "
                    f"kernel {k}; reduce depth, kernel, or stride")
            shapes.append(tuple((dim - k) // s + 1 for dim in cur))
        return shapes

    def _decoder_output_paddings(self, shapes) -> list[tuple[int, ...]]:
        """Per-layer output padding so the decoder retraces encoder shapes."""
        k, s = self.cfg.kernel_size, self.cfg.stride
        pads = []
        for cur, target in zip(shapes[:0:-1], shapes[-2::-1]):
            pads.append(tuple(t - ((c - 1) * s + k) for c, t in zip(cur, target)))
        return pads

    def _build_image(self, cfg, rng):
        kind = cfg.input_kind
        spatial_in = (kind.height, kind.width)
        shapes = self._encoder_shapes(spatial_in, cfg)
        chans = (kind.channels,) + tuple(cfg.encoder_channels)

        self.enc_convs = []
        for i in range(len(cfg.encoder_channels)):
            layer = _Conv(2, chans[i], chans[i + 1], cfg.kernel_size,
                          cfg.stride, 0, rng)
            self.enc_convs.append(layer)
            _collect(self._params, f"enc_conv{i}", layer)

        self.bottleneck_shape = (chans[-1],) + shapes[-1]
        flat = int(np.prod(self.bottleneck_shape))
        latent_out = 2 * cfg.latent_dim if cfg.variational else cfg.latent_dim
        self.to_latent = _Dense(flat, latent_out, rng)
        _collect(self._params, "to_latent", self.to_latent)
        self.from_latent = _Dense(cfg.latent_dim, flat, rng)
        _collect(self._params, "from_latent", self.from_latent)

        out_pads = self._decoder_output_paddings(shapes)
        self.dec_convs = []
        rev = chans[::-1]
        for i in range(len(cfg.encoder_channels)):
            layer = _ConvTranspose(2, rev[i], rev[i + 1], cfg.kernel_size,
                                   cfg.stride, out_pads[i], rng)
            self.dec_convs.append(layer)
            _collect(self._params, f"dec_conv{i}", layer)

        self.input_shape = (kind.channels, kind.height, kind.width)
        self._set_taps(shapes, chans)

    def _build_tabular(self, cfg, rng):
        dim = cfg.input_kind.dim
        k_parts = cfg.soft_ordering_k
        seq = cfg.soft_ordering_width // k_parts

        self.soft_order = _Dense(dim, cfg.soft_ordering_width, rng)
        _collect(self._params, "soft_order", self.soft_order)

        shapes = self._encoder_shapes((seq,), cfg)
        chans = (k_parts,) + tuple(cfg.encoder_channels)
        self.enc_convs = []
        for i in range(len(cfg.encoder_channels)):
            layer = _Conv(1, chans[i], chans[i + 1], cfg.kernel_size,
                          cfg.stride, 0, rng)
            self.enc_convs.append(layer)
            _collect(self._params, f"enc_conv{i}", layer)

        self.bottleneck_shape = (chans[-1],) + shapes[-1]
        flat = int(np.prod(self.bottleneck_shape))
        latent_out = 2 * cfg.latent_dim if cfg.variational else cfg.latent_dim
        self.to_latent = _Dense(flat, latent_out, rng)
        _collect(self._params, "to_latent", self.to_latent)
        self.from_latent = _Dense(cfg.latent_dim, flat, rng)
        _collect(self._params, "from_latent", self.from_latent)

        out_pads = self._decoder_output_paddings(shapes)
        self.dec_convs = []
        rev = chans[::-1]
        for i in range(len(cfg.encoder_channels)):
            layer = _ConvTranspose(1, rev[i], rev[i + 1], cfg.kernel_size,
                                   cfg.stride, out_pads[i], rng)
            self.dec_convs.append(layer)
            _collect(self._params, f"dec_conv{i}", layer)

        self.unsoft = _Dense(cfg.soft_ordering_width, dim, rng)
        _collect(self._params, "unsoft", self.unsoft)

        self.input_shape = (dim,)
        self._set_taps(shapes, chans)

    def _set_taps(self, shapes, chans):
        self.tap_ids = [f"enc_conv{i}" for i in range(len(self.enc_convs))]
        self.tap_shapes = [(chans[i + 1],) + shapes[i + 1]
                           for i in range(len(self.enc_convs))]
        if self.cfg.tap_decoder:
            # decoder taps mirror the encoder shapes back up, skipping the
            # output layer itself
            rev_chan = chans[::-1]
            rev_shape = shapes[::-1]
            for i in range(len(self.dec_convs) - 1):
                self.tap_ids.append(f"dec_conv{i}")
                self.tap_shapes.append((rev_chan[i + 1],) + rev_shape[i + 1])

    # -- forward

    def forward(self, x: Tensor, rng: np.random.Generator | None = None):
        """Run the autoencoder; returns (reconstruction, taps, kl).

        ``taps`` is an ordered list of (layer id, activation) captured after
        each tapped layer's activation function.  ``kl`` is the latent
        divergence penalty in variational mode, else None.
        """
        taps = []
        h = x
        if self.kind == "tabular":
            h = T.elu(self.soft_order(h))
            h = T.reshape_split_stack(h, self.cfg.soft_ordering_k)
        for i, layer in enumerate(self.enc_convs):
            h = T.elu(layer(h))
            taps.append((f"enc_conv{i}", h))

        n = x.shape[0]
        stats = self.to_latent(T.flatten(h))
        kl = None
        if self.cfg.variational:
            ld = self.cfg.latent_dim
            mu = T.slice_cols(stats, 0, ld)
            logvar = T.slice_cols(stats, ld, 2 * ld)
            if rng is not None:
                eps = Tensor(rng.standard_normal((n, ld)).astype(np.float32))
                z = T.add(mu, T.mul(T.exp(T.mul(logvar, 0.5)), eps))
            else:
                z = mu
            term = T.sub(T.sub(T.add(logvar, 1.0), T.mul(mu, mu)), T.exp(logvar))
            kl = T.mul(T.mean_all(T.sum_axes(term, 1)), -0.5)
        else:
            z = stats

        h = T.elu(self.from_latent(z))
        h = T.reshape(h, (n,) + self.bottleneck_shape)
        last = len(self.dec_convs) - 1
        for i, layer in enumerate(self.dec_convs):
            h = layer(h)
            if i < last:
                h = T.elu(h)
                if self.cfg.tap_decoder:
                    taps.append((f"dec_conv{i}", h))
            elif self.kind == "image":
                h = T.sigmoid(h)
        if self.kind == "tabular":
            h = T.elu(h)
            h = self.unsoft(T.flatten(h))
        return h, taps, kl

    def params(self) -> dict[str, Tensor]:
        return self._params


# ---------------------------------------------------------------------------
# alarm network


class AlarmNetwork:
    """CNN binary classifier over stacked activations; outputs in (0, 1)."""

    def __init__(self, cfg: AlarmConfig, input_shape: tuple[int, ...],
                 rng: np.random.Generator):
        self.cfg = cfg
        self.input_shape = tuple(input_shape)  # (C, *spatial), batch excluded
        rank = len(input_shape) - 1
        if rank not in (1, 2):
            raise BuildError(f"alarm input must have 1-D or 2-D spatial shape, "
                             f"got {input_shape}")
        self._params: dict[str, Tensor] = {}
        k = cfg.kernel_size
        pad = k // 2  # keeps small tap maps from collapsing
        self.convs = []
        chans = (input_shape[0],) + tuple(cfg.conv_channels)
        spatial = list(input_shape[1:])
        for i in range(len(cfg.conv_channels)):
            layer = _Conv(rank, chans[i], chans[i + 1], k, 1, pad, rng)
            self.convs.append(layer)
            _collect(self._params, f"conv{i}", layer)
            spatial = [(dim + 2 * pad - k) + 1 for dim in spatial]
            if any(dim < 1 for dim in spatial):
                raise BuildError(f"alarm conv {i} collapsed the spatial shape")

        widths = (int(np.prod([chans[-1]] + spatial)),) + tuple(cfg.hidden_dense)
        self.dense = []
        for i in range(len(cfg.hidden_dense)):
            layer = _Dense(widths[i], widths[i + 1], rng)
            self.dense.append(layer)
            _collect(self._params, f"dense{i}", layer)
        self.out = _Dense(widths[-1], 1, rng)
        _collect(self._params, "out", self.out)

    def forward(self, stacked: Tensor) -> Tensor:
        if stacked.shape[1:] != self.input_shape:
            raise ShapeError(
                f"alarm built for input {self.input_shape}, got "
                f"{stacked.shape[1:]}: tap layout drifted between build and call")
        h = stacked
        for layer in self.convs:
            h = T.elu(layer(h))
        h = T.flatten(h)
        for layer in self.dense:
            h = T.elu(layer(h))
        return T.sigmoid(self.out(h))

    def params(self) -> dict[str, Tensor]:
        return self._params


# ---------------------------------------------------------------------------
# bundle


@dataclass
class ActivationBundle:
    """Ordered (layer id, activation) pairs captured in one forward pass."""

    entries: list[tuple[str, Tensor]]

    def __post_init__(self):
        if self.entries:
            n = self.entries[0][1].shape[0]
            for name, t in self.entries:
                if t.shape[0] != n:
                    raise ShapeError(f"tap {name} batch size {t.shape[0]} != {n}")


@dataclass
class ModelBundle:
    """Target + alarm pair with a fixed tap registry and parameter registry."""

    target: TargetNetwork
    alarm: AlarmNetwork
    taps: list[str]
    params: dict[str, Tensor]
    target_cfg: TargetConfig
    alarm_cfg: AlarmConfig
    stacked_shape: tuple[int, ...]
    last_kl: Tensor | None = field(default=None, repr=False)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def forward_with_taps(self, x: Tensor,
                          rng: np.random.Generator | None = None):
        return forward_with_taps(self, x, rng=rng)


def _check_input(bundle: ModelBundle, x: Tensor):
    expect = bundle.target.input_shape
    if x.shape[1:] != expect:
        raise ShapeError(f"input shape {x.shape[1:]} does not match the "
                         f"model's expected {expect}")


def forward_with_taps(bundle: ModelBundle, x: Tensor,
                      rng: np.random.Generator | None = None):
    """Reconstruct ``x`` and capture tapped activations (in tap order)."""
    _check_input(bundle, x)
    xhat, taps, kl = bundle.target.forward(x, rng=rng)
    bundle.last_kl = kl
    return xhat, ActivationBundle(entries=taps)


def stack_activations(acts: ActivationBundle) -> Tensor:
    """Pool every tap to the smallest tap spatial shape and concatenate.

    The target spatial shape is the elementwise minimum over entries; the
    output channel count is the sum of entry channel counts, blocks in tap
    order.
    """
    if not acts.entries:
        raise ShapeError("cannot stack an empty activation bundle")
    ranks = {t.ndim for _, t in acts.entries}
    if len(ranks) != 1:
        raise ShapeError(f"taps mix spatial ranks {sorted(ranks)}; cannot stack")
    spatials = [t.shape[2:] for _, t in acts.entries]
    target = tuple(min(dims) for dims in zip(*spatials))
    pooled = [adaptive_avg_pool(t, target) if t.shape[2:] != target else t
              for _, t in acts.entries]
    return concat_channels(pooled)


def alarm_forward(alarm: AlarmNetwork, stacked: Tensor) -> Tensor:
    """Per-sample anomaly score in (0, 1); higher means more anomalous."""
    return alarm.forward(stacked)


def build_target_image(cfg: TargetConfig, rng: np.random.Generator) -> TargetNetwork:
    if not isinstance(cfg.input_kind, ImageInput):
        raise BuildError("build_target_image needs an image input_kind")
    return TargetNetwork(cfg, rng)


def build_target_tabular(cfg: TargetConfig, rng: np.random.Generator) -> TargetNetwork:
    if not isinstance(cfg.input_kind, TabularInput):
        raise BuildError("build_target_tabular needs a tabular input_kind")
    return TargetNetwork(cfg, rng)


def build_model(target_cfg: TargetConfig, alarm_cfg: AlarmConfig,
                seed: int) -> ModelBundle:
    """Construct target + alarm with a shared seeded initializer.

    The alarm's input shape is derived from the target's tap shapes: summed
    channels at the elementwise-minimum tap spatial shape.
    """
    rng = np.random.default_rng(seed)
    target = TargetNetwork(target_cfg, rng)
    spatials = [s[1:] for s in target.tap_shapes]
    stacked_shape = (sum(s[0] for s in target.tap_shapes),) + tuple(
        min(dims) for dims in zip(*spatials))
    alarm = AlarmNetwork(alarm_cfg, stacked_shape, rng)

    params: dict[str, Tensor] = {}
    for name, t in target.params().items():
        params[f"target.{name}"] = t
    for name, t in alarm.params().items():
        params[f"alarm.{name}"] = t
    return ModelBundle(target=target, alarm=alarm, taps=list(target.tap_ids),
                       params=params, target_cfg=target_cfg,
                       alarm_cfg=alarm_cfg, stacked_shape=stacked_shape)


def score(bundle: ModelBundle, x: Tensor, mode: str, lam: float = 1.0) -> Tensor:
    """Per-sample anomaly scores.

    ``alarm`` returns the alarm output; ``recon`` the per-sample mean squared
    reconstruction error; ``combined`` adds ``lam`` times the reconstruction
    error min-max normalized over this batch (a constant batch normalizes to
    zeros).  Runs without a tape, so no gradients flow.
    """
    if mode not in SCORE_MODES:
        raise ValueError(f"unknown score mode {mode!r}; expected one of {SCORE_MODES}")
    if mode == "combined" and lam < 0:
        raise ValueError(f"combined score weight must be >= 0, got {lam}")
    _check_input(bundle, x)
    xhat, acts = forward_with_taps(bundle, x)

    def recon_scores():
        diff = (x.data - xhat.data).astype(np.float32)
        return (diff * diff).reshape(x.shape[0], -1).mean(axis=1)

    if mode == "recon":
        return Tensor(recon_scores())
    alarm_out = alarm_forward(bundle.alarm, stack_activations(acts))
    alarm_scores = alarm_out.data.reshape(-1)
    if mode == "alarm":
        return Tensor(alarm_scores)
    rec = recon_scores()
    span = rec.max() - rec.min()
    normalized = (rec - rec.min()) / span if span > 0 else np.zeros_like(rec)
    return Tensor(alarm_scores + np.float32(lam) * normalized)
