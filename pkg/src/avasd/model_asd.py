"""Two-stream audiovisual speaker detection models.

Variants share the visual path (3D-conv front end into stacked BiGRUs) and
differ in the audio front end:

  m1: raw cepstral tile, flattened
  m2: flatten -> two ReLU dense layers
  m3: small conv net over the tile

Stream outputs are concatenated, passed through dropout and a fusion BiGRU,
and classified per step; each stream also feeds an auxiliary head. The
graphs are composed manually from tensor_core primitives; every layer
object caches what its backward pass needs, so a model instance is
exclusively owned while training.
"""

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor_core import (
    TRAIN_DTYPE,
    Parameter,
    Prng,
    glorot_uniform,
    he_uniform,
    ops,
)

VARIANTS = ("m1", "m2", "m3")

# (audio, visual) loss weights from the combined objective
DEFAULT_ALPHA = 0.4

PAPER_VISUAL_TABLE = (
    ("conv3d", 96, (5, 7, 7), (1, 2, 2), (0, 0, 0)),
    ("pool", (3, 3), (2, 2)),
    ("conv", 256, (5, 5), (2, 2), (1, 1)),
    ("pool", (3, 3), (2, 2)),
    ("conv", 512, (3, 3), (1, 1), (1, 1)),
    ("conv", 512, (3, 3), (1, 1), (1, 1)),
    ("conv", 512, (3, 3), (1, 1), (1, 1)),
    ("pool", (3, 3), (2, 2)),
)

PAPER_AUDIO_M3_TABLE = (
    ("conv", 64, (3, 3), (1, 1), (1, 1)),
    ("pool", (2, 2), (2, 2)),
    ("conv", 128, (3, 3), (1, 1), (1, 1)),
    ("pool", (2, 2), (2, 2)),
    ("conv", 256, (3, 3), (1, 1), (1, 1)),
)

# Desk-scale tables: identical structure, reduced widths, so the synthetic
# task trains in minutes on a laptop while every layer type stays on-path.
DESK_VISUAL_TABLE = (
    ("conv3d", 8, (5, 7, 7), (1, 2, 2), (0, 0, 0)),
    ("pool", (3, 3), (2, 2)),
    ("conv", 12, (5, 5), (2, 2), (1, 1)),
    ("pool", (3, 3), (2, 2)),
    ("conv", 16, (3, 3), (1, 1), (1, 1)),
    ("conv", 16, (3, 3), (1, 1), (1, 1)),
    ("conv", 16, (3, 3), (1, 1), (1, 1)),
    ("pool", (3, 3), (2, 2)),
)

DESK_AUDIO_M3_TABLE = (
    ("conv", 16, (3, 3), (1, 1), (1, 1)),
    ("pool", (2, 2), (2, 2)),
    ("conv", 24, (3, 3), (1, 1), (1, 1)),
    ("pool", (2, 2), (2, 2)),
    ("conv", 32, (3, 3), (1, 1), (1, 1)),
)

TINY_VISUAL_TABLE = (
    ("conv3d", 3, (5, 3, 3), (1, 1, 1), (0, 0, 0)),
    ("pool", (2, 2), (2, 2)),
    ("conv", 4, (3, 3), (1, 1), (1, 1)),
    ("pool", (3, 3), (2, 2)),
)

TINY_AUDIO_M3_TABLE = (
    ("conv", 2, (3, 3), (1, 1), (1, 1)),
    ("pool", (2, 2), (2, 2)),
    ("conv", 3, (3, 3), (1, 1), (1, 1)),
)


@dataclass
class ModelConfig:
    """Topology selector: variant, BiGRU depth, layer tables, loss weights."""

    variant: str = "m1"
    stream_bigru_layers: int = 2
    stream_hidden: int = 256
    fusion_hidden: int = 512
    seq_len: int = 10
    dropout_rate: float = 0.5
    alpha_a: float = DEFAULT_ALPHA
    alpha_v: float = DEFAULT_ALPHA
    l2_alpha: float = 1e-4
    frames_per_step: int = 5
    image_hw: int = 100
    audio_shape: tuple = (13, 20)
    visual_table: tuple = PAPER_VISUAL_TABLE
    visual_embed: int = 512
    audio_m2_hidden: int = 256
    audio_m3_table: tuple = PAPER_AUDIO_M3_TABLE
    audio_m3_embed: int = 512
    scale: str = "paper"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.stream_bigru_layers not in (1, 2):
            raise ConfigError(f"stream_bigru_layers must be 1 or 2, got {self.stream_bigru_layers}")
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be >= 1, got {self.seq_len}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        def tuplify(v):
            return tuple(tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v

        return cls(**{k: tuplify(v) for k, v in d.items()})

    @classmethod
    def paper(cls, variant="m1", stream_bigru_layers=2, **kw) -> "ModelConfig":
        kw.setdefault("scale", "paper")
        return cls(variant=variant, stream_bigru_layers=stream_bigru_layers, **kw)

    @classmethod
    def desk(cls, variant="m1", stream_bigru_layers=2, **kw) -> "ModelConfig":
        defaults = dict(stream_hidden=96, fusion_hidden=192,
                        visual_table=DESK_VISUAL_TABLE, visual_embed=64,
                        audio_m2_hidden=64, audio_m3_table=DESK_AUDIO_M3_TABLE, audio_m3_embed=64,
                        scale="desk")
        for key, value in defaults.items():
            kw.setdefault(key, value)
        return cls(variant=variant, stream_bigru_layers=stream_bigru_layers, **kw)

    @classmethod
    def tiny(cls, variant="m1", stream_bigru_layers=2, **kw) -> "ModelConfig":
        defaults = dict(seq_len=2, image_hw=8, audio_shape=(4, 5),
                        stream_hidden=4, fusion_hidden=5,
                        visual_table=TINY_VISUAL_TABLE, visual_embed=6,
                        audio_m2_hidden=6, audio_m3_table=TINY_AUDIO_M3_TABLE, audio_m3_embed=6,
                        scale="tiny")
        for key, value in defaults.items():
            kw.setdefault(key, value)
        return cls(variant=variant, stream_bigru_layers=stream_bigru_layers, **kw)


def config_by_scale(scale: str, variant: str, stream_bigru_layers: int, **kw) -> ModelConfig:
    try:
        maker = {"paper": ModelConfig.paper, "desk": ModelConfig.desk, "tiny": ModelConfig.tiny}[scale]
    except KeyError:
        raise ConfigError(f"unknown scale {scale!r}; expected paper|desk|tiny") from None
    return maker(variant=variant, stream_bigru_layers=stream_bigru_layers, **kw)


# ---------------------------------------------------------------------------
# Layer wrappers around the functional primitives
# ---------------------------------------------------------------------------

class _Registry:
    """Accumulates named parameters and buffers during model construction."""

    def __init__(self, dtype):
        self.dtype = dtype
        self.params = []
        self.buffers = {}

    def parameter(self, name, value):
        for p in self.params:
            if p.name == name:
                raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, np.asarray(value, dtype=self.dtype))
        self.params.append(p)
        return p

    def buffer(self, name, value):
        if name in self.buffers:
            raise ConfigError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(value, dtype=self.dtype)
        return self.buffers[name]


class Conv2dLayer:
    def __init__(self, reg, name, cin, cout, kernel, stride, pad, prng, needs_input_grad=True):
        kh, kw = kernel
        self.stride, self.pad = stride, pad
        self.needs_input_grad = needs_input_grad
        self.kernel = reg.parameter(f"{name}.kernel",
                                    he_uniform((kh, kw, cin, cout), kh * kw * cin, prng))
        self.bias = reg.parameter(f"{name}.bias", np.zeros(cout))
        self.cache = None

    def forward(self, x, ctx):
        out, self.cache = ops.conv2d_forward(x, self.kernel.value, self.bias.value,
                                             self.stride, self.pad, keep_cols=True)
        return out

    def backward(self, dout):
        dx, dk, db = ops.conv2d_backward(self.cache, dout, need_dx=self.needs_input_grad)
        self.kernel.grad += dk
        self.bias.grad += db
        self.cache = None
        return dx


class Conv3dLayer:
    """Temporal front conv; collapses the time axis (kt == clip length).

    When the kernel spans the whole clip with no temporal padding (the only
    configuration the models use) the op is computed as a channels-last 2D
    convolution over T*Cin input channels, which gathers patch columns with
    far better memory locality than the general 3D path.
    """

    def __init__(self, reg, name, cin, cout, kernel, stride, pad, prng, needs_input_grad=True):
        kt, kh, kw = kernel
        self.kt = kt
        self.cin = cin
        self.stride, self.pad = stride, pad
        self.needs_input_grad = needs_input_grad
        self.kernel = reg.parameter(f"{name}.kernel",
                                    he_uniform((kt, kh, kw, cin, cout), kt * kh * kw * cin, prng))
        self.bias = reg.parameter(f"{name}.bias", np.zeros(cout))
        self.cache = None
        self.flat_time = None

    def _kernel_2d(self):
        kt, kh, kw, cin, cout = self.kernel.value.shape
        return np.ascontiguousarray(
            self.kernel.value.transpose(1, 2, 0, 3, 4)).reshape(kh, kw, kt * cin, cout)

    def forward(self, x, ctx):
        n, t, h, w, cin = x.shape
        self.flat_time = (t == self.kt and self.pad[0] == 0)
        if self.flat_time:
            x2d = np.ascontiguousarray(x.transpose(0, 2, 3, 1, 4)).reshape(n, h, w, t * cin)
            out, self.cache = ops.conv2d_forward(x2d, self._kernel_2d(), self.bias.value,
                                                 self.stride[1:], self.pad[1:], keep_cols=True)
            return out
        out, self.cache = ops.conv3d_forward(x, self.kernel.value, self.bias.value, self.stride, self.pad)
        if out.shape[1] != 1:
            raise ShapeError(f"temporal conv must collapse time: got T'={out.shape[1]}")
        return out[:, 0]

    def backward(self, dout):
        kt, kh, kw, cin, cout = self.kernel.value.shape
        if self.flat_time:
            dx2d, dk2d, db = ops.conv2d_backward(self.cache, dout, need_dx=self.needs_input_grad)
            dk = dk2d.reshape(kh, kw, kt, cin, cout).transpose(2, 0, 1, 3, 4)
            dx = None
            if dx2d is not None:
                n, h, w, _ = dx2d.shape
                dx = dx2d.reshape(n, h, w, kt, cin).transpose(0, 3, 1, 2, 4)
        else:
            dx, dk, db = ops.conv3d_backward(self.cache, dout[:, None])
        self.kernel.grad += dk
        self.bias.grad += db
        self.cache = None
        return dx


class BatchNormLayer:
    """Channel-wise batchnorm over the trailing feature axis."""

    def __init__(self, reg, name, features):
        self.gamma = reg.parameter(f"{name}.gamma", np.ones(features))
        self.beta = reg.parameter(f"{name}.beta", np.zeros(features))
        self.running_mean = reg.buffer(f"{name}.running_mean", np.zeros(features))
        self.running_var = reg.buffer(f"{name}.running_var", np.ones(features))
        self.cache = None
        self.shape = None

    def forward(self, x, ctx):
        self.shape = x.shape
        flat = x.reshape(-1, x.shape[-1])
        out, self.cache = ops.batchnorm_forward(flat, self.gamma.value, self.beta.value,
                                                self.running_mean, self.running_var, ctx)
        return out.reshape(self.shape)

    def backward(self, dout):
        dx, dg, db = ops.batchnorm_backward(self.cache, dout.reshape(-1, dout.shape[-1]))
        self.gamma.grad += dg
        self.beta.grad += db
        return dx.reshape(self.shape)


class ReluLayer:
    def __init__(self):
        self.mask = None

    def forward(self, x, ctx):
        out, self.mask = ops.relu_forward(x)
        return out

    def backward(self, dout):
        return ops.relu_backward(self.mask, dout)


class MaxPoolLayer:
    def __init__(self, window, stride):
        self.window, self.stride = window, stride
        self.cache = None

    def forward(self, x, ctx):
        out, self.cache = ops.maxpool2d_forward(x, self.window, self.stride)
        return out

    def backward(self, dout):
        return ops.maxpool2d_backward(self.cache, dout)


class FlattenLayer:
    def __init__(self):
        self.shape = None

    def forward(self, x, ctx):
        self.shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self.shape)


class DenseLayer:
    def __init__(self, reg, name, fin, fout, prng, init_scale=1.0):
        # classifier heads pass init_scale < 1: they feed softmax, not ReLU,
        # so He gain would start them far from chance-level predictions
        self.weight = reg.parameter(f"{name}.weight", init_scale * he_uniform((fin, fout), fin, prng))
        self.bias = reg.parameter(f"{name}.bias", np.zeros(fout))
        self.cache = None

    def forward(self, x, ctx):
        out, self.cache = ops.dense_forward(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = ops.dense_backward(self.cache, dout)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class BiGruLayer:
    def __init__(self, reg, name, input_size, hidden, prng):
        self.hidden = hidden

        def direction(tag):
            return (
                reg.parameter(f"{name}.{tag}.wx", glorot_uniform((input_size, 3 * hidden), input_size, hidden, prng)),
                reg.parameter(f"{name}.{tag}.uzr", glorot_uniform((hidden, 2 * hidden), hidden, hidden, prng)),
                reg.parameter(f"{name}.{tag}.uc", glorot_uniform((hidden, hidden), hidden, hidden, prng)),
                reg.parameter(f"{name}.{tag}.b", np.zeros(3 * hidden)),
            )

        self.fwd = direction("fwd")
        self.bwd = direction("bwd")
        self.cache = None

    def _values(self, direction):
        return tuple(p.value for p in direction)

    def forward(self, x, ctx):
        out, self.cache = ops.bigru_forward(x, self._values(self.fwd), self._values(self.bwd))
        return out

    def backward(self, dout):
        dx, grads_f, grads_b = ops.bigru_backward(self.cache, self._values(self.fwd),
                                                  self._values(self.bwd), dout)
        for p, g in zip(self.fwd, grads_f):
            p.grad += g
        for p, g in zip(self.bwd, grads_b):
            p.grad += g
        return dx


class DropoutLayer:
    def __init__(self, rate):
        self.rate = rate
        self.keep = None

    def forward(self, x, ctx, prng=None):
        out, self.keep = ops.dropout_forward(x, self.rate, ctx, prng)
        return out

    def backward(self, dout):
        return ops.dropout_backward(self.keep, dout)


class Sequential:
    def __init__(self, layers):
        self.layers = layers

    def forward(self, x, ctx):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def _build_conv_stack(reg, prefix, table, in_shape, prng, leaf_input=False):
    """Conv/pool stack from a table; every conv is followed by BN + ReLU.

    in_shape is (H, W, Cin) spatial geometry; returns (Sequential, flat
    feature count). With leaf_input the first conv skips its input gradient
    (nothing upstream consumes it).
    """
    h, w, c = in_shape
    layers = []
    first_conv = leaf_input
    for i, stage in enumerate(table):
        kind = stage[0]
        if kind == "conv3d":
            _, cout, kernel, stride, pad = stage
            layers.append(Conv3dLayer(reg, f"{prefix}.stage{i}", c, cout, kernel, stride, pad, prng,
                                      needs_input_grad=not first_conv))
            first_conv = False
            h = (h + 2 * pad[1] - kernel[1]) // stride[1] + 1
            w = (w + 2 * pad[2] - kernel[2]) // stride[2] + 1
            c = cout
            layers.append(BatchNormLayer(reg, f"{prefix}.stage{i}.bn", c))
            layers.append(ReluLayer())
        elif kind == "conv":
            _, cout, kernel, stride, pad = stage
            layers.append(Conv2dLayer(reg, f"{prefix}.stage{i}", c, cout, kernel, stride, pad, prng,
                                      needs_input_grad=not first_conv))
            first_conv = False
            h = (h + 2 * pad[0] - kernel[0]) // stride[0] + 1
            w = (w + 2 * pad[1] - kernel[1]) // stride[1] + 1
            c = cout
            layers.append(BatchNormLayer(reg, f"{prefix}.stage{i}.bn", c))
            layers.append(ReluLayer())
        elif kind == "pool":
            _, window, stride = stage
            layers.append(MaxPoolLayer(window, stride))
            h = (h - window[0]) // stride[0] + 1
            w = (w - window[1]) // stride[1] + 1
        else:
            raise ConfigError(f"unknown stage kind {kind!r} in layer table")
        if h < 1 or w < 1:
            raise ConfigError(f"layer table collapses the feature map at stage {i} ({h}x{w})")
    return Sequential(layers), h * w * c


class StackedBiGru:
    """One or two BiGRU layers; layer 2 consumes layer 1's [T,2H] output."""

    def __init__(self, reg, name, input_size, hidden, layers, prng):
        self.rnns = []
        fin = input_size
        for i in range(layers):
            self.rnns.append(BiGruLayer(reg, f"{name}.rnn{i}", fin, hidden, prng))
            fin = 2 * hidden
        self.out_width = fin

    def forward(self, x, ctx):
        for rnn in self.rnns:
            x = rnn.forward(x, ctx)
        return x

    def backward(self, dout):
        for rnn in reversed(self.rnns):
            dout = rnn.backward(dout)
        return dout


class AsdModel:
    """Full parameter set and manual forward/backward for one variant."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=TRAIN_DTYPE):
        self.config = config
        self.dtype = dtype
        reg = _Registry(dtype)
        prng = Prng(seed).child(101)
        hw = config.image_hw

        self.visual_stack, visual_flat = _build_conv_stack(
            reg, "visual", config.visual_table, (hw, hw, 1), prng, leaf_input=True)
        self.visual_embed = Sequential([
            DenseLayer(reg, "visual.embed", visual_flat, config.visual_embed, prng),
            BatchNormLayer(reg, "visual.embed.bn", config.visual_embed),
            ReluLayer(),
        ])

        nc, tf = config.audio_shape
        if config.variant == "m1":
            self.audio_front = None
            audio_feat = nc * tf
        elif config.variant == "m2":
            h = config.audio_m2_hidden
            self.audio_front = Sequential([
                FlattenLayer(),
                DenseLayer(reg, "audio.fc1", nc * tf, h, prng),
                ReluLayer(),
                DenseLayer(reg, "audio.fc2", h, h, prng),
                ReluLayer(),
            ])
            audio_feat = h
        else:  # m3
            stack, flat = _build_conv_stack(reg, "audio", config.audio_m3_table, (nc, tf, 1), prng,
                                            leaf_input=True)
            self.audio_front = Sequential(stack.layers + [
                FlattenLayer(),
                DenseLayer(reg, "audio.embed", flat, config.audio_m3_embed, prng),
                BatchNormLayer(reg, "audio.embed.bn", config.audio_m3_embed),
                ReluLayer(),
            ])
            audio_feat = config.audio_m3_embed
        self.audio_feat = audio_feat

        self.visual_rnn = StackedBiGru(reg, "visual", config.visual_embed,
                                       config.stream_hidden, config.stream_bigru_layers, prng)
        self.audio_rnn = StackedBiGru(reg, "audio", audio_feat,
                                      config.stream_hidden, config.stream_bigru_layers, prng)
        stream_width = 2 * config.stream_hidden

        self.fusion_dropout = DropoutLayer(config.dropout_rate)
        self.fusion_rnn = BiGruLayer(reg, "fusion.rnn", 2 * stream_width, config.fusion_hidden, prng)
        self.head_av = DenseLayer(reg, "head.av", 2 * config.fusion_hidden, 2, prng, init_scale=0.1)
        self.head_a = DenseLayer(reg, "head.a", stream_width, 2, prng, init_scale=0.1)
        self.head_v = DenseLayer(reg, "head.v", stream_width, 2, prng, init_scale=0.1)

        # corpus normalization statistics travel with the checkpoint
        reg.buffer("norm.video_mean", np.zeros(1))
        reg.buffer("norm.video_var", np.ones(1))
        reg.buffer("norm.audio_mean", np.zeros(1))
        reg.buffer("norm.audio_var", np.ones(1))

        self.params = reg.params
        self.buffers = reg.buffers
        self._shapes = None

    # -- forward / backward ------------------------------------------------

    def visual_stream_forward(self, video, ctx):
        """[B,T,f,H,W] grayscale clips -> [B,T,E] per-step embeddings."""
        b, t, f, h, w = video.shape
        if f != self.config.frames_per_step or h != self.config.image_hw or w != self.config.image_hw:
            raise ShapeError(
                f"visual input per step must be {self.config.frames_per_step}x"
                f"{self.config.image_hw}x{self.config.image_hw}, got {f}x{h}x{w}")
        x = video.reshape(b * t, f, h, w, 1)
        x = self.visual_stack.forward(x, ctx)
        self._visual_map_shape = x.shape
        x = x.reshape(b * t, -1)
        x = self.visual_embed.forward(x, ctx)
        return x.reshape(b, t, -1)

    def audio_stream_forward(self, audio, ctx):
        """[B,T,nc,tf] cepstral tiles -> [B,T,F_a]; m1 is a pure reshape."""
        b, t, nc, tf = audio.shape
        if (nc, tf) != tuple(self.config.audio_shape):
            raise ShapeError(f"audio tile must be {self.config.audio_shape}, got ({nc}, {tf})")
        if self.config.variant == "m1":
            return audio.reshape(b, t, nc * tf)
        if self.config.variant == "m2":
            out = self.audio_front.forward(audio.reshape(b * t, nc * tf), ctx)
        else:
            out = self.audio_front.forward(audio.reshape(b * t, nc, tf, 1), ctx)
        return out.reshape(b, t, -1)

    def forward(self, video, audio, mode="infer", prng: Prng = None):
        """Returns per-head logits dict {'av','a','v'}, each [B,T,2]."""
        if video.shape[0] != audio.shape[0] or video.shape[1] != audio.shape[1]:
            raise ShapeError(f"video batch {video.shape[:2]} != audio batch {audio.shape[:2]}")
        b, t = video.shape[:2]
        v_emb = self.visual_stream_forward(video, mode)
        a_emb = self.audio_stream_forward(audio, mode)
        v_seq = self.visual_rnn.forward(v_emb, mode)
        a_seq = self.audio_rnn.forward(a_emb, mode)
        self._stream_shape = v_seq.shape

        fused = np.concatenate([v_seq, a_seq], axis=2)
        fused = self.fusion_dropout.forward(fused, mode, prng)
        joint = self.fusion_rnn.forward(fused, mode)
        logits_av = self.head_av.forward(joint.reshape(b * t, -1), mode).reshape(b, t, 2)
        logits_a = self.head_a.forward(a_seq.reshape(b * t, -1), mode).reshape(b, t, 2)
        logits_v = self.head_v.forward(v_seq.reshape(b * t, -1), mode).reshape(b, t, 2)
        return {"av": logits_av, "a": logits_a, "v": logits_v}

    def backward(self, dlogits):
        """Fan gradients from all three heads back through both streams."""
        b, t, width = self._stream_shape
        d_joint = self.head_av.backward(dlogits["av"].reshape(b * t, 2)).reshape(b, t, -1)
        d_fused = self.fusion_rnn.backward(d_joint)
        d_fused = self.fusion_dropout.backward(d_fused)
        d_v_seq = d_fused[:, :, :width].copy()
        d_a_seq = d_fused[:, :, width:].copy()
        d_a_seq += self.head_a.backward(dlogits["a"].reshape(b * t, 2)).reshape(b, t, -1)
        d_v_seq += self.head_v.backward(dlogits["v"].reshape(b * t, 2)).reshape(b, t, -1)

        d_a_emb = self.audio_rnn.backward(d_a_seq)
        d_v_emb = self.visual_rnn.backward(d_v_seq)

        if self.config.variant != "m1":
            self.audio_front.backward(d_a_emb.reshape(b * t, -1))
        d_flat = self.visual_embed.backward(d_v_emb.reshape(b * t, -1))
        self.visual_stack.backward(d_flat.reshape(self._visual_map_shape))

    def loss_and_grads(self, video, audio, labels, mode="train", prng: Prng = None):
        """Combined loss over a batch; gradients accumulate into params."""
        logits = self.forward(video, audio, mode, prng)
        total, parts, dlogits = combined_loss(logits["av"], logits["a"], logits["v"], labels,
                                              self.config.alpha_a, self.config.alpha_v)
        self.backward(dlogits)
        return total, parts

    def predict_proba(self, video, audio):
        """Per-step speaking probabilities for each head (infer mode)."""
        logits = self.forward(video, audio, "infer")
        out = {}
        for head, lg in logits.items():
            b, t, _ = lg.shape
            _, probs, _ = ops.softmax_xent_forward(lg.reshape(b * t, 2), np.zeros(b * t, dtype=int))
            out[head] = probs[:, 1].reshape(b, t)
        return out

    # -- state -------------------------------------------------------------

    def state_items(self):
        for p in self.params:
            yield p.name, p.value
        for name, buf in self.buffers.items():
            yield name, buf

    def load_state(self, state: dict):
        mine = {name: arr for name, arr in self.state_items()}
        missing = sorted(set(mine) - set(state))
        unknown = sorted(set(state) - set(mine))
        if missing or unknown:
            raise ConfigError(
                f"parameter-set mismatch: missing {missing[:4]}{'...' if len(missing) > 4 else ''}, "
                f"unknown {unknown[:4]}{'...' if len(unknown) > 4 else ''}")
        for name, arr in mine.items():
            src = state[name]
            if tuple(src.shape) != tuple(arr.shape):
                raise ConfigError(f"parameter {name!r}: shape {src.shape} != expected {arr.shape}")
            arr[...] = src.astype(self.dtype)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def audio_front_parameter_count(self) -> int:
        return sum(p.size for p in self.params if p.name.startswith("audio.") and ".rnn" not in p.name)

    def astype(self, dtype) -> "AsdModel":
        """Fresh model with all state cast to `dtype` (f32 for benchmarking)."""
        clone = AsdModel(self.config, seed=0, dtype=dtype)
        clone.load_state({name: arr for name, arr in self.state_items()})
        return clone


@dataclass
class LossParts:
    total: float
    av: float
    a: float
    v: float


def combined_loss(logits_av, logits_a, logits_v, labels, alpha_a=DEFAULT_ALPHA, alpha_v=DEFAULT_ALPHA):
    """Weighted sum of the three per-step cross-entropies.

    total = L_av + alpha_a*L_a + alpha_v*L_v. Returns (total, LossParts,
    dlogits dict) where the gradients fan out through all three heads.
    """
    b, t, c = logits_av.shape
    if logits_a.shape != (b, t, c) or logits_v.shape != (b, t, c):
        raise ShapeError(f"head logits disagree: {logits_av.shape} vs {logits_a.shape} vs {logits_v.shape}")
    flat_labels = np.asarray(labels).reshape(b * t).astype(int)
    l_av, _, cache_av = ops.softmax_xent_forward(logits_av.reshape(b * t, c), flat_labels)
    l_a, _, cache_a = ops.softmax_xent_forward(logits_a.reshape(b * t, c), flat_labels)
    l_v, _, cache_v = ops.softmax_xent_forward(logits_v.reshape(b * t, c), flat_labels)
    total = l_av + alpha_a * l_a + alpha_v * l_v
    dlogits = {
        "av": ops.softmax_xent_backward(cache_av, 1.0).reshape(b, t, c),
        "a": ops.softmax_xent_backward(cache_a, alpha_a).reshape(b, t, c),
        "v": ops.softmax_xent_backward(cache_v, alpha_v).reshape(b, t, c),
    }
    return total, LossParts(total=total, av=l_av, a=l_a, v=l_v), dlogits
