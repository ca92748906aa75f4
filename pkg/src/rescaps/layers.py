"""Network building blocks and the depth-parameterized model builder.

A model is: conv stem -> primary capsules -> a chain of fully connected
capsule layers -> class capsules, plus a reconstruction decoder hanging off
the class capsules. Depth D counts the routed capsule layers (first layer +
sub-network + class layer), so D=3 is the shallowest buildable model and
the sub-network holds D-2 layers.

With use_skip=True the hidden layers after the 8->12 dimension adapter are
grouped into two-layer residual blocks; the block output is the elementwise
pose sum of its input and its second layer's routed output, with no extra
squash. Skips carry no parameters, so skip and no-skip models built from
the same seed have identical parameter tensors.
"""

from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DATASETS, load_canonical_bytes, save_canonical_bytes
from .routing import CapsuleTensor, EmParams, em_route, rba_route, sda_route

ROUTINGS = ("rba", "sda", "em")

WEIGHT_STD = 0.2      # transformation-matrix init: normal(0, 0.2)
BIAS_INIT = 0.1       # routing bias init (pre-squash for rba/sda, pose for em)
CROP_SIZE = 24

MIN_DEPTH = 3
MAX_DEPTH = 16


class ConfigError(ValueError):
    """A model/run configuration violates its contract."""


@dataclass
class ModelConfig:
    """One training run's model and optimizer settings."""

    dataset: str = "mnist"
    routing: str = "rba"
    depth: int = 3
    use_skip: bool = False
    seed: int = 0
    epochs: int = 30
    batch_size: int | None = None  # None: 128, or 64 for depth > 13
    learning_rate: float = 1e-4
    recon_weight: float = 1e-5
    routing_iters: int = 2

    def resolved_batch_size(self):
        if self.batch_size is not None:
            return self.batch_size
        return 64 if self.depth > 13 else 128

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r} (choose from {sorted(DATASETS)})")
        if self.routing not in ROUTINGS:
            raise ConfigError(f"unknown routing {self.routing!r} (choose from {ROUTINGS})")
        if not MIN_DEPTH <= self.depth <= MAX_DEPTH:
            raise ConfigError(f"depth must be in [{MIN_DEPTH}, {MAX_DEPTH}], got {self.depth}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.recon_weight < 0:
            raise ConfigError("reconstruction weight must be >= 0")
        if self.routing_iters < 1:
            raise ConfigError("routing iterations must be >= 1")
        return self


class ConvLayer:
    """Valid conv + ReLU. Kernel is Glorot-uniform, bias starts at zero."""

    def __init__(self, kernel_size, stride, cin, cout, rng, dtype, name="conv"):
        self.stride = stride
        self.name = name
        fan_in = kernel_size * kernel_size * cin
        fan_out = kernel_size * kernel_size * cout
        self.kernel = Tensor(
            ad.glorot_uniform(rng, (kernel_size, kernel_size, cin, cout), fan_in, fan_out, dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return ad.relu(ad.conv2d(x, self.kernel, self.bias, stride=self.stride))

    def parameters(self):
        return {f"{self.name}.kernel": self.kernel, f"{self.name}.bias": self.bias}


def primary_capsule_tensor(features, dim):
    """Reshape a (B, h, w, c) feature map into (h*w*c/dim) capsules of the
    given dim, squash each, and cache norms as activations."""
    B, h, w, c = features.shape
    if (h * w * c) % dim != 0:
        raise ad.ShapeError(f"feature volume {h}x{w}x{c} does not split into dim-{dim} capsules")
    poses = ad.squash(ad.reshape(features, (B, (h * w * c) // dim, dim)), axis=-1)
    return CapsuleTensor(poses, ad.eps_norm(poses, axis=-1))


class FcCapsuleLayer:
    """Fully connected capsule layer: per-pair vote matrices followed by the
    configured routing algorithm."""

    def __init__(self, n_in, d_in, n_out, d_out, routing, iterations, rng, dtype, name="caps"):
        if routing not in ROUTINGS:
            raise ConfigError(f"unknown routing {routing!r}")
        if routing == "sda" and n_out < 2:
            # the sda scale has log(0.9 * (J - 1)) in it, which is -inf at J = 1
            raise ConfigError("sda routing needs at least 2 output capsules")
        self.routing = routing
        self.iterations = iterations
        self.name = name
        self.n_in, self.d_in, self.n_out, self.d_out = n_in, d_in, n_out, d_out
        self.weights = Tensor(
            rng.normal(0.0, WEIGHT_STD, size=(n_in, n_out, d_out, d_in)).astype(dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.full((n_out, d_out), BIAS_INIT, dtype=dtype), requires_grad=True)
        if routing == "em":
            self.beta_a = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
            self.beta_u = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)
            self.lambdas = tuple(float(1 + t) for t in range(iterations))

    def forward(self, caps, return_state=False):
        votes = ad.affine_votes(caps.poses, self.weights)
        if self.routing == "rba":
            return rba_route(votes, self.bias, self.iterations, return_state)
        if self.routing == "sda":
            return sda_route(caps, votes, self.bias, self.iterations, return_state)
        params = EmParams(self.beta_a, self.beta_u, self.lambdas)
        return em_route(caps, votes, params, self.bias, self.iterations, return_state)

    def parameters(self):
        out = {f"{self.name}.weights": self.weights, f"{self.name}.bias": self.bias}
        if self.routing == "em":
            out[f"{self.name}.beta_a"] = self.beta_a
            out[f"{self.name}.beta_u"] = self.beta_u
        return out


class ResidualBlock:
    """Two capsule layers plus a parameter-free identity shortcut, added to
    the poses after routing with no re-squash."""

    def __init__(self, layer_a, layer_b):
        if (layer_a.n_in, layer_a.d_in) != (layer_b.n_out, layer_b.d_out):
            raise ConfigError(
                "skip endpoints must match shapes: "
                f"{(layer_a.n_in, layer_a.d_in)} vs {(layer_b.n_out, layer_b.d_out)}"
            )
        self.layer_a = layer_a
        self.layer_b = layer_b

    def forward(self, caps):
        inner = self.layer_b.forward(self.layer_a.forward(caps))
        poses = ad.add(inner.poses, caps.poses)
        if self.layer_b.routing == "em":
            activations = inner.activations
        else:
            activations = ad.eps_norm(poses, axis=-1)
        return CapsuleTensor(poses, activations)

    def parameters(self):
        return {**self.layer_a.parameters(), **self.layer_b.parameters()}


class Dense:
    def __init__(self, n_in, n_out, rng, dtype, name="dense"):
        self.name = name
        self.weight = Tensor(
            ad.glorot_uniform(rng, (n_in, n_out), n_in, n_out, dtype), requires_grad=True
        )
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def forward(self, x):
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}


class Decoder:
    """Reconstruction head: the masked class-capsule poses through two ReLU
    dense layers and a sigmoid output layer reshaped to the image crop."""

    def __init__(self, caps_count, caps_dim, image_shape, rng, dtype, hidden=(512, 1024)):
        self.caps_count = caps_count
        self.caps_dim = caps_dim
        self.image_shape = tuple(image_shape)
        pixels = int(np.prod(image_shape))
        self.dense1 = Dense(caps_count * caps_dim, hidden[0], rng, dtype, name="decoder.dense1")
        self.dense2 = Dense(hidden[0], hidden[1], rng, dtype, name="decoder.dense2")
        self.dense3 = Dense(hidden[1], pixels, rng, dtype, name="decoder.dense3")

    def forward(self, poses, mask_onehot):
        """poses (B, K, d); mask_onehot (B, K) zeroes every capsule but the
        masked class before the first dense layer."""
        B = poses.shape[0]
        mask = np.asarray(mask_onehot, dtype=poses.dtype)
        if mask.shape != (B, self.caps_count):
            raise ad.ShapeError(f"mask shape {mask.shape} != {(B, self.caps_count)}")
        x = ad.reshape(ad.mul(poses, Tensor(mask[:, :, None])), (B, self.caps_count * self.caps_dim))
        x = ad.relu(self.dense1.forward(x))
        x = ad.relu(self.dense2.forward(x))
        x = ad.sigmoid(self.dense3.forward(x))
        return ad.reshape(x, (B,) + self.image_shape)

    def parameters(self):
        out = {}
        for d in (self.dense1, self.dense2, self.dense3):
            out.update(d.parameters())
        return out


class CapsNet:
    """The full network for one dataset at one depth."""

    def __init__(self, config: ModelConfig, rng=None, dtype=np.float32):
        config.validate()
        spec = DATASETS[config.dataset]
        if rng is None:
            rng = np.random.default_rng(config.seed)
        self.config = config
        self.dtype = dtype
        self.classes = spec.classes
        self.channels = spec.channels
        r = config.routing_iters

        self.stem = ConvLayer(9, 1, spec.channels, 256, rng, dtype, name="stem")
        self.primary = ConvLayer(9, 2, 256, 256, rng, dtype, name="primary")
        self.primary_dim = 8

        sub = config.depth - 2  # capsule layers between input reshape and class layer
        make = lambda i, *a: FcCapsuleLayer(*a, config.routing, r, rng, dtype, name=f"caps{i}")
        self.caps_layers = [make(0, 512, 8, 32, 8), make(1, 32, 8, 32, 12)]
        for i in range(sub - 1):
            self.caps_layers.append(make(2 + i, 32, 12, 32, 12))
        self.caps_layers.append(
            FcCapsuleLayer(32, 12, spec.classes, 16, config.routing, r, rng, dtype, name="class")
        )
        self.decoder = Decoder(
            spec.classes, 16, (CROP_SIZE, CROP_SIZE, spec.channels), rng, dtype
        )

        # wiring: [first, adapter, hidden..., class]; blocks pair hidden layers
        hidden = self.caps_layers[2:-1]
        self.plan = [self.caps_layers[0], self.caps_layers[1]]
        if config.use_skip:
            i = 0
            while i + 1 < len(hidden):
                self.plan.append(ResidualBlock(hidden[i], hidden[i + 1]))
                i += 2
            if i < len(hidden):  # odd trailing layer stays skip-free
                self.plan.append(hidden[i])
        else:
            self.plan.extend(hidden)
        self.plan.append(self.caps_layers[-1])

    @property
    def routed_layer_count(self):
        return len(self.caps_layers)

    @property
    def residual_blocks(self):
        return [step for step in self.plan if isinstance(step, ResidualBlock)]

    def forward(self, images):
        """images: (B, 24, 24, C) standardized floats -> class CapsuleTensor."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        feats = self.primary.forward(self.stem.forward(x))
        caps = primary_capsule_tensor(feats, self.primary_dim)
        for step in self.plan:
            caps = step.forward(caps)
        return caps

    def reconstruct(self, class_caps, labels=None):
        """Decode the masked class capsules; mask by given labels (training)
        or by the predicted class (evaluation)."""
        mask_labels = labels if labels is not None else self.predict_from(class_caps)
        onehot = np.zeros((class_caps.poses.shape[0], self.classes), dtype=self.dtype)
        onehot[np.arange(len(mask_labels)), np.asarray(mask_labels, dtype=int)] = 1
        return self.decoder.forward(class_caps.poses, onehot)

    @staticmethod
    def predict_from(class_caps):
        return np.argmax(class_caps.activations.data, axis=1)

    def predict(self, images):
        with ad.no_grad():
            return self.predict_from(self.forward(images))

    def parameters(self):
        params = {}
        for part in [self.stem, self.primary, *self.caps_layers, self.decoder]:
            params.update(part.parameters())
        return params


def build_model(config: ModelConfig, dtype=np.float32, rng=None) -> CapsNet:
    return CapsNet(config, rng=rng, dtype=dtype)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "rescaps-checkpoint"
CHECKPOINT_VERSION = 1

_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def _layer_manifest_lines(model):
    spec = DATASETS[model.config.dataset]
    lines = [
        f"layer kind=conv-stem kernel=9 stride=1 in={spec.channels} out=256",
        "layer kind=primary kernel=9 stride=2 in=256 out=256 capsule_dim=8",
    ]
    for step in model.plan:
        if isinstance(step, ResidualBlock):
            for sub in (step.layer_a, step.layer_b):
                lines.append(
                    f"layer kind=fc-capsule name={sub.name} in={sub.n_in}x{sub.d_in}"
                    f" out={sub.n_out}x{sub.d_out} routing={sub.routing} residual=yes"
                )
        else:
            lines.append(
                f"layer kind=fc-capsule name={step.name} in={step.n_in}x{step.d_in}"
                f" out={step.n_out}x{step.d_out} routing={step.routing} residual=no"
            )
    lines.append(f"layer kind=decoder hidden=512,1024 out={CROP_SIZE}x{CROP_SIZE}x{spec.channels}")
    return lines


def save_checkpoint(model: CapsNet, path):
    """Zip of a structured-text manifest plus one canonical-container tensor
    per parameter."""
    params = model.parameters()
    manifest = [f"format={CHECKPOINT_FORMAT}", f"version={CHECKPOINT_VERSION}"]
    for name in _CONFIG_FIELDS:
        value = getattr(model.config, name)
        manifest.append(f"config.{name}={'' if value is None else value}")
    manifest.append(f"classes={model.classes}")
    manifest.extend(_layer_manifest_lines(model))
    for name, p in params.items():
        shape = "x".join(str(d) for d in p.data.shape)
        manifest.append(f"param name={name} shape={shape}")

    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.txt", "\n".join(manifest) + "\n")
        for name, p in params.items():
            zf.writestr(f"params/{name}.caps", save_canonical_bytes(p.data))


def _parse_config_lines(lines):
    raw = {}
    for line in lines:
        if line.startswith("config."):
            key, _, value = line.partition("=")
            raw[key[len("config.") :]] = value
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in raw:
            continue
        value = raw[f.name]
        if f.name == "use_skip":
            kwargs[f.name] = value == "True"
        elif f.name == "batch_size":
            kwargs[f.name] = None if value == "" else int(value)
        elif f.name in ("depth", "seed", "epochs", "routing_iters"):
            kwargs[f.name] = int(value)
        elif f.name in ("learning_rate", "recon_weight"):
            kwargs[f.name] = float(value)
        else:
            kwargs[f.name] = value
    return ModelConfig(**kwargs)


def load_checkpoint(path, dtype=np.float32):
    """Rebuild the model named by the checkpoint manifest and load every
    parameter tensor. Returns (model, config)."""
    with zipfile.ZipFile(path, "r") as zf:
        lines = io.TextIOWrapper(zf.open("manifest.txt"), encoding="utf-8").read().splitlines()
        if not lines or lines[0] != f"format={CHECKPOINT_FORMAT}":
            raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        config = _parse_config_lines(lines)
        model = build_model(config, dtype=dtype)
        for name, p in model.parameters().items():
            arr = load_canonical_bytes(zf.read(f"params/{name}.caps"))
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"checkpoint param {name}: shape {arr.shape} != expected {p.data.shape}"
                )
            p.data = arr.astype(dtype)
    return model, config
