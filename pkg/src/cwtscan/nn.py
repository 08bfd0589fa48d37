"""A small convolutional classifier written directly in numpy.

Layers operate on ``(batch, channels, height, width)`` arrays and cache
what their backward pass needs. Parameters live in the layers; the model
exposes them as a flat list in declaration order, which is also the order
of the weights file payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MID_GRAY = 128


class WeightsFormatError(ValueError):
    pass


class WeightsChecksumError(WeightsFormatError):
    pass


class WeightsShapeError(WeightsFormatError):
    pass


class Conv2D:
    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.W = np.zeros((out_channels, in_channels, kernel, kernel))
        self.b = np.zeros(out_channels)

    @property
    def params(self):
        return [self.W, self.b]

    def init(self, rng, dtype):
        fan_in = self.in_channels * self.kernel ** 2
        bound = np.sqrt(6.0 / fan_in)
        self.W = rng.uniform(-bound, bound, self.W.shape).astype(dtype)
        self.b = np.zeros(self.out_channels, dtype)

    def output_shape(self, shape):
        c, h, w = shape
        k, s, p = self.kernel, self.stride, self.padding
        return self.out_channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        k, s, p = self.kernel, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        B, C, Ho, Wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
        out = cols @ self.W.reshape(self.out_channels, -1).T + self.b
        self._cache = (x.shape, xp.shape, cols, Ho, Wo)
        return out.reshape(B, Ho, Wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout):
        xshape, xpshape, cols, Ho, Wo = self._cache
        k, s, p = self.kernel, self.stride, self.padding
        B = dout.shape[0]
        d = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.dW = (d.T @ cols).reshape(self.W.shape)
        self.db = d.sum(axis=0)
        dcols = (d @ self.W.reshape(self.out_channels, -1)).reshape(B, Ho, Wo, xshape[1], k, k)
        dxp = np.zeros(xpshape, dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return dxp

    def grads(self):
        return [self.dW, self.db]


class ReLU:
    params = []

    def output_shape(self, shape):
        return shape

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask

    def grads(self):
        return []


class MaxPool2D:
    """Non-overlapping max pooling; trailing rows/columns that do not fill a
    window are dropped. Gradient goes to the first maximal element."""

    params = []

    def __init__(self, kernel=2):
        self.kernel = kernel

    def output_shape(self, shape):
        c, h, w = shape
        return c, h // self.kernel, w // self.kernel

    def forward(self, x):
        k = self.kernel
        B, C, H, W = x.shape
        Ho, Wo = H // k, W // k
        xs = x[:, :, :Ho * k, :Wo * k].reshape(B, C, Ho, k, Wo, k)
        xs = xs.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
        arg = xs.argmax(axis=-1)
        self._cache = (x.shape, arg)
        return np.take_along_axis(xs, arg[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        (B, C, H, W), arg = self._cache
        k = self.kernel
        Ho, Wo = dout.shape[2:]
        d = np.zeros((B, C, Ho, Wo, k * k), dtype=dout.dtype)
        np.put_along_axis(d, arg[..., None], dout[..., None], axis=-1)
        d = d.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * k, Wo * k)
        dx = np.zeros((B, C, H, W), dtype=dout.dtype)
        dx[:, :, :Ho * k, :Wo * k] = d
        return dx

    def grads(self):
        return []


class GlobalAvgPool:
    params = []

    def output_shape(self, shape):
        return (shape[0],)

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        B, C, H, W = self._shape
        return np.broadcast_to(dout[:, :, None, None] / (H * W), self._shape).copy()

    def grads(self):
        return []


class Flatten:
    params = []

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)

    def grads(self):
        return []


class Dense:
    def __init__(self, in_features, units):
        self.in_features = in_features
        self.units = units
        self.W = np.zeros((in_features, units))
        self.b = np.zeros(units)

    @property
    def params(self):
        return [self.W, self.b]

    def init(self, rng, dtype):
        bound = np.sqrt(6.0 / self.in_features)
        self.W = rng.uniform(-bound, bound, self.W.shape).astype(dtype)
        self.b = np.zeros(self.units, dtype)

    def output_shape(self, shape):
        return (self.units,)

    def forward(self, x):
        self._x = x
        return x @ self.W + self.b

    def backward(self, dout):
        self.dW = self._x.T @ dout
        self.db = dout.sum(axis=0)
        return dout @ self.W.T

    def grads(self):
        return [self.dW, self.db]


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def default_architecture(num_classes, channels=(16, 32, 64), head="flatten"):
    layers = []
    for c in channels:
        layers += [{"type": "conv", "out_channels": int(c), "kernel": 3, "stride": 1},
                   {"type": "relu"}, {"type": "maxpool", "kernel": 2}]
    layers.append({"type": "gap"} if head == "gap" else {"type": "flatten"})
    layers += [{"type": "dense", "units": int(num_classes)}, {"type": "softmax"}]
    return layers


class CompactCnn:
    """Sequential conv net ending in a dense layer and softmax.

    Parameters
    ----------
    architecture : list of dict
        Layer descriptions, e.g. ``{"type": "conv", "out_channels": 16,
        "kernel": 3, "stride": 1}``, ``{"type": "relu"}``,
        ``{"type": "maxpool", "kernel": 2}``, ``{"type": "gap"}`` or
        ``{"type": "flatten"}``, ``{"type": "dense", "units": C}``,
        ``{"type": "softmax"}`` (last, parameter free).
    input_shape : tuple
        ``(height, width, channels)`` of the images.
    """

    def __init__(self, architecture, input_shape=(64, 64, 3), seed=0, dtype=np.float32):
        self.architecture = [dict(layer) for layer in architecture]
        self.input_shape = tuple(int(v) for v in input_shape)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        if self.architecture[-1]["type"] != "softmax":
            raise ValueError("architecture must end with a softmax layer")
        rng = np.random.default_rng(self.seed)
        h, w, c = self.input_shape
        shape = (c, h, w)
        self.layers = []
        for spec in self.architecture[:-1]:
            kind = spec["type"]
            if kind == "conv":
                layer = Conv2D(shape[0], spec["out_channels"], spec.get("kernel", 3),
                               spec.get("stride", 1))
            elif kind == "relu":
                layer = ReLU()
            elif kind == "maxpool":
                layer = MaxPool2D(spec.get("kernel", 2))
            elif kind == "gap":
                layer = GlobalAvgPool()
            elif kind == "flatten":
                layer = Flatten()
            elif kind == "dense":
                if len(shape) != 1:
                    raise ValueError("dense layer needs a flattened input")
                layer = Dense(shape[0], spec["units"])
            else:
                raise ValueError(f"unknown layer type {kind!r}")
            if hasattr(layer, "init"):
                layer.init(rng, self.dtype)
            shape = layer.output_shape(shape)
            self.layers.append(layer)
        if len(shape) != 1:
            raise ValueError("architecture must reduce to a vector before softmax")
        self.num_classes = shape[0]
        self._velocity = None

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def set_params(self, arrays):
        arrays = list(arrays)
        it = iter(arrays)
        for layer in self.layers:
            if layer.params:
                for name, current in zip(("W", "b"), layer.params):
                    new = np.asarray(next(it), dtype=self.dtype)
                    if new.shape != current.shape:
                        raise WeightsShapeError(f"parameter shape {new.shape} != {current.shape}")
                    setattr(layer, name, new)
        self._velocity = None

    def grads(self):
        return [g for layer in self.layers for g in layer.grads()]

    def prepare(self, images):
        """uint8 ``(n, H, W, 3)`` images to scaled ``(n, 3, H, W)`` floats in [-1, 1]."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != self.input_shape:
            raise ValueError(f"image shape {images.shape[1:]} does not match model input {self.input_shape}")
        return (images.astype(self.dtype) / self.dtype.type(127.5) - 1).transpose(0, 3, 1, 2)

    def logits(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward(self, images, batch_size=64):
        """Class probabilities, ``(n, num_classes)`` float64."""
        x = self.prepare(images)
        out = [softmax(self.logits(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def loss_and_grads(self, x, labels):
        """Mean cross-entropy on prepared input; gradients are left on the layers."""
        z = self.logits(x)
        p = softmax(z)
        n = len(labels)
        loss = -np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300)))
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        d = (d / n).astype(self.dtype)
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return float(loss)

    def step(self, learning_rate, momentum):
        if self._velocity is None:
            self._velocity = [np.zeros_like(p) for p in self.params]
        lr = self.dtype.type(learning_rate)
        mu = self.dtype.type(momentum)
        for p, g, v in zip(self.params, self.grads(), self._velocity):
            v *= mu
            v += g
            p -= lr * v


def backward_and_step(model, images, labels, learning_rate=0.01, momentum=0.9):
    """One SGD-with-momentum update on mean cross-entropy.

    Returns the batch loss before the update.
    """
    labels = np.asarray(labels, dtype=int)
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("labels out of range")
    loss = model.loss_and_grads(model.prepare(images), labels)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite training loss; learning rate too high?")
    model.step(learning_rate, momentum)
    return loss


# -- augmentation -----------------------------------------------------------

def pixel_dropout(image, p, rng):
    mask = rng.random(image.shape[:2]) < p
    out = image.copy()
    out[mask] = MID_GRAY
    return out


def adjust_contrast(image, scale):
    out = (image.astype(np.float64) - MID_GRAY) * scale + MID_GRAY
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


TASK1_TRANSFORMS = ("rotate", "hflip", "vflip", "contrast", "dropout")


def augment_task1(image, rng, probability=0.5, dropout=0.05):
    """Randomly perturb an image for classifier training.

    With ``probability`` one transform is drawn uniformly from a right-angle
    rotation, horizontal flip, vertical flip, contrast scaling in
    [0.8, 1.2] about mid-gray, or pixel dropout to mid-gray.
    """
    if not rng.random() < probability:
        return image
    kind = TASK1_TRANSFORMS[rng.integers(len(TASK1_TRANSFORMS))]
    if kind == "rotate":
        return np.ascontiguousarray(np.rot90(image, int(rng.integers(1, 4))))
    if kind == "hflip":
        return np.ascontiguousarray(image[:, ::-1])
    if kind == "vflip":
        return np.ascontiguousarray(image[::-1])
    if kind == "contrast":
        return adjust_contrast(image, rng.uniform(0.8, 1.2))
    return pixel_dropout(image, dropout, rng)


def equalize_histogram(image):
    """Per-channel histogram equalisation.

    Level ``v`` maps to ``floor(255 * cdf(v))`` with ``cdf`` the fraction of
    pixels at or below ``v``; the most common convention. A single-level
    channel therefore maps to 255.
    """
    out = np.empty_like(image)
    n = image.shape[0] * image.shape[1]
    for ch in range(image.shape[2]):
        chan = image[..., ch]
        cdf = np.cumsum(np.bincount(chan.ravel(), minlength=256))
        lut = (255 * cdf) // n
        out[..., ch] = lut[chan].astype(np.uint8)
    return out


def augment_task2_histeq(image, rng=None, probability=1.0):
    if rng is not None and not rng.random() < probability:
        return image
    return equalize_histogram(image)


# -- persistence ------------------------------------------------------------

MAGIC = b"CWTCNN\x00\x01"
FORMAT_VERSION = 1


def _checksum(payload):
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def weights_checksum(model):
    return f"{_checksum(_payload(model)):016x}"


def _payload(model):
    return b"".join(np.asarray(p, dtype="<f4").tobytes() for p in model.params)


def save_weights(model, path, class_names=None, extra=None):
    """Write magic, version, JSON header, float32 payload and checksum."""
    header = {
        "architecture": model.architecture,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "seed": model.seed,
        "class_names": list(class_names) if class_names is not None else None,
        "param_shapes": [list(p.shape) for p in model.params],
    }
    if extra:
        header["extra"] = extra
    hb = json.dumps(header, sort_keys=True).encode()
    payload = _payload(model)
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + payload \
        + struct.pack("<Q", _checksum(payload))
    Path(path).write_bytes(blob)


def read_weights_header(path):
    return _parse(Path(path).read_bytes())[0]


def _parse(blob):
    if blob[:len(MAGIC)] != MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise WeightsChecksumError("truncated weights file")
    version, hlen = struct.unpack_from("<II", blob, pos)
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported weights format version {version}")
    pos += 8
    try:
        header = json.loads(blob[pos:pos + hlen])
    except ValueError:
        raise WeightsChecksumError("truncated or corrupt weights header") from None
    pos += hlen
    n_floats = sum(int(np.prod(s)) for s in header["param_shapes"])
    end = pos + 4 * n_floats
    if len(blob) != end + 8:
        raise WeightsChecksumError(f"weights payload size mismatch ({len(blob)} bytes, expected {end + 8})")
    payload = blob[pos:end]
    (stored,) = struct.unpack_from("<Q", blob, end)
    if stored != _checksum(payload):
        raise WeightsChecksumError("weights checksum mismatch")
    return header, payload


def load_weights(path, dtype=np.float32):
    """Rebuild a :class:`CompactCnn` from :func:`save_weights` output.

    Returns ``(model, header)``.
    """
    header, payload = _parse(Path(path).read_bytes())
    arch = header["architecture"]
    dense = [layer for layer in arch if layer["type"] == "dense"]
    if not dense or dense[-1]["units"] != header["num_classes"]:
        raise WeightsShapeError("num_classes in header does not match the architecture")
    model = CompactCnn(arch, header["input_shape"], header["seed"], dtype)
    shapes = [list(p.shape) for p in model.params]
    if shapes != header["param_shapes"]:
        raise WeightsShapeError("parameter shapes in header do not match the architecture")
    flat = np.frombuffer(payload, dtype="<f4")
    arrays, pos = [], 0
    for s in shapes:
        k = int(np.prod(s))
        arrays.append(flat[pos:pos + k].reshape(s))
        pos += k
    model.set_params(arrays)
    return model, header
