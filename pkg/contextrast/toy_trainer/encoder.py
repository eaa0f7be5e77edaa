"""
Reference Encoder
Four 3x3 conv + ReLU stages, per-layer projection heads and a 1x1 segmentation
head over the upsampled stage outputs, with a hand-derived backward pass
"""
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ArgumentError, StateError
from ..feature_store import FeatureGrid, ProjectionHead
from .rng import CounterRNG

# (in channels, out channels, stride)
STAGES = ((3, 16, 1), (16, 24, 2), (24, 32, 2), (32, 48, 2))
N_LAYERS = len(STAGES)
CONCAT_CHANNELS = sum(out for _, out, _ in STAGES)


def stage_scale(layer):
    """Total stride of 1-based layer"""
    return int(np.prod([s for _, _, s in STAGES[:layer]]))


def parameter_shapes(n_classes, embed_dim):
    shapes = {}
    for i, (cin, cout, _) in enumerate(STAGES, start=1):
        shapes[f'conv{i}.weight'] = (3, 3, cin, cout)
        shapes[f'conv{i}.bias'] = (cout,)
    for i, (_, cout, _) in enumerate(STAGES, start=1):
        shapes[f'proj{i}.weight'] = (cout, embed_dim)
        shapes[f'proj{i}.bias'] = (embed_dim,)
    shapes['seg.weight'] = (CONCAT_CHANNELS, n_classes)
    shapes['seg.bias'] = (n_classes,)
    return shapes


def _conv_forward(x, weight, bias, stride):
    """3x3, padding 1; x (B, H, W, C) -> (B, ceil(H/s), ceil(W/s), O) plus im2col columns"""
    b, _, _, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = windows.shape[1:3]
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(b, ho, wo, 9 * c)
    out = cols @ weight.reshape(9 * c, -1) + bias
    return out, cols


def _conv_backward(grad, cols, weight, x_shape, stride, input_grad=True):
    b, h, w, c = x_shape
    ho, wo, o = grad.shape[1:]
    flat = grad.reshape(-1, o)
    grad_w = (cols.reshape(-1, 9 * c).T @ flat).reshape(weight.shape)
    grad_b = flat.sum(axis=0)
    if not input_grad:
        return grad_w, grad_b, None
    grad_cols = (grad @ weight.reshape(9 * c, o).T).reshape(b, ho, wo, 3, 3, c)
    grad_xp = np.zeros((b, h + 2, w + 2, c), dtype=grad.dtype)
    for kh in range(3):
        for kw in range(3):
            grad_xp[:, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride] += grad_cols[:, :, :, kh, kw]
    return grad_w, grad_b, grad_xp[:, 1:-1, 1:-1]


def _upsample(features, scale, height, width):
    if scale == 1:
        return features
    rows = np.arange(height) // scale
    cols = np.arange(width) // scale
    return features[:, rows][:, :, cols]


def _upsample_backward(grad, scale, size):
    """Sum every scale x scale block of a nearest-upsampled gradient"""
    if scale == 1:
        return grad
    b, h, w, c = grad.shape
    ho, wo = size
    if (h, w) != (ho * scale, wo * scale):
        padded = np.zeros((b, ho * scale, wo * scale, c), dtype=grad.dtype)
        padded[:, :h, :w] = grad
        grad = padded
    return grad.reshape(b, ho, scale, wo, scale, c).sum(axis=(2, 4))


@dataclass
class ForwardResult:
    """Stage outputs, unit embeddings per layer and full-resolution logits"""
    features: list
    embeddings: list
    flagged: list
    logits: np.ndarray

    def feature_grids(self, image=0):
        return [FeatureGrid(i, f[image]) for i, f in enumerate(self.features, start=1)]

    def predictions(self):
        return np.argmax(self.logits, axis=-1).astype(np.uint8)


class ReferenceEncoder:
    """Deterministic multi-scale encoder; parameters live in an ordered dict"""

    def __init__(self, params, n_classes=4, embed_dim=16):
        expected = parameter_shapes(n_classes, embed_dim)
        if list(params) != list(expected):
            raise ArgumentError(f"Parameter names {list(params)} do not match the architecture")
        for name, shape in expected.items():
            if tuple(np.shape(params[name])) != shape:
                raise ArgumentError(f"{name} has shape {np.shape(params[name])}, expected {shape}")
        self.params = {k: np.array(v) for k, v in params.items()}
        self.n_classes = n_classes
        self.embed_dim = embed_dim
        self._cache = None

    @classmethod
    def initialize(cls, rng, n_classes=4, embed_dim=16, dtype=np.float32):
        """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn in parameter order, zero biases"""
        params = {}
        for name, shape in parameter_shapes(n_classes, embed_dim).items():
            if name.endswith('.bias'):
                params[name] = np.zeros(shape, dtype=dtype)
                continue
            bound = 1.0 / math.sqrt(int(np.prod(shape[:-1])))
            params[name] = rng.uniform(-bound, bound, shape).astype(dtype)
        return cls(params, n_classes, embed_dim)

    @classmethod
    def seeded(cls, seed, stream, n_classes=4, embed_dim=16, dtype=np.float32):
        return cls.initialize(CounterRNG(seed, stream), n_classes, embed_dim, dtype)

    @classmethod
    def zeros(cls, n_classes=4, embed_dim=16, dtype=np.float32):
        params = {k: np.zeros(s, dtype=dtype) for k, s in parameter_shapes(n_classes, embed_dim).items()}
        return cls(params, n_classes, embed_dim)

    @classmethod
    def from_checkpoint(cls, params):
        n_classes = params['seg.bias'].shape[0]
        embed_dim = params['proj1.bias'].shape[0]
        return cls(dict(params), n_classes, embed_dim)

    @property
    def dtype(self):
        return self.params['conv1.weight'].dtype

    @property
    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def astype(self, dtype):
        return ReferenceEncoder({k: v.astype(dtype) for k, v in self.params.items()},
                                self.n_classes, self.embed_dim)

    def head(self, layer):
        """Projection head of 1-based layer"""
        return ProjectionHead(self.params[f'proj{layer}.weight'], self.params[f'proj{layer}.bias'])

    def _seg_slice(self, layer):
        start = sum(out for _, out, _ in STAGES[:layer - 1])
        return self.params['seg.weight'][start:start + STAGES[layer - 1][1]]

    def forward(self, images):
        """images (B, H, W, 3) or (H, W, 3)

        Each stage's share of the logits is computed at the stage resolution
        and then upsampled.
        """
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ArgumentError(f"Encoder expects (B, H, W, 3) images, got {x.shape}")
        b, height, width, _ = x.shape
        p = self.params
        stage_cache = []
        features, embeddings, flagged = [], [], []
        logits = np.zeros((b, height, width, self.n_classes), dtype=self.dtype)
        for i, (_, _, stride) in enumerate(STAGES, start=1):
            pre, cols = _conv_forward(x, p[f'conv{i}.weight'], p[f'conv{i}.bias'], stride)
            x_shape = x.shape
            x = np.maximum(pre, 0)
            features.append(x)
            v, norms, fl = self.head(i).embed(x)
            embeddings.append(v)
            flagged.append(fl)
            stage_cache.append((x_shape, cols, pre, v, norms, fl))
            logits += _upsample(x @ self._seg_slice(i), stage_scale(i), height, width)
        logits += p['seg.bias']
        self._cache = (stage_cache, features)
        return ForwardResult(features, embeddings, flagged, logits)

    def backward(self, grad_logits, grad_embeddings=None):
        """Parameter gradients for upstream dL/dlogits and dL/d(unit embeddings)

        Work happens in the parameter dtype; gradients are returned as float64.
        """
        if self._cache is None:
            raise StateError("backward called without a cached forward pass")
        stage_cache, features = self._cache
        p = self.params
        work = self.dtype
        gl = np.asarray(grad_logits, dtype=work)
        grads = {'seg.bias': gl.reshape(-1, self.n_classes).sum(axis=0, dtype=np.float64)}

        seg_weight, grad_features = [], []
        for i, (_, cout, _) in enumerate(STAGES, start=1):
            f = features[i - 1]
            g_small = _upsample_backward(gl, stage_scale(i), f.shape[1:3])
            seg_weight.append(f.reshape(-1, cout).T @ g_small.reshape(-1, self.n_classes))
            g = g_small @ self._seg_slice(i).T
            v, norms, fl = stage_cache[i - 1][3:]
            if grad_embeddings is not None and grad_embeddings[i - 1] is not None:
                gv = np.asarray(grad_embeddings[i - 1], dtype=np.float64)
                safe = np.where(fl, 1.0, norms)
                gz = (gv - v * np.einsum('...d,...d->...', v, gv)[..., None]) / safe[..., None]
                gz[fl] = 0.0
                gz = gz.astype(work)
            else:
                gz = np.zeros(f.shape[:-1] + (self.embed_dim,), dtype=work)
            grads[f'proj{i}.weight'] = f.reshape(-1, cout).T @ gz.reshape(-1, self.embed_dim)
            grads[f'proj{i}.bias'] = gz.reshape(-1, self.embed_dim).sum(axis=0)
            grad_features.append(g + gz @ p[f'proj{i}.weight'].T)
        grads['seg.weight'] = np.concatenate(seg_weight)

        upstream = None
        for i in range(N_LAYERS, 0, -1):
            x_shape, cols, pre = stage_cache[i - 1][:3]
            g = grad_features[i - 1] if upstream is None else grad_features[i - 1] + upstream
            g = g * (pre > 0)
            gw, gb, upstream = _conv_backward(g, cols, p[f'conv{i}.weight'], x_shape, STAGES[i - 1][2],
                                              input_grad=i > 1)
            grads[f'conv{i}.weight'] = gw
            grads[f'conv{i}.bias'] = gb
        return {k: np.asarray(grads[k], dtype=np.float64) for k in p}

    def clear(self):
        self._cache = None


def forward(encoder, image):
    """Single image -> (four raw FeatureGrids, logits (H, W, N))"""
    result = encoder.forward(image)
    return result.feature_grids(0), result.logits[0]


def backward(encoder, grad_logits, grad_embeddings=None):
    return encoder.backward(grad_logits, grad_embeddings)
