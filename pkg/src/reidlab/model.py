"""Multi-stream encoder: one small MLP per modality, each with a BNNeck.

Conventions (the usual strong-baseline recipe):
- the triplet loss consumes the pre-BN embedding z;
- classification and retrieval consume the post-BN feature z_bn;
- the BNNeck has a learned scale gamma but no additive shift, and the
  classifier is bias-free;
- train mode normalizes by batch statistics (biased variance) and
  updates running statistics with momentum 0.1, storing the unbiased
  variance; eval mode normalizes by running statistics.

Under fusion strategies the streams have no classifiers; one fused
BNNeck + classifier sits on top of the fused embedding. Stream BNNecks
still track running statistics during fusion training so per-stream
retrieval features are always post-BN, whatever the strategy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, ShapeError, StateError
from .numerics import Matrix, Rng, as_matrix, matmul
from .objectives import FusionOperator, Strategy, default_normalize_first, fuse, inference_fusion_op

CHECKPOINT_MAGIC = b"UCCK"
CHECKPOINT_VERSION = 1


@dataclass
class BnNeck:
    """Batch norm with scale only (no shift)."""

    gamma: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


def init_bnneck(dim: int, eps: float = 1e-5, momentum: float = 0.1) -> BnNeck:
    return BnNeck(
        gamma=np.ones(dim, dtype=np.float64),
        running_mean=np.zeros(dim, dtype=np.float64),
        running_var=np.ones(dim, dtype=np.float64),
        eps=eps,
        momentum=momentum,
    )


@dataclass
class StreamParams:
    """MLP encoder (ReLU hidden layers) + BNNeck + optional classifier.

    The final embedding layer is bias-free: BN normalizes away a common
    shift and pairwise distances ignore it, so such a bias would be a
    pure dead parameter (the usual convention for layers feeding BN).
    """

    weights: list  # layer l: (out_dim, in_dim)
    biases: list  # hidden layer l: (out_dim,); no entry for the final layer
    bn: BnNeck
    classifier: Optional[np.ndarray]  # (num_classes, embed_dim), bias-free

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[0]


@dataclass
class FusedHead:
    """BNNeck + bias-free classifier over the fused embedding."""

    bn: BnNeck
    classifier: np.ndarray


@dataclass
class ModelParams:
    streams: list
    fused: Optional[FusedHead]
    strategy: Strategy
    modality_names: list
    num_classes: int

    @property
    def num_streams(self) -> int:
        return len(self.streams)

    def validate(self) -> None:
        if len(self.streams) != len(self.modality_names):
            raise ShapeError(
                f"{len(self.streams)} streams but {len(self.modality_names)} modality names"
            )
        if self.strategy.is_fusion != (self.fused is not None):
            raise ConfigError(
                f"strategy {self.strategy.value} and fused head presence are inconsistent"
            )
        for i, s in enumerate(self.streams):
            if np.any(s.bn.running_var <= 0):
                raise DataError(f"stream {i} has non-positive running variance")


def init_stream(
    input_dim: int,
    hidden_dims: Sequence[int],
    embed_dim: int,
    num_classes: Optional[int],
    rng: Rng,
) -> StreamParams:
    """Kaiming-style init: W ~ N(0, 2/fan_in), hidden biases 0, gamma 1."""
    dims = [int(input_dim)] + [int(d) for d in hidden_dims] + [int(embed_dim)]
    if any(d < 1 for d in dims):
        raise ConfigError(f"layer dims must be >= 1, got {dims}")
    weights = []
    biases = []
    n_layers = len(dims) - 1
    for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        weights.append(rng.normal(fan_out, fan_in) * np.sqrt(2.0 / fan_in))
        if l < n_layers - 1:
            biases.append(np.zeros(fan_out, dtype=np.float64))
    classifier = None
    if num_classes is not None:
        if num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
        classifier = rng.normal(num_classes, dims[-1]) * np.sqrt(2.0 / dims[-1])
    return StreamParams(weights=weights, biases=biases, bn=init_bnneck(dims[-1]), classifier=classifier)


def init_model(
    input_dims: Sequence[int],
    modality_names: Sequence[str],
    strategy: Strategy,
    num_classes: int,
    rng: Rng,
    hidden_dims: Sequence[int] = (64,),
    embed_dim: int = 32,
) -> ModelParams:
    """Build all streams (and the fused head under fusion strategies).

    Each stream's parameters are drawn from a sub-stream keyed by its
    modality name, so a stream's initialization does not depend on which
    other streams exist. That makes independent-vs-joint training
    comparisons exact.
    """
    if len(input_dims) != len(modality_names):
        raise ShapeError(
            f"{len(input_dims)} input dims but {len(modality_names)} modality names"
        )
    if len(set(modality_names)) != len(modality_names):
        raise ConfigError(f"modality names must be unique, got {list(modality_names)}")
    if len(input_dims) == 0:
        raise ConfigError("model needs at least one stream")
    per_stream_classes = num_classes if strategy is Strategy.UNICAT else None
    streams = [
        init_stream(dim, hidden_dims, embed_dim, per_stream_classes, rng.split(f"init:{name}"))
        for dim, name in zip(input_dims, modality_names)
    ]
    fused = None
    if strategy.is_fusion:
        op = inference_fusion_op(strategy)
        fused_dim = embed_dim * len(input_dims) if op is FusionOperator.CONCAT else embed_dim
        head_rng = rng.split("init:fused")
        fused = FusedHead(
            bn=init_bnneck(fused_dim),
            classifier=head_rng.normal(num_classes, fused_dim) * np.sqrt(2.0 / fused_dim),
        )
    return ModelParams(
        streams=streams,
        fused=fused,
        strategy=strategy,
        modality_names=[str(n) for n in modality_names],
        num_classes=int(num_classes),
    )


@dataclass
class BnCache:
    z: Matrix
    mu: np.ndarray
    inv_std: np.ndarray
    z_hat: Matrix


@dataclass
class StreamCache:
    hiddens: list  # inputs to each layer: h_0 = x, h_1 = relu(a_1), ...
    pre_acts: list  # pre-activation of each hidden layer
    bn: Optional[BnCache]


@dataclass
class StreamOutput:
    z: Matrix
    z_bn: Matrix
    logits: Optional[Matrix]
    cache: Optional[StreamCache]
    train: bool


@dataclass
class HeadOutput:
    z: Matrix  # the fused embedding fed into the head (pre-BN)
    z_bn: Matrix
    logits: Matrix
    bn_cache: Optional[BnCache]
    train: bool


def _bn_forward(
    bn: BnNeck, z: Matrix, train: bool, update_running: bool
) -> tuple[Matrix, Optional[BnCache]]:
    if train:
        n = z.shape[0]
        if n < 2:
            raise DataError(f"batch statistics need >= 2 rows in train mode, got {n}")
        mu = z.mean(axis=0)
        centered = z - mu
        var_b = np.mean(centered * centered, axis=0)
        inv_std = 1.0 / np.sqrt(var_b + bn.eps)
        z_hat = centered * inv_std
        if update_running:
            var_u = var_b * (n / (n - 1.0))
            bn.running_mean += bn.momentum * (mu - bn.running_mean)
            bn.running_var += bn.momentum * (var_u - bn.running_var)
        return bn.gamma * z_hat, BnCache(z=z, mu=mu, inv_std=inv_std, z_hat=z_hat)
    z_hat = (z - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
    return bn.gamma * z_hat, None


def _bn_backward(bn: BnNeck, cache: BnCache, grad_z_bn: Matrix) -> tuple[Matrix, np.ndarray]:
    """Exact gradient through train-mode batch normalization."""
    n = cache.z.shape[0]
    grad_gamma = np.sum(grad_z_bn * cache.z_hat, axis=0)
    g_hat = grad_z_bn * bn.gamma
    sum_g = g_hat.sum(axis=0)
    sum_gz = np.sum(g_hat * cache.z_hat, axis=0)
    grad_z = (cache.inv_std / n) * (n * g_hat - sum_g - cache.z_hat * sum_gz)
    return grad_z, grad_gamma


def stream_forward(
    params: StreamParams, x: Matrix, train: bool, update_running: bool = True
) -> StreamOutput:
    """MLP -> z; BNNeck -> z_bn; classifier (if any) -> logits."""
    x = as_matrix(x, "x")
    if x.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(
            f"input dim {x.shape[1]} does not match stream input dim {params.weights[0].shape[1]}"
        )
    hiddens = [x]
    pre_acts = []
    h = x
    last = len(params.weights) - 1
    for l, w in enumerate(params.weights):
        a = matmul(h, w.T)
        if l < last:
            a = a + params.biases[l]
            pre_acts.append(a)
            h = np.maximum(a, 0.0)
            hiddens.append(h)
        else:
            z = a
    z_bn, bn_cache = _bn_forward(params.bn, z, train, update_running)
    logits = matmul(z_bn, params.classifier.T) if params.classifier is not None else None
    cache = StreamCache(hiddens=hiddens, pre_acts=pre_acts, bn=bn_cache) if train else None
    return StreamOutput(z=z, z_bn=z_bn, logits=logits, cache=cache, train=train)


def head_forward(
    head: FusedHead, z_fuse: Matrix, train: bool, update_running: bool = True
) -> HeadOutput:
    z_fuse = as_matrix(z_fuse, "z_fuse")
    if z_fuse.shape[1] != head.classifier.shape[1]:
        raise ShapeError(
            f"fused dim {z_fuse.shape[1]} does not match head dim {head.classifier.shape[1]}"
        )
    z_bn, bn_cache = _bn_forward(head.bn, z_fuse, train, update_running)
    logits = matmul(z_bn, head.classifier.T)
    return HeadOutput(z=z_fuse, z_bn=z_bn, logits=logits, bn_cache=bn_cache, train=train)


@dataclass
class StreamGrads:
    weights: list
    biases: list
    gamma: np.ndarray
    classifier: Optional[np.ndarray]


@dataclass
class HeadGrads:
    gamma: np.ndarray
    classifier: np.ndarray


def _mlp_backward(params: StreamParams, cache: StreamCache, grad_z: Matrix) -> StreamGrads:
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    g = grad_z
    last = len(params.weights) - 1
    for l in range(last, -1, -1):
        if l < last:
            g = g * (cache.pre_acts[l] > 0)
        grads_w[l] = matmul(g.T, cache.hiddens[l])
        if l < last:
            grads_b[l] = g.sum(axis=0)
        if l > 0:
            g = matmul(g, params.weights[l])
    return StreamGrads(weights=grads_w, biases=grads_b, gamma=None, classifier=None)


def stream_backward(
    params: StreamParams,
    output: StreamOutput,
    grad_z: Optional[Matrix],
    grad_logits: Optional[Matrix],
) -> StreamGrads:
    """Exact gradients for one stream.

    grad_z enters at the pre-BN embedding (triplet path); grad_logits at
    the classifier output (CE path, back through the BNNeck). Either may
    be None (treated as zero).
    """
    if output.cache is None:
        raise StateError("stream_backward requires a train-mode output with caches")
    z = output.z
    total_gz = np.zeros_like(z) if grad_z is None else np.array(grad_z, dtype=np.float64)
    if total_gz.shape != z.shape:
        raise ShapeError(f"grad_z shape {total_gz.shape} does not match z shape {z.shape}")
    grad_classifier = None
    grad_gamma = np.zeros_like(params.bn.gamma)
    if grad_logits is not None:
        if params.classifier is None:
            raise StateError("grad_logits given but the stream has no classifier")
        if grad_logits.shape != output.logits.shape:
            raise ShapeError(
                f"grad_logits shape {grad_logits.shape} does not match logits shape {output.logits.shape}"
            )
        grad_classifier = matmul(grad_logits.T, output.z_bn)
        g_zbn = matmul(grad_logits, params.classifier)
        g_from_bn, grad_gamma = _bn_backward(params.bn, output.cache.bn, g_zbn)
        total_gz = total_gz + g_from_bn
    grads = _mlp_backward(params, output.cache, total_gz)
    grads.gamma = grad_gamma
    grads.classifier = grad_classifier
    return grads


def head_backward(
    head: FusedHead,
    output: HeadOutput,
    grad_z: Optional[Matrix],
    grad_logits: Optional[Matrix],
) -> tuple[HeadGrads, Matrix]:
    """Gradients of the fused head, plus the gradient at z_fuse."""
    if output.bn_cache is None:
        raise StateError("head_backward requires a train-mode output with caches")
    total_gz = np.zeros_like(output.z) if grad_z is None else np.array(grad_z, dtype=np.float64)
    grad_gamma = np.zeros_like(head.bn.gamma)
    grad_classifier = np.zeros_like(head.classifier)
    if grad_logits is not None:
        grad_classifier = matmul(grad_logits.T, output.z_bn)
        g_zbn = matmul(grad_logits, head.classifier)
        g_from_bn, grad_gamma = _bn_backward(head.bn, output.bn_cache, g_zbn)
        total_gz = total_gz + g_from_bn
    return HeadGrads(gamma=grad_gamma, classifier=grad_classifier), total_gz


FUSED_SELECTOR = "multimodal"


def embed_dataset(
    params: ModelParams,
    ds,
    selector: Union[int, str],
    rows: Optional[np.ndarray] = None,
    normalize_first: Optional[bool] = None,
) -> Matrix:
    """Eval-mode retrieval features for dataset rows.

    selector: a stream index for unimodal features (that stream's
    post-BN z_bn), or "multimodal" for the strategy's inference rule:
    fusion strategies pass the fused pre-BN embedding through the fused
    head's BNNeck; unicat concatenates per-stream post-BN features
    (L2-normalized per stream unless normalize_first overrides).
    """
    params.validate()
    if ds.num_modalities != params.num_streams:
        raise ShapeError(
            f"dataset has {ds.num_modalities} modalities, model has {params.num_streams} streams"
        )
    if isinstance(selector, str) and selector != FUSED_SELECTOR:
        raise DataError(f"unknown selector {selector!r}; use a stream index or {FUSED_SELECTOR!r}")

    def stream_input(i: int) -> Matrix:
        x = ds.features[i]
        return x if rows is None else x[rows]

    if isinstance(selector, (int, np.integer)):
        idx = int(selector)
        if idx < 0 or idx >= params.num_streams:
            raise DataError(f"stream selector {idx} out of range [0, {params.num_streams})")
        out = stream_forward(params.streams[idx], stream_input(idx), train=False)
        return out.z_bn

    if normalize_first is None:
        normalize_first = default_normalize_first(params.strategy)
    if params.strategy.is_fusion:
        zs = [
            stream_forward(params.streams[i], stream_input(i), train=False).z
            for i in range(params.num_streams)
        ]
        z_fuse = fuse(zs, inference_fusion_op(params.strategy), normalize_first=normalize_first)
        return head_forward(params.fused, z_fuse, train=False).z_bn
    feats = [
        stream_forward(params.streams[i], stream_input(i), train=False).z_bn
        for i in range(params.num_streams)
    ]
    return fuse(feats, FusionOperator.CONCAT, normalize_first=normalize_first)


def iter_trainables(params: ModelParams) -> list[tuple[str, np.ndarray]]:
    """Deterministically ordered (key, array) pairs of trained parameters.

    Arrays are the live parameter buffers; optimizers update them in
    place. BN running statistics are buffers, not trainables.
    """
    out = []
    for i, s in enumerate(params.streams):
        for l, w in enumerate(s.weights):
            out.append((f"stream{i}.w{l}", w))
            if l < len(s.biases):
                out.append((f"stream{i}.b{l}", s.biases[l]))
        out.append((f"stream{i}.gamma", s.bn.gamma))
        if s.classifier is not None:
            out.append((f"stream{i}.classifier", s.classifier))
    if params.fused is not None:
        out.append(("fused.gamma", params.fused.bn.gamma))
        out.append(("fused.classifier", params.fused.classifier))
    return out


def grads_as_dict(params: ModelParams, stream_grads: list, head_grads) -> dict:
    """Flatten per-stream/fused gradients into the iter_trainables keys."""
    out = {}
    for i, g in enumerate(stream_grads):
        for l in range(len(g.weights)):
            out[f"stream{i}.w{l}"] = g.weights[l]
            if l < len(g.biases):
                out[f"stream{i}.b{l}"] = g.biases[l]
        out[f"stream{i}.gamma"] = g.gamma
        if g.classifier is not None:
            out[f"stream{i}.classifier"] = g.classifier
    if head_grads is not None:
        out["fused.gamma"] = head_grads.gamma
        out["fused.classifier"] = head_grads.classifier
    return out


def _model_header(params: ModelParams) -> dict:
    return {
        "strategy": params.strategy.value,
        "modality_names": list(params.modality_names),
        "num_classes": params.num_classes,
        "layer_dims": [s.layer_dims for s in params.streams],
        "stream_classifiers": params.streams[0].classifier is not None,
        "fused_dim": None if params.fused is None else int(params.fused.classifier.shape[1]),
        "bn_eps": params.streams[0].bn.eps,
        "bn_momentum": params.streams[0].bn.momentum,
    }


def _checkpoint_arrays(params: ModelParams) -> list[np.ndarray]:
    arrays = []
    for s in params.streams:
        for l, w in enumerate(s.weights):
            arrays.append(w)
            if l < len(s.biases):
                arrays.append(s.biases[l])
        arrays.extend([s.bn.gamma, s.bn.running_mean, s.bn.running_var])
        if s.classifier is not None:
            arrays.append(s.classifier)
    if params.fused is not None:
        f = params.fused
        arrays.extend([f.bn.gamma, f.bn.running_mean, f.bn.running_var, f.classifier])
    return arrays


def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned binary blob: JSON header + flat little-endian float64 arrays.

    Layout: magic b"UCCK", version u32 LE, header length u64 LE, UTF-8 JSON
    header, then per stream: for each layer W (and hidden-layer bias),
    BN gamma/running_mean/running_var, classifier if present; then the
    fused head (gamma, running stats, classifier) if present. Array order
    matches _checkpoint_arrays.
    """
    params.validate()
    header = json.dumps(_model_header(params), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in _checkpoint_arrays(params):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header: {exc}") from None
    offset = 16 + header_len

    def take(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(blob):
            raise DataError(f"{path}: checkpoint truncated")
        arr = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
        return arr

    strategy = Strategy(header["strategy"])
    num_classes = int(header["num_classes"])
    streams = []
    for dims in header["layer_dims"]:
        weights = []
        biases = []
        n_layers = len(dims) - 1
        for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            weights.append(take((fan_out, fan_in)))
            if l < n_layers - 1:
                biases.append(take((fan_out,)))
        embed = dims[-1]
        bn = BnNeck(
            gamma=take((embed,)),
            running_mean=take((embed,)),
            running_var=take((embed,)),
            eps=float(header["bn_eps"]),
            momentum=float(header["bn_momentum"]),
        )
        classifier = take((num_classes, embed)) if header["stream_classifiers"] else None
        streams.append(StreamParams(weights=weights, biases=biases, bn=bn, classifier=classifier))
    fused = None
    if header["fused_dim"] is not None:
        fd = int(header["fused_dim"])
        fused = FusedHead(
            bn=BnNeck(
                gamma=take((fd,)),
                running_mean=take((fd,)),
                running_var=take((fd,)),
                eps=float(header["bn_eps"]),
                momentum=float(header["bn_momentum"]),
            ),
            classifier=take((num_classes, fd)),
        )
    if offset != len(blob):
        raise DataError(f"{path}: {len(blob) - offset} unexpected trailing bytes")
    params = ModelParams(
        streams=streams,
        fused=fused,
        strategy=strategy,
        modality_names=[str(n) for n in header["modality_names"]],
        num_classes=num_classes,
    )
    params.validate()
    return params
