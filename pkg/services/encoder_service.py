# services/encoder_service.py

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from errors import DimensionMismatch, EmptyCaption, NonFinite, UnknownToken, ZeroNorm
from models import CheckpointFile

logger = logging.getLogger(__name__)

ZERO_NORM_EPS = 1e-12
INIT_TEMPERATURE = 0.07
INIT_RANGE = 0.1
TENSOR_NAMES = ("E", "W_t", "b_t", "W_i", "b_i", "log_tau")


@dataclass
class ModelParams:
    """
    Dual encoder parameters.

    E:    (V, d_e) token embeddings
    W_t:  (d, d_e) text projection,  b_t: (d,)
    W_i:  (d, d_x) image projection, b_i: (d,)
    log_tau: 0-d array, temperature tau = exp(log_tau)
    """
    E: np.ndarray
    W_t: np.ndarray
    b_t: np.ndarray
    W_i: np.ndarray
    b_i: np.ndarray
    log_tau: np.ndarray

    def __post_init__(self):
        # arithmetic on 0-d arrays yields numpy scalars; keep every field an ndarray
        for name in TENSOR_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau))

    @property
    def inv_tau(self) -> float:
        return float(np.exp(-self.log_tau))

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]

    @property
    def token_dim(self) -> int:
        return self.E.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.W_t.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W_i.shape[1]

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: arr.copy() for name, arr in self.arrays().items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{name: np.zeros_like(arr) for name, arr in self.arrays().items()})

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in TENSOR_NAMES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for arr in self.arrays().values())


@dataclass
class Embedding:
    vector: np.ndarray  # unit L2 norm
    norm: float  # pre-normalization norm


@dataclass
class EncodedBatch:
    """Forward cache for a stack of inputs of one modality."""
    u: np.ndarray  # (n, d) unit vectors
    norms: np.ndarray  # (n,)
    inputs: np.ndarray  # (n, d_e) token means, or (n, d_x) features


def init_params(vocab_size: int, token_dim: int, embed_dim: int, feature_dim: int, seed: int) -> ModelParams:
    """Entries i.i.d. uniform in [-0.1, 0.1]; tau starts at 0.07."""
    rng = np.random.default_rng(seed)

    def draw(*shape: int) -> np.ndarray:
        return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)

    return ModelParams(
        E=draw(vocab_size, token_dim),
        W_t=draw(embed_dim, token_dim),
        b_t=draw(embed_dim),
        W_i=draw(embed_dim, feature_dim),
        b_i=draw(embed_dim),
        log_tau=np.array(math.log(INIT_TEMPERATURE)),
    )


def _normalize_rows(z: np.ndarray) -> EncodedBatch:
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms < ZERO_NORM_EPS):
        raise ZeroNorm(f"Encoder: {int(np.sum(norms < ZERO_NORM_EPS))} embedding(s) with norm below {ZERO_NORM_EPS}")
    return EncodedBatch(u=z / norms[:, None], norms=norms, inputs=np.empty(0))


def _check_ids(params: ModelParams, ids: np.ndarray) -> None:
    if ids.size == 0:
        raise EmptyCaption("Encoder: cannot encode an empty token list")
    if np.any(ids < 0) or np.any(ids >= params.vocab_size):
        raise UnknownToken(f"Encoder: token id outside [0, {params.vocab_size})")


def token_means(params: ModelParams, id_lists: Sequence[np.ndarray]) -> np.ndarray:
    means = np.empty((len(id_lists), params.token_dim))
    for row, ids in enumerate(id_lists):
        ids = np.asarray(ids, dtype=np.int64)
        _check_ids(params, ids)
        means[row] = params.E[ids].mean(axis=0)
    return means


def forward_text(params: ModelParams, id_lists: Sequence[np.ndarray]) -> EncodedBatch:
    means = token_means(params, id_lists)
    enc = _normalize_rows(means @ params.W_t.T + params.b_t)
    enc.inputs = means
    return enc


def forward_image(params: ModelParams, features: np.ndarray) -> EncodedBatch:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != params.feature_dim:
        raise DimensionMismatch(f"Encoder: feature length {features.shape[1]} != d_x {params.feature_dim}")
    if not np.all(np.isfinite(features)):
        raise NonFinite("Encoder: image feature contains NaN/Inf")
    enc = _normalize_rows(features @ params.W_i.T + params.b_i)
    enc.inputs = features
    return enc


def _normalize_backward(enc: EncodedBatch, d_u: np.ndarray) -> np.ndarray:
    """d/dz of u = z/||z||."""
    radial = np.sum(enc.u * d_u, axis=1, keepdims=True)
    return (d_u - enc.u * radial) / enc.norms[:, None]


def backward_text(params: ModelParams, id_lists: Sequence[np.ndarray], enc: EncodedBatch, d_u: np.ndarray, grads: ModelParams) -> None:
    """Accumulates dL/dE, dL/dW_t, dL/db_t into `grads`."""
    d_z = _normalize_backward(enc, d_u)
    grads.W_t += d_z.T @ enc.inputs
    grads.b_t += d_z.sum(axis=0)
    d_means = d_z @ params.W_t
    for row, ids in enumerate(id_lists):
        ids = np.asarray(ids, dtype=np.int64)
        np.add.at(grads.E, ids, d_means[row] / len(ids))


def backward_image(params: ModelParams, enc: EncodedBatch, d_u: np.ndarray, grads: ModelParams) -> None:
    d_z = _normalize_backward(enc, d_u)
    grads.W_i += d_z.T @ enc.inputs
    grads.b_i += d_z.sum(axis=0)


def encode_text(params: ModelParams, tokens: Sequence[int]) -> Embedding:
    ids = np.asarray(tokens, dtype=np.int64)
    _check_ids(params, ids)
    z = params.W_t @ params.E[ids].mean(axis=0) + params.b_t
    return _to_embedding(z)


def encode_image(params: ModelParams, feature: Sequence[float]) -> Embedding:
    x = np.asarray(feature, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.feature_dim:
        raise DimensionMismatch(f"Encoder: feature shape {x.shape} != ({params.feature_dim},)")
    if not np.all(np.isfinite(x)):
        raise NonFinite("Encoder: image feature contains NaN/Inf")
    return _to_embedding(params.W_i @ x + params.b_i)


def _to_embedding(z: np.ndarray) -> Embedding:
    norm = float(np.linalg.norm(z))
    vector = z / norm if norm >= ZERO_NORM_EPS else np.zeros_like(z)
    return Embedding(vector=vector, norm=norm)


def cosine(a: Embedding, b: Embedding) -> float:
    if a.norm < ZERO_NORM_EPS or b.norm < ZERO_NORM_EPS:
        raise ZeroNorm("Encoder: similarity of a zero-norm embedding")
    return float(a.vector @ b.vector)


def similarity(params: ModelParams, a: Embedding, b: Embedding) -> float:
    """S(a, b) = cos(a, b) / tau."""
    return cosine(a, b) * params.inv_tau


def similarity_matrix(params: ModelParams, images: Sequence[Sequence[float]], texts: Sequence[Sequence[int]]) -> np.ndarray:
    """Entry (i, j) = S(image_i, text_j); rectangular shapes allowed."""
    if len(images) == 0 or len(texts) == 0:
        return np.zeros((len(images), len(texts)))
    img = forward_image(params, np.asarray(images, dtype=np.float64))
    txt = forward_text(params, [np.asarray(t, dtype=np.int64) for t in texts])
    return (img.u @ txt.u.T) * params.inv_tau


# --- checkpoint container ---

def params_to_checkpoint(params: ModelParams, vocabulary: List[str], text_ngrams: int, step: int = 0, **extra) -> CheckpointFile:
    return CheckpointFile(
        vocab_size=params.vocab_size,
        token_dim=params.token_dim,
        embed_dim=params.embed_dim,
        feature_dim=params.feature_dim,
        text_ngrams=text_ngrams,
        vocabulary=list(vocabulary),
        tensors={name: params.arrays()[name].ravel().tolist() for name in TENSOR_NAMES if name != "log_tau"},
        log_tau=float(params.log_tau),
        step=step,
        **extra,
    )


def params_from_checkpoint(ckpt: CheckpointFile) -> ModelParams:
    V, d_e, d, d_x = ckpt.vocab_size, ckpt.token_dim, ckpt.embed_dim, ckpt.feature_dim
    shapes = {"E": (V, d_e), "W_t": (d, d_e), "b_t": (d,), "W_i": (d, d_x), "b_i": (d,)}
    arrays = {}
    for name, shape in shapes.items():
        flat = np.asarray(ckpt.tensors.get(name, []), dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise DimensionMismatch(f"Checkpoint: tensor {name} has {flat.size} entries, expected shape {shape}")
        arrays[name] = flat.reshape(shape)
    return ModelParams(log_tau=np.array(float(ckpt.log_tau)), **arrays)
