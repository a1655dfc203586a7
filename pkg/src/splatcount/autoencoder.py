"""Compression autoencoder for language embeddings: a dense 512 -> 32 -> 3
encoder and 3 -> 32 -> 512 decoder with tanh hidden layers and linear
outputs, trained with mini-batch SGD (momentum 0.9) on a blended L1 +
cosine reconstruction loss. Backprop is hand-rolled numpy; the network is
small enough that a framework would be pure overhead."""

from __future__ import annotations

import dataclasses
import io
import zipfile

import numpy as np

EMBED_DIM = 512
HIDDEN_DIM = 32
LATENT_DIM = 3

WEIGHTS_FORMAT_VERSION = 1
MOMENTUM = 0.9
_COS_EPS = 1e-12


class AutoencoderError(ValueError):
    """Raised for invalid training input or corrupt weight files."""


@dataclasses.dataclass
class AutoencoderTrainConfig:
    """Knobs for fitting the compression autoencoder itself.

    The defaults are sized for small vocabularies (a handful of label
    embeddings trained full-batch), where they reach reconstruction
    cosines above 0.999."""

    learning_rate: float = 0.1
    iterations: int = 8000
    beta: float = 0.5

    def validate(self):
        if self.learning_rate <= 0:
            raise AutoencoderError("learning_rate must be positive")
        if self.iterations < 1:
            raise AutoencoderError("iterations must be >= 1")
        if not (0.0 <= self.beta <= 1.0):
            raise AutoencoderError("beta must lie in [0, 1]")
        return self


@dataclasses.dataclass
class SemanticTrainConfig:
    """Trainer knobs for the per-splat code optimizer.

    `loss_kind` selects the per-pixel reconstruction loss of the code
    optimizer: "mixed" is the blended L1 + cosine loss, "l2" is a plain
    squared error used for closed-form verification.
    """

    learning_rate: float = 1e-2
    iterations: int = 500
    lambda_sem: float = 1.0
    lambda_reg: float = 1e-4
    beta: float = 0.5
    loss_kind: str = "mixed"

    def validate(self):
        if self.learning_rate <= 0:
            raise AutoencoderError("learning_rate must be positive")
        if self.iterations < 1:
            raise AutoencoderError("iterations must be >= 1")
        if not (0.0 <= self.beta <= 1.0):
            raise AutoencoderError("beta must lie in [0, 1]")
        if self.lambda_sem < 0 or self.lambda_reg < 0:
            raise AutoencoderError("loss weights must be >= 0")
        if self.loss_kind not in ("mixed", "l2"):
            raise AutoencoderError(f"unknown loss_kind '{self.loss_kind}'")
        return self


_PARAM_NAMES = ("w1", "b1", "w2", "b2", "u1", "c1", "u2", "c2")


@dataclasses.dataclass
class Autoencoder:
    """Weights of the encoder (w1, b1, w2, b2) and decoder (u1, c1, u2, c2)."""

    w1: np.ndarray  # (D, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, d)
    b2: np.ndarray  # (d,)
    u1: np.ndarray  # (d, h)
    c1: np.ndarray  # (h,)
    u2: np.ndarray  # (h, D)
    c2: np.ndarray  # (D,)

    @property
    def dim(self) -> int:
        return self.w1.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def latent(self) -> int:
        return self.w2.shape[1]


def init_autoencoder(rng, dim=EMBED_DIM, hidden=HIDDEN_DIM,
                     latent=LATENT_DIM) -> Autoencoder:
    """Small-scale normal init keeps tanh units near their linear regime."""
    def layer(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    return Autoencoder(
        w1=layer(dim, hidden), b1=np.zeros(hidden),
        w2=layer(hidden, latent), b2=np.zeros(latent),
        u1=layer(latent, hidden), c1=np.zeros(hidden),
        u2=layer(hidden, dim), c2=np.zeros(dim))


def _as_batch(x, dim, name):
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise AutoencoderError(f"{name} must have trailing dimension {dim}, "
                               f"got shape {np.asarray(x).shape}")
    return arr, squeeze


def encode(ae: Autoencoder, x) -> np.ndarray:
    """Compress (n, D) or (D,) embeddings to latent codes."""
    arr, squeeze = _as_batch(x, ae.dim, "embeddings")
    z = np.tanh(arr @ ae.w1 + ae.b1) @ ae.w2 + ae.b2
    return z[0] if squeeze else z


def decode(ae: Autoencoder, z) -> np.ndarray:
    """Expand (n, d) or (d,) latent codes back to embedding space."""
    arr, squeeze = _as_batch(z, ae.latent, "codes")
    y = np.tanh(arr @ ae.u1 + ae.c1) @ ae.u2 + ae.c2
    return y[0] if squeeze else y


def reconstruct(ae: Autoencoder, x) -> np.ndarray:
    return decode(ae, encode(ae, x))


def reconstruction_loss_terms(y: np.ndarray, x: np.ndarray
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Per-row (mean |y - x|, 1 - cos(y, x)) for batches y, x."""
    l1 = np.mean(np.abs(y - x), axis=1)
    ny = np.linalg.norm(y, axis=1)
    nx = np.linalg.norm(x, axis=1)
    cos = np.einsum("ij,ij->i", y, x) / (np.maximum(ny, _COS_EPS)
                                         * np.maximum(nx, _COS_EPS))
    return l1, 1.0 - cos


def reconstruction_loss(ae: Autoencoder, x, beta: float) -> float:
    """Blended batch loss: beta * L1 + (1 - beta) * (1 - cosine)."""
    arr, _ = _as_batch(x, ae.dim, "embeddings")
    l1, cosd = reconstruction_loss_terms(reconstruct(ae, arr), arr)
    return float(np.mean(beta * l1 + (1.0 - beta) * cosd))


def _loss_and_grads(ae: Autoencoder, x: np.ndarray, beta: float):
    n, d = x.shape
    h1 = x @ ae.w1 + ae.b1
    a1 = np.tanh(h1)
    z = a1 @ ae.w2 + ae.b2
    h2 = z @ ae.u1 + ae.c1
    a2 = np.tanh(h2)
    y = a2 @ ae.u2 + ae.c2

    l1, cosd = reconstruction_loss_terms(y, x)
    loss = float(np.mean(beta * l1 + (1.0 - beta) * cosd))

    ny = np.maximum(np.linalg.norm(y, axis=1, keepdims=True), _COS_EPS)
    nx = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _COS_EPS)
    cos = np.sum(y * x, axis=1, keepdims=True) / (ny * nx)
    dcos_dy = x / (ny * nx) - cos * y / (ny * ny)
    dy = (beta / d) * np.sign(y - x) - (1.0 - beta) * dcos_dy
    dy /= n

    grads = {}
    grads["u2"] = a2.T @ dy
    grads["c2"] = dy.sum(axis=0)
    dh2 = (dy @ ae.u2.T) * (1.0 - a2 * a2)
    grads["u1"] = z.T @ dh2
    grads["c1"] = dh2.sum(axis=0)
    dz = dh2 @ ae.u1.T
    grads["w2"] = a1.T @ dz
    grads["b2"] = dz.sum(axis=0)
    dh1 = (dz @ ae.w2.T) * (1.0 - a1 * a1)
    grads["w1"] = x.T @ dh1
    grads["b1"] = dh1.sum(axis=0)
    return loss, grads


@dataclasses.dataclass
class AutoencoderTraining:
    """Training artifact: weights plus the per-iteration full-batch loss."""

    autoencoder: Autoencoder
    loss_history: np.ndarray  # (iterations + 1,), entry 0 is the init loss

    @property
    def final_loss(self) -> float:
        return float(self.loss_history[-1])


def train_autoencoder(vectors, config: AutoencoderTrainConfig | None = None,
                      seed: int = 0, hidden: int = HIDDEN_DIM,
                      latent: int = LATENT_DIM) -> AutoencoderTraining:
    """Fit the autoencoder to a set of embeddings.

    Args:
        vectors: (n, D) embeddings; zero rows are rejected (the cosine term
            is undefined for them) with the offending index in the message.
        config: trainer knobs; `learning_rate`, `iterations`, `beta` apply.
        seed: controls init and batch shuffling; same seed, same weights.

    Returns:
        AutoencoderTraining holding the best weights seen during training
        and the best-so-far full-batch loss after each iteration (one entry
        per iteration, plus the initial loss). Reporting the running best
        keeps the curve non-increasing even though the raw iterates ring:
        heavy-ball momentum trades transient uphill moves for much faster
        descent overall, and near convergence the L1 term's kinks make the
        raw per-step loss oscillate at the floor. The returned weights are
        always the iterate that achieved the last recorded loss.
    """
    config = (config or AutoencoderTrainConfig()).validate()
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise AutoencoderError("vectors must be a non-empty (n, D) array")
    if not np.all(np.isfinite(x)):
        raise AutoencoderError("vectors contain non-finite values")
    zero = np.where(np.linalg.norm(x, axis=1) < _COS_EPS)[0]
    if zero.size:
        raise AutoencoderError(f"vector at index {zero[0]} has zero norm; "
                               f"the cosine loss is undefined for it")

    n = x.shape[0]
    rng = np.random.default_rng(seed)
    ae = init_autoencoder(rng, dim=x.shape[1], hidden=hidden, latent=latent)
    # Start the decoder at the data mean: the cosine term's curvature grows
    # like 1/|x_hat|, so near-zero initial outputs make small-step training
    # overshoot. Anchoring the output bias keeps it well-conditioned.
    ae.c2[...] = x.mean(axis=0)
    velocity = {k: np.zeros_like(getattr(ae, k)) for k in _PARAM_NAMES}
    batch = min(64, n)
    best_loss = reconstruction_loss(ae, x, config.beta)
    best_p = {k: getattr(ae, k).copy() for k in _PARAM_NAMES}
    history = [best_loss]
    for _ in range(config.iterations):
        if n <= batch:
            _, grads = _loss_and_grads(ae, x, config.beta)
            for k in _PARAM_NAMES:
                velocity[k] = MOMENTUM * velocity[k] + grads[k]
                getattr(ae, k)[...] -= config.learning_rate * velocity[k]
        else:
            for sel in np.array_split(rng.permutation(n), -(-n // batch)):
                _, grads = _loss_and_grads(ae, x[sel], config.beta)
                for k in _PARAM_NAMES:
                    velocity[k] = MOMENTUM * velocity[k] + grads[k]
                    getattr(ae, k)[...] -= config.learning_rate * velocity[k]
        loss = reconstruction_loss(ae, x, config.beta)
        if loss < best_loss:
            best_loss = loss
            for k in _PARAM_NAMES:
                best_p[k][...] = getattr(ae, k)
        history.append(best_loss)
    for k in _PARAM_NAMES:
        getattr(ae, k)[...] = best_p[k]
    return AutoencoderTraining(autoencoder=ae,
                               loss_history=np.asarray(history))


def save_autoencoder(ae: Autoencoder, path) -> None:
    """Persist weights with a format version and the layer shapes.

    Writes an npz (zip of .npy entries) by hand with zeroed zip metadata,
    so identical weights produce identical bytes."""
    payload = {"format_version": np.int64(WEIGHTS_FORMAT_VERSION),
               "dims": np.asarray([ae.dim, ae.hidden, ae.latent],
                                  dtype=np.int64)}
    payload.update({k: getattr(ae, k) for k in _PARAM_NAMES})
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in payload.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr))
            info = zipfile.ZipInfo(name + ".npy",
                                   date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_autoencoder(path) -> Autoencoder:
    """Load weights saved by save_autoencoder, validating version/shapes."""
    with np.load(path) as data:
        missing = [k for k in ("format_version", "dims") + _PARAM_NAMES
                   if k not in data]
        if missing:
            raise AutoencoderError(f"{path}: weight file missing entries "
                                   f"{missing}")
        version = int(data["format_version"])
        if version != WEIGHTS_FORMAT_VERSION:
            raise AutoencoderError(
                f"{path}: unsupported weights format version {version}, "
                f"expected {WEIGHTS_FORMAT_VERSION}")
        dim, hidden, latent = (int(v) for v in data["dims"])
        expected = {
            "w1": (dim, hidden), "b1": (hidden,),
            "w2": (hidden, latent), "b2": (latent,),
            "u1": (latent, hidden), "c1": (hidden,),
            "u2": (hidden, dim), "c2": (dim,),
        }
        arrays = {}
        for k, shape in expected.items():
            arr = np.asarray(data[k], dtype=np.float64)
            if arr.shape != shape:
                raise AutoencoderError(
                    f"{path}: entry '{k}' has shape {arr.shape}, expected "
                    f"{shape}")
            arrays[k] = arr
    return Autoencoder(**arrays)
