"""Paired variational encoders with a shared classifier.

Two identical MLP encoders map inputs from the abundant and the scarce
domain into one embedding space. A Gaussian head on each encoder turns an
embedding into a diagonal Gaussian (mu, sigma) over the embedding
dimensions, with sigma parameterized as exp(log_sigma) so it stays positive
without clamping. Training pulls the two domains together with an L1 +
KL bridging loss on same-class pairs, while a single classifier consumes the
scarce-domain embedding directly and a reparameterized sample from the
abundant-domain distribution. The sampled point is detached before the L1
distance so only the scarce-domain encoder is regularized toward the learnt
distribution; the distribution itself is shaped by the KL and the
classification loss alone.

Inference never samples: the scarce-domain path classifies the embedding,
the abundant-domain path classifies the head mean.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import GraphError, ShapeError, Tensor, constant
from .nn import ConfigError, MlpParams, cross_entropy_rows, init_mlp, linear, mlp_forward


class GradientStopError(GraphError):
    """The bridging loss was handed a sample that is not a gradient barrier."""


class LabelMismatchError(ValueError):
    """A training pair carried different labels for its two sides."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or from an unknown format version."""


@dataclass
class VEHyper:
    """Loss weights: total = alpha * entropy + gamma * (L1 + kl_sign*beta*KL).

    `kl_sign` selects the direction of the KL term inside the bridging loss:
    +1 shrinks the divergence between the two heads (the default), -1 grows
    it. `n_samples` averages the sample-dependent terms over several
    reparameterized draws per pair.
    """

    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1.0
    kl_sign: float = 1.0
    n_samples: int = 1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.kl_sign not in (-1.0, 1.0, -1, 1):
            raise ConfigError(f"kl_sign must be +1 or -1, got {self.kl_sign}")


@dataclass
class DiagonalGaussian:
    """Per-dimension Gaussian over the embedding space; sigma = exp(log_sigma)."""

    mu: Tensor
    log_sigma: Tensor

    def sigma(self) -> Tensor:
        return self.log_sigma.exp()


class GaussianHead:
    """Two linear maps from an embedding to (mu, log_sigma)."""

    def __init__(self, w_mu: Tensor, b_mu: Tensor, w_ls: Tensor, b_ls: Tensor):
        self.w_mu = w_mu
        self.b_mu = b_mu
        self.w_ls = w_ls
        self.b_ls = b_ls

    def parameters(self) -> list[Tensor]:
        return [self.w_mu, self.b_mu, self.w_ls, self.b_ls]

    def weight_tensors(self) -> set[int]:
        return {id(self.w_mu), id(self.w_ls)}


def init_gaussian_head(rng: np.random.Generator, embed_dim: int) -> GaussianHead:
    mu = init_mlp(rng, embed_dim, (), embed_dim).layers[0]
    ls = init_mlp(rng, embed_dim, (), embed_dim).layers[0]
    return GaussianHead(mu[0], mu[1], ls[0], ls[1])


class VEModel:
    """Source/target encoder pair, Gaussian heads, and the shared classifier.

    "source" is the scarce (few real examples) side whose embedding feeds
    the classifier directly; "target" is the side whose learnt distribution
    is sampled. Both encoders share one architecture, never weights.
    """

    def __init__(self, encoder_source: MlpParams, encoder_target: MlpParams,
                 head_source: GaussianHead, head_target: GaussianHead,
                 cls_w: Tensor, cls_b: Tensor, hyper: VEHyper):
        if encoder_source.dims != encoder_target.dims:
            raise ConfigError(
                f"encoders must share one architecture, got {encoder_source.dims} "
                f"vs {encoder_target.dims}"
            )
        self.encoder_source = encoder_source
        self.encoder_target = encoder_target
        self.head_source = head_source
        self.head_target = head_target
        self.cls_w = cls_w
        self.cls_b = cls_b
        self.hyper = hyper

    @property
    def input_dim(self) -> int:
        return self.encoder_source.input_dim

    @property
    def embed_dim(self) -> int:
        return self.encoder_source.output_dim

    @property
    def n_classes(self) -> int:
        return self.cls_w.shape[1]

    def source_parameters(self) -> list[Tensor]:
        return self.encoder_source.parameters() + self.head_source.parameters()

    def target_parameters(self) -> list[Tensor]:
        return self.encoder_target.parameters() + self.head_target.parameters()

    def classifier_parameters(self) -> list[Tensor]:
        return [self.cls_w, self.cls_b]

    def parameters(self) -> list[Tensor]:
        return (self.source_parameters() + self.target_parameters()
                + self.classifier_parameters())

    def decay_ids(self) -> set[int]:
        ids = self.encoder_source.weight_tensors() | self.encoder_target.weight_tensors()
        ids |= self.head_source.weight_tensors() | self.head_target.weight_tensors()
        ids.add(id(self.cls_w))
        return ids


def init_ve_model(rng: np.random.Generator, input_dim: int,
                  hidden_dims: tuple[int, ...], embed_dim: int, n_classes: int,
                  hyper: VEHyper | None = None) -> VEModel:
    """Seeded init; the two encoders draw independent weights."""
    hyper = hyper or VEHyper()
    enc_s = init_mlp(rng, input_dim, hidden_dims, embed_dim)
    enc_t = init_mlp(rng, input_dim, hidden_dims, embed_dim)
    head_s = init_gaussian_head(rng, embed_dim)
    head_t = init_gaussian_head(rng, embed_dim)
    cls = init_mlp(rng, embed_dim, (), n_classes).layers[0]
    return VEModel(enc_s, enc_t, head_s, head_t, cls[0], cls[1], hyper)


class ClassifierModel:
    """Single encoder plus linear classifier, for the plain-classification runs."""

    def __init__(self, encoder: MlpParams, cls_w: Tensor, cls_b: Tensor):
        self.encoder = encoder
        self.cls_w = cls_w
        self.cls_b = cls_b

    @property
    def input_dim(self) -> int:
        return self.encoder.input_dim

    @property
    def embed_dim(self) -> int:
        return self.encoder.output_dim

    @property
    def n_classes(self) -> int:
        return self.cls_w.shape[1]

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + [self.cls_w, self.cls_b]

    def decay_ids(self) -> set[int]:
        ids = self.encoder.weight_tensors()
        ids.add(id(self.cls_w))
        return ids


def init_classifier_model(rng: np.random.Generator, input_dim: int,
                          hidden_dims: tuple[int, ...], embed_dim: int,
                          n_classes: int) -> ClassifierModel:
    enc = init_mlp(rng, input_dim, hidden_dims, embed_dim)
    cls = init_mlp(rng, embed_dim, (), n_classes).layers[0]
    return ClassifierModel(enc, cls[0], cls[1])


# -- forward pieces -------------------------------------------------------

def gaussian_head(e: Tensor, head: GaussianHead) -> DiagonalGaussian:
    """Map embeddings (rows) to a diagonal Gaussian per row."""
    if e.values.ndim != 2 or e.shape[1] != head.w_mu.shape[0]:
        raise ShapeError(
            f"gaussian_head: embedding shape {e.shape} vs head dim {head.w_mu.shape[0]}"
        )
    return DiagonalGaussian(mu=linear(e, head.w_mu, head.b_mu),
                            log_sigma=linear(e, head.w_ls, head.b_ls))


def reparameterize(dist: DiagonalGaussian, epsilon: np.ndarray) -> Tensor:
    """z = mu + sigma * epsilon; gradient reaches mu and log_sigma only."""
    eps = constant(np.asarray(epsilon, dtype=np.float64))
    if eps.shape != dist.mu.shape:
        raise ShapeError(f"epsilon shape {eps.shape} vs mu shape {dist.mu.shape}")
    return dist.mu + dist.sigma() * eps


def kl_diag_gaussian(p: DiagonalGaussian, q: DiagonalGaussian) -> Tensor:
    """KL(p || q) for diagonal Gaussians, summed over the last axis.

    For row-batched distributions the result has one entry per row.
    """
    if p.mu.shape != q.mu.shape:
        raise ShapeError(f"KL: dimension mismatch {p.mu.shape} vs {q.mu.shape}")
    lp, lq = p.log_sigma, q.log_sigma
    diff = p.mu - q.mu
    var_ratio = (lp.scale(2.0) - lq.scale(2.0)).exp()
    sq_term = (diff * diff) * lq.scale(-2.0).exp()
    per_dim = (lq - lp) + (var_ratio + sq_term).scale(0.5) + (-0.5)
    axis = per_dim.values.ndim - 1
    return per_dim.sum(axis=axis) if per_dim.values.ndim > 1 else per_dim.sum()


def dist_loss(e_src: Tensor, z_tgt: Tensor, p_src: DiagonalGaussian,
              p_tgt: DiagonalGaussian, beta: float, kl_sign: float = 1.0
              ) -> tuple[Tensor, Tensor, Tensor]:
    """Bridging loss: mean |e_src - z_tgt| + kl_sign * beta * KL(p_src || p_tgt).

    `z_tgt` must be the detached sample so the L1 distance regularizes only
    the source side. Returns (total, l1_term, kl_term).
    """
    if not z_tgt.barrier:
        raise GradientStopError(
            "dist_loss requires the detached sample; call z.detach() first"
        )
    if e_src.shape != z_tgt.shape:
        raise ShapeError(f"dist_loss: {e_src.shape} vs {z_tgt.shape}")
    l1 = (e_src - z_tgt).abs().mean()
    kl = kl_diag_gaussian(p_src, p_tgt).mean()
    return l1 + kl.scale(kl_sign * beta), l1, kl


def entropy_loss(logits_src: Tensor, logits_tgt: Tensor, y: np.ndarray,
                 y_tgt: np.ndarray | None = None) -> Tensor:
    """Sum of the two classification losses through the shared classifier.

    `y` labels both paths; passing a differing `y_tgt` is an error since the
    pair must share its class.
    """
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y_tgt is not None and not np.array_equal(y, np.atleast_1d(np.asarray(y_tgt))):
        raise LabelMismatchError("pair labels differ between source and target side")
    return cross_entropy_rows(logits_src, y) + cross_entropy_rows(logits_tgt, y)


@dataclass
class LossBreakdown:
    """Scalar values of each loss term for one step."""

    delta_entropy: float
    delta_dist: float
    l1_term: float
    kl_term: float
    delta_ve: float


def ve_loss(model: VEModel, x_src: np.ndarray, x_tgt: np.ndarray, y: np.ndarray,
            rng: np.random.Generator, detach_enabled: bool = True
            ) -> tuple[Tensor, LossBreakdown]:
    """Assemble the combined loss for a batch of same-class pairs.

    Returns the scalar loss tensor (one graph, ready for backward) plus the
    breakdown. `detach_enabled=False` is a self-check hook that skips the
    gradient stop so tests can prove the stop matters; never use it to train.
    """
    hyper = model.hyper
    x_src = np.atleast_2d(np.asarray(x_src, dtype=np.float64))
    x_tgt = np.atleast_2d(np.asarray(x_tgt, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))

    e_src = mlp_forward(model.encoder_source, constant(x_src))
    e_tgt = mlp_forward(model.encoder_target, constant(x_tgt))
    p_src = gaussian_head(e_src, model.head_source)
    p_tgt = gaussian_head(e_tgt, model.head_target)
    logits_src = linear(e_src, model.cls_w, model.cls_b)

    kl = kl_diag_gaussian(p_src, p_tgt).mean()

    ce_src = cross_entropy_rows(logits_src, y)
    ce_tgt_terms = []
    l1_terms = []
    for _ in range(hyper.n_samples):
        eps = rng.standard_normal(size=p_tgt.mu.shape)
        z = reparameterize(p_tgt, eps)
        logits_tgt = linear(z, model.cls_w, model.cls_b)
        ce_tgt_terms.append(cross_entropy_rows(logits_tgt, y))
        z_for_l1 = z.detach() if detach_enabled else z
        l1_terms.append((e_src - z_for_l1).abs().mean())

    inv_n = 1.0 / hyper.n_samples
    ce_tgt = _sum_tensors(ce_tgt_terms).scale(inv_n)
    l1 = _sum_tensors(l1_terms).scale(inv_n)

    d_entropy = ce_src + ce_tgt
    d_dist = l1 + kl.scale(hyper.kl_sign * hyper.beta)
    total = d_entropy.scale(hyper.alpha) + d_dist.scale(hyper.gamma)

    breakdown = LossBreakdown(
        delta_entropy=d_entropy.item(),
        delta_dist=d_dist.item(),
        l1_term=l1.item(),
        kl_term=kl.item(),
        delta_ve=total.item(),
    )
    return total, breakdown


def _sum_tensors(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc


# -- inference ------------------------------------------------------------

def infer(model: VEModel | ClassifierModel, x: np.ndarray,
          encoder: str = "source") -> np.ndarray:
    """Deterministic logits for `x` (single row or batch); never samples.

    For the paired model, "source" classifies the source embedding and
    "target" classifies the target head's mean.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    rows = constant(np.atleast_2d(arr))

    if isinstance(model, ClassifierModel):
        logits = linear(mlp_forward(model.encoder, rows), model.cls_w, model.cls_b)
    elif encoder == "source":
        e = mlp_forward(model.encoder_source, rows)
        logits = linear(e, model.cls_w, model.cls_b)
    elif encoder == "target":
        e = mlp_forward(model.encoder_target, rows)
        mu = gaussian_head(e, model.head_target).mu
        logits = linear(mu, model.cls_w, model.cls_b)
    else:
        raise ConfigError(f"encoder must be 'source' or 'target', got {encoder!r}")

    out = logits.values
    return out[0] if single else out


def embed(model: VEModel | ClassifierModel, x: np.ndarray,
          encoder: str = "source", use_mu: bool = False) -> np.ndarray:
    """Feature-layer embeddings for `x`; `use_mu` returns the head mean instead."""
    rows = constant(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if isinstance(model, ClassifierModel):
        return mlp_forward(model.encoder, rows).values
    enc = model.encoder_source if encoder == "source" else model.encoder_target
    head = model.head_source if encoder == "source" else model.head_target
    e = mlp_forward(enc, rows)
    if use_mu:
        return gaussian_head(e, head).mu.values
    return e.values


# -- checkpoint io --------------------------------------------------------

_FORMAT_ID = "varenc-checkpoint"
_FORMAT_VERSION = 1


def _model_arrays(model: VEModel | ClassifierModel) -> list[np.ndarray]:
    """Parameter arrays in declaration order."""
    return [p.values for p in model.parameters()]


def _header(model: VEModel | ClassifierModel) -> dict:
    if isinstance(model, VEModel):
        enc = model.encoder_source
        return {
            "format": _FORMAT_ID,
            "version": _FORMAT_VERSION,
            "kind": "ve",
            "input_dim": enc.input_dim,
            "hidden_dims": list(enc.hidden_dims),
            "embed_dim": enc.output_dim,
            "n_classes": model.n_classes,
            "hyper": asdict(model.hyper),
        }
    return {
        "format": _FORMAT_ID,
        "version": _FORMAT_VERSION,
        "kind": "classifier",
        "input_dim": model.encoder.input_dim,
        "hidden_dims": list(model.encoder.hidden_dims),
        "embed_dim": model.encoder.output_dim,
        "n_classes": model.n_classes,
        "hyper": {},
    }


def save_checkpoint(model: VEModel | ClassifierModel, path: str | Path) -> None:
    """Versioned header line, then float64 little-endian parameter arrays."""
    path = Path(path)
    buf = io.BytesIO()
    buf.write(json.dumps(_header(model), sort_keys=True).encode("utf-8"))
    buf.write(b"\n")
    for arr in _model_arrays(model):
        buf.write(arr.astype("<f8", copy=False).tobytes())
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> VEModel | ClassifierModel:
    """Rebuild a model bitwise-identically from `save_checkpoint` output."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format") != _FORMAT_ID:
        raise CheckpointError(f"{path}: not a {_FORMAT_ID} file")
    if header.get("version") != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('version')}")

    rng = np.random.default_rng(0)
    kind = header.get("kind")
    dims = (header["input_dim"], tuple(header["hidden_dims"]),
            header["embed_dim"], header["n_classes"])
    if kind == "ve":
        model = init_ve_model(rng, dims[0], dims[1], dims[2], dims[3],
                              VEHyper(**header["hyper"]))
    elif kind == "classifier":
        model = init_classifier_model(rng, dims[0], dims[1], dims[2], dims[3])
    else:
        raise CheckpointError(f"{path}: unknown model kind {kind!r}")

    body = raw[nl + 1:]
    offset = 0
    for p in model.parameters():
        n = p.values.size * 8
        chunk = body[offset:offset + n]
        if len(chunk) != n:
            raise CheckpointError(
                f"{path}: truncated at byte {nl + 1 + offset}, "
                f"needed {n} bytes for shape {p.values.shape}"
            )
        p.values = np.frombuffer(chunk, dtype="<f8").reshape(p.values.shape).copy()
        offset += n
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return model
