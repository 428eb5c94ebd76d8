"""Text-conditioned mask predictor with a frozen encoder and a trainable
FiLM-conditioned decoder.

The encoder is a seeded random patch projection plus mixing stack; it is
never updated, standing in for a large pretrained image encoder.  The
decoder re-mixes encoder activations (skip injection by channel concat), is
modulated per block by FiLM parameters generated from a learnable
projection over pooled hate-span embeddings, and emits per-pixel logits
whose sigmoid forms the heatmap that binarizes into the predicted mask.
"""

from __future__ import annotations

import json
import hashlib
import math
import os
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .attention import BinaryMask, Heatmap, binarize
from .errors import FormatError, TrainingError
from .numerics import Graph, Tensor, _backprop, _eval, tensor_read, tensor_write
from .redact import ImageRGB8
from .textproc import HateSpan

DEFAULT_PREDICT_TAU = 0.5
_SOFT_IOU_EPS = 1e-6
LOSS_KINDS = ("bce", "soft-iou")


@dataclass(frozen=True)
class MaskerConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 32
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    span_embed_dim: int = 32
    seed: int = 42

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "encoder_blocks",
                     "decoder_blocks", "span_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.decoder_blocks != self.encoder_blocks:
            raise ValueError("decoder_blocks must equal encoder_blocks (one skip per block)")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    @property
    def n_patches(self) -> int:
        side = self.image_size // self.patch_size
        return side * side

    @property
    def patch_values(self) -> int:
        return self.patch_size * self.patch_size


@dataclass
class MaskerModel:
    config: MaskerConfig
    frozen: dict
    params: dict


def _param_specs(config: MaskerConfig) -> list[tuple[str, tuple[int, ...], bool]]:
    """(name, shape, is_frozen) for every tensor, in creation/draw order."""
    e = config.embed_dim
    p2 = config.patch_values
    specs: list[tuple[str, tuple[int, ...], bool]] = [("enc_patch", (p2 * 3, e), True)]
    for b in range(config.encoder_blocks):
        specs.append((f"enc_mix_{b}", (e, e), True))
    specs.append(("proj", (config.span_embed_dim, e), False))
    for b in range(config.decoder_blocks):
        specs += [
            (f"film_gamma_w_{b}", (e, e), False),
            (f"film_gamma_b_{b}", (e,), False),
            (f"film_beta_w_{b}", (e, e), False),
            (f"film_beta_b_{b}", (e,), False),
            (f"mix_{b}", (3 * e, e), False),
        ]
    specs += [("out_w", (e, p2), False), ("out_b", (p2,), False)]
    return specs


def init(config: MaskerConfig) -> MaskerModel:
    """Draw every tensor from uniform(-0.1, 0.1) with the config's seed."""
    rng = np.random.default_rng(config.seed)
    frozen: dict = {}
    params: dict = {}
    for name, shape, is_frozen in _param_specs(config):
        value = Tensor(rng.uniform(-0.1, 0.1, size=shape).astype(np.float32))
        (frozen if is_frozen else params)[name] = value
    return MaskerModel(config=config, frozen=frozen, params=params)


def frozen_checksum(model: MaskerModel) -> str:
    digest = hashlib.sha256()
    for name in sorted(model.frozen):
        digest.update(name.encode("utf-8"))
        digest.update(model.frozen[name].array.tobytes())
    return digest.hexdigest()


# --- span embeddings ---------------------------------------------------------


def _word_slot(word: str, dim: int) -> tuple[int, float]:
    code = zlib.crc32(word.encode("utf-8"))
    index = code % dim
    sign = 1.0 if (code // dim) % 2 == 0 else -1.0
    return index, sign


def embed_span(span: HateSpan, dim: int) -> np.ndarray:
    """Signed hashed bag-of-words for the span, L2-normalized.

    Each word lands on a CRC-derived slot with a CRC-derived sign; if the
    signed counts cancel to zero, the whole span text hashes to a unit basis
    vector instead so every span has a norm-1 embedding.
    """
    if dim < 1:
        raise ValueError("embedding dim must be positive")
    if not span.words:
        raise ValueError("cannot embed an empty span")
    profile = np.zeros(dim, dtype=np.float64)
    for word in span.words:
        index, sign = _word_slot(word, dim)
        profile[index] += sign
    norm = float(np.linalg.norm(profile))
    if norm == 0.0:
        index, sign = _word_slot(" ".join(span.words), dim)
        profile[index] = sign
        norm = 1.0
    return (profile / norm).astype(np.float32)


def _pool(embeddings) -> np.ndarray:
    """Exact mean of embedding vectors (order-independent by construction)."""
    arr = np.asarray(embeddings, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need a nonempty sequence of equal-length vectors")
    pooled = np.array([math.fsum(arr[:, j].tolist()) for j in range(arr.shape[1])])
    return (pooled / arr.shape[0]).astype(np.float32)


def project_spans(embeddings, model: MaskerModel) -> np.ndarray:
    """Mean-pool span embeddings and apply the learnable projection."""
    pooled = _pool(embeddings)
    proj = model.params["proj"].array
    if pooled.shape[0] != proj.shape[0]:
        raise ValueError(
            f"embedding dim {pooled.shape[0]} != projection input {proj.shape[0]}"
        )
    return np.einsum("k,kj->j", pooled, proj)


def film(activation: Tensor, condition: np.ndarray, block_index: int,
         model: MaskerModel) -> Tensor:
    """Apply the block's FiLM modulation: gamma(c) * activation + beta(c)."""
    if not 0 <= block_index < model.config.decoder_blocks:
        raise ValueError(f"block index {block_index} out of range")
    cond = np.asarray(condition, dtype=np.float32)
    gamma_w = model.params[f"film_gamma_w_{block_index}"].array
    if cond.shape != (gamma_w.shape[0],):
        raise ValueError(f"condition width {cond.shape} != {(gamma_w.shape[0],)}")
    gamma = np.einsum("k,kj->j", cond, gamma_w) \
        + model.params[f"film_gamma_b_{block_index}"].array
    beta = np.einsum("k,kj->j", cond, model.params[f"film_beta_w_{block_index}"].array) \
        + model.params[f"film_beta_b_{block_index}"].array
    if activation.dims[-1] != gamma.shape[0]:
        raise ValueError(
            f"activation channels {activation.dims[-1]} != FiLM width {gamma.shape[0]}"
        )
    return Tensor(activation.array * gamma + beta)


# --- forward pieces ------------------------------------------------------------


def _patchify(plane: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) -> (n_patches, patch*patch*C), row-major patches."""
    h, w = plane.shape[:2]
    rows, cols = h // patch, w // patch
    c = plane.shape[2] if plane.ndim == 3 else 1
    grid = plane.reshape(rows, patch, cols, patch, c)
    return np.ascontiguousarray(grid.transpose(0, 2, 1, 3, 4)).reshape(
        rows * cols, patch * patch * c)


def _unpatchify(flat: np.ndarray, patch: int, size: int) -> np.ndarray:
    """(n_patches, patch*patch) -> (size, size); inverse of _patchify."""
    side = size // patch
    grid = flat.reshape(side, side, patch, patch)
    return np.ascontiguousarray(grid.transpose(0, 2, 1, 3)).reshape(size, size)


def _encode(model: MaskerModel, image01: np.ndarray):
    """Frozen forward pass: returns (final activation, per-decoder-block
    skip activations, tiled summary token)."""
    cfg = model.config
    patches = _patchify(image01, cfg.patch_size)
    act = np.einsum("ik,kj->ij", patches, model.frozen["enc_patch"].array)
    acts = []
    for b in range(cfg.encoder_blocks):
        act = np.maximum(
            np.einsum("ik,kj->ij", act, model.frozen[f"enc_mix_{b}"].array),
            np.float32(0),
        )
        acts.append(act)
    cls = np.einsum("ij->j", act) / np.float32(act.shape[0])
    cls_tile = np.tile(cls, (act.shape[0], 1))
    skips = [acts[cfg.encoder_blocks - 1 - b] for b in range(cfg.decoder_blocks)]
    return acts[-1], skips, cls_tile


def _decoder_graph(model: MaskerModel):
    """Build the trainable decoder as an autodiff graph.

    Returns (graph, handles) where handles maps the input slots, the logits
    and heatmap nodes, and each parameter name to its node id.
    """
    cfg = model.config
    g = Graph()
    handles: dict = {"param_nodes": {}}
    handles["pooled"] = g.input()
    handles["x"] = g.input()
    handles["skips"] = [g.input() for _ in range(cfg.decoder_blocks)]
    handles["cls"] = g.input()
    handles["ones"] = g.input()

    def param(name: str) -> int:
        node = g.param(name, model.params[name])
        handles["param_nodes"][name] = node
        return node

    cond = g.matmul(handles["pooled"], param("proj"))
    h = handles["x"]
    for b in range(cfg.decoder_blocks):
        gamma = g.add(g.matmul(cond, param(f"film_gamma_w_{b}")),
                      param(f"film_gamma_b_{b}"))
        beta = g.add(g.matmul(cond, param(f"film_beta_w_{b}")),
                     param(f"film_beta_b_{b}"))
        filmed = g.scale_shift(h, gamma, beta)
        cat = g.concat([filmed, handles["skips"][b], handles["cls"]], axis=1)
        h = g.relu(g.matmul(cat, param(f"mix_{b}")))
    logits = g.scale_shift(g.matmul(h, param("out_w")), handles["ones"],
                           param("out_b"))
    heat = g.sigmoid(logits)
    g.outputs = (logits, heat)
    handles["logits"] = logits
    handles["heatmap"] = heat
    return g, handles


def _instance_inputs(model: MaskerModel, handles, image: ImageRGB8,
                     embeddings) -> dict[int, Tensor]:
    cfg = model.config
    if image.dims != (cfg.image_size, cfg.image_size):
        raise ValueError(
            f"image dims {image.dims} != ({cfg.image_size}, {cfg.image_size})"
        )
    pooled = _pool(embeddings)
    if pooled.shape[0] != cfg.span_embed_dim:
        raise ValueError(
            f"span embedding dim {pooled.shape[0]} != {cfg.span_embed_dim}"
        )
    image01 = image.pixels.astype(np.float32) / np.float32(255.0)
    x, skips, cls_tile = _encode(model, image01)
    inputs = {
        handles["pooled"]: Tensor(pooled),
        handles["x"]: Tensor(x),
        handles["cls"]: Tensor(cls_tile),
        handles["ones"]: Tensor(np.ones(cfg.patch_values, dtype=np.float32)),
    }
    for node, skip in zip(handles["skips"], skips):
        inputs[node] = Tensor(skip)
    return inputs


def predict(model: MaskerModel, image: ImageRGB8, spans,
            tau: float = DEFAULT_PREDICT_TAU) -> tuple[BinaryMask, Heatmap]:
    """Run the masker on one image conditioned on its hate spans."""
    spans = list(spans)
    if not spans:
        raise ValueError("predict needs at least one span to condition on")
    embeddings = [embed_span(s, model.config.span_embed_dim) for s in spans]
    g, handles = _decoder_graph(model)
    inputs = _instance_inputs(model, handles, image, embeddings)
    vals = _eval(g, inputs)
    plane = _unpatchify(vals[handles["heatmap"]],
                        model.config.patch_size, model.config.image_size)
    heatmap = Heatmap(Tensor(plane))
    return binarize(heatmap, tau), heatmap


# --- training --------------------------------------------------------------------


@dataclass(frozen=True)
class TrainBatch:
    images: tuple
    span_embeddings: tuple
    truth_masks: tuple

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "span_embeddings", tuple(
            tuple(np.asarray(v, dtype=np.float32) for v in per_instance)
            for per_instance in self.span_embeddings))
        object.__setattr__(self, "truth_masks", tuple(self.truth_masks))
        if not (len(self.images) == len(self.span_embeddings)
                == len(self.truth_masks)):
            raise ValueError("images, span_embeddings, and truth_masks must be parallel")
        if not self.images:
            raise ValueError("batch is empty")
        for image, vectors, mask in zip(self.images, self.span_embeddings,
                                        self.truth_masks):
            if image.dims != mask.dims:
                raise ValueError(f"mask dims {mask.dims} != image dims {image.dims}")
            if not vectors:
                raise ValueError("every instance needs at least one span embedding")


def _bce_loss_and_cotangent(z: np.ndarray, p: np.ndarray,
                            y: np.ndarray) -> tuple[float, np.ndarray]:
    z64, y64 = z.astype(np.float64), y.astype(np.float64)
    per_elem = np.maximum(z64, 0.0) - z64 * y64 + np.log1p(np.exp(-np.abs(z64)))
    loss = float(per_elem.mean())
    cot = (p - y) / np.float32(z.size)
    return loss, cot


def _soft_iou_loss_and_cotangent(z: np.ndarray, p: np.ndarray,
                                 y: np.ndarray) -> tuple[float, np.ndarray]:
    p64, y64 = p.astype(np.float64), y.astype(np.float64)
    inter = float((p64 * y64).sum())
    union = float(p64.sum() + y64.sum() - inter)
    loss = 1.0 - (inter + _SOFT_IOU_EPS) / (union + _SOFT_IOU_EPS)
    d_loss_d_p = -(y64 * (union + _SOFT_IOU_EPS)
                   - (inter + _SOFT_IOU_EPS) * (1.0 - y64)) \
        / (union + _SOFT_IOU_EPS) ** 2
    cot = (d_loss_d_p * p64 * (1.0 - p64)).astype(np.float32)
    return loss, cot


def _loss_fn(loss_kind: str):
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss must be one of {LOSS_KINDS}, got {loss_kind!r}")
    return _bce_loss_and_cotangent if loss_kind == "bce" \
        else _soft_iou_loss_and_cotangent


def _prepare_instances(model: MaskerModel, handles, batches) -> list:
    """Per-instance (graph inputs, patchified targets); none of this changes
    across training steps, so it is computed once."""
    cfg = model.config
    prepared = []
    for batch in batches:
        for image, vectors, mask in zip(batch.images, batch.span_embeddings,
                                        batch.truth_masks):
            inputs = _instance_inputs(model, handles, image, vectors)
            y = _patchify(mask.bits.astype(np.float32)[..., None],
                          cfg.patch_size)
            prepared.append((inputs, y))
    if not prepared:
        raise ValueError("no training instances")
    return prepared


def _batch_step(g: Graph, handles, prepared, loss_fn,
                param_dims) -> tuple[float, dict]:
    param_nodes = handles["param_nodes"]
    totals = {name: np.zeros(dims, dtype=np.float32)
              for name, dims in param_dims.items()}
    total_loss = 0.0
    for inputs, y in prepared:
        vals = _eval(g, inputs)
        z = vals[handles["logits"]]
        p = vals[handles["heatmap"]]
        loss, cot = loss_fn(z, p, y)
        total_loss += loss
        leaf_grads = _backprop(g, vals, handles["logits"], cot)
        for name, node in param_nodes.items():
            totals[name] += leaf_grads[node]
    n = np.float32(len(prepared))
    grads = {name: acc / n for name, acc in totals.items()}
    return total_loss / len(prepared), grads


def loss_and_gradients(model: MaskerModel, batches,
                       loss_kind: str = "bce") -> tuple[float, dict]:
    """Mean loss over all instances and the averaged parameter gradients.

    This is the exact quantity one training step descends on; it is exposed
    so gradients can be checked against finite differences.
    """
    loss_fn = _loss_fn(loss_kind)
    g, handles = _decoder_graph(model)
    prepared = _prepare_instances(model, handles, batches)
    param_dims = {name: model.params[name].dims for name in handles["param_nodes"]}
    return _batch_step(g, handles, prepared, loss_fn, param_dims)


def train(model: MaskerModel, batches, steps: int, lr: float,
          loss_kind: str = "bce") -> list[float]:
    """Full-batch gradient descent on the decoder; returns loss per step."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    loss_fn = _loss_fn(loss_kind)
    g, handles = _decoder_graph(model)
    prepared = _prepare_instances(model, handles, batches)
    param_dims = {name: model.params[name].dims for name in handles["param_nodes"]}
    log: list[float] = []
    lr32 = np.float32(lr)
    for step in range(steps):
        loss, grads = _batch_step(g, handles, prepared, loss_fn, param_dims)
        if not math.isfinite(loss):
            raise TrainingError(
                f"step {step}: loss is {loss}; lower the learning rate "
                f"(last finite loss: {log[-1] if log else 'none'})"
            )
        for name, grad in grads.items():
            updated = Tensor(model.params[name].array - lr32 * grad)
            model.params[name] = updated
            g.params[name] = updated
        log.append(loss)
    return log


# --- checkpoints -----------------------------------------------------------------


def save_model(model: MaskerModel, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(asdict(model.config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for sub, tensors in (("frozen", model.frozen), ("params", model.params)):
        subdir = os.path.join(directory, sub)
        os.makedirs(subdir, exist_ok=True)
        for name, tensor in tensors.items():
            tensor_write(tensor, os.path.join(subdir, f"{name}.dht"))


def load_model(directory) -> MaskerModel:
    config_path = os.path.join(directory, "config.json")
    try:
        with open(config_path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{config_path}: invalid JSON: {exc}") from exc
    try:
        config = MaskerConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{config_path}: {exc}") from exc
    frozen: dict = {}
    params: dict = {}
    for name, shape, is_frozen in _param_specs(config):
        sub = "frozen" if is_frozen else "params"
        path = os.path.join(directory, sub, f"{name}.dht")
        if not os.path.exists(path):
            raise FormatError(f"{directory}: missing checkpoint tensor {sub}/{name}")
        tensor = tensor_read(path)
        if tensor.dims != shape:
            raise FormatError(
                f"{path}: dims {tensor.dims} do not match config shape {shape}"
            )
        (frozen if is_frozen else params)[name] = tensor
    return MaskerModel(config=config, frozen=frozen, params=params)
