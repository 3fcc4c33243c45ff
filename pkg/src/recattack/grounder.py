"""The victim grounding model.

The vision encoder cuts the image into 4x4 patches, maps every patch through a
shared affine+tanh layer, flattens the patch features and projects them with
a second affine+tanh layer to a 64-d embedding.  The decoder emits four
coordinate tokens autoregressively.  Each step sees the image embedding
(gated elementwise by the prompt), the prompt embedding and the embeddings
of all tokens emitted so far (a start token at step 0), and has its own
weights.
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import gradcore as gc
from .boxcodec import NUM_BINS, SEQ_LEN
from .scenegen import IMAGE_SHAPE, PROMPT_VOCAB, SceneAnnotation, check_prompt
from .tensorio import FormatError, check_header, read_record, write_record, VERSION

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RECCKPT\x00"


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 4
    patch_features: int = 16
    embed_dim: int = 64
    prompt_dim: int = 16
    token_dim: int = 16
    dec_hidden: int = 256
    bins: int = NUM_BINS
    steps: int = SEQ_LEN
    prompt_vocab: int = len(PROMPT_VOCAB)

    @property
    def context_dim(self) -> int:
        return self.embed_dim + 2 * self.prompt_dim

    def step_input_dim(self, j: int) -> int:
        return self.context_dim + max(j, 1) * self.token_dim

    @property
    def grid(self) -> int:
        return IMAGE_SHAPE[1] // self.patch

    @property
    def patch_dim(self) -> int:
        return IMAGE_SHAPE[0] * self.patch * self.patch


@dataclass
class GrounderModel:
    config: ModelConfig
    params: Dict[str, np.ndarray]

    def nodes(self, trainable: bool = False) -> Dict[str, gc.Node]:
        make = gc.leaf if trainable else gc.constant
        return {k: make(v) for k, v in self.params.items()}

    def copy(self) -> "GrounderModel":
        return GrounderModel(self.config, {k: v.copy() for k, v in self.params.items()})


@dataclass
class TrainConfig:
    lr: float = 2e-3
    epochs: int = 16
    batch_size: int = 32
    momentum: float = 0.9
    optimizer: str = "adam"
    cosine_decay: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid train config {self}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def _param_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    shapes = {
        "enc_w1": (cfg.patch_dim, cfg.patch_features), "enc_b1": (cfg.patch_features,),
        "enc_w2": (cfg.grid * cfg.grid * cfg.patch_features, cfg.embed_dim), "enc_b2": (cfg.embed_dim,),
        "prompt_emb": (cfg.prompt_vocab, cfg.prompt_dim),
        "gate_w": (2 * cfg.prompt_dim, cfg.embed_dim), "gate_b": (cfg.embed_dim,),
        "token_emb": (cfg.bins + 1, cfg.token_dim),
    }
    for j in range(cfg.steps):
        shapes[f"dec{j}_w"] = (cfg.step_input_dim(j), cfg.dec_hidden)
        shapes[f"dec{j}_b"] = (cfg.dec_hidden,)
        shapes[f"out{j}_w"] = (cfg.dec_hidden, cfg.bins)
        shapes[f"out{j}_b"] = (cfg.bins,)
    return shapes


def init_model(seed: int, config: ModelConfig = ModelConfig()) -> GrounderModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; zero biases; unit-scale embeddings."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith("_emb"):
            params[name] = rng.uniform(-1.0, 1.0, size=shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return GrounderModel(config, params)


# -- forward pieces --------------------------------------------------------

def _as_batch(x):
    node = x if isinstance(x, gc.Node) else gc.constant(x)
    if node.shape == IMAGE_SHAPE:
        node = gc.reshape(node, (1,) + IMAGE_SHAPE)
    if node.shape[1:] != IMAGE_SHAPE:
        raise gc.ShapeError(f"encode_image: expected images of shape {IMAGE_SHAPE}, got {node.shape}")
    return node


def encode_images(m: GrounderModel, x, p=None) -> gc.Node:
    """Embeddings (n, E) for a batch (n, 3, 32, 32) or a single image."""
    p = p or m.nodes()
    cfg = m.config
    x = _as_batch(x)
    n, c, g, k = x.shape[0], IMAGE_SHAPE[0], cfg.grid, cfg.patch
    patches = gc.reshape(gc.transpose(gc.reshape(x, (n, c, g, k, g, k)), (0, 2, 4, 1, 3, 5)),
                         (n * g * g, cfg.patch_dim))
    centered = gc.add(gc.scale(patches, 2.0), gc.constant(-np.ones(cfg.patch_dim)))
    h = gc.tanh(gc.add(gc.matmul(centered, p["enc_w1"]), p["enc_b1"]))
    h = gc.reshape(h, (n, g * g * cfg.patch_features))
    return gc.tanh(gc.add(gc.matmul(h, p["enc_w2"]), p["enc_b2"]))


def encode_image(m: GrounderModel, x) -> gc.Node:
    """f(x) for one 3x32x32 image, shape (E,)."""
    return gc.reshape(encode_images(m, x), (m.config.embed_dim,))


def _context(m, p, emb, scene_index, prompts):
    prompts = np.asarray(prompts, dtype=np.int64).reshape(-1, 2)
    words = gc.concat([gc.gather_rows(p["prompt_emb"], prompts[:, 0]),
                       gc.gather_rows(p["prompt_emb"], prompts[:, 1])])
    gate = gc.tanh(gc.add(gc.matmul(words, p["gate_w"]), p["gate_b"]))
    return gc.concat([gc.mul(gc.gather_rows(emb, scene_index), gate), words])


def _step_logits(p, j, ctx, prefix):
    """Logits for step j given the emitted prefix (one id array per earlier step, or [BOS])."""
    z = gc.concat([ctx] + [gc.gather_rows(p["token_emb"], t) for t in prefix])
    h = gc.tanh(gc.add(gc.matmul(z, p[f"dec{j}_w"]), p[f"dec{j}_b"]))
    return gc.add(gc.matmul(h, p[f"out{j}_w"]), p[f"out{j}_b"])


def _check_tokens(m, tokens):
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, m.config.steps)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= m.config.bins):
        raise ValueError(f"token ids must lie in [0, {m.config.bins - 1}]")
    return tokens


def step_log_probs(m: GrounderModel, emb: gc.Node, scene_index, prompts, tokens, p=None) -> List[gc.Node]:
    """Teacher-forced per-step log-probabilities, one (k, B) node per step."""
    p = p or m.nodes()
    tokens = _check_tokens(m, tokens)
    ctx = _context(m, p, emb, scene_index, prompts)
    bos = [np.full(len(tokens), m.config.bins, dtype=np.int64)]
    out = []
    for j in range(m.config.steps):
        prefix = [tokens[:, i] for i in range(j)] or bos
        out.append(gc.log_softmax(_step_logits(p, j, ctx, prefix)))
    return out


def batch_nll(m: GrounderModel, emb: gc.Node, scene_index, prompts, tokens, p=None) -> gc.Node:
    """Scalar sum over expressions of -sum_j log p(s_j | s_<j, x, t)."""
    tokens = _check_tokens(m, tokens)
    total = None
    for j, logp in enumerate(step_log_probs(m, emb, scene_index, prompts, tokens, p)):
        onehot = np.zeros(logp.shape)
        onehot[np.arange(len(tokens)), tokens[:, j]] = 1.0
        term = gc.sum(gc.mul(logp, gc.constant(onehot)))
        total = term if total is None else gc.add(total, term)
    return gc.scale(total, -1.0)


def sequence_nll(m: GrounderModel, x, prompt, tokens) -> gc.Node:
    """Teacher-forced NLL of one token sequence for one image and prompt."""
    check_prompt(prompt)
    if len(tokens) != m.config.steps:
        raise ValueError(f"expected {m.config.steps} tokens, got {len(tokens)}")
    emb = encode_images(m, x)
    return batch_nll(m, emb, [0], [prompt], [tokens])


def greedy_decode_batch(m: GrounderModel, images, scene_index, prompts) -> np.ndarray:
    """Argmax decoding (lowest id on ties) for every (scene_index, prompt) pair."""
    p = m.nodes()
    emb = encode_images(m, gc.constant(images), p)
    ctx = _context(m, p, emb, np.asarray(scene_index, dtype=np.int64), prompts)
    k = ctx.shape[0]
    bos = [np.full(k, m.config.bins, dtype=np.int64)]
    out = np.zeros((k, m.config.steps), dtype=np.int64)
    for j in range(m.config.steps):
        prefix = [out[:, i] for i in range(j)] or bos
        out[:, j] = np.argmax(_step_logits(p, j, ctx, prefix).value, axis=1)
    return out


def greedy_decode(m: GrounderModel, x, prompt) -> Tuple[int, ...]:
    check_prompt(prompt)
    images = np.asarray(x.value if isinstance(x, gc.Node) else x).reshape((1,) + IMAGE_SHAPE)
    return tuple(int(t) for t in greedy_decode_batch(m, images, [0], [prompt])[0])


# -- batching helpers ------------------------------------------------------

def flatten_scenes(scenes: Sequence[SceneAnnotation], targets=None):
    """Stacked images plus per-expression scene index, prompts and token targets.

    ``targets`` defaults to each object's own ground-truth box tokens.
    """
    from .boxcodec import encode_box

    images = np.stack([s.image for s in scenes])
    index, prompts, tokens = [], [], []
    for k, scene in enumerate(scenes):
        for i, obj in enumerate(scene.objects):
            index.append(k)
            prompts.append(obj.prompt)
            tokens.append(encode_box(obj.box) if targets is None else targets[k][i])
    return (images, np.asarray(index, dtype=np.int64), np.asarray(prompts, dtype=np.int64),
            np.asarray(tokens, dtype=np.int64).reshape(-1, SEQ_LEN))


def mean_nll(m: GrounderModel, scenes: Sequence[SceneAnnotation], chunk: int = 256) -> float:
    total, count = 0.0, 0
    for start in range(0, len(scenes), chunk):
        images, index, prompts, tokens = flatten_scenes(scenes[start:start + chunk])
        emb = encode_images(m, images)
        total += float(batch_nll(m, emb, index, prompts, tokens).value)
        count += len(tokens)
    return total / count


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    model: GrounderModel
    initial_loss: float
    epoch_losses: List[float] = field(default_factory=list)


def train(m: GrounderModel, scenes: Sequence[SceneAnnotation], cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam (or heavy-ball SGD) on mean sequence NLL, with optional cosine lr decay.

    Batches are groups of ``cfg.batch_size`` scenes in a seeded shuffled order;
    the loss averages over all expressions in the batch.
    """
    scenes = list(scenes)
    if not scenes:
        raise ValueError("cannot train on an empty split")
    model = m.copy()
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    second = {k: np.zeros_like(v) for k, v in model.params.items()}
    t = 0
    total_steps = cfg.epochs * -(-len(scenes) // cfg.batch_size)
    result = TrainResult(model, initial_loss=mean_nll(model, scenes))
    logger.info("initial loss %.4f", result.initial_loss)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [scenes[i] for i in order[start:start + cfg.batch_size]]
            images, index, prompts, tokens = flatten_scenes(batch)
            p = model.nodes(trainable=True)
            emb = encode_images(model, gc.constant(images), p)
            loss = gc.scale(batch_nll(model, emb, index, prompts, tokens, p), 1.0 / len(tokens))
            value = float(loss.value)
            if not np.isfinite(value):
                raise FloatingPointError(f"training diverged at epoch {epoch}, batch {start // cfg.batch_size}")
            names = list(p)
            grads = gc.backward(loss, wrt=[p[k] for k in names])
            lr = cfg.lr
            if cfg.cosine_decay:
                lr = 0.5 * cfg.lr * (1.0 + np.cos(np.pi * t / total_steps))
            t += 1
            for name, g in zip(names, grads):
                if cfg.optimizer == "adam":
                    velocity[name] = 0.9 * velocity[name] + 0.1 * g
                    second[name] = 0.999 * second[name] + 0.001 * g * g
                    mhat = velocity[name] / (1 - 0.9 ** t)
                    vhat = second[name] / (1 - 0.999 ** t)
                    model.params[name] = model.params[name] - lr * mhat / (np.sqrt(vhat) + 1e-8)
                else:
                    velocity[name] = cfg.momentum * velocity[name] - lr * g
                    model.params[name] = model.params[name] + velocity[name]
            total += value * len(tokens)
            count += len(tokens)
        result.epoch_losses.append(total / count)
        logger.info("epoch %d loss %.4f", epoch, result.epoch_losses[-1])
    return result


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(m: GrounderModel, path) -> None:
    meta = json.dumps(asdict(m.config), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<I", len(meta)) + meta)
        fh.write(struct.pack("<I", len(m.params)))
        for name in sorted(m.params):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            write_record(fh, m.params[name], dtype="<f8")


def load_checkpoint(path) -> GrounderModel:
    with open(path, "rb") as fh:
        check_header(fh, CHECKPOINT_MAGIC, str(path))
        try:
            (n,) = struct.unpack("<I", fh.read(4))
            config = ModelConfig(**json.loads(fh.read(n).decode("utf-8")))
            (count,) = struct.unpack("<I", fh.read(4))
            params = {}
            for _ in range(count):
                (n,) = struct.unpack("<H", fh.read(2))
                name = fh.read(n).decode("utf-8")
                params[name] = read_record(fh)
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}: corrupt checkpoint: {exc}") from None
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after checkpoint")
    expected = _param_shapes(config)
    if {k: v.shape for k, v in params.items()} != expected:
        raise FormatError(f"{path}: parameter set does not match the stored config")
    return GrounderModel(config, params)
