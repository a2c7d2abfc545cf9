"""Transfer-learning loop: BCE loss, Adam, freeze policies, best-dev snapshot.

Three freeze policies control which parameters move: FC (head only),
E_FC (head plus patch projection, class token, positional embedding),
ALL (everything). Frozen parameters stay bit-identical to their initial
values. Shuffling and flip augmentation draw from separate seeded
streams, and per-sample gradients are combined in a fixed order, so a
run is bit-reproducible for any worker count.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import vit
from .data import Manifest, Protocol
from .errors import ArgumentError, ContractError, ProtocolError, TrainingDiverged, VitPadIOError
from .metrics import ScoreRecord, ScoreSet
from .preprocess import EYE_X, EYE_Y, align_crop, hflip, normalize, read_ppm
from .tensor import Tape, Tensor, backprop, sigmoid
from .util import parallel_map

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

POLICIES = ("FC", "E_FC", "ALL")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 20
    flip_prob: float = 0.5
    policy: str = "FC"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ArgumentError("learning_rate must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ArgumentError("batch_size and epochs must be >= 1")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ArgumentError(f"flip_prob must lie in [0,1], got {self.flip_prob}")
        if self.policy not in POLICIES:
            raise ArgumentError(f"unknown policy '{self.policy}' (expected one of {POLICIES})")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)  # per epoch
    dev_loss: list = field(default_factory=list)  # per epoch
    initial_dev_loss: float = None
    best_epoch: int = -1  # 0-based index into the per-epoch lists


def bce_loss(logit: float, label: int) -> float:
    """Binary cross-entropy on a raw logit, in the stable form
    max(z,0) - z*y + log(1 + exp(-|z|))."""
    z = float(logit)
    y = float(label)
    return max(z, 0.0) - z * y + math.log1p(math.exp(-abs(z)))


def select_trainable(policy: str, cfg: vit.ViTConfig = None) -> frozenset:
    """Parameter names a policy adapts; ALL needs the config to enumerate names."""
    if policy == "FC":
        return frozenset({"head.weight", "head.bias"})
    if policy == "E_FC":
        return frozenset({"head.weight", "head.bias",
                          "patch_proj.weight", "patch_proj.bias",
                          "cls_token", "pos_embed"})
    if policy == "ALL":
        if cfg is None:
            raise ArgumentError("policy ALL needs a ViTConfig to enumerate parameter names")
        return frozenset(vit.param_shapes(cfg))
    raise ArgumentError(f"unknown policy '{policy}' (expected one of {POLICIES})")


def init_adam_state(params, trainable) -> AdamState:
    state = AdamState()
    for name in sorted(trainable):
        state.m[name] = np.zeros_like(params[name].data)
        state.v[name] = np.zeros_like(params[name].data)
    return state


def adam_step(params, grads, state: AdamState, cfg: TrainConfig):
    """One coupled-L2 Adam update over the trainable parameters.

    g <- g + weight_decay * theta, then the standard first/second moment
    update with bias correction. Returns fresh (params, state); frozen
    entries are carried over untouched.
    """
    for name in state.m:
        if name not in grads:
            raise ContractError(f"missing gradient for trainable parameter '{name}'")
    t = state.t + 1
    new_params = dict(params)
    new_state = AdamState(t=t)
    corr1 = 1.0 - ADAM_BETA1 ** t
    corr2 = 1.0 - ADAM_BETA2 ** t
    for name in state.m:
        theta = params[name].data
        g = grads[name].data if isinstance(grads[name], Tensor) else np.asarray(grads[name])
        g = g + cfg.weight_decay * theta
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        updated = theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_params[name] = Tensor(updated, name=name, trainable=True)
        new_state.m[name] = m
        new_state.v[name] = v
    return new_params, new_state


def _label01(sample) -> int:
    return 1 if sample.label == "bonafide" else 0


def _load_crop(manifest: Manifest, sample, image_size: int, eye_x: float, eye_y: float):
    try:
        raw = read_ppm(manifest.resolve_path(sample))
    except VitPadIOError as exc:
        raise VitPadIOError(f"sample '{sample.sample_id}': {exc}") from exc
    crop = align_crop(raw, sample.as_landmarks(), out_size=image_size, eye_x=eye_x, eye_y=eye_y)
    return normalize(crop).data


def _sample_logit(params, vit_cfg, pixels) -> float:
    trace = vit.forward(Tensor(pixels), params, vit_cfg)
    return trace.logit


def train(manifest: Manifest, protocol: Protocol, init_weights, vit_cfg: vit.ViTConfig,
          train_cfg: TrainConfig, eye_x: float = EYE_X, eye_y: float = EYE_Y):
    """Fine-tune and return (best-epoch parameters, TrainHistory).

    Mini-batches are reshuffled each epoch from a seeded stream; each
    sample is flipped with probability flip_prob from a second stream;
    dev loss is always evaluated without augmentation. The returned
    snapshot is the epoch with minimum dev loss (first minimum on ties).
    """
    if not protocol.train:
        raise ProtocolError(f"protocol '{protocol.name}': train fold is empty")
    if not protocol.dev:
        raise ProtocolError(f"protocol '{protocol.name}': dev fold is empty")

    trainable = select_trainable(train_cfg.policy, vit_cfg)
    params = vit.clone_params(init_weights, trainable)
    vit.validate_params(params, vit_cfg)

    order_ids = list(protocol.train)
    dev_ids = list(protocol.dev)
    crop_list = parallel_map(
        lambda sid: _load_crop(manifest, manifest.by_id(sid), vit_cfg.image_size, eye_x, eye_y),
        order_ids + dev_ids,
    )
    crops = dict(zip(order_ids + dev_ids, crop_list))
    labels = {sid: _label01(manifest.by_id(sid)) for sid in order_ids + dev_ids}

    shuffle_rng = np.random.default_rng([int(train_cfg.seed), 0])
    flip_rng = np.random.default_rng([int(train_cfg.seed), 1])

    def dev_loss_of(p) -> float:
        losses = parallel_map(lambda sid: bce_loss(_sample_logit(p, vit_cfg, crops[sid]), labels[sid]),
                              dev_ids)
        return float(sum(losses) / len(losses))

    def loss_and_grads(sid: str, flip: bool):
        pixels = crops[sid]
        if flip:
            pixels = hflip(Tensor(pixels)).data
        tape = Tape()
        trace = vit.forward(Tensor(pixels), params, vit_cfg, tape=tape)
        y = labels[sid]
        loss = bce_loss(trace.logit, y)
        seed_val = sigmoid(trace.logit) - y  # dL/dlogit
        seed = Tensor(np.full((1, 1), seed_val, dtype=trace.logit_tensor.data.dtype))
        return loss, backprop(tape, seed)

    history = TrainHistory()
    history.initial_dev_loss = dev_loss_of(params)
    best_dev = math.inf
    best_params = params
    state = init_adam_state(params, trainable)

    n = len(order_ids)
    for epoch in range(train_cfg.epochs):
        perm = shuffle_rng.permutation(n)
        flips = flip_rng.random(n) < train_cfg.flip_prob
        epoch_losses = []
        for start in range(0, n, train_cfg.batch_size):
            chunk = [(order_ids[perm[i]], bool(flips[i])) for i in range(start, min(start + train_cfg.batch_size, n))]
            results = parallel_map(lambda item: loss_and_grads(*item), chunk)
            batch_grads = {}
            for loss, grads in results:  # fixed ascending order within the batch
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch + 1}, batch {start // train_cfg.batch_size + 1}"
                    )
                epoch_losses.append(loss)
                for name, g in grads.items():
                    held = batch_grads.get(name)
                    batch_grads[name] = g.data.copy() if held is None else held + g.data
            scale = 1.0 / len(results)
            mean_grads = {name: Tensor(g * scale, name=name) for name, g in batch_grads.items()}
            params, state = adam_step(params, mean_grads, state, train_cfg)

        dev = dev_loss_of(params)
        history.train_loss.append(float(sum(epoch_losses) / len(epoch_losses)))
        history.dev_loss.append(dev)
        if dev < best_dev:
            best_dev = dev
            history.best_epoch = epoch
            best_params = {name: (Tensor(t.data.copy(), name=name, trainable=t.trainable)
                                  if name in trainable else t)
                           for name, t in params.items()}
    return best_params, history


def score_samples(params, vit_cfg: vit.ViTConfig, manifest: Manifest, ids,
                  eye_x: float = EYE_X, eye_y: float = EYE_Y) -> ScoreSet:
    """Sigmoid scores for the given sample ids, in the given order.

    Higher score means more bonafide. Augmentation never applies here.
    """
    samples = [manifest.by_id(sid) for sid in ids]

    def one(sample):
        pixels = _load_crop(manifest, sample, vit_cfg.image_size, eye_x, eye_y)
        trace = vit.forward(Tensor(pixels), params, vit_cfg)
        return ScoreRecord(sample.sample_id, sample.label, sample.attack_type,
                           sigmoid(trace.logit))

    return ScoreSet(parallel_map(one, samples))


def write_history_csv(history: TrainHistory, path) -> None:
    """Per-epoch losses; epoch 0 carries the pre-training dev loss."""
    import csv

    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "dev_loss", "best"])
            writer.writerow([0, "", f"{history.initial_dev_loss:.9g}", 0])
            for i, (tl, dl) in enumerate(zip(history.train_loss, history.dev_loss)):
                writer.writerow([i + 1, f"{tl:.9g}", f"{dl:.9g}", int(i == history.best_epoch)])
    except OSError as exc:
        raise VitPadIOError(f"cannot write history file {path}: {exc}") from exc


def gradcheck(cfg: vit.ViTConfig = None, seed: int = 7, step: float = 1e-4) -> float:
    """Full-model gradient verification in double precision.

    Builds a small randomly initialized network, takes the BCE loss of a
    random image, and compares backprop against central finite
    differences for every parameter entry. Returns the maximum scaled
    error max|fd - an| / max(1, |fd|, |an|); values below 1e-5 indicate
    agreement.
    """
    cfg = cfg or vit.TINY_CONFIG
    trainable = select_trainable("ALL", cfg)
    params = vit.clone_params(init_params_double(cfg, seed), trainable)
    rng = np.random.default_rng([int(seed), 2])
    image = rng.uniform(-1.0, 1.0, size=(cfg.channels, cfg.image_size, cfg.image_size))
    label = 1

    tape = Tape()
    trace = vit.forward(Tensor(image.astype(np.float64)), params, cfg, tape=tape)
    seed_val = sigmoid(trace.logit) - label
    analytic = backprop(tape, Tensor(np.full((1, 1), seed_val, dtype=np.float64)))

    def loss_now() -> float:
        t = vit.forward(Tensor(image.astype(np.float64)), params, cfg)
        return bce_loss(t.logit, label)

    worst = 0.0
    for name in sorted(trainable):
        theta = params[name].data
        an = analytic[name].data
        flat = theta.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = loss_now()
            flat[i] = keep - step
            down = loss_now()
            flat[i] = keep
            fd = (up - down) / (2.0 * step)
            err = abs(fd - an_flat[i]) / max(1.0, abs(fd), abs(an_flat[i]))
            if err > worst:
                worst = err
    return worst


def init_params_double(cfg: vit.ViTConfig, seed: int) -> dict:
    return vit.init_params(cfg, seed, precision="double")
