"""Server-side phases: supervised pretraining with a temporary
classification head, and episodic metalearning over recomputed
full-precision prototypes."""

from dataclasses import dataclass

import numpy as np

from .backbone import GradientTape, backward, forward_backbone, forward_fcr, sgd_step
from .errors import (
    InsufficientSamplesError,
    NumericFailureError,
    ShapeMismatchError,
    ZeroNormError,
)
from .losses import (
    PretrainLossConfig,
    cutmix,
    mixup,
    multi_margin_loss,
    ortho_loss,
    sample_augmentation,
    softmax_ce_batch,
)
from .memory import ExplicitMemory, QuantSpec
from .numerics import ZERO_NORM_FLOOR, matmul, relu, softmax_ce
from .online import ActivationMemory, learn_class


@dataclass
class FccHead:
    """Temporary linear classifier used only during pretraining."""

    weight: np.ndarray  # (num_classes, d_p)
    bias: np.ndarray  # (num_classes,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatchError("head expects (C, d_p) weight and (C,) bias")
        if self.weight.shape[0] >= self.weight.shape[1]:
            raise ShapeMismatchError(
                "head needs fewer classes than feature dims (d_p > |C0|)"
            )

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


def init_fcc(num_classes: int, d_p: int, seed) -> FccHead:
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (num_classes + d_p))
    return FccHead(rng.uniform(-limit, limit, size=(num_classes, d_p)), np.zeros(num_classes))


def fcc_forward(fcc: FccHead, theta_p: np.ndarray) -> np.ndarray:
    return matmul(theta_p, fcc.weight.T) + fcc.bias


@dataclass
class MetaConfig:
    meta_samples: int = 5
    iterations: int = 500
    lr: float = 0.01
    margin: float = 0.1
    query_batch: int = 64
    objective: str = "mm"  # "mm" | "ce"
    prototype_gradient: bool = False

    def __post_init__(self):
        if self.meta_samples < 1 or self.iterations < 1:
            raise ValueError("meta_samples and iterations must be >= 1")
        if self.lr <= 0 or self.margin <= 0 or self.query_batch < 1:
            raise ValueError("lr, margin, query_batch must be positive")
        if self.objective not in ("mm", "ce"):
            raise ValueError("objective must be 'mm' or 'ce'")


def _one_hot_rows(labels, class_ids):
    col = {c: i for i, c in enumerate(class_ids)}
    out = np.zeros((len(labels), len(class_ids)))
    for i, lab in enumerate(labels):
        out[i, col[int(lab)]] = 1.0
    return out


def _infer_grid(dim: int):
    side = int(round(dim**0.5))
    if side * side == dim:
        return side, side
    raise ShapeMismatchError(
        f"input dim {dim} is not a square grid; pass grid=(H, W) explicitly"
    )


def pretrain(
    params,
    fcc: FccHead,
    base_dataset,
    cfg: PretrainLossConfig,
    epochs: int,
    lr: float,
    seed,
    batch_size: int = 64,
    grid=None,
):
    """Minibatch SGD on the composite CE + orthogonality objective.

    Both loss terms are batch sums, so one lambda balances them across
    batch sizes; learning rates are correspondingly per-sum (a mean-loss
    rate divided by the batch size lands in the same regime). One
    augmentation decision per batch; interpolation pairs each row with a
    shuffled partner. History rows are (epoch, per-sample CE, per-batch
    ortho, train accuracy on the un-augmented labels). Deterministic
    under a fixed seed.
    """
    rng = np.random.default_rng(seed)
    class_ids = base_dataset.class_ids()
    if len(class_ids) != fcc.num_classes:
        raise ShapeMismatchError(
            f"dataset has {len(class_ids)} classes, head expects {fcc.num_classes}"
        )
    n = len(base_dataset)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        ce_sum = ortho_sum = 0.0
        hits = total = 0
        nbatches = 0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            x = base_dataset.inputs[idx].copy()
            hard = base_dataset.labels[idx]
            targets = _one_hot_rows(hard, class_ids)
            mode = sample_augmentation(cfg, rng)
            if mode != "none" and len(idx) > 1:
                partner = rng.permutation(len(idx))
                if mode == "cutmix":
                    g = grid if grid is not None else _infer_grid(x.shape[1])
                mixed_x = np.empty_like(x)
                mixed_t = np.empty_like(targets)
                for i in range(len(idx)):
                    j = int(partner[i])
                    if mode == "mixup":
                        mixed_x[i], mixed_t[i] = mixup(
                            x[i], x[j], targets[i], targets[j], cfg.mix_alpha, rng
                        )
                    else:
                        mixed_x[i], mixed_t[i] = cutmix(
                            x[i], x[j], targets[i], targets[j], cfg.mix_alpha, rng, g
                        )
                x, targets = mixed_x, mixed_t
            tape = GradientTape()
            theta_a = forward_backbone(params, x, tape)
            theta_p = forward_fcr(params, theta_a, tape)
            logits = fcc_forward(fcc, theta_p)
            # same composition as pretrain_loss, kept unpacked so the
            # history can record the two terms separately
            ce_part, grad_logits = softmax_ce_batch(logits, targets)
            if cfg.lambda_ortho > 0:
                ortho_part, ortho_grad = ortho_loss(theta_p)
                grad_theta = cfg.lambda_ortho * ortho_grad
            else:
                ortho_part = 0.0
                grad_theta = np.zeros_like(theta_p)
            loss = ce_part + cfg.lambda_ortho * ortho_part
            if not np.isfinite(loss):
                raise NumericFailureError(f"non-finite loss at epoch {epoch}")
            ce_sum += ce_part
            ortho_sum += ortho_part
            nbatches += 1
            pred = logits.argmax(axis=1)
            hits += int((np.asarray(class_ids)[pred] == hard).sum())
            total += len(idx)
            grad_w_fcc = matmul(grad_logits.T, theta_p)
            grad_b_fcc = grad_logits.sum(axis=0)
            upstream = matmul(grad_logits, fcc.weight) + grad_theta
            backward(params, tape, upstream)
            sgd_step(params, tape, lr)
            fcc.weight -= lr * grad_w_fcc
            fcc.bias -= lr * grad_b_fcc
        history.append((epoch, ce_sum / total, ortho_sum / nbatches, hits / total))
    return params, fcc, history


def meta_score(params, x, proto_matrix, tape: GradientTape | None = None):
    """Per-class scores relu(cossim(theta_p(x), prototype_c)).

    proto_matrix holds one full-precision prototype per row. With a tape
    attached the forward activations are recorded for backprop.
    """
    protos = np.asarray(proto_matrix, dtype=np.float64)
    theta_p = forward_fcr(params, forward_backbone(params, x, tape), tape)
    scores, _ = _scores_and_grad(theta_p, protos)
    return scores


def _scores_and_grad(theta_p: np.ndarray, protos: np.ndarray):
    """ReLU-sharpened cosine scores plus the pieces needed for gradients.

    Returns (scores, aux) where aux carries, per class, d(score)/d(theta_p)
    and d(score)/d(proto) rows (zero where the ReLU gate is closed).
    """
    nq = float(np.linalg.norm(theta_p))
    if nq < ZERO_NORM_FLOOR:
        raise ZeroNormError("query feature has near-zero norm")
    pnorms = np.linalg.norm(protos, axis=1)
    if np.any(pnorms < ZERO_NORM_FLOOR):
        raise ZeroNormError("a prototype has near-zero norm")
    q_hat = theta_p / nq
    p_hat = protos / pnorms[:, None]
    cos = p_hat @ q_hat
    scores = relu(cos)
    gate = (cos > 0).astype(np.float64)
    dtheta = gate[:, None] * (p_hat - cos[:, None] * q_hat[None, :]) / nq
    dproto = gate[:, None] * (q_hat[None, :] - cos[:, None] * p_hat) / pnorms[:, None]
    return scores, (dtheta, dproto)


def metalearn(params, base_dataset, cfg: MetaConfig, seed):
    """Episodic training: each iteration recomputes class prototypes from
    N meta-samples per class, scores a query batch, and updates the
    extractor and projection by SGD on the margin (or CE) objective.

    Prototypes are constants for the gradient unless
    cfg.prototype_gradient is set. Returns (params, history) with history
    rows (iteration, mean loss, query accuracy).
    """
    rng = np.random.default_rng(seed)
    class_ids = base_dataset.class_ids()
    pools = {c: base_dataset.indices_of(c) for c in class_ids}
    for c, pool in pools.items():
        if len(pool) < cfg.meta_samples:
            raise InsufficientSamplesError(
                f"class {c} has {len(pool)} samples, needs {cfg.meta_samples} meta-samples"
            )
    col = {c: i for i, c in enumerate(class_ids)}
    history = []
    for it in range(cfg.iterations):
        meta_rows = []
        meta_taken = []
        for c in class_ids:
            take = rng.choice(len(pools[c]), size=cfg.meta_samples, replace=False)
            rows = pools[c][take]
            meta_rows.append(rows)
            meta_taken.extend(rows.tolist())
        meta_idx = np.concatenate(meta_rows)
        meta_tape = GradientTape() if cfg.prototype_gradient else None
        theta_meta = forward_fcr(
            params,
            forward_backbone(params, base_dataset.inputs[meta_idx], meta_tape),
            meta_tape,
        )
        protos = theta_meta.reshape(len(class_ids), cfg.meta_samples, -1).mean(axis=1)
        taken = set(meta_taken)
        pool_rest = np.array([i for i in range(len(base_dataset)) if i not in taken])
        if len(pool_rest) == 0:
            raise InsufficientSamplesError("no query samples left after meta-sampling")
        q_take = rng.choice(
            len(pool_rest), size=min(cfg.query_batch, len(pool_rest)), replace=False
        )
        q_idx = pool_rest[q_take]
        q_tape = GradientTape()
        theta_q = forward_fcr(
            params, forward_backbone(params, base_dataset.inputs[q_idx], q_tape), q_tape
        )
        upstream_q = np.zeros_like(theta_q)
        grad_protos = np.zeros_like(protos)
        loss_sum = 0.0
        hits = 0
        nq = len(q_idx)
        for qi in range(nq):
            scores, (dtheta, dproto) = _scores_and_grad(theta_q[qi], protos)
            gt = col[int(base_dataset.labels[q_idx[qi]])]
            if cfg.objective == "mm":
                loss, dl = multi_margin_loss(scores, gt, cfg.margin)
            else:
                loss, dl = softmax_ce(scores, gt)
            loss_sum += loss
            hits += int(scores.argmax() == gt)
            upstream_q[qi] = dl @ dtheta
            if cfg.prototype_gradient:
                grad_protos += dl[:, None] * dproto
        mean_loss = loss_sum / nq
        if not np.isfinite(mean_loss):
            raise NumericFailureError(f"non-finite metalearning loss at iteration {it}")
        # both backwards run against the pre-update weights; updates land after
        backward(params, q_tape, upstream_q / nq)
        if cfg.prototype_gradient:
            upstream_meta = np.repeat(
                grad_protos / (cfg.meta_samples * nq), cfg.meta_samples, axis=0
            )
            backward(params, meta_tape, upstream_meta)
        sgd_step(params, q_tape, cfg.lr)
        if cfg.prototype_gradient:
            sgd_step(params, meta_tape, cfg.lr)
        history.append((it, mean_loss, hits / nq))
    return params, history


def build_base_em(params, base_dataset, quant: QuantSpec):
    """Populate a fresh explicit memory and activation memory with one
    prototype per base class, each from a single pass over its samples."""
    em = ExplicitMemory(params.d_p, quant)
    act_mem = ActivationMemory(params.d_a)
    for cid in base_dataset.class_ids():
        rows = base_dataset.indices_of(cid)
        learn_class(em, act_mem, params, base_dataset.inputs[rows], cid)
    return em, act_mem
