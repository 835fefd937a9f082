"""Joint optimization loop (AdamW), evaluation metrics, modality-gap
analytics, and checkpoint integration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import checkpoint as ckpt
from .data import (
    PatchGrid,
    PatientRecord,
    TokenSequence,
    Vocab,
    normalize_volume,
    patchify,
    textualize_record,
    tokenize,
)
from .errors import ConfigError, DegenerateInputError, NumericError
from .losses import (
    LossBreakdown,
    LossWeights,
    classification_loss,
    image_recon_loss,
    itc_loss,
    text_recon_loss,
    total_loss,
)
from .model import AlignFuseModel, ModelConfig
from .tensor import RngStream, Tensor, no_grad, softmax, stack_rows


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    steps: int = 200
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    eval_every: int = 50
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in
             ("batch_size", "lr", "beta1", "beta2", "eps", "weight_decay",
              "steps", "seed", "eval_every", "grad_clip")}
        d["weights"] = {"contrastive": self.weights.contrastive,
                        "reconstruction": self.weights.reconstruction,
                        "classification": self.weights.classification}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


class AdamW:
    """Bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        cfg = self.cfg
        for p in self.params.values():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError("non-finite gradient; aborting step")
        if cfg.grad_clip is not None:
            total = math.sqrt(sum(float((p.grad ** 2).sum())
                                  for p in self.params.values() if p.grad is not None))
            if total > cfg.grad_clip:
                scale = cfg.grad_clip / total
                for p in self.params.values():
                    if p.grad is not None:
                        p.grad *= scale
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data = p.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps) \
                - cfg.lr * cfg.weight_decay * p.data
            if not np.isfinite(p.data).all():
                raise NumericError(f"parameter {name} became non-finite")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(float(self.t))}
        for name in self.params:
            out[f"{name}.m"] = self.m[name]
            out[f"{name}.v"] = self.v[name]
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"])
        for name in self.params:
            self.m[name] = state[f"{name}.m"].copy()
            self.v[name] = state[f"{name}.v"].copy()


# ---------------------------------------------------------------------------
# example preparation


@dataclass
class Example:
    patches: PatchGrid
    tokens: TokenSequence
    label: int


def prepare_examples(records: list[PatientRecord], vocab: Vocab,
                     cfg: ModelConfig) -> list[Example]:
    out = []
    for rec in records:
        vol = normalize_volume(rec.volume, cfg.volume_side)
        out.append(Example(
            patches=patchify(vol, cfg.patch_size),
            tokens=tokenize(textualize_record(rec), vocab, cfg.l_max),
            label=rec.label,
        ))
    return out


def dataset_corpus(records: list[PatientRecord]) -> list[str]:
    return [textualize_record(r) for r in records]


# ---------------------------------------------------------------------------
# training


def batch_loss(model: AlignFuseModel, batch: list[Example],
               weights: LossWeights, rng: RngStream) -> LossBreakdown:
    """Forward the batch and combine the four objectives."""
    img_feats, txt_feats = [], []
    rec_img_losses, rec_txt_losses, cls_losses = [], [], []
    for j, ex in enumerate(batch):
        fwd = model.forward_training_pass(ex.patches, ex.tokens, rng.child(j))
        img_feats.append(fwd.z_image_cls)
        txt_feats.append(fwd.z_text_cls)
        rec_img_losses.append(image_recon_loss(
            ex.patches.patches, fwd.recon_image, fwd.masked_patch_idx))
        rec_txt_losses.append(text_recon_loss(
            ex.tokens, fwd.recon_text_logits, fwd.masked_token_idx))
        cls_losses.append(classification_loss(fwd.class_logits, ex.label))

    b = len(batch)
    mean = lambda parts: sum(parts[1:], parts[0]) * (1.0 / b)
    contrastive = itc_loss(stack_rows(img_feats), stack_rows(txt_feats),
                           model.temperature())
    return total_loss(contrastive, mean(rec_img_losses), mean(rec_txt_losses),
                      mean(cls_losses), weights)


def _batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Deterministic batch for a global step: seeded shuffle per epoch,
    sequential slices, last incomplete batch kept."""
    steps_per_epoch = math.ceil(n / batch_size)
    epoch, k = divmod(step, steps_per_epoch)
    order = RngStream(seed).child(1_000_000 + epoch).permutation(n)
    return order[k * batch_size: (k + 1) * batch_size]


def train_steps(model: AlignFuseModel, optim: AdamW, examples: list[Example],
                cfg: TrainConfig, n_steps: int | None = None,
                on_step=None) -> list[dict]:
    """Run `n_steps` optimization steps (default: up to cfg.steps, resuming
    from the optimizer's step counter). Returns per-step loss records."""
    start = optim.t
    end = cfg.steps if n_steps is None else start + n_steps
    log = []
    for step in range(start, end):
        idx = _batch_indices(len(examples), cfg.batch_size, step, cfg.seed)
        batch = [examples[i] for i in idx]
        rng = RngStream(cfg.seed).child(2_000_000 + step)
        optim.zero_grad()
        breakdown = batch_loss(model, batch, cfg.weights, rng)
        breakdown.total.backward()
        optim.step()
        model.clamp_temperature()
        entry = {"step": step, **breakdown.scalars(), "lr": cfg.lr}
        log.append(entry)
        if on_step is not None:
            on_step(entry)
    return log


# ---------------------------------------------------------------------------
# metrics


def compute_auc(scores, labels) -> float:
    """P(random positive outranks random negative); ties count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(probs: np.ndarray, labels: np.ndarray) -> float | None:
    """Macro one-vs-rest AUC; None when no class has both sides present."""
    aucs = []
    for c in range(probs.shape[1]):
        binary = (labels == c).astype(int)
        if 0 < binary.sum() < len(binary):
            aucs.append(compute_auc(probs[:, c], binary))
    return float(np.mean(aucs)) if aucs else None


def modality_gap(z_image: np.ndarray, z_text: np.ndarray) -> float:
    """Distance between the centroids of unit-normalized embedding sets."""
    zi = z_image / np.linalg.norm(z_image, axis=1, keepdims=True)
    zt = z_text / np.linalg.norm(z_text, axis=1, keepdims=True)
    return float(np.linalg.norm(zi.mean(axis=0) - zt.mean(axis=0)))


@dataclass
class EvalReport:
    accuracy: float
    auc: float | None
    per_class_counts: dict[int, dict[str, int]]
    modality_gap: float
    n: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc": self.auc,
            "per_class_counts": {str(k): v for k, v in self.per_class_counts.items()},
            "modality_gap": self.modality_gap,
            "n": self.n,
        }


def predict(model: AlignFuseModel,
            examples: list[Example]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Softmax class probabilities plus image/text [CLS] embeddings."""
    probs, z_img, z_txt = [], [], []
    with no_grad():
        for ex in examples:
            logits, zi, zt = model.classify(ex.patches, ex.tokens)
            probs.append(softmax(logits.reshape(1, -1), axis=-1).data[0])
            z_img.append(zi.data.copy())
            z_txt.append(zt.data.copy())
    return np.array(probs), np.array(z_img), np.array(z_txt)


def evaluate(model: AlignFuseModel, examples: list[Example]) -> EvalReport:
    probs, z_img, z_txt = predict(model, examples)
    labels = np.array([ex.label for ex in examples])
    preds = probs.argmax(axis=1)
    counts = {}
    for c in range(model.config.n_classes):
        sel = labels == c
        counts[c] = {"n": int(sel.sum()),
                     "correct": int((preds[sel] == c).sum())}
    return EvalReport(
        accuracy=float((preds == labels).mean()),
        auc=macro_auc(probs, labels),
        per_class_counts=counts,
        modality_gap=modality_gap(z_img, z_txt),
        n=len(examples),
    )


# ---------------------------------------------------------------------------
# checkpoint integration


def save_model_checkpoint(path: Path, model: AlignFuseModel, vocab: Vocab,
                          optim: AdamW | None = None) -> None:
    payload = {
        "model_config": model.config.to_dict(),
        "vocab": vocab.tokens,
        "step": optim.t if optim is not None else 0,
    }
    params = {name: p.data for name, p in model.params.items()}
    state = optim.state_arrays() if optim is not None else {}
    ckpt.save_checkpoint(path, payload, params, state)


def load_model_checkpoint(path: Path, train_cfg: TrainConfig | None = None,
                          ) -> tuple[AlignFuseModel, Vocab, AdamW | None]:
    payload, params, state = ckpt.load_checkpoint(path)
    config = ModelConfig.from_dict(payload["model_config"])
    model = AlignFuseModel(config, seed=0)
    for name, p in model.params.items():
        p.data = params[name].copy()
    vocab = Vocab(tokens=list(payload["vocab"]))
    optim = None
    if train_cfg is not None:
        optim = AdamW(model.params, train_cfg)
        if state:
            optim.load_state_arrays(state)
        else:
            optim.t = int(payload.get("step", 0))
    return model, vocab, optim
