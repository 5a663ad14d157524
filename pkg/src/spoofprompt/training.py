"""Optimization loop: branch-partitioned CE, consistency anchors, hard mining.

The physical branch trains on live + physical-attack samples, the digital
branch on live + digital-attack samples; live samples contribute to both,
attacks to exactly one.  Prompted class/visual features are regularized
toward their frozen zero-shot peers with cosine distance.  Hard samples
are the ones the two branches disagree about most: their live-probability
gap lands in the top quantile, which earns a strong augmentation and an
upweighted loss.

Only the prompt bundles and the two context projections ever receive
optimizer updates; the backbone checksum is verified unchanged at the end
of every run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .encoders import (
    BackboneParams,
    ClassPromptSet,
    EncoderConfig,
    Vocabulary,
    backbone_checksum,
    class_embeddings,
    description_embeddings,
    encode_image,
    init_backbone,
    named_backbone_params,
)
from .errors import ConfigError, InputError, NonFiniteError, TrainAbortError
from .metrics import MetricsSummary, ScoreRecord, acer, summarize
from .prompts import (
    BRANCHES,
    DIGITAL,
    PHYSICAL,
    ContextBank,
    PromptBundle,
    branch_class_set,
    branch_forward,
    build_context,
    create_prompt_bundle,
    fuse_branches,
)
from .synthdata import DIGITAL_ATTACK, LIVE, PHYSICAL_ATTACK, Sample
from .tensor import Rng, Tensor, concat, log, mul, neg, no_grad, tmean, tsum
from .layers import cosine_similarity, mulc

# Reference learning rate at full pretrained scale, for documentation.
FULL_SCALE_LEARNING_RATE = 1e-6

__all__ = [
    "TrainConfig", "LossBreakdown", "Adam", "Trainer", "RunResult",
    "weighted_cross_entropy", "consistency_loss", "caa_select", "augment",
    "apply_light", "run_training",
]


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-3      # desk scale; see FULL_SCALE_LEARNING_RATE
    lambda_consistency: float = 0.1
    caa_quantile: float = 0.3        # fraction of a batch treated as hard
    caa_weight: float = 2.0          # loss weight for hard samples
    seed: int = 0
    scpg_on: bool = True
    caa_on: bool = True
    context_clusters: int = 4
    text_prompt_len: int = 4
    visual_prompt_len: int = 4
    prompt_depth: int | None = None  # None -> inject at every block
    eval_every: int = 50
    threshold: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.caa_quantile < 1.0:
            raise ConfigError(f"caa quantile must lie in [0, 1), got {self.caa_quantile}")
        if self.caa_weight < 1.0:
            raise ConfigError(f"caa weight must be >= 1, got {self.caa_weight}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")


@dataclass
class LossBreakdown:
    ce_physical: float
    ce_digital: float
    consistency_text: float
    consistency_visual: float
    total: float


# -- loss pieces ---------------------------------------------------------------------


def weighted_cross_entropy(probs: Tensor, targets, weights) -> tuple[Tensor, bool]:
    """Weighted mean negative log-probability of the true class.

    ``weights`` of zero drop a sample entirely (both value and gradient);
    the divisor is the sum of weights.  Returns (loss, contributed) where
    ``contributed`` is False when every weight is zero — the loss is then
    a constant 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n, c = probs.data.shape
    if targets.shape != (n,) or weights.shape != (n,):
        raise InputError(f"targets/weights must have shape ({n},)")
    total_w = weights.sum()
    if total_w <= 0.0:
        return Tensor(0.0), False
    onehot = np.zeros((n, c))
    onehot[np.arange(n), targets] = 1.0
    p_true = tsum(mul(probs, onehot), axis=-1)          # [n]
    nll = neg(log(p_true))
    return mulc(tsum(mul(nll, weights)), 1.0 / total_w), True


def consistency_loss(prompted_class_feats: Tensor, reference_class_feats: Tensor,
                     prompted_visual: Tensor, reference_visual: Tensor) -> tuple[Tensor, Tensor]:
    """Cosine-distance anchors: (text term, visual term).

    Text term: mean over class rows of 1 - cos(prompted, reference).
    Visual term: mean over batch rows of the same.  References are frozen
    zero-shot features and carry no gradient.
    """
    text_term = tmean(1.0 - cosine_similarity(prompted_class_feats, reference_class_feats))
    visual_term = tmean(1.0 - cosine_similarity(prompted_visual, reference_visual))
    return text_term, visual_term


def caa_select(live_physical, live_digital, quantile: float, hard_weight: float) -> tuple[np.ndarray, list[str]]:
    """Cross-branch disagreement mining.

    The gap |p_phys - p_dig| per sample is compared to its (1-quantile)
    batch quantile; strictly greater gaps are "hard" (weight ``hard_weight``,
    strong augmentation), the rest get weight 1 and light augmentation.
    With quantile 0, or when every gap ties, nothing is selected.
    """
    p = np.asarray(live_physical, dtype=np.float64)
    d = np.asarray(live_digital, dtype=np.float64)
    if np.any((p < 0) | (p > 1)) or np.any((d < 0) | (d > 1)):
        raise InputError("branch live-probabilities must lie in [0, 1]")
    if not 0.0 <= quantile < 1.0:
        raise InputError(f"quantile must lie in [0, 1), got {quantile}")
    gap = np.abs(p - d)
    if quantile == 0.0:
        hard = np.zeros(gap.shape, dtype=bool)
    else:
        cutoff = np.quantile(gap, 1.0 - quantile)
        hard = gap > cutoff
    weights = np.where(hard, hard_weight, 1.0)
    directives = ["strong" if h else "light" for h in hard]
    return weights, directives


# -- augmentation ---------------------------------------------------------------------


def apply_light(image: np.ndarray, flip: bool, jitter: float) -> np.ndarray:
    """Deterministic core of light augmentation: h-flip + brightness scale."""
    out = image[:, ::-1, :] if flip else image
    return np.clip(out * (1.0 + jitter), 0.0, 1.0)


def apply_cutout(image: np.ndarray, top: int, left: int, side: int) -> np.ndarray:
    out = image.copy()
    out[top : top + side, left : left + side, :] = 0.5
    return out


def apply_blur(image: np.ndarray) -> np.ndarray:
    """2x block-mean downsample then nearest-neighbor upsample."""
    h, w, c = image.shape
    h2, w2 = (h // 2) * 2, (w // 2) * 2
    ds = image[:h2, :w2].reshape(h2 // 2, 2, w2 // 2, 2, c).mean(axis=(1, 3))
    out = image.copy()
    out[:h2, :w2] = np.repeat(np.repeat(ds, 2, axis=0), 2, axis=1)
    return out


def augment(image: np.ndarray, directive: str, rng: Rng) -> np.ndarray:
    """Seeded augmentation; 'strong' adds one of cutout/noise/blur to light."""
    if directive not in ("light", "strong"):
        raise InputError(f"unknown augmentation directive '{directive}'")
    flip = rng.uniform(0.0, 1.0) < 0.5
    jitter = rng.uniform(-0.10, 0.10)
    out = apply_light(image, flip, jitter)
    if directive == "strong":
        choice = int(rng.integers(0, 3))
        h, w, _ = out.shape
        if choice == 0:
            frac = rng.uniform(0.10, 0.25)
            side = max(1, int(round(np.sqrt(frac) * h)))
            top = int(rng.integers(0, h - side + 1))
            left = int(rng.integers(0, w - side + 1))
            out = apply_cutout(out, top, left, side)
        elif choice == 1:
            out = np.clip(out + rng.normal((h, w, 3), std=0.05), 0.0, 1.0)
        else:
            out = apply_blur(out)
    return np.clip(out, 0.0, 1.0)


# -- optimizer ------------------------------------------------------------------------


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- trainer ---------------------------------------------------------------------------


@dataclass
class RunResult:
    log_lines: list[str]
    checkpoint: dict[str, np.ndarray]
    final_summary: MetricsSummary | None
    final_records: list[ScoreRecord]
    checksum_before: str
    checksum_after: str
    seconds: float


class Trainer:
    """Owns the frozen backbone, prompt state, optimizer, and data order."""

    def __init__(self, encoder_config: EncoderConfig, config: TrainConfig,
                 train_samples: list[Sample], eval_samples: list[Sample],
                 prompt_set: ClassPromptSet | None = None, vocab: Vocabulary | None = None):
        self.encoder_config = encoder_config
        self.config = config
        self.vocab = vocab or Vocabulary.default()
        self.prompt_set = prompt_set or ClassPromptSet.default_unified()
        self.train_samples = list(train_samples)
        self.eval_samples = list(eval_samples)

        depth = config.prompt_depth if config.prompt_depth is not None else encoder_config.depth
        if not 0 <= depth <= encoder_config.depth:
            raise ConfigError(f"prompt depth {depth} outside [0, {encoder_config.depth}]")
        self.prompt_depth = depth

        rng = Rng(config.seed)
        self.backbone = init_backbone(encoder_config, rng.child("backbone"), self.vocab)
        self.checksum_before = backbone_checksum(self.backbone)

        # zero-shot anchors (frozen peers): class features per branch
        self.peer_class_feats: dict[str, Tensor] = {}
        with no_grad():
            for branch in BRANCHES:
                subset = branch_class_set(self.prompt_set, branch)
                self.peer_class_feats[branch] = class_embeddings(
                    subset, self.backbone, encoder_config, self.vocab)

        if config.scpg_on and config.context_clusters > 0:
            with no_grad():
                embeds, meta = description_embeddings(
                    self.prompt_set, self.backbone, encoder_config, self.vocab)
            self.bank: ContextBank | None = build_context(
                embeds, config.context_clusters, rng.child("context"), encoder_config, meta)
        else:
            self.bank = None

        self.bundles: dict[str, PromptBundle] = {
            branch: create_prompt_bundle(branch, depth, config.text_prompt_len,
                                         config.visual_prompt_len, encoder_config,
                                         rng.child(f"prompts.{branch}"))
            for branch in BRANCHES
        }
        self.optimizer = Adam(self.named_trainable(), lr=config.learning_rate)
        self.rng_shuffle = rng.child("shuffle")
        self.rng_augment = rng.child("augment")
        self.step_count = 0

    # -- parameter registry --

    def named_trainable(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for branch in BRANCHES:
            b = self.bundles[branch]
            for i, t in enumerate(b.text_prompts):
                out[f"prompts.{branch}.text.{i}"] = t
            for i, t in enumerate(b.visual_prompts):
                out[f"prompts.{branch}.visual.{i}"] = t
        if self.bank is not None:
            out["context.w_text"] = self.bank.w_text
            out["context.w_visual"] = self.bank.w_visual
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(named_backbone_params(self.backbone))
        out.update(self.named_trainable())
        if self.bank is not None:
            out["context.centers"] = self.bank.centers
        return out

    # -- data plumbing --

    @staticmethod
    def _branch_targets(samples: list[Sample], branch: str) -> tuple[np.ndarray, np.ndarray]:
        """(targets, legal mask): class 0 = live, class 1 = branch attack."""
        attack_label = PHYSICAL_ATTACK if branch == PHYSICAL else DIGITAL_ATTACK
        legal = np.array([s.label in (LIVE, attack_label) for s in samples], dtype=np.float64)
        targets = np.array([0 if s.label == LIVE else 1 for s in samples], dtype=np.int64)
        return targets, legal

    def _batches(self, steps: int):
        n = len(self.train_samples)
        if n == 0:
            raise InputError("cannot train on an empty dataset")
        order: list[int] = []
        for _ in range(steps):
            if len(order) < self.config.batch_size:
                order.extend(self.rng_shuffle.permutation(n).tolist())
            picked, order = order[: self.config.batch_size], order[self.config.batch_size :]
            yield [self.train_samples[i] for i in picked]

    # -- core step --

    def train_step(self, batch: list[Sample]) -> LossBreakdown:
        try:
            return self._train_step(batch)
        except NonFiniteError as exc:
            raise TrainAbortError(f"step {self.step_count}: {exc}") from exc

    def _train_step(self, batch: list[Sample]) -> LossBreakdown:
        cfg, enc = self.config, self.encoder_config
        images = np.stack([s.image for s in batch])

        if cfg.caa_on and cfg.caa_quantile > 0.0:
            with no_grad():
                probe_p = branch_forward(images, self.prompt_set, PHYSICAL, self.bank,
                                         self.bundles, self.backbone, enc, self.vocab)
                probe_d = branch_forward(images, self.prompt_set, DIGITAL, self.bank,
                                         self.bundles, self.backbone, enc, self.vocab)
            weights, directives = caa_select(probe_p.probabilities.data[:, 0],
                                             probe_d.probabilities.data[:, 0],
                                             cfg.caa_quantile, cfg.caa_weight)
        else:
            weights = np.ones(len(batch))
            directives = ["light"] * len(batch)

        augmented = np.stack([augment(img, d, self.rng_augment)
                              for img, d in zip(images, directives)])

        out_p = branch_forward(augmented, self.prompt_set, PHYSICAL, self.bank,
                               self.bundles, self.backbone, enc, self.vocab)
        out_d = branch_forward(augmented, self.prompt_set, DIGITAL, self.bank,
                               self.bundles, self.backbone, enc, self.vocab)

        targets_p, legal_p = self._branch_targets(batch, PHYSICAL)
        targets_d, legal_d = self._branch_targets(batch, DIGITAL)
        ce_p, _ = weighted_cross_entropy(out_p.probabilities, targets_p, weights * legal_p)
        ce_d, _ = weighted_cross_entropy(out_d.probabilities, targets_d, weights * legal_d)

        with no_grad():
            peer_visual = encode_image(augmented, self.backbone, enc)       # [B, d]
        prompted_class = concat([out_p.class_embeddings, out_d.class_embeddings], axis=0)
        peer_class = concat([self.peer_class_feats[PHYSICAL], self.peer_class_feats[DIGITAL]], axis=0)
        prompted_visual = concat([out_p.image_embeddings, out_d.image_embeddings], axis=0)
        peer_visual2 = concat([peer_visual, peer_visual], axis=0)
        cons_t, cons_v = consistency_loss(prompted_class, Tensor(peer_class.data),
                                          prompted_visual, Tensor(peer_visual2.data))

        total = ce_p + ce_d + mulc(cons_t + cons_v, cfg.lambda_consistency)
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.step_count += 1
        return LossBreakdown(
            ce_physical=float(ce_p.data),
            ce_digital=float(ce_d.data),
            consistency_text=float(cons_t.data),
            consistency_visual=float(cons_v.data),
            total=float(total.data),
        )

    # -- evaluation --

    def score_samples(self, samples: list[Sample], batch_size: int = 64) -> list[ScoreRecord]:
        records: list[ScoreRecord] = []
        with no_grad():
            for lo in range(0, len(samples), batch_size):
                chunk = samples[lo : lo + batch_size]
                images = np.stack([s.image for s in chunk])
                out_p = branch_forward(images, self.prompt_set, PHYSICAL, self.bank,
                                       self.bundles, self.backbone, self.encoder_config, self.vocab)
                out_d = branch_forward(images, self.prompt_set, DIGITAL, self.bank,
                                       self.bundles, self.backbone, self.encoder_config, self.vocab)
                lp = np.clip(out_p.probabilities.data[:, 0], 0.0, 1.0)
                ld = np.clip(out_d.probabilities.data[:, 0], 0.0, 1.0)
                fused = fuse_branches(lp, ld)
                for s, f, a, b in zip(chunk, fused, lp, ld):
                    records.append(ScoreRecord(
                        id=s.id, bona_fide=s.bona_fide, fine_label=s.label,
                        score=float(f), score_physical=float(a), score_digital=float(b),
                        family=s.family,
                    ))
        return records

    def evaluate(self, samples: list[Sample] | None = None) -> tuple[list[ScoreRecord], MetricsSummary]:
        samples = self.eval_samples if samples is None else samples
        records = self.score_samples(samples)
        return records, summarize(records, self.config.threshold)

    # -- full run --

    def run(self, out_dir=None) -> RunResult:
        cfg = self.config
        start = time.perf_counter()
        header = ["step", "ce_physical", "ce_digital", "consistency_text",
                  "consistency_visual", "total", "eval_acc", "eval_auc", "eval_eer", "eval_acer"]
        lines = ["\t".join(header)]
        for step_idx, batch in enumerate(self._batches(cfg.steps), start=1):
            breakdown = self.train_step(batch)
            row = [str(step_idx)] + [f"{v:.10g}" for v in (
                breakdown.ce_physical, breakdown.ce_digital,
                breakdown.consistency_text, breakdown.consistency_visual, breakdown.total)]
            if self.eval_samples and cfg.eval_every > 0 and (
                    step_idx % cfg.eval_every == 0 or step_idx == cfg.steps):
                _, summary = self.evaluate()
                row.extend(f"{v:.10g}" for v in (summary.acc, summary.auc, summary.eer, summary.acer))
            else:
                row.extend(["", "", "", ""])
            lines.append("\t".join(row))

        final_records: list[ScoreRecord] = []
        final_summary: MetricsSummary | None = None
        if self.eval_samples:
            final_records, final_summary = self.evaluate()

        checkpoint = {name: t.data.copy() for name, t in self.named_parameters().items()}
        checksum_after = backbone_checksum(self.backbone)
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(checkpoint, out_dir / "checkpoint.bin")
            (out_dir / "train_log.tsv").write_text("\n".join(lines) + "\n")
        return RunResult(
            log_lines=lines,
            checkpoint=checkpoint,
            final_summary=final_summary,
            final_records=final_records,
            checksum_before=self.checksum_before,
            checksum_after=checksum_after,
            seconds=time.perf_counter() - start,
        )

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite every named parameter from a checkpoint map."""
        named = self.named_parameters()
        for name, tensor in named.items():
            if name not in arrays:
                raise ConfigError(f"checkpoint missing key '{name}'")
            if arrays[name].shape != tensor.data.shape:
                raise ConfigError(
                    f"checkpoint key '{name}' shape {arrays[name].shape} != {tensor.data.shape}")
            tensor.data[...] = arrays[name]
        self.checksum_before = backbone_checksum(self.backbone)


def run_training(encoder_config: EncoderConfig, config: TrainConfig,
                 train_samples: list[Sample], eval_samples: list[Sample],
                 out_dir=None, prompt_set: ClassPromptSet | None = None,
                 vocab: Vocabulary | None = None) -> RunResult:
    """Convenience wrapper: build a Trainer and run it to completion."""
    trainer = Trainer(encoder_config, config, train_samples, eval_samples,
                      prompt_set=prompt_set, vocab=vocab)
    result = trainer.run(out_dir=out_dir)
    if result.checksum_before != result.checksum_after:
        raise TrainAbortError("frozen backbone changed during training")
    return result


def acer_at_eer(records: list[ScoreRecord], summary: MetricsSummary) -> float:
    """ACER evaluated at the EER threshold (the labeled secondary operating point)."""
    _, _, value = acer(records, summary.eer_threshold)
    return value
