"""Spoof-aware context generation, per-layer prompt assembly, branch manager.

Context tokens come from K-Means over class-description embeddings: the
cluster centers are frozen, and two trainable linear maps project them
into the native widths of the text and image towers.  Learnable prompt
tokens are fresh parameters per injected layer; the shared projected
context is re-derived from the centers on every forward pass so it can
never go stale after an optimizer step.

Sequence layouts per block input:

    text  : [sos, context*K, prompt*M_t, class tokens, eos]
    image : [cls, patch*M, context*K, prompt*M_v]

Carried positions (sos/class/eos, cls/patch) flow from the previous block;
context/prompt positions are replaced for layers <= prompt depth and left
untouched afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import BackboneParams, ClassPromptSet, EncoderConfig, Vocabulary, class_probabilities, encode_image, encode_text, tokenize
from .errors import InputError
from .tensor import Rng, Tensor, broadcast_to, concat, matmul, reshape, take_range, transpose

PHYSICAL, DIGITAL = "physical", "digital"
BRANCHES = (PHYSICAL, DIGITAL)

__all__ = [
    "kmeans", "KMeansResult", "ContextBank", "build_context", "PromptBundle",
    "create_prompt_bundle", "zero_prompt_bundle", "AssembledSequence",
    "assemble_text_layer", "assemble_image_layer", "TextInjectionHook",
    "VisualInjectionHook", "branch_forward", "BranchOutput", "fuse_branches",
    "context_report", "BRANCHES", "PHYSICAL", "DIGITAL",
]


# -- K-Means ---------------------------------------------------------------------


@dataclass
class KMeansResult:
    centers: np.ndarray          # [K, d]
    assignments: np.ndarray      # [n] int
    inertia: float
    inertia_trace: list[float]   # one entry per Lloyd iteration (post-assignment)


def _plusplus_seed(points: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(0, n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(0, n))  # all points coincide with chosen centers
        else:
            r = rng.uniform(0.0, 1.0) * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int) -> KMeansResult:
    n, k = points.shape[0], centers.shape[0]
    assignments = None
    trace: list[float] = []
    for _ in range(max_iter):
        dist = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        trace.append(float(dist[np.arange(n), new_assign].sum()))
        if assignments is not None and np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for j in range(k):
            mask = assignments == j
            if mask.any():
                centers[j] = points[mask].mean(axis=0)
        empties = [j for j in range(k) if not (assignments == j).any()]
        if empties:
            # documented rule: reseed each empty center to the point farthest
            # from its currently assigned center
            d_assigned = dist[np.arange(n), assignments].copy()
            for j in empties:
                far = int(d_assigned.argmax())
                centers[j] = points[far]
                d_assigned[far] = -1.0
    return KMeansResult(centers=centers, assignments=assignments, inertia=trace[-1], inertia_trace=trace)


def kmeans(points, k: int, rng: Rng, n_init: int = 8, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations with k-means++ seeding, best of ``n_init`` restarts.

    Runs each restart to an assignment fixpoint (or ``max_iter``); the final
    centers equal the means of their assigned points, and the per-iteration
    inertia trace is non-increasing.  An emptied cluster is reseeded to the
    point farthest from its assigned center.
    """
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if points.ndim != 2:
        raise InputError(f"kmeans expects [n, d] points, got shape {points.shape}")
    n = points.shape[0]
    if k < 1 or n < k:
        raise InputError(f"kmeans needs n >= K >= 1, got n={n}, K={k}")
    best: KMeansResult | None = None
    for trial in range(n_init):
        seed_centers = _plusplus_seed(points, k, rng.child(f"init{trial}"))
        result = _lloyd(points, seed_centers.copy(), max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    return best


# -- context bank -------------------------------------------------------------------


@dataclass
class ContextBank:
    """Frozen cluster centers plus trainable projections into each tower.

    ``textual_context``/``visual_context`` recompute the projected tokens
    from the centers on every call, so the projections can never serve a
    stale cache after an optimizer update, and gradients reach only the
    projection weights.
    """

    centers: Tensor            # [K, d], requires_grad=False (frozen)
    w_text: Tensor             # [text_width, d], trainable
    w_visual: Tensor           # [image_width, d], trainable
    assignments: np.ndarray
    inertia: float
    meta: list[tuple[str, str]] = field(default_factory=list)
    source_points: np.ndarray | None = None   # [n, d] clustering input, for reporting

    @property
    def k(self) -> int:
        return self.centers.data.shape[0]

    def textual_context(self) -> Tensor:
        return matmul(self.centers, transpose(self.w_text))   # [K, text_width]

    def visual_context(self) -> Tensor:
        return matmul(self.centers, transpose(self.w_visual))  # [K, image_width]


def build_context(class_embeds, k: int, rng: Rng, config: EncoderConfig,
                  meta: list[tuple[str, str]] | None = None) -> ContextBank:
    """Cluster class-description embeddings and attach trainable projections."""
    points = np.ascontiguousarray(np.asarray(class_embeds, dtype=np.float64))
    result = kmeans(points, k, rng.child("kmeans"))
    pr = rng.child("projections")
    w_text = Tensor(pr.child("text").truncated_normal((config.text_width, config.embed_dim), std=config.init_std),
                    requires_grad=True)
    w_visual = Tensor(pr.child("visual").truncated_normal((config.image_width, config.embed_dim), std=config.init_std),
                      requires_grad=True)
    return ContextBank(
        centers=Tensor(result.centers),
        w_text=w_text,
        w_visual=w_visual,
        assignments=result.assignments,
        inertia=result.inertia,
        meta=meta or [],
        source_points=points,
    )


# -- prompt bundles ------------------------------------------------------------------


@dataclass
class PromptBundle:
    """Per-branch learnable prompts: one fresh token block per injected layer.

    Physical and digital bundles never share storage; that disjointness is
    what makes the two optimization branches isolated.
    """

    branch: str
    text_prompts: list[Tensor]    # depth entries, each [M_t, text_width]
    visual_prompts: list[Tensor]  # depth entries, each [M_v, image_width]

    @property
    def depth(self) -> int:
        return len(self.text_prompts)

    @property
    def text_len(self) -> int:
        return self.text_prompts[0].data.shape[0] if self.text_prompts else 0

    @property
    def visual_len(self) -> int:
        return self.visual_prompts[0].data.shape[0] if self.visual_prompts else 0


def create_prompt_bundle(branch: str, depth: int, text_len: int, visual_len: int,
                         config: EncoderConfig, rng: Rng) -> PromptBundle:
    if branch not in BRANCHES:
        raise InputError(f"unknown branch '{branch}'")
    return PromptBundle(
        branch=branch,
        text_prompts=[Tensor(rng.child(f"text{i}").truncated_normal((text_len, config.text_width),
                                                                    std=config.init_std), requires_grad=True)
                      for i in range(depth)],
        visual_prompts=[Tensor(rng.child(f"visual{i}").truncated_normal((visual_len, config.image_width),
                                                                        std=config.init_std), requires_grad=True)
                        for i in range(depth)],
    )


def zero_prompt_bundle(branch: str, depth: int, text_len: int, visual_len: int,
                       config: EncoderConfig) -> PromptBundle:
    """All-zero prompts (used by reduction and consistency checks)."""
    return PromptBundle(
        branch=branch,
        text_prompts=[Tensor(np.zeros((text_len, config.text_width)), requires_grad=True) for _ in range(depth)],
        visual_prompts=[Tensor(np.zeros((visual_len, config.image_width)), requires_grad=True) for _ in range(depth)],
    )


# -- sequence assembly ----------------------------------------------------------------


@dataclass
class AssembledSequence:
    tensor: Tensor
    roles: list[str]   # one role per position: sos|context|prompt|class-token|eos|cls|patch


def _context_rows(bank: ContextBank | None, which: str) -> Tensor | None:
    if bank is None or bank.k == 0:
        return None
    return bank.textual_context() if which == "text" else bank.visual_context()


def assemble_text_layer(layer: int, carried: Tensor, bank: ContextBank | None,
                        bundle: PromptBundle) -> AssembledSequence:
    """Rebuild a text-block input: [sos, context, prompts, class tokens, eos].

    ``carried`` is the previous block's output (or the embedding sequence
    for layer 1).  For layers <= bundle depth, context/prompt positions are
    replaced with fresh parameters; beyond that the sequence passes through.
    """
    k = bank.k if bank is not None else 0
    m = bundle.text_len
    n = carried.data.shape[0]
    if layer == 1:
        n_class = n - 2
    else:
        n_class = n - 2 - k - m
    if n_class < 0:
        raise InputError(f"carried text sequence too short for layout (n={n}, K={k}, M={m})")

    if layer > bundle.depth or (k == 0 and m == 0):
        roles = ["sos"] + ["context"] * k + ["prompt"] * m + ["class-token"] * n_class + ["eos"]
        if layer == 1:
            roles = ["sos"] + ["class-token"] * n_class + ["eos"]
        return AssembledSequence(carried, roles)

    sos = take_range(carried, 0, 0, 1)
    tail = take_range(carried, 0, n - n_class - 1, n)   # class tokens + eos
    parts = [sos]
    ctx = _context_rows(bank, "text")
    if ctx is not None:
        parts.append(ctx)
    if m:
        parts.append(bundle.text_prompts[layer - 1])
    parts.append(tail)
    seq = concat(parts, axis=0)
    roles = ["sos"] + ["context"] * k + ["prompt"] * m + ["class-token"] * n_class + ["eos"]
    return AssembledSequence(seq, roles)


def assemble_image_layer(layer: int, carried: Tensor, bank: ContextBank | None,
                         bundle: PromptBundle) -> AssembledSequence:
    """Rebuild an image-block input: [cls, patches, context, prompts].

    Works on batched sequences [B, n, w]; cls/patch positions carry forward,
    context/prompt positions are fresh per layer up to the bundle depth.
    """
    k = bank.k if bank is not None else 0
    m = bundle.visual_len
    bsz, n, w = carried.data.shape
    if layer == 1:
        n_patch = n - 1
    else:
        n_patch = n - 1 - k - m
    if n_patch < 0:
        raise InputError(f"carried image sequence too short for layout (n={n}, K={k}, M={m})")

    if layer > bundle.depth or (k == 0 and m == 0):
        roles = ["cls"] + ["patch"] * n_patch + ["context"] * k + ["prompt"] * m
        if layer == 1:
            roles = ["cls"] + ["patch"] * n_patch
        return AssembledSequence(carried, roles)

    head = take_range(carried, 1, 0, 1 + n_patch)      # cls + patches
    parts = [head]
    ctx = _context_rows(bank, "visual")
    if ctx is not None:
        parts.append(broadcast_to(reshape(ctx, (1, k, w)), (bsz, k, w)))
    if m:
        prompts = bundle.visual_prompts[layer - 1]
        parts.append(broadcast_to(reshape(prompts, (1, m, w)), (bsz, m, w)))
    seq = concat(parts, axis=1)
    roles = ["cls"] + ["patch"] * n_patch + ["context"] * k + ["prompt"] * m
    return AssembledSequence(seq, roles)


class TextInjectionHook:
    """Per-layer text assembly hook for :func:`encoders.encode_text`."""

    def __init__(self, bank: ContextBank | None, bundle: PromptBundle):
        self.bank = bank
        self.bundle = bundle
        self.last_roles: list[str] | None = None

    def __call__(self, layer: int, carried: Tensor) -> Tensor:
        assembled = assemble_text_layer(layer, carried, self.bank, self.bundle)
        self.last_roles = assembled.roles
        return assembled.tensor


class VisualInjectionHook:
    """Per-layer image assembly hook for :func:`encoders.encode_image`."""

    def __init__(self, bank: ContextBank | None, bundle: PromptBundle):
        self.bank = bank
        self.bundle = bundle
        self.last_roles: list[str] | None = None

    def __call__(self, layer: int, carried: Tensor) -> Tensor:
        assembled = assemble_image_layer(layer, carried, self.bank, self.bundle)
        self.last_roles = assembled.roles
        return assembled.tensor


# -- branch forward and fusion ----------------------------------------------------------


@dataclass
class BranchOutput:
    branch: str
    probabilities: Tensor       # [B, C] (or [C] for a single image)
    image_embeddings: Tensor    # [B, d] (or [d])
    class_embeddings: Tensor    # [C, d]
    class_names: list[str]


def branch_class_set(prompt_set: ClassPromptSet, branch: str) -> ClassPromptSet:
    """Two-class view for one branch: {live, that branch's attack class}."""
    if branch == PHYSICAL:
        names = [prompt_set.class_names[0], "physical attack"]
    elif branch == DIGITAL:
        names = [prompt_set.class_names[0], "digital attack"]
    else:
        raise InputError(f"unknown branch '{branch}'")
    missing = [n for n in names if n not in prompt_set.class_names]
    if missing:
        raise InputError(f"prompt set lacks classes {missing}")
    return prompt_set.subset(names)


def branch_forward(images, prompt_set: ClassPromptSet, branch: str, bank: ContextBank | None,
                   bundles: dict[str, PromptBundle], backbone: BackboneParams,
                   config: EncoderConfig, vocab: Vocabulary) -> BranchOutput:
    """Run both prompted encoders for one branch; head over its 2 classes.

    Class index 0 is always the live class.  The two branches share the
    context bank but own disjoint prompt parameters, so perturbing one
    branch's bundle cannot move the other branch's output.
    """
    if branch not in BRANCHES:
        raise InputError(f"unknown branch '{branch}'")
    bundle = bundles[branch]
    subset = branch_class_set(prompt_set, branch)

    class_rows = []
    for name in subset.class_names:
        hook = TextInjectionHook(bank, bundle)
        tokens = tokenize(subset.class_text(name), vocab, config.max_text_len)
        feat = encode_text(tokens, backbone, config, hook=hook)
        class_rows.append(reshape(feat, (1, config.embed_dim)))
    class_feats = concat(class_rows, axis=0)

    vhook = VisualInjectionHook(bank, bundle)
    image_feats = encode_image(images, backbone, config, hook=vhook)
    probs = class_probabilities(image_feats, class_feats, config.temperature)
    return BranchOutput(
        branch=branch,
        probabilities=probs,
        image_embeddings=image_feats,
        class_embeddings=class_feats,
        class_names=subset.class_names,
    )


def fuse_branches(live_physical, live_digital):
    """Unified live score: min of the branch live-probabilities.

    Equivalently the fused spoof score is the max of the branch spoof
    scores — either detector can reject on its own.
    """
    p = np.asarray(live_physical, dtype=np.float64)
    d = np.asarray(live_digital, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1) or np.any(d < 0) or np.any(d > 1):
        raise InputError("branch live-probabilities must lie in [0, 1]")
    fused = np.minimum(p, d)
    return float(fused) if fused.ndim == 0 else fused


def context_report(bank: ContextBank) -> str:
    """Cluster dump: sizes, inertia, nearest description per center."""
    lines = [f"context clusters: K={bank.k}", f"inertia: {bank.inertia:.6f}"]
    counts = np.bincount(bank.assignments, minlength=bank.k)
    for j in range(bank.k):
        line = f"cluster {j}: size={int(counts[j])}"
        if bank.source_points is not None and bank.meta:
            d2 = ((bank.source_points - bank.centers.data[j]) ** 2).sum(axis=1)
            cls, text = bank.meta[int(d2.argmin())]
            line += f' nearest="{text}" [{cls}]'
        lines.append(line)
    return "\n".join(lines)
