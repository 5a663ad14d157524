"""Frozen dual encoder: tokenizer, patch/text towers, similarity head.

The backbone is a seeded randomly-initialized stand-in for a pretrained
dual encoder and is frozen after construction; adaptation happens only
through injected prompt sequences (see :mod:`spoofprompt.prompts`).  A
loader accepts real weights in the checkpoint archive format for anyone
who has them.

Reference scale from the source setting, for documentation only:
224x224x3 inputs, 14x14 patches, 512-dim joint features.  The desk-scale
default is 32x32 input, patch 8, 32-dim features, 4 blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_checkpoint, params_checksum
from .errors import ConfigError, InputError
from .layers import BlockParams, cosine_matrix, init_block_params, layer_norm, linear, softmax, transformer_block
from .tensor import Rng, Tensor, broadcast_to, concat, embedding_lookup, matmul, reshape, take_range, transpose

PAD_ID, SOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ["<pad>", "<sos>", "<eos>", "<unk>"]

# Reference (full-scale) configuration, kept as documentation.
FULL_SCALE_REFERENCE = {"image_size": 224, "patch_size": 14, "embed_dim": 512}

_DEFAULT_WORDS = [
    "a", "an", "the", "photo", "image", "picture", "of", "face", "person", "human",
    "real", "live", "genuine", "bona", "fide", "natural", "skin", "texture", "with",
    "smooth", "lighting", "camera", "attack", "spoof", "fake", "presentation",
    "physical", "digital", "print", "printed", "paper", "flat", "glossy", "surface",
    "replay", "screen", "monitor", "display", "moire", "interference", "grid",
    "pattern", "raster", "lines", "mask", "3d", "resin", "plaster", "worn",
    "forgery", "forged", "manipulated", "swap", "swapped", "identity", "edit",
    "edited", "attribute", "synthetic", "generated", "blend", "blended", "blending",
    "boundary", "artifact", "checkerboard", "high", "frequency", "local", "patch",
    "region", "pixel", "level", "noise", "shown", "to", "on", "in", "and",
]


@dataclass
class Vocabulary:
    """Whitespace-token vocabulary; line number in the file is the id."""

    tokens: list[str]

    def __post_init__(self):
        if self.tokens[:4] != RESERVED_TOKENS:
            raise ConfigError("vocabulary must start with reserved tokens <pad>,<sos>,<eos>,<unk>")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(RESERVED_TOKENS + _DEFAULT_WORDS)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")


def tokenize(text: str, vocab: Vocabulary, max_text_len: int) -> list[int]:
    """Lower-case, whitespace-split, map OOV to UNK, bracket with SOS/EOS.

    Overlong inputs are truncated so the result never exceeds
    ``max_text_len`` and always ends with EOS.
    """
    words = text.lower().split()
    if not words:
        raise InputError("cannot tokenize empty text")
    ids = [vocab.index.get(w, UNK_ID) for w in words]
    ids = ids[: max_text_len - 2]
    return [SOS_ID] + ids + [EOS_ID]


@dataclass
class ClassPromptSet:
    """Class names plus a template and per-class spoof-aware descriptions."""

    class_names: list[str]
    template: str = "a photo of a {}"
    descriptions: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.class_names) < 2:
            raise ConfigError("a prompt set needs at least 2 classes")
        for name in self.class_names:
            if not self.descriptions.get(name):
                self.descriptions[name] = [self.template.format(name)]

    def class_text(self, name: str) -> str:
        return self.template.format(name)

    def subset(self, names: list[str]) -> "ClassPromptSet":
        return ClassPromptSet(
            class_names=list(names),
            template=self.template,
            descriptions={n: list(self.descriptions[n]) for n in names},
        )

    def all_descriptions(self) -> list[tuple[str, str]]:
        """(class name, description) pairs across every class, in order."""
        return [(name, d) for name in self.class_names for d in self.descriptions[name]]

    @classmethod
    def default_unified(cls) -> "ClassPromptSet":
        return cls(
            class_names=["real face", "physical attack", "digital attack"],
            descriptions={
                "real face": [
                    "a photo of a real face",
                    "a genuine live face with natural skin texture",
                    "a bona fide person in front of the camera",
                    "a real human face with natural lighting",
                ],
                "physical attack": [
                    "a photo of a printed face on flat glossy paper",
                    "a replay attack shown on a screen with moire interference pattern",
                    "a face print with raster lines and flat texture",
                    "a person presenting a 3d mask to the camera",
                ],
                "digital attack": [
                    "a digitally swapped identity with blending boundary artifact",
                    "a forged face with a local high frequency checkerboard patch",
                    "an edited face region with pixel level noise",
                    "a synthetic generated face with blended region",
                ],
            },
        )

    @classmethod
    def load(cls, path) -> "ClassPromptSet":
        doc = yaml.safe_load(Path(path).read_text())
        try:
            return cls(
                class_names=list(doc["classes"]),
                template=doc.get("template", "a photo of a {}"),
                descriptions={k: list(v) for k, v in doc["classes"].items()},
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"bad class-prompt file {path}: {exc}") from exc

    def save(self, path) -> None:
        doc = {"template": self.template, "classes": {n: self.descriptions[n] for n in self.class_names}}
        Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 32          # shared image/text output space
    depth: int = 4
    heads: int = 4
    text_width: int = 32
    image_width: int = 48
    max_text_len: int = 16
    temperature: float = 0.05
    mlp_ratio: float = 4.0
    init_std: float = 0.02
    vocab_size: int = 0          # filled from the vocabulary when 0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.text_width % self.heads != 0 or self.image_width % self.heads != 0:
            raise ConfigError("encoder widths must be divisible by heads")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class TowerParams:
    blocks: list[BlockParams]
    final_gamma: Tensor
    final_beta: Tensor
    proj: Tensor  # [embed_dim, width]


@dataclass
class VisualTower(TowerParams):
    patch_weight: Tensor  # [width, 3*patch*patch]
    patch_bias: Tensor
    cls_token: Tensor     # [width]
    pos_embed: Tensor     # [1+num_patches, width]


@dataclass
class TextTower(TowerParams):
    token_embed: Tensor   # [vocab, width]
    pos_embed: Tensor     # [max_text_len, width]


@dataclass
class BackboneParams:
    visual: VisualTower
    text: TextTower
    frozen: bool = True


def init_backbone(config: EncoderConfig, rng: Rng, vocab: Vocabulary) -> BackboneParams:
    """Seeded random backbone, frozen: the desk-scale pretrained stand-in."""
    if config.vocab_size == 0:
        config.vocab_size = len(vocab)
    elif config.vocab_size != len(vocab):
        raise ConfigError(f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
    # embeddings (tokens, positions, cls) use init_std; weight matrices use
    # fan-in scaling so the random towers actually mix content at toy depth
    std = config.init_std
    vr = rng.child("visual")
    patch_fan_in = 3 * config.patch_size ** 2
    visual = VisualTower(
        blocks=[init_block_params(config.image_width, vr.child(f"block{i}"), config.mlp_ratio)
                for i in range(config.depth)],
        final_gamma=Tensor(np.ones(config.image_width)),
        final_beta=Tensor(np.zeros(config.image_width)),
        proj=Tensor(vr.child("proj").truncated_normal(
            (config.embed_dim, config.image_width), std=config.image_width ** -0.5)),
        patch_weight=Tensor(vr.child("patch").truncated_normal(
            (config.image_width, patch_fan_in), std=patch_fan_in ** -0.5)),
        patch_bias=Tensor(np.zeros(config.image_width)),
        cls_token=Tensor(vr.child("cls").truncated_normal((config.image_width,), std=std)),
        pos_embed=Tensor(vr.child("pos").truncated_normal(
            (1 + config.num_patches, config.image_width), std=std)),
    )
    tr = rng.child("text")
    text = TextTower(
        blocks=[init_block_params(config.text_width, tr.child(f"block{i}"), config.mlp_ratio)
                for i in range(config.depth)],
        final_gamma=Tensor(np.ones(config.text_width)),
        final_beta=Tensor(np.zeros(config.text_width)),
        proj=Tensor(tr.child("proj").truncated_normal(
            (config.embed_dim, config.text_width), std=config.text_width ** -0.5)),
        token_embed=Tensor(tr.child("tok").truncated_normal((len(vocab), config.text_width), std=std)),
        pos_embed=Tensor(tr.child("pos").truncated_normal((config.max_text_len, config.text_width), std=std)),
    )
    return BackboneParams(visual=visual, text=text, frozen=True)


def _block_entries(prefix: str, bp: BlockParams) -> list[tuple[str, Tensor]]:
    a = bp.attention
    return [
        (f"{prefix}.norm1.gamma", bp.norm1_gamma), (f"{prefix}.norm1.beta", bp.norm1_beta),
        (f"{prefix}.attn.qkv.weight", a.qkv_weight), (f"{prefix}.attn.qkv.bias", a.qkv_bias),
        (f"{prefix}.attn.out.weight", a.out_weight), (f"{prefix}.attn.out.bias", a.out_bias),
        (f"{prefix}.norm2.gamma", bp.norm2_gamma), (f"{prefix}.norm2.beta", bp.norm2_beta),
        (f"{prefix}.mlp.in.weight", bp.mlp_in_weight), (f"{prefix}.mlp.in.bias", bp.mlp_in_bias),
        (f"{prefix}.mlp.out.weight", bp.mlp_out_weight), (f"{prefix}.mlp.out.bias", bp.mlp_out_bias),
    ]


def named_backbone_params(backbone: BackboneParams) -> dict[str, Tensor]:
    """Dotted-name map over every backbone tensor (checkpoint keys)."""
    v, t = backbone.visual, backbone.text
    entries: list[tuple[str, Tensor]] = [
        ("backbone.visual.patch.weight", v.patch_weight),
        ("backbone.visual.patch.bias", v.patch_bias),
        ("backbone.visual.cls_token", v.cls_token),
        ("backbone.visual.pos_embed", v.pos_embed),
        ("backbone.visual.final.gamma", v.final_gamma),
        ("backbone.visual.final.beta", v.final_beta),
        ("backbone.visual.proj", v.proj),
        ("backbone.text.token_embed", t.token_embed),
        ("backbone.text.pos_embed", t.pos_embed),
        ("backbone.text.final.gamma", t.final_gamma),
        ("backbone.text.final.beta", t.final_beta),
        ("backbone.text.proj", t.proj),
    ]
    for i, bp in enumerate(v.blocks):
        entries.extend(_block_entries(f"backbone.visual.blocks.{i}", bp))
    for i, bp in enumerate(t.blocks):
        entries.extend(_block_entries(f"backbone.text.blocks.{i}", bp))
    return dict(entries)


def backbone_checksum(backbone: BackboneParams) -> str:
    return params_checksum(named_backbone_params(backbone))


def load_backbone(path, config: EncoderConfig, vocab: Vocabulary) -> BackboneParams:
    """Rebuild a backbone from a checkpoint archive (real or saved weights)."""
    arrays = load_checkpoint(path)
    backbone = init_backbone(config, Rng(0), vocab)
    named = named_backbone_params(backbone)
    for name, tensor in named.items():
        if name not in arrays:
            raise ConfigError(f"checkpoint missing backbone key '{name}'")
        if arrays[name].shape != tensor.data.shape:
            raise ConfigError(f"checkpoint key '{name}' shape {arrays[name].shape} != {tensor.data.shape}")
        tensor.data[...] = arrays[name]
    return backbone


# -- forward passes ---------------------------------------------------------------


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """[H,W,3] (or [B,H,W,3]) -> [N,3*p*p] (or [B,N,3*p*p]), row-major grid."""
    single = image.ndim == 3
    if single:
        image = image[None]
    b, h, w, c = image.shape
    p = patch_size
    grid = image.reshape(b, h // p, p, w // p, p, c)
    patches = grid.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // p) * (w // p), p * p * c)
    return patches[0] if single else patches


def encode_image(image, backbone: BackboneParams, config: EncoderConfig, hook=None) -> Tensor:
    """Image(s) -> joint-space feature(s): [d] for [H,W,3], [B,d] for [B,H,W,3].

    ``hook(layer_index, sequence) -> sequence`` runs before each block and
    may rebuild the block input (prompt injection); layer_index is 1-based.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    single = arr.ndim == 3
    expect = (config.image_size, config.image_size, 3)
    if (arr.shape if single else arr.shape[1:]) != expect:
        raise InputError(f"image shape {arr.shape} does not match config {expect}")
    patches = Tensor(patchify(arr[None] if single else arr, config.patch_size))
    v = backbone.visual
    tokens = linear(patches, v.patch_weight, v.patch_bias)          # [B, N, w]
    bsz = tokens.data.shape[0]
    cls = broadcast_to(reshape(v.cls_token, (1, 1, config.image_width)), (bsz, 1, config.image_width))
    seq = concat([cls, tokens], axis=1) + v.pos_embed
    for layer in range(1, config.depth + 1):
        if hook is not None:
            seq = hook(layer, seq)
        seq = transformer_block(seq, v.blocks[layer - 1], config.heads, causal=False)
    out = layer_norm(seq, v.final_gamma, v.final_beta)
    cls_out = reshape(take_range(out, 1, 0, 1), (bsz, config.image_width))
    feats = matmul(cls_out, transpose(v.proj))                       # [B, d]
    return reshape(feats, (config.embed_dim,)) if single else feats


def _validate_tokens(token_ids, config: EncoderConfig) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 2:
        raise InputError("token sequence must be 1-D with at least SOS and EOS")
    if ids[0] != SOS_ID or ids[-1] != EOS_ID:
        raise InputError("token sequence must start with SOS and end with EOS")
    if ids.size > config.max_text_len:
        raise InputError(f"token sequence length {ids.size} exceeds max_text_len {config.max_text_len}")
    if config.vocab_size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InputError("token id out of vocabulary range")
    return ids


def encode_text(token_ids, backbone: BackboneParams, config: EncoderConfig, hook=None) -> Tensor:
    """Token ids -> joint-space feature [d], read off at the EOS position.

    The text tower runs with causal masking; the EOS token stays the final
    position under prompt injection, so read-off is always the last row.
    """
    ids = _validate_tokens(token_ids, config)
    t = backbone.text
    seq = embedding_lookup(t.token_embed, ids) + take_range(t.pos_embed, 0, 0, ids.size)
    for layer in range(1, config.depth + 1):
        if hook is not None:
            seq = hook(layer, seq)
        seq = transformer_block(seq, t.blocks[layer - 1], config.heads, causal=True)
    out = layer_norm(seq, t.final_gamma, t.final_beta)
    eos = take_range(out, 0, out.data.shape[0] - 1, out.data.shape[0])  # [1, w]
    return reshape(matmul(eos, transpose(t.proj)), (config.embed_dim,))


def class_embeddings(prompt_set: ClassPromptSet, backbone: BackboneParams, config: EncoderConfig,
                     vocab: Vocabulary) -> Tensor:
    """Zero-shot class features [C, d]: one template encoding per class."""
    rows = [encode_text(tokenize(prompt_set.class_text(n), vocab, config.max_text_len), backbone, config)
            for n in prompt_set.class_names]
    return concat([reshape(r, (1, config.embed_dim)) for r in rows], axis=0)


def description_embeddings(prompt_set: ClassPromptSet, backbone: BackboneParams, config: EncoderConfig,
                           vocab: Vocabulary) -> tuple[np.ndarray, list[tuple[str, str]]]:
    """All per-class description features stacked [n, d], plus (class, text) rows.

    This is the clustering input: every class contributes every description.
    """
    meta = prompt_set.all_descriptions()
    rows = []
    for _, text in meta:
        feat = encode_text(tokenize(text, vocab, config.max_text_len), backbone, config)
        rows.append(feat.data)
    return np.stack(rows, axis=0), meta


def class_probabilities(v, class_features, temperature: float) -> Tensor:
    """Similarity head: softmax over cos(v, class_c) / temperature.

    Accepts a single feature [d] -> [C], or a batch [B, d] -> [B, C].
    """
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
    single = v.data.ndim == 1
    if single:
        v = reshape(v, (1, v.data.shape[0]))
    sims = cosine_matrix(v, class_features)
    probs = softmax(sims, temperature=temperature, axis=-1)
    if single:
        probs = reshape(probs, (probs.data.shape[1],))
    return probs
