"""Toy autoregressive multimodal backbone with low-rank adapters.

Image patches form a bidirectional prefix; text positions attend to every
patch and causally to earlier text. Visual-thinking tokens are ordinary
vocabulary entries appended after the base vocabulary.
"""
from __future__ import annotations

import math
import re
import zlib
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import CovtConfig, ThoughtChain, TokenSchema, VisualSlot
from .errors import BudgetExceeded, RankTooLarge, ShapeMismatch

CONTROL_TOKENS = ("<pad>", "<bos>", "<eos>", "<image>", "<think>", "</think>", "<unk>")

# Words used by the synthetic curriculum; anything else hashes into the tail buckets.
LEXICON = (
    "?", ".", ",", "a", "an", "the", "is", "are", "there", "how", "many", "what", "which", "of",
    "in", "on", "to", "this", "image", "shape", "shapes", "object", "objects", "closest", "farthest",
    "nearest", "camera", "largest", "smallest", "brightest", "darkest", "rectangle", "disk",
    "rectangles", "disks", "count", "kind", "answer", "generate", "visual", "thinking", "tokens",
    "for", "with", "and", "it", "zero", "one", "two", "three", "four", "five", "six", "seven",
    "eight", "yes", "no", "left", "right", "top", "bottom", "describe", "scene", "background",
    "depth", "edge", "segmentation", "features", "first", "second", "third",
)

_TOKEN_RE = re.compile(r"</?[A-Za-z][^<>\s]*>|[A-Za-z0-9']+|[^\sA-Za-z0-9<]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text)


def token_spans(text: str):
    return [(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


class Vocab:
    """Word-level toy vocabulary: controls, lexicon, hash buckets, then visual literals."""

    def __init__(self, schema: TokenSchema, base_size: int = 512):
        fixed = len(CONTROL_TOKENS) + len(LEXICON)
        if base_size <= fixed:
            raise ValueError(f"base vocabulary must exceed {fixed}")
        self.schema = schema
        self.base_size = base_size
        self._words = list(CONTROL_TOKENS) + list(LEXICON)
        self._index = {w: i for i, w in enumerate(self._words)}
        self._buckets = base_size - fixed
        self.literals = schema.literals()
        self.special_start = base_size
        self._special = {lit: base_size + k for k, lit in enumerate(self.literals)}
        lookup = schema.lookup()
        self.id_to_slot = {self._special[lit]: lookup[lit] for lit in self.literals}

    pad_id = 0
    bos_id = 1
    eos_id = 2
    image_id = 3
    think_id = 4
    think_end_id = 5
    unk_id = 6

    def __len__(self) -> int:
        return self.base_size + len(self.literals)

    def special_id(self, group: str, index: int) -> int:
        return self._special[self.schema.literal(group, index)]

    def is_special(self, token_id: int) -> bool:
        return token_id >= self.special_start

    def token_to_id(self, tok: str) -> int:
        if tok in self._special:
            return self._special[tok]
        if tok in self._index:
            return self._index[tok]
        if tok.startswith("<") and tok.endswith(">"):
            return self.unk_id
        return len(self._words) + zlib.crc32(tok.encode("utf-8")) % self._buckets

    def id_to_token(self, i: int) -> str:
        if i >= self.special_start:
            return self.literals[i - self.special_start]
        if i < len(self._words):
            return self._words[i]
        return f"<w{i}>"

    def encode(self, text: str) -> list[int]:
        return [self.token_to_id(t if t.startswith("<") else t.lower()) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            tok = self.id_to_token(int(i))
            # visual literals and think markers glue together, words are space separated
            if out and (tok.startswith("<") and out[-1].endswith(">") and not tok.startswith("<w")):
                out[-1] += tok
            else:
                out.append(tok)
        return " ".join(out)


class LowRankLinear(nn.Module):
    """Frozen linear map plus a trainable delta ``scaling * A @ B`` (A: m x r, B: r x n)."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, generator: torch.Generator | None = None):
        super().__init__()
        m, n = base.weight.shape
        if rank > min(m, n):
            raise RankTooLarge(f"rank {rank} exceeds min({m}, {n})")
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        dtype = base.weight.dtype
        self.A = nn.Parameter(torch.empty(m, rank, dtype=dtype))
        self.B = nn.Parameter(torch.zeros(rank, n, dtype=dtype))
        nn.init.kaiming_uniform_(self.A, a=math.sqrt(5), generator=generator)
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def weight(self) -> torch.Tensor:
        return self.base.weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * ((x @ self.B.T) @ self.A.T)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q, k, v = (z.view(b, t, h, d // h).transpose(1, 2) for z in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // h)
        att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, d)
        x = x + self.out(y)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class ToyBackbone(nn.Module):
    def __init__(self, cfg: CovtConfig, vocab: Vocab):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = len(vocab)
        self.hidden_dim = cfg.hidden_dim
        self.patch = cfg.patch_size
        self.n_patches = cfg.patch_count
        self.max_text_len = cfg.max_text_len
        d = cfg.hidden_dim
        self.base_vocab = vocab.base_size
        self.tok_emb = nn.Embedding(vocab.base_size, d)
        # rows for the added visual literals live outside the frozen base
        self.literal_emb = nn.Parameter(torch.zeros(len(vocab.literals), d))
        self.patch_embed = nn.Linear(self.patch * self.patch, d)
        self.pos_emb = nn.Parameter(torch.zeros(self.n_patches + self.max_text_len, d))
        self.blocks = nn.ModuleList(Block(d, cfg.head_count) for _ in range(cfg.layer_count))
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, vocab.base_size, bias=False)
        self.literal_head = nn.Parameter(torch.zeros(len(vocab.literals), d))
        self._init(cfg.seed)

    def _init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif "ln" in name:
                nn.init.ones_(p)
            else:
                with torch.no_grad():
                    p.copy_(torch.randn(p.shape, generator=gen) * 0.02)
        with torch.no_grad():
            # token embeddings at unit scale keep identities distinct after the frozen stack
            self.tok_emb.weight.mul_(50.0)
            self.literal_emb.mul_(50.0)
            self.patch_embed.weight.mul_(50.0 / self.patch)

    def _patches(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w = images.shape
        p = self.patch
        x = images.reshape(b, h // p, p, w // p, p).permute(0, 1, 3, 2, 4).reshape(b, -1, p * p)
        return self.patch_embed(x)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        is_lit = ids >= self.base_vocab
        base = self.tok_emb(torch.where(is_lit, 0, ids))
        lit = self.literal_emb[torch.where(is_lit, ids - self.base_vocab, 0)]
        return torch.where(is_lit[..., None], lit, base)

    def _mask(self, t: int, device) -> torch.Tensor:
        n = self.n_patches
        total = n + t
        mask = torch.zeros(total, total, dtype=torch.bool, device=device)
        mask[:, :n] = True
        mask[n:, n:] = torch.ones(t, t, dtype=torch.bool, device=device).tril()
        return mask

    def forward(self, token_ids, image) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (logits, hiddens) for the text positions.

        Accepts a single sequence (T,) with an (H, W) image, or a batch
        (B, T) with (B, H, W) images.
        """
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        dtype = self.pos_emb.dtype
        images = torch.as_tensor(image, dtype=dtype)
        single = ids.dim() == 1
        if single:
            ids = ids[None]
            images = images[None]
        if ids.dim() != 2 or ids.shape[1] == 0:
            raise ShapeMismatch("token_ids must be a non-empty sequence")
        if ids.shape[1] > self.max_text_len:
            raise ShapeMismatch(f"sequence length {ids.shape[1]} exceeds {self.max_text_len}")
        size = self.cfg.image_size
        if images.shape[1:] != (size, size) or images.shape[0] != ids.shape[0]:
            raise ShapeMismatch(f"image batch {tuple(images.shape)} does not match ({ids.shape[0]}, {size}, {size})")
        if int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size:
            raise ShapeMismatch("token id outside vocabulary")
        t = ids.shape[1]
        x = torch.cat([self._patches(images), self._embed(ids)], dim=1)
        x = x + self.pos_emb[: self.n_patches + t]
        mask = self._mask(t, x.device)
        for blk in self.blocks:
            x = blk(x, mask)
        hid = self.ln_f(x[:, self.n_patches:])
        logits = torch.cat([self.lm_head(hid), hid @ self.literal_head.T], dim=-1)
        if single:
            return logits[0], hid[0]
        return logits, hid

    def base_parameters(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not is_trainable_name(n)}

    def adapter_parameters(self) -> dict[str, torch.Tensor]:
        """Low-rank factors plus the added literal rows: everything fine-tuning may move."""
        return {n: p for n, p in self.named_parameters() if is_trainable_name(n)}


NEW_TOKEN_PARAMS = ("literal_emb", "literal_head")


def is_trainable_name(name: str) -> bool:
    return name.endswith((".A", ".B")) or name in NEW_TOKEN_PARAMS


ADAPTER_TARGETS = ("qkv", "out", "lm_head", "patch_embed")


def apply_low_rank_adapters(backbone: ToyBackbone, rank: int, alpha: float,
                            targets: Sequence[str] = ADAPTER_TARGETS, seed: int | None = None) -> ToyBackbone:
    """Wrap every targeted linear layer in place and freeze all base weights."""
    gen = torch.Generator().manual_seed(backbone.cfg.seed + 2 if seed is None else seed)
    found = []
    for parent in backbone.modules():
        for name, child in list(parent.named_children()):
            if name in targets and isinstance(child, nn.Linear):
                found.append((parent, name, child))
    for _, _, child in found:
        m, n = child.weight.shape
        if rank > min(m, n):
            raise RankTooLarge(f"rank {rank} exceeds min({m}, {n})")
    for p in backbone.parameters():
        p.requires_grad_(False)
    for parent, name, child in found:
        setattr(parent, name, LowRankLinear(child, rank, alpha, gen))
    for name in NEW_TOKEN_PARAMS:
        getattr(backbone, name).requires_grad_(True)
    return backbone


def log_sequence_probability(logits: torch.Tensor, token_ids: Sequence[int], start: int = 0) -> torch.Tensor:
    """log P(y_start+1..T | prefix) as a sum of per-position log-softmax terms."""
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    logp = torch.log_softmax(logits[:-1], dim=-1)
    picked = logp.gather(1, ids[1:, None])[:, 0]
    return picked[start:].sum()


@torch.no_grad()
def generate_with_visual_thoughts(backbone: ToyBackbone, vocab: Vocab, prompt_ids: Sequence[int],
                                  image, max_len: int) -> ThoughtChain:
    """Greedy decoding that records the final-layer hidden vector of every emitted visual token."""
    ids = [int(t) for t in prompt_ids]
    if max_len < len(ids):
        raise ShapeMismatch("max_len shorter than the prompt")
    max_len = min(max_len, backbone.max_text_len)
    schema = vocab.schema
    slots: list[VisualSlot] = []
    seen: set[tuple[str, int]] = set()
    per_group: dict[str, int] = {}
    pending: list[int] = []
    hid = None
    while True:
        if len(ids) >= max_len and not pending:
            break
        logits, hid = backbone(ids, image)
        for pos in pending:
            group, idx = vocab.id_to_slot[ids[pos]]
            slots.append(VisualSlot(pos, group, idx, hid[pos].detach().cpu().numpy().copy()))
        pending = []
        if len(ids) >= max_len:
            break
        nxt = int(torch.argmax(logits[-1]))
        if nxt in vocab.id_to_slot:
            group, idx = vocab.id_to_slot[nxt]
            per_group[group] = per_group.get(group, 0) + 1
            if (group, idx) in seen or per_group[group] > schema.count(group):
                raise BudgetExceeded(f"{schema.literal(group, idx)} emitted beyond the {group} budget")
            seen.add((group, idx))
            pending.append(len(ids))
        ids.append(nxt)
        if nxt == vocab.eos_id and not pending:
            break
    return ThoughtChain(ids, slots)


def hidden_at(backbone: ToyBackbone, chain: ThoughtChain, image) -> np.ndarray:
    """Re-run the backbone on a finished chain and return hiddens at its visual slots."""
    with torch.no_grad():
        _, hid = backbone(chain.token_ids, image)
    return np.stack([hid[s.position].cpu().numpy() for s in chain.visual_slots]) if chain.visual_slots \
        else np.zeros((0, backbone.hidden_dim), dtype=np.float32)
