"""Prompt construction and the decoder-only language model.

The prompt template carries three placeholders: <IMAGE> (expanded into the
compressed visual token sequence at assembly time), <DESCRIPTION> (the
instruction text, wrapped in delimiter tokens that are excluded from the
description span) and <ANSWER> (filled only when training the reasoning
task). The LM runs causally over the mixed embedding sequence; hidden
states at the description span are the conditioning signal for the mask
query.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import LMConfig
from .errors import ConfigurationError, DataError

# Byte-level vocabulary: 256 raw bytes + special ids. The placeholders are
# special ids so text tokenization can never produce them.
PAD, BOS, EOS, IMAGE, DESC_START, DESC_END = range(256, 262)
VOCAB_SIZE = 262

_PLACEHOLDER = re.compile(r"<(IMAGE|DESCRIPTION|ANSWER)>")


class ByteTokenizer:
    """UTF-8 bytes plus the special ids above; needs no external assets."""

    vocab_size = VOCAB_SIZE

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: list[int]) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


@dataclass
class PromptTemplate:
    task: str
    text: str

    def __post_init__(self) -> None:
        for name in ("IMAGE", "DESCRIPTION", "ANSWER"):
            count = self.text.count(f"<{name}>")
            if count != 1:
                raise ConfigurationError(
                    f"template for task {self.task!r} needs exactly one <{name}>, found {count}"
                )


@dataclass
class TokenizedPrompt:
    ids: list[int]
    image_pos: int
    description_span: tuple[int, int]
    answer_span: tuple[int, int] | None


@dataclass
class MultimodalSequence:
    """Embedding sequence with the <IMAGE> slot expanded into visual tokens.

    ``token_ids`` aligns with ``embeddings`` and holds -1 at visual
    positions so only genuine text positions can become CE targets.
    """

    embeddings: torch.Tensor  # (T, D)
    token_ids: torch.Tensor  # (T,) long, -1 inside visual_span
    visual_span: tuple[int, int]
    description_span: tuple[int, int]
    answer_span: tuple[int, int] | None

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def build_prompt(
    instruction: str,
    template: PromptTemplate,
    tokenizer: ByteTokenizer,
    answer: str | None = None,
    include_answer: bool = False,
) -> TokenizedPrompt:
    """Tokenize the template with the instruction spliced in.

    The returned ids contain one IMAGE placeholder token; the description
    is wrapped in DESC_START/DESC_END with the span covering only the
    content between them.
    """
    if not instruction:
        raise DataError("instruction is empty")
    if include_answer and not answer:
        raise DataError("training a reasoning sample requires answer text")

    ids: list[int] = [BOS]
    image_pos = -1
    description_span: tuple[int, int] | None = None
    answer_span: tuple[int, int] | None = None

    cursor = 0
    for match in _PLACEHOLDER.finditer(template.text):
        ids.extend(tokenizer.encode(template.text[cursor : match.start()]))
        name = match.group(1)
        if name == "IMAGE":
            image_pos = len(ids)
            ids.append(IMAGE)
        elif name == "DESCRIPTION":
            ids.append(DESC_START)
            start = len(ids)
            ids.extend(tokenizer.encode(instruction))
            description_span = (start, len(ids))
            ids.append(DESC_END)
        else:  # ANSWER
            if include_answer:
                start = len(ids)
                ids.extend(tokenizer.encode(answer))
                ids.append(EOS)
                answer_span = (start, len(ids))
            else:
                # Generation prompt: stop right where the answer would begin.
                if image_pos < 0 or description_span is None:
                    raise ConfigurationError(
                        "template places <ANSWER> before <IMAGE>/<DESCRIPTION>"
                    )
                return TokenizedPrompt(ids, image_pos, description_span, None)
        cursor = match.end()
    ids.extend(tokenizer.encode(template.text[cursor:]))
    return TokenizedPrompt(ids, image_pos, description_span, answer_span)


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, t, self.heads, d // self.heads)
        q, k, v = (y.view(shape).transpose(1, 2) for y in (q, k, v))
        out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.proj(out.transpose(1, 2).reshape(b, t, d))


class LMBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class CausalLM(nn.Module):
    def __init__(self, config: LMConfig):
        super().__init__()
        self.config = config
        self.token_emb = nn.Embedding(VOCAB_SIZE, config.hidden_size)
        self.pos_emb = nn.Embedding(config.max_positions, config.hidden_size)
        self.blocks = nn.ModuleList(
            LMBlock(config.hidden_size, config.heads, config.mlp_ratio)
            for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.hidden_size)
        self.head = nn.Linear(config.hidden_size, VOCAB_SIZE, bias=False)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_emb(ids)

    def forward(self, embeddings: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, D) embeddings -> final hidden states (B, T, D) and
        next-token logits (B, T, V). Position t attends only to <= t."""
        t = embeddings.shape[1]
        if t > self.config.max_positions:
            raise ValueError(
                f"sequence length {t} exceeds max_positions {self.config.max_positions}; "
                "refusing to truncate"
            )
        positions = torch.arange(t, device=embeddings.device)
        x = embeddings + self.pos_emb(positions)[None]
        for block in self.blocks:
            x = block(x)
        hidden = self.final_norm(x)
        return hidden, self.head(hidden)


def assemble(
    lm: CausalLM, prompt: TokenizedPrompt, visual_tokens: torch.Tensor
) -> MultimodalSequence:
    """Expand the IMAGE placeholder into the visual token sequence and
    re-index every span."""
    if visual_tokens.ndim != 2 or visual_tokens.shape[0] < 1:
        raise DataError("visual token sequence must be (N >= 1, D)")
    if visual_tokens.shape[1] != lm.config.hidden_size:
        raise ConfigurationError(
            f"visual token dim {visual_tokens.shape[1]} != LM hidden {lm.config.hidden_size}"
        )
    n = visual_tokens.shape[0]
    ids = torch.tensor(prompt.ids, dtype=torch.long, device=visual_tokens.device)
    text_emb = lm.embed_tokens(ids)
    p = prompt.image_pos
    embeddings = torch.cat([text_emb[:p], visual_tokens, text_emb[p + 1 :]], dim=0)
    token_ids = torch.cat(
        [ids[:p], torch.full((n,), -1, dtype=torch.long, device=ids.device), ids[p + 1 :]]
    )

    def shift(span: tuple[int, int] | None) -> tuple[int, int] | None:
        if span is None:
            return None
        offset = n - 1
        return (span[0] + offset, span[1] + offset) if span[0] > p else span

    return MultimodalSequence(
        embeddings=embeddings,
        token_ids=token_ids,
        visual_span=(p, p + n),
        description_span=shift(prompt.description_span),
        answer_span=shift(prompt.answer_span),
    )


def extract_description_embeddings(
    hidden: torch.Tensor, description_span: tuple[int, int]
) -> torch.Tensor:
    """Final-layer hidden states at the description positions, in order."""
    start, end = description_span
    if end <= start:
        raise DataError("description span is empty")
    return hidden[start:end]


@torch.no_grad()
def generate_answer(
    lm: CausalLM,
    seq: MultimodalSequence,
    tokenizer: ByteTokenizer,
    max_new_tokens: int = 96,
) -> str:
    """Greedy autoregressive decode from the end of the prompt until EOS or
    the length cap; returns the decoded text (possibly empty)."""
    lm.eval()
    embeddings = seq.embeddings[None]
    generated: list[int] = []
    for _ in range(max_new_tokens):
        if embeddings.shape[1] >= lm.config.max_positions:
            break
        _, logits = lm(embeddings)
        next_id = int(logits[0, -1].argmax())
        if next_id == EOS:
            break
        generated.append(next_id)
        next_emb = lm.embed_tokens(torch.tensor([next_id], device=embeddings.device))
        embeddings = torch.cat([embeddings, next_emb[None]], dim=1)
    return tokenizer.decode(generated)
