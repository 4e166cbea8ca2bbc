"""Learnable prompts and deep token tuning through a frozen text tower.

Exactly two prompt families are learned (normal and abnormal), independent of
dataset categories. Each prompt is a run of learnable token embeddings
followed by fixed word stems ("object" / "damaged object") and, when context
guidance is on, one token projected from the image's global visual embedding.
At text layers 2..J+1 the first M slots after the start token are overwritten
with per-layer learnable deep tokens before the block runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .backbone import TransformerBlock
from .config import PipelineConfig
from .errors import ConfigError, DataError

SOS, EOS, PAD = 0, 1, 2
VOCAB = {"<sos>": SOS, "<eos>": EOS, "<pad>": PAD, "object": 3, "damaged": 4}
VOCAB_SIZE = 16  # headroom for extra stem words

NORMAL_STEMS = ("object",)
ABNORMAL_STEMS = ("damaged", "object")


def tokenize(words: tuple[str, ...]) -> list[int]:
    try:
        return [VOCAB[w] for w in words]
    except KeyError as exc:
        raise DataError(f"word {exc.args[0]!r} not in the tower vocabulary") from None


class TextTower(nn.Module):
    """Minimal causal transformer text tower with EOS pooling."""

    def __init__(self, context_len: int, layers: int, width: int, heads: int, joint_dim: int):
        super().__init__()
        self.context_len = context_len
        self.width = width
        self.token_embedding = nn.Embedding(VOCAB_SIZE, width)
        self.pos_embed = nn.Parameter(torch.zeros(context_len, width))
        nn.init.normal_(self.pos_embed, std=0.01)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(layers))
        self.ln_final = nn.LayerNorm(width)
        self.text_proj = nn.Parameter(torch.empty(width, joint_dim))
        nn.init.normal_(self.text_proj, std=width ** -0.5)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)


class PromptBank(nn.Module):
    """All trainable state: prompt tokens, deep tokens, context projection."""

    def __init__(self, prompt_length: int, deep_tokens_per_layer: int, tuned_layers: int,
                 text_width: int, joint_dim: int):
        super().__init__()
        self.prompt_length = prompt_length
        self.deep_tokens_per_layer = deep_tokens_per_layer
        self.tuned_layers = tuned_layers
        self.normal_tokens = nn.Parameter(torch.empty(prompt_length, text_width))
        self.abnormal_tokens = nn.Parameter(torch.empty(prompt_length, text_width))
        nn.init.normal_(self.normal_tokens, std=0.02)
        nn.init.normal_(self.abnormal_tokens, std=0.02)
        # Deep tokens overwrite slots at layers 2..J+1 (1-based), never the SOS slot.
        self.deep_tokens = nn.ParameterDict({
            str(layer): nn.Parameter(torch.empty(deep_tokens_per_layer, text_width))
            for layer in range(2, tuned_layers + 2)
        })
        for p in self.deep_tokens.values():
            nn.init.normal_(p, std=0.02)
        self.context_proj = nn.Linear(joint_dim, text_width)
        if joint_dim == text_width:
            with torch.no_grad():
                self.context_proj.weight.copy_(torch.eye(text_width))
                self.context_proj.bias.zero_()

    def tuned_layer_indices(self) -> range:
        return range(2, self.tuned_layers + 2)


@dataclass
class PromptSequence:
    embeddings: Tensor  # (context_len, text_width)
    eos_index: int
    state: str


@dataclass
class TextPair:
    g_n: Tensor
    g_a: Tensor
    conditioned_on: str = ""


def init_params(cfg: PipelineConfig) -> PromptBank:
    """Deterministically initialize a prompt bank from the config seed."""
    state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    bank = PromptBank(
        prompt_length=cfg.prompt_length,
        deep_tokens_per_layer=cfg.deep_tokens_per_layer,
        tuned_layers=cfg.tuned_layers,
        text_width=cfg.text_width,
        joint_dim=cfg.joint_dim,
    )
    torch.random.set_rng_state(state)
    return bank.to(getattr(torch, cfg.dtype))


def build_text_tower(cfg: PipelineConfig) -> TextTower:
    if cfg.backbone != "toy":
        raise ConfigError(f"unknown backbone {cfg.backbone!r}")
    state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed + 2)
    tower = TextTower(
        context_len=cfg.context_len,
        layers=cfg.text_layers,
        width=cfg.text_width,
        heads=cfg.text_heads,
        joint_dim=cfg.joint_dim,
    )
    torch.random.set_rng_state(state)
    tower.to(getattr(torch, cfg.dtype))
    tower.eval()
    for p in tower.parameters():
        p.requires_grad_(False)
    return tower


def build_prompt_sequence(state: str, g_i: Tensor, bank: PromptBank, tower: TextTower,
                          context_guided: bool = True) -> PromptSequence:
    """Assemble [SOS] + learnable tokens + word stems (+ context token) + [EOS].

    The sequence is padded to the tower's context length; the context token is
    the projected global visual embedding, placed immediately before EOS. The
    visual embedding is treated as conditioning context and detached.
    """
    if state == "normal":
        stems, tokens = NORMAL_STEMS, bank.normal_tokens
    elif state == "abnormal":
        stems, tokens = ABNORMAL_STEMS, bank.abnormal_tokens
    else:
        raise ConfigError(f"prompt state must be 'normal' or 'abnormal', got {state!r}")
    if not torch.isfinite(g_i).all():
        raise DataError("global visual embedding contains non-finite values")

    embed = tower.token_embedding.weight
    parts = [embed[SOS].unsqueeze(0), tokens]
    parts.append(embed[torch.tensor(tokenize(stems))])
    if context_guided:
        parts.append(bank.context_proj(g_i.detach()).unsqueeze(0))
    parts.append(embed[EOS].unsqueeze(0))
    seq = torch.cat(parts, dim=0)
    if seq.shape[0] > tower.context_len:
        raise DataError(
            f"prompt sequence length {seq.shape[0]} exceeds context length {tower.context_len}"
        )
    eos_index = seq.shape[0] - 1
    pad = embed[PAD].unsqueeze(0).expand(tower.context_len - seq.shape[0], -1)
    return PromptSequence(embeddings=torch.cat([seq, pad], dim=0), eos_index=eos_index, state=state)


def encode_text(seq: PromptSequence, bank: PromptBank, tower: TextTower) -> Tensor:
    """Run the frozen tower with deep token replacement; return the projected EOS feature."""
    m = bank.deep_tokens_per_layer
    if seq.eos_index <= m:
        raise DataError("deep token replacement would overrun the EOS position")
    hidden = seq.embeddings + tower.pos_embed
    tuned = set(bank.tuned_layer_indices())
    for index, block in enumerate(tower.blocks, start=1):
        if index in tuned:
            hidden = torch.cat(
                [hidden[:1], bank.deep_tokens[str(index)], hidden[1 + m:]], dim=0)
        hidden = block(hidden, causal=True)
    return tower.ln_final(hidden[seq.eos_index]) @ tower.text_proj


def encode_pair(bank: PromptBank, tower: TextTower, g_i: Tensor, image_id: str = "",
                context_guided: bool = True) -> TextPair:
    """Encode both prompt states against one image's global embedding."""
    g_n = encode_text(build_prompt_sequence("normal", g_i, bank, tower, context_guided), bank, tower)
    g_a = encode_text(build_prompt_sequence("abnormal", g_i, bank, tower, context_guided), bank, tower)
    return TextPair(g_n=g_n, g_a=g_a, conditioned_on=image_id)
