"""Language-model side: token assembly, a small in-repo decoder, and joint training.

The bound model only has to satisfy :class:`LanguageModelContract`:
``embed(text)`` gives ``[T, D]`` text tokens, ``generate(sequence)`` greedily
decodes from a ``[L, D]`` embedding sequence. ``ToyLM`` is a word-level
causal transformer that trains in minutes on a CPU; large pretrained models
plug in through :data:`LANGUAGE_MODELS`.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .align import FusionMode, ProjectionW, embed_visual, visual_prefix
from .errors import EmptyDataset, ModelUnavailable, NonFiniteLoss, NoStageFound, ShapeMismatch
from .extract import StagePrediction, extract_stage
from .stages import Stage

log = logging.getLogger(__name__)

__all__ = [
    "StagePrediction",
    "extract_stage",
    "assemble_inputs",
    "generate",
    "WordTokenizer",
    "ToyLM",
    "ToyLMConfig",
    "JointConfig",
    "JointModel",
    "JointExample",
    "train_joint",
    "predict_joint",
]


class LanguageModelContract(Protocol):
    dim: int

    def embed(self, text: str) -> torch.Tensor: ...

    def generate(self, sequence: torch.Tensor, max_length: int = 64) -> str: ...


def assemble_inputs(h_v: torch.Tensor, h_f_prime: torch.Tensor, h_q: torch.Tensor) -> torch.Tensor:
    """Row-wise concatenation ``[h_v; h_f_prime; h_q]``."""
    return assemble_sequence([h_v, h_f_prime], h_q)


def assemble_sequence(visual: Sequence, h_q) -> torch.Tensor:
    blocks = list(visual) + [h_q]
    if h_q.shape[-2] < 1:
        raise ShapeMismatch("text tokens must contain at least one row")
    dims = {b.shape[-1] for b in blocks}
    if len(dims) != 1:
        raise ShapeMismatch(f"embedding dims differ across blocks: {sorted(dims)}")
    if isinstance(h_q, torch.Tensor):
        return torch.cat([torch.as_tensor(b) for b in blocks], dim=-2)
    return np.concatenate(blocks, axis=-2)


# ---------------------------------------------------------------- tokenizer

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
_SPECIALS = (PAD, BOS, EOS, UNK)
_TOKEN = re.compile(r"\n|[A-Za-z0-9]+(?:[-'][A-Za-z0-9]+)*|[^\sA-Za-z0-9]")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text)


class WordTokenizer:
    def __init__(self, vocab: Sequence[str]):
        if tuple(vocab[: len(_SPECIALS)]) != _SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "WordTokenizer":
        words = sorted({w for t in texts for w in tokenize(t)})
        return cls(list(_SPECIALS) + [w for w in words if w not in _SPECIALS])

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    def encode(self, text: str) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(w, unk) for w in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = [self.vocab[i] for i in ids if i >= len(_SPECIALS) or self.vocab[i] == UNK]
        text = " ".join(words)
        text = re.sub(r" ?\n ?", "\n", text)
        text = re.sub(r" ([.,:;!?)])", r"\1", text)
        return re.sub(r"\( ", "(", text)


# ---------------------------------------------------------------- toy LM


@dataclass(frozen=True)
class ToyLMConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_mult: int = 4
    max_len: int = 1024


class ToyLM(nn.Module):
    """Word-level causal transformer over arbitrary embedding prefixes."""

    def __init__(self, tokenizer: WordTokenizer, config: ToyLMConfig = ToyLMConfig()):
        super().__init__()
        self.tokenizer = tokenizer
        self.config = config
        self.dim = config.dim
        self.tok_emb = nn.Embedding(len(tokenizer), config.dim)
        self.pos_emb = nn.Embedding(config.max_len, config.dim)
        layer = nn.TransformerEncoderLayer(
            config.dim,
            config.heads,
            config.ff_mult * config.dim,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(config.dim)
        self.head = nn.Linear(config.dim, len(tokenizer))
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.tok_emb(ids)

    def embed(self, text: str) -> torch.Tensor:
        ids = torch.tensor(self.tokenizer.encode(text), dtype=torch.long)
        return self.tok_emb(ids)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        """Next-token logits for every position of ``[B, L, D]``."""
        length = seq.shape[1]
        if length > self.config.max_len:
            raise ShapeMismatch(f"sequence of {length} exceeds max_len {self.config.max_len}")
        x = seq + self.pos_emb(torch.arange(length))
        mask = nn.Transformer.generate_square_subsequent_mask(length)
        x = self.blocks(x, mask=mask, is_causal=True)
        return self.head(self.norm(x))

    @torch.no_grad()
    def generate_ids(self, sequences: torch.Tensor, max_length: int = 64) -> list[list[int]]:
        """Greedy decoding for a batch of equal-length prefixes ``[B, L, D]``."""
        batch = sequences.shape[0]
        out: list[list[int]] = [[] for _ in range(batch)]
        if max_length <= 0:
            return out
        bos = self.tok_emb(torch.full((batch, 1), self.tokenizer.bos_id))
        seq = torch.cat([sequences, bos], dim=1)
        done = torch.zeros(batch, dtype=torch.bool)
        for _ in range(max_length):
            nxt = self.forward(seq)[:, -1].argmax(-1)
            for i in range(batch):
                if not done[i]:
                    if int(nxt[i]) == self.tokenizer.eos_id:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if bool(done.all()) or seq.shape[1] + 1 > self.config.max_len:
                break
            seq = torch.cat([seq, self.tok_emb(nxt)[:, None]], dim=1)
        return out

    @torch.no_grad()
    def generate(self, sequence: torch.Tensor, max_length: int = 64) -> str:
        was_training = self.training
        self.eval()
        try:
            ids = self.generate_ids(torch.as_tensor(sequence)[None], max_length)[0]
        finally:
            self.train(was_training)
        return self.tokenizer.decode(ids)


LANGUAGE_MODELS: dict[str, Callable[..., nn.Module]] = {"toy-lm": ToyLM}


def get_language_model(lm_id: str, *args, **kwargs) -> nn.Module:
    try:
        factory = LANGUAGE_MODELS[lm_id]
    except KeyError:
        raise ModelUnavailable(f"language model {lm_id!r} is not registered; known: {sorted(LANGUAGE_MODELS)}") from None
    return factory(*args, **kwargs)


def generate(lm: LanguageModelContract | None, sequence: torch.Tensor, max_length: int = 64) -> str:
    if lm is None:
        raise ModelUnavailable("no language model bound")
    if max_length <= 0:
        return ""
    return lm.generate(sequence, max_length)


# ---------------------------------------------------------------- joint model


@dataclass(frozen=True)
class JointConfig:
    fusion: FusionMode = FusionMode.PATCH_ALIGNED
    use_cot: bool = True
    lm_id: str = "toy-lm"
    lm: ToyLMConfig = ToyLMConfig()
    projection_hidden: int | None = None
    epochs: int = 2
    learning_rate: float = 3e-4
    batch_size: int = 8
    seed: int = 0
    max_answer_tokens: int = 160

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fusion"] = FusionMode(self.fusion).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "JointConfig":
        d = dict(d)
        d["fusion"] = FusionMode(d["fusion"])
        d["lm"] = ToyLMConfig(**d["lm"])
        return cls(**d)


@dataclass
class JointExample:
    z_v: np.ndarray  # [P, 1024]
    z_f: np.ndarray  # [1024]
    question: str
    answer: str
    truth: Stage | None = None
    image_path: str = ""


class JointModel(nn.Module):
    """Shared projection W plus the bound language model."""

    def __init__(self, tokenizer: WordTokenizer, config: JointConfig = JointConfig(), token_dim: int = 1024):
        super().__init__()
        self.config = config
        self.lm = get_language_model(config.lm_id, tokenizer, config.lm)
        self.projection = ProjectionW(self.lm.dim, token_dim, config.projection_hidden)

    @property
    def tokenizer(self) -> WordTokenizer:
        return self.lm.tokenizer

    def prefix(self, z_v: torch.Tensor, z_f: torch.Tensor, q_ids: torch.Tensor) -> torch.Tensor:
        """``[B, L, D]`` input embeddings for the configured fusion wiring."""
        tokens = embed_visual(z_v, z_f, self.projection)
        return assemble_sequence(visual_prefix(tokens, self.config.fusion), self.lm.embed_ids(q_ids))


def _batch_tensors(examples: Sequence[JointExample], tok: WordTokenizer):
    z_v = torch.as_tensor(np.stack([e.z_v for e in examples]), dtype=torch.float32)
    z_f = torch.as_tensor(np.stack([e.z_f for e in examples]), dtype=torch.float32)
    q = [tok.encode(e.question) for e in examples]
    if len({len(x) for x in q}) != 1:
        raise ShapeMismatch("questions in one batch must have equal token length")
    return z_v, z_f, torch.tensor(q, dtype=torch.long)


def joint_loss(model: JointModel, examples: Sequence[JointExample]) -> torch.Tensor:
    tok = model.tokenizer
    z_v, z_f, q_ids = _batch_tensors(examples, tok)
    answers = [tok.encode(e.answer)[: model.config.max_answer_tokens] for e in examples]
    longest = max(len(a) for a in answers) + 1
    inputs = torch.full((len(examples), longest), tok.pad_id, dtype=torch.long)
    targets = torch.full((len(examples), longest), -100, dtype=torch.long)
    for i, a in enumerate(answers):
        seq = [tok.bos_id] + a
        inputs[i, : len(seq)] = torch.tensor(seq)
        targets[i, : len(seq)] = torch.tensor(a + [tok.eos_id])
    prefix = model.prefix(z_v, z_f, q_ids)
    seq = torch.cat([prefix, model.lm.embed_ids(inputs)], dim=1)
    logits = model.lm(seq)[:, prefix.shape[1] :]
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


@dataclass
class JointTrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def train_joint(model: JointModel, examples: Sequence[JointExample]) -> JointTrainLog:
    """Train W and the toy LM; the visual features arrive precomputed (frozen encoders)."""
    if not examples:
        raise EmptyDataset("no joint-training examples")
    cfg = model.config
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    out = JointTrainLog()
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(len(examples), generator=gen).tolist()
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            loss = joint_loss(model, batch)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite joint loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            out.step_losses.append(loss.item())
            total += loss.item() * len(batch)
        out.epoch_losses.append(total / len(examples))
        log.info("joint epoch %d loss %.4f", epoch, out.epoch_losses[-1])
    model.eval()
    return out


def new_joint_model(examples: Sequence[JointExample], config: JointConfig) -> JointModel:
    torch.manual_seed(config.seed)
    if not examples:
        raise EmptyDataset("no joint-training examples")
    tok = WordTokenizer.build([e.question for e in examples] + [e.answer for e in examples])
    return JointModel(tok, config, token_dim=int(examples[0].z_f.shape[-1]))


@dataclass
class JointPrediction:
    text: str
    label: Stage | None
    extraction_site: int | None = None


@torch.no_grad()
def predict_joint(model: JointModel, examples: Sequence[JointExample], batch_size: int = 32) -> list[JointPrediction]:
    model.eval()
    tok = model.tokenizer
    preds: list[JointPrediction] = []
    for start in range(0, len(examples), batch_size):
        batch = examples[start : start + batch_size]
        prefix = model.prefix(*_batch_tensors(batch, tok))
        for ids in model.lm.generate_ids(prefix, model.config.max_answer_tokens):
            text = tok.decode(ids)
            try:
                p = extract_stage(text)
                preds.append(JointPrediction(text, p.label, p.extraction_site))
            except NoStageFound:
                preds.append(JointPrediction(text, None))
    return preds


def save_joint(model: JointModel, path: str | Path) -> Path:
    manifest = {
        "kind": "joint",
        "config": model.config.to_dict(),
        "vocab": model.tokenizer.vocab,
        "token_dim": model.projection.in_dim,
    }
    return checkpoint.save_arrays(path, checkpoint.state_to_arrays(model), manifest)


def load_joint(path: str | Path) -> JointModel:
    arrays, manifest = checkpoint.load_arrays(path)
    model = JointModel(WordTokenizer(manifest["vocab"]), JointConfig.from_dict(manifest["config"]), manifest["token_dim"])
    checkpoint.load_state(model, arrays)
    model.eval()
    return model
