"""Text -> sub-category predictor used at sampling time.

A bidirectional LSTM reads the (frozen) word vectors of a description; the
final forward and backward states are concatenated and passed through a
linear softmax head.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .textemb import WordVectorTable, tokenize

log = logging.getLogger(__name__)

__all__ = [
    "LabelPredictorConfig",
    "LabelPredictor",
    "LabelNetError",
    "TrainingReport",
    "Prediction",
    "encode_sequence",
    "train_label_predictor",
    "predict_label",
    "save_label_predictor",
    "load_label_predictor",
]


class LabelNetError(ValueError):
    pass


@dataclass
class LabelPredictorConfig:
    d_e: int
    num_labels: int
    hidden: int = 64
    max_len: int = 32
    dropout: float = 0.1
    lr: float = 3e-3
    epochs: int = 8
    batch_size: int = 64
    holdout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.hidden <= 0 or self.d_e <= 0 or self.num_labels <= 0:
            raise LabelNetError("hidden, d_e and num_labels must be positive")
        if self.max_len < 1:
            raise LabelNetError("max_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise LabelNetError("dropout must lie in [0, 1)")


class LabelPredictor(nn.Module):
    def __init__(self, cfg: LabelPredictorConfig):
        super().__init__()
        self.cfg = cfg
        self.rnn = nn.LSTM(cfg.d_e, cfg.hidden, batch_first=True, bidirectional=True)
        self.drop = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(2 * cfg.hidden, cfg.num_labels)

    def forward(self, seqs: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        packed = pack_padded_sequence(seqs, lengths.cpu(), batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.rnn(packed)
        # h_n: (2, B, hidden) -> forward final state, backward final state
        h = torch.cat([h_n[0], h_n[1]], dim=1)
        return self.head(self.drop(h))


def encode_sequence(table: WordVectorTable, text: str, max_len: int) -> tuple[np.ndarray, bool]:
    """Word-vector sequence for ``text``, truncated to ``max_len`` tokens.

    Out-of-vocabulary tokens are skipped. An empty result becomes a single
    all-zero step and the second return value is True.
    """
    vecs = [v for v in (table.get(t) for t in tokenize(text)) if v is not None][:max_len]
    if not vecs:
        return np.zeros((1, table.dim), dtype=np.float32), True
    return np.stack(vecs).astype(np.float32), False


def _pad(seqs: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.as_tensor([len(s) for s in seqs])
    out = torch.zeros(len(seqs), int(lengths.max()), seqs[0].shape[1])
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s)
    return out, lengths


@dataclass
class TrainingReport:
    epoch_loss: list = field(default_factory=list)
    heldout_accuracy: list = field(default_factory=list)
    n_train: int = 0
    n_heldout: int = 0


def train_label_predictor(config: LabelPredictorConfig, corpus, table: WordVectorTable):
    """Fit a predictor on ``corpus`` = [(text, label), ...].

    A seeded ``config.holdout`` fraction is held out for accuracy
    reporting (none when the corpus is too small to spare one).
    Returns ``(model, TrainingReport)``.
    """
    corpus = list(corpus)
    if not corpus:
        raise LabelNetError("empty corpus")
    if table.dim != config.d_e:
        raise LabelNetError(f"word vectors have dim {table.dim}, config expects {config.d_e}")
    for i, (_, y) in enumerate(corpus):
        if not 0 <= int(y) < config.num_labels:
            raise LabelNetError(f"corpus[{i}]: label {y} out of range [0, {config.num_labels})")

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    seqs = [encode_sequence(table, t, config.max_len)[0] for t, _ in corpus]
    labels = torch.as_tensor([int(y) for _, y in corpus])
    order = torch.randperm(len(corpus), generator=gen)
    n_hold = int(len(corpus) * config.holdout) if len(corpus) >= 10 else 0
    hold, fit = order[:n_hold], order[n_hold:]

    model = LabelPredictor(config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    report = TrainingReport(n_train=len(fit), n_heldout=n_hold)
    for _ in range(config.epochs):
        model.train()
        perm = fit[torch.randperm(len(fit), generator=gen)]
        total, count = 0.0, 0
        for i in range(0, len(perm), config.batch_size):
            idx = perm[i:i + config.batch_size].tolist()
            x, lengths = _pad([seqs[j] for j in idx])
            loss = F.cross_entropy(model(x, lengths), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        report.epoch_loss.append(total / count)
        if n_hold:
            model.eval()
            with torch.no_grad():
                x, lengths = _pad([seqs[j] for j in hold.tolist()])
                acc = (model(x, lengths).argmax(1) == labels[hold]).float().mean()
            report.heldout_accuracy.append(float(acc))
    model.eval()
    return model, report


@dataclass
class Prediction:
    index: int
    probs: np.ndarray
    empty_input: bool = False


@torch.no_grad()
def predict_label(model: LabelPredictor, table: WordVectorTable, text: str) -> Prediction:
    model.eval()
    seq, empty = encode_sequence(table, text, model.cfg.max_len)
    if empty:
        log.warning("no in-vocabulary tokens in %r; predicting from a zero input", text)
    logits = model(torch.as_tensor(seq)[None], torch.as_tensor([len(seq)]))[0].double()
    probs = torch.softmax(logits, dim=0).numpy()
    return Prediction(int(probs.argmax()), probs, empty)


def save_label_predictor(model: LabelPredictor, path, report: TrainingReport | None = None,
                         **extra):
    return save_checkpoint(path, "labelnet", asdict(model.cfg), {"model": model.state_dict()},
                           report=asdict(report) if report else None, **extra)


def load_label_predictor(path) -> tuple[LabelPredictor, dict]:
    payload = load_checkpoint(path, "labelnet")
    model = LabelPredictor(LabelPredictorConfig(**payload["config"]))
    model.load_state_dict(payload["state"]["model"])
    model.eval()
    return model, payload
