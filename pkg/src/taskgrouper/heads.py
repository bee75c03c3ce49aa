"""Per-head sequence recognizers and the losses that couple them to routing.

A head is a position-wise teacher-forced classifier over its (prunable)
charset: the prediction at position l sees the feature vector at l and the
embedding of the previous label (a start embedding at l = 0), runs through a
two-layer relu MLP, and projects to one logit per supported character. This
stands in for a full attention decoder while keeping the same loss interface:
the per-word loss is the mean over positions of -log p(true character).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .routing import ProbMatrix
from .tensor import ShapeMismatchError, Tensor

# Reserved code embedded at position 0 of every word; always survives pruning.
START_CODE = 0


class UnsupportedCharacterError(ValueError):
    """A label code is outside the head's charset (possible only after pruning)."""

    def __init__(self, head_id: int, code: int):
        self.head_id = head_id
        self.code = code
        super().__init__(f"head {head_id} does not support character code {code}")


@dataclass
class WordInstance:
    """One training sample: per-position feature vectors, label codes, optional task id."""

    features: np.ndarray  # (s, d)
    labels: np.ndarray    # (s,) integer character codes
    gt_task: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("WordInstance needs 2-d features and 1-d labels")
        if self.features.shape[0] != self.labels.shape[0] or self.labels.shape[0] < 1:
            raise ValueError("WordInstance: features rows must equal labels length >= 1")

    @property
    def length(self) -> int:
        return int(self.labels.shape[0])


class RecognitionHead:
    """Teacher-forced position-wise decoder over an ordered charset.

    Parameters: an embedding table (|charset| x embed), separate first-layer
    weights for the feature and embedding halves of the input, a second hidden
    layer, and an output projection (hidden -> |charset|). The output dimension
    always equals |charset| and shrinks only through :func:`prune_head`.
    """

    PARAM_NAMES = ("embed", "w_feat", "w_embed", "b1", "w2", "b2", "w_out", "b_out")

    def __init__(
        self,
        head_id: int,
        feature_dim: int,
        embed_size: int,
        hidden_size: int,
        charset,
        rng: np.random.Generator,
    ):
        charset = tuple(int(c) for c in charset)
        if len(set(charset)) != len(charset) or not charset:
            raise ValueError("charset must be non-empty with unique codes")
        self.head_id = int(head_id)
        self.feature_dim = int(feature_dim)
        self.embed_size = int(embed_size)
        self.hidden_size = int(hidden_size)
        self.charset = charset
        self._index = {c: i for i, c in enumerate(charset)}
        c, d, e, h = len(charset), feature_dim, embed_size, hidden_size

        def init(rows, cols, scale):
            return rng.normal(0.0, scale, (rows, cols)) if cols else rng.normal(0.0, scale, rows)

        self.embed = self._param(init(c, e, 0.1), "embed")
        self.w_feat = self._param(init(d, h, np.sqrt(2.0 / d)), "w_feat")
        self.w_embed = self._param(init(e, h, np.sqrt(2.0 / e)), "w_embed")
        self.b1 = self._param(np.zeros(h), "b1")
        self.w2 = self._param(init(h, h, np.sqrt(2.0 / h)), "w2")
        self.b2 = self._param(np.zeros(h), "b2")
        self.w_out = self._param(init(h, c, 0.01), "w_out")
        self.b_out = self._param(np.zeros(c), "b_out")

    def _param(self, data, name) -> Tensor:
        return Tensor(data, requires_grad=True, name=f"head{self.head_id}.{name}")

    @classmethod
    def from_arrays(
        cls, head_id, feature_dim, embed_size, hidden_size, charset, arrays: dict
    ) -> "RecognitionHead":
        """Build a head from explicit parameter arrays (checkpoint load, pruning)."""
        head = cls.__new__(cls)
        head.head_id = int(head_id)
        head.feature_dim = int(feature_dim)
        head.embed_size = int(embed_size)
        head.hidden_size = int(hidden_size)
        head.charset = tuple(int(c) for c in charset)
        head._index = {c: i for i, c in enumerate(head.charset)}
        for name in cls.PARAM_NAMES:
            setattr(head, name, head._param(np.array(arrays[name], dtype=np.float64), name))
        return head

    def parameters(self) -> list[Tensor]:
        return [getattr(self, name) for name in self.PARAM_NAMES]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name).data.copy() for name in self.PARAM_NAMES}

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def config(self) -> tuple[int, int]:
        return (self.embed_size, self.hidden_size)

    # -- forward paths ---------------------------------------------------------

    def _code_index(self, code: int) -> int:
        try:
            return self._index[int(code)]
        except KeyError:
            raise UnsupportedCharacterError(self.head_id, int(code)) from None

    def _teacher_indices(self, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(previous-label indices, label indices) for one word."""
        label_idx = np.array([self._code_index(c) for c in labels], dtype=np.int64)
        prev_idx = np.empty_like(label_idx)
        prev_idx[0] = self._code_index(START_CODE)
        prev_idx[1:] = label_idx[:-1]
        return prev_idx, label_idx

    def forward_positions(self, features: np.ndarray, prev_indices: np.ndarray) -> Tensor:
        """Logits (n, |charset|) for n positions given features and previous-label indices."""
        if features.ndim != 2 or features.shape[1] != self.feature_dim:
            raise ShapeMismatchError("head_forward", features.shape, (features.shape[0], self.feature_dim))
        feats = Tensor(features)
        emb = self.embed.gather_rows(prev_indices)
        h1 = ((feats @ self.w_feat) + (emb @ self.w_embed) + self.b1).relu()
        h2 = ((h1 @ self.w2) + self.b2).relu()
        return (h2 @ self.w_out) + self.b_out

    def forward_word(self, word: WordInstance) -> Tensor:
        prev_idx, _ = self._teacher_indices(word.labels)
        return self.forward_positions(word.features, prev_idx)

    def word_losses(self, batch: list[WordInstance]) -> Tensor:
        """Per-word sequence losses for a batch, as a (w, 1) tensor.

        All positions are flattened into one forward pass; a constant averaging
        matrix maps picked log-probabilities back to per-word means.
        """
        if not batch:
            raise ValueError("word_losses: empty batch")
        feats = np.concatenate([w.features for w in batch], axis=0)
        prev_parts, label_parts = [], []
        for w in batch:
            prev_idx, label_idx = self._teacher_indices(w.labels)
            prev_parts.append(prev_idx)
            label_parts.append(label_idx)
        prev_all = np.concatenate(prev_parts)
        labels_all = np.concatenate(label_parts)

        averager = np.zeros((len(batch), feats.shape[0]))
        pos = 0
        for k, w in enumerate(batch):
            averager[k, pos:pos + w.length] = 1.0 / w.length
            pos += w.length

        logits = self.forward_positions(feats, prev_all)
        picked = logits.log_softmax_rows().take_per_row(labels_all)  # (n, 1)
        return (Tensor(averager) @ picked).scale(-1.0)

    def predict_word(self, word: WordInstance) -> np.ndarray:
        """Teacher-forced argmax character codes per position."""
        logits = self.forward_word(word)
        idx = logits.data.argmax(axis=1)
        codes = np.array(self.charset, dtype=np.int64)
        return codes[idx]


def head_forward(head: RecognitionHead, word: WordInstance) -> Tensor:
    """Per-position logits (s x |charset|) under teacher forcing."""
    return head.forward_word(word)


def seq_loss(logits: Tensor, labels, head: RecognitionHead) -> Tensor:
    """Mean over positions of -log softmax-probability of the true character."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeMismatchError("seq_loss", logits.shape, labels.shape)
    label_idx = np.array([head._code_index(c) for c in labels], dtype=np.int64)
    picked = logits.log_softmax_rows().take_per_row(label_idx)
    return picked.mean().scale(-1.0)


def stack_columns(columns: list[Tensor]) -> Tensor:
    """Stack m column vectors (w, 1) into a (w, m) matrix, differentiably."""
    m = len(columns)
    if m == 0:
        raise ValueError("stack_columns: no columns")
    out = None
    for j, col in enumerate(columns):
        if col.ndim != 2 or col.shape[1] != 1 or col.shape[0] != columns[0].shape[0]:
            raise ShapeMismatchError("stack_columns", col.shape, columns[0].shape)
        selector = np.zeros((1, m))
        selector[0, j] = 1.0
        term = col @ Tensor(selector)
        out = term if out is None else out + term
    return out


def integrated_loss(loss_matrix: Tensor, p_wm: ProbMatrix, epsilon: float) -> Tensor:
    """Sum over words and heads of (p(M_j|W_k) + epsilon) * per-word loss.

    The epsilon floor keeps every head training on every word at a small
    positive rate; per-(word, head) effective weights lie in [eps, 1 + eps].
    """
    if epsilon < 0:
        raise ValueError("integrated_loss: epsilon must be >= 0")
    if loss_matrix.shape != p_wm.shape:
        raise ShapeMismatchError("integrated_loss", loss_matrix.shape, p_wm.shape)
    weights = p_wm.tensor + Tensor(np.full(p_wm.shape, float(epsilon)))
    return (weights * loss_matrix).sum()


def prune_head(head: RecognitionHead, keep) -> RecognitionHead:
    """Drop output-projection and embedding rows for characters outside ``keep``.

    Retained parameters are copied bit-identically, so relative probabilities
    among kept characters are unchanged. The kept charset preserves the
    original ordering.
    """
    keep_set = {int(c) for c in keep}
    if not keep_set:
        raise ValueError("prune_head: keep must be non-empty")
    extra = keep_set - set(head.charset)
    if extra:
        raise ValueError(f"prune_head: codes {sorted(extra)} not in head charset")
    kept = tuple(c for c in head.charset if c in keep_set)
    kept_idx = np.array([head._index[c] for c in kept], dtype=np.int64)

    arrays = head.state_arrays()
    arrays["embed"] = arrays["embed"][kept_idx].copy()
    arrays["w_out"] = arrays["w_out"][:, kept_idx].copy()
    arrays["b_out"] = arrays["b_out"][kept_idx].copy()
    return RecognitionHead.from_arrays(
        head.head_id, head.feature_dim, head.embed_size, head.hidden_size, kept, arrays
    )
