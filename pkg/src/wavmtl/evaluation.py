"""Top-1 accuracy for keyword spotting and trial-pair EER for verification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SV_SAMPLES, slice_utterance
from .losses import cosine_similarity
from .nn import inference
from .tensor import Tensor


@dataclass
class ScoredTrial:
    score: float
    same_speaker: bool


def top1_accuracy(logits, labels):
    """Fraction of rows whose argmax equals the label (ties -> lowest index)."""
    scores = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[0] != labels.size:
        raise ValueError(f"need (N, n) logits with N >= 1 matching {labels.size} labels")
    return float(np.mean(scores.argmax(axis=1) == labels))


def _split_trials(trials):
    scores = np.array([t.score for t in trials], dtype=np.float64)
    labels = np.array([bool(t.same_speaker) for t in trials])
    if not np.all(np.isfinite(scores)):
        raise ValueError("trial scores must be finite")
    if labels.all() or not labels.any():
        raise ValueError("EER needs at least one same-speaker and one different-speaker trial")
    return scores, labels


def error_curve(trials):
    """(thresholds, FPR, FNR) for accept-if-score>=threshold.

    Thresholds are -inf, every distinct score, then +inf, so FPR falls from
    1 to 0 and FNR rises from 0 to 1.
    """
    scores, labels = _split_trials(trials)
    pos = np.sort(scores[labels])
    neg = np.sort(scores[~labels])
    thresholds = np.concatenate([[-np.inf], np.unique(scores), [np.inf]])
    fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    fnr = np.searchsorted(pos, thresholds, side="left") / pos.size
    return thresholds, fpr, fnr


def compute_eer(trials):
    """Equal error rate with linear interpolation at the FPR/FNR crossing."""
    _, fpr, fnr = error_curve(trials)
    diff = fpr - fnr
    i = int(np.argmax(diff <= 0))      # first point at or past the crossing
    if diff[i] == 0:
        return float(fpr[i])
    a, b = diff[i - 1], diff[i]
    alpha = a / (a - b)
    return float(fpr[i - 1] + alpha * (fpr[i] - fpr[i - 1]))


def roc_auc(trials):
    """Probability that a random positive outscores a random negative."""
    scores, labels = _split_trials(trials)
    pos, neg = scores[labels], scores[~labels]
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def embed_clip(model, head, clip, window=SV_SAMPLES, cache=None):
    """Speaker embedding of one clip in eval mode.

    Clips up to ``window`` samples are right-padded to it; longer clips are
    averaged over non-overlapping full windows.
    """
    key = clip.source_id or id(clip)
    if cache is not None and key in cache:
        return cache[key]
    samples = clip.samples
    if len(samples) <= window:
        rows = np.concatenate([samples, np.zeros(window - len(samples))])[None]
    else:
        n = len(samples) // window
        rows = samples[:n * window].reshape(n, window)
    with inference(model, head):
        emb = head(model(rows)).data.mean(axis=0)
    if cache is not None:
        cache[key] = emb
    return emb


def score_trial_pairs(model, head, pairs, window=SV_SAMPLES):
    """Cosine score of each trial pair from eval-mode embeddings."""
    was_training = [m.training for m in (model, head)]
    model.eval()
    head.eval()
    cache = {}
    try:
        out = []
        for p in pairs:
            a = embed_clip(model, head, p.clip_a, window, cache)
            b = embed_clip(model, head, p.clip_b, window, cache)
            out.append(ScoredTrial(cosine_similarity(a, b), bool(p.same_speaker)))
        return out
    finally:
        model.train(was_training[0])
        head.train(was_training[1])


def classify(model, head, utterances, batch_size=16, length=16000):
    """Logits for a list of utterances (eval mode), batched."""
    was_training = [m.training for m in (model, head)]
    model.eval()
    head.eval()
    try:
        rows = [slice_utterance(u.clip, length, None, start=0).samples for u in utterances]
        out = []
        for i in range(0, len(rows), batch_size):
            with inference(model, head):
                out.append(head(model(np.stack(rows[i:i + batch_size]))).data)
        return np.concatenate(out, axis=0)
    finally:
        model.train(was_training[0])
        head.train(was_training[1])


def write_results(path, metrics, trials=None, scores_path=None):
    """``metric=value`` lines, plus an optional ``score label`` dump."""
    with open(path, "w") as fh:
        for name, value in metrics.items():
            fh.write(f"{name}={value}\n")
    if trials is not None and scores_path is not None:
        with open(scores_path, "w") as fh:
            for t in trials:
                fh.write(f"{t.score!r} {int(t.same_speaker)}\n")
