"""Decoding protocols: beam search, nucleus and top-k sampling, bracketed
image generation, and cycle-consistency reranking.

Sequence scores are sums of step log-probabilities over emitted tokens
(including the terminating end token when one is produced), normalized by
emitted length ** length_norm.  Ties break toward the lexicographically
smallest token sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .codec import ImageGrid, decode_tokens
from .model import (N_SPECIALS, SPECIALS, DuVlgModel, decode_forward, encode,
                    unified_to_visual, visual_to_unified)

_STRATEGIES = ("greedy", "beam", "nucleus", "topk")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "beam"
    beam_size: int = 5
    top_p: float = 0.9
    k: int = 50
    n_samples: int = 16
    max_len: int = 24
    temperature: float = 1.0
    modality: str = "text"  # restricts emittable ids: "text" or "image"
    length_norm: float = 1.0

    def __post_init__(self):
        if self.strategy not in _STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.beam_size < 1 or self.k < 1 or self.n_samples < 1 or self.max_len < 1:
            raise ValueError("beam_size, k, n_samples, max_len must be >= 1")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must be in (0, 1]")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.modality not in ("text", "image"):
            raise ValueError(f"unknown modality {self.modality!r}")


def allowed_ids(model: DuVlgModel, modality: str) -> np.ndarray:
    """Unified ids a decoder may emit under a modality restriction
    (excluding stop tokens, which the search handles itself)."""
    cfg = model.cfg
    if modality == "text":
        return np.arange(N_SPECIALS, N_SPECIALS + cfg.text_vocab)
    return np.arange(N_SPECIALS + cfg.text_vocab, cfg.head_size)


def _step_logprobs(model, enc_states, prefix, candidate_ids, temperature) -> np.ndarray:
    """Log-probs over candidate_ids, renormalized to that support."""
    logits = decode_forward(model, np.asarray(prefix, dtype=np.int64), enc_states)
    row = logits.values[-1][candidate_ids] / temperature
    row = row - row.max()
    return row - np.log(np.exp(row).sum())


def beam_search(model: DuVlgModel, enc_states, cfg: DecodeConfig):
    """Length-normalized beam search; returns (token ids, normalized score).

    Returned ids are content tokens (no start/stop).  beam_size=1 is greedy.
    """
    eos = SPECIALS.eos if cfg.modality == "text" else SPECIALS.eoi
    bos = SPECIALS.bos if cfg.modality == "text" else SPECIALS.boi
    content = allowed_ids(model, cfg.modality)
    candidates = np.concatenate(([eos], content))

    def norm(total, emitted):
        return total / emitted**cfg.length_norm

    active = [((), 0.0)]
    finished = []  # (tokens, normalized score)
    with ad.no_cyclic_gc():
        for _ in range(cfg.max_len):
            pool = []
            for tokens, total in active:
                lp = _step_logprobs(model, enc_states, (bos,) + tokens, candidates,
                                    cfg.temperature)
                finished.append((tokens, norm(total + lp[0], len(tokens) + 1)))
                for j, tid in enumerate(candidates[1:], start=1):
                    pool.append((tokens + (int(tid),), total + lp[j]))
            pool.sort(key=lambda e: (-e[1], e[0]))
            active = pool[:cfg.beam_size]
    finished.extend((tokens, norm(total, cfg.max_len)) for tokens, total in active)

    finished.sort(key=lambda e: (-e[1], e[0]))
    best_tokens, best_score = finished[0]
    return np.asarray(best_tokens, dtype=np.int64), float(best_score)


def nucleus_filter(probs: np.ndarray, top_p: float):
    """Smallest probability-sorted prefix with cumulative mass >= top_p.
    Returns (indices into probs, renormalized probabilities)."""
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, top_p, side="left"))
    cut = min(cut, probs.size - 1)
    support = order[:cut + 1]
    mass = probs[support]
    return support, mass / mass.sum()


def top_k_filter(probs: np.ndarray, k: int):
    """The k highest-probability entries (stable: ties keep lower indices)."""
    order = np.argsort(-probs, kind="stable")[:min(k, probs.size)]
    mass = probs[order]
    return order, mass / mass.sum()


def _pick(lp: np.ndarray, cfg: DecodeConfig, rng) -> int:
    """Index into the candidate support vector for one decode step."""
    if cfg.strategy == "greedy":
        return int(np.argmax(lp))
    probs = np.exp(lp)
    probs = probs / probs.sum()
    if cfg.strategy == "nucleus":
        support, renorm = nucleus_filter(probs, cfg.top_p)
    elif cfg.strategy == "topk":
        support, renorm = top_k_filter(probs, cfg.k)
    else:
        raise ValueError(f"strategy {cfg.strategy!r} is not a sampling strategy")
    return int(rng.choice(support, p=renorm))


def _sample_text(model, enc_states, cfg: DecodeConfig, rng) -> np.ndarray:
    candidates = np.concatenate(([SPECIALS.eos], allowed_ids(model, "text")))
    tokens = []
    prefix = [SPECIALS.bos]
    with ad.no_cyclic_gc():
        for _ in range(cfg.max_len):
            lp = _step_logprobs(model, enc_states, prefix, candidates, cfg.temperature)
            chosen = int(candidates[_pick(lp, cfg, rng)])
            if chosen == SPECIALS.eos:
                break
            tokens.append(chosen)
            prefix.append(chosen)
    return np.asarray(tokens, dtype=np.int64)


def nucleus_sample(model: DuVlgModel, enc_states, cfg: DecodeConfig, rng) -> np.ndarray:
    return _sample_text(model, enc_states, replace(cfg, strategy="nucleus"), rng)


def top_k_sample(model: DuVlgModel, enc_states, cfg: DecodeConfig, rng) -> np.ndarray:
    return _sample_text(model, enc_states, replace(cfg, strategy="topk"), rng)


def generate_image_tokens(model: DuVlgModel, caption, cfg: DecodeConfig, rng,
                          n_patches: int) -> list[np.ndarray]:
    """n_samples bracketed unified sequences [BOI] v1..vn [EOI]; the head is
    restricted to visual tokens for exactly n_patches steps, then [EOI] is
    forced.  Each sample uses its own spawned rng stream."""
    if cfg.strategy == "beam":
        raise ValueError("image sampling uses greedy/nucleus/topk, not beam")
    enc = encode(model, text_ids=caption)
    visual = allowed_ids(model, "image")
    sequences = []
    with ad.no_cyclic_gc():
        for child in rng.spawn(cfg.n_samples):
            prefix = [SPECIALS.boi]
            for _ in range(n_patches):
                lp = _step_logprobs(model, enc, prefix, visual, cfg.temperature)
                prefix.append(int(visual[_pick(lp, cfg, child)]))
            prefix.append(SPECIALS.eoi)
            sequences.append(np.asarray(prefix, dtype=np.int64))
    return sequences


def generate_image(model: DuVlgModel, caption, cfg: DecodeConfig, rng,
                   grid_dims: tuple[int, int]) -> list[ImageGrid]:
    rows, cols = grid_dims
    sequences = generate_image_tokens(model, caption, cfg, rng, rows * cols)
    return [decode_tokens(unified_to_visual(seq[1:-1], model.cfg), model.codebook, grid_dims)
            for seq in sequences]


def caption_nll(model: DuVlgModel, image: ImageGrid, caption) -> float:
    """Teacher-forced NLL of a caption given only the image."""
    feats = model.featurizer.featurize_image(image)
    enc = encode(model, patches=feats)
    tgt = np.concatenate(([SPECIALS.bos], np.asarray(caption, dtype=np.int64), [SPECIALS.eos]))
    logits = decode_forward(model, tgt[:-1], enc)
    return ad.cross_entropy_logits(logits, tgt[1:]).item()


def rerank(model: DuVlgModel, caption, images) -> tuple[int, list[float]]:
    """Pick the candidate whose caption NLL is lowest (cycle consistency).
    Returns (index of best image, per-image scores); ties keep the first."""
    if not images:
        raise ValueError("rerank needs at least one candidate image")
    scores = [-caption_nll(model, img, caption) for img in images]
    return int(np.argmax(scores)), scores


def caption_image(model: DuVlgModel, image: ImageGrid, cfg: DecodeConfig,
                  rng=None) -> np.ndarray:
    """Decode a caption for an image with the configured strategy."""
    feats = model.featurizer.featurize_image(image)
    enc = encode(model, patches=feats)
    if cfg.strategy in ("beam", "greedy"):
        size = 1 if cfg.strategy == "greedy" else cfg.beam_size
        tokens, _ = beam_search(model, enc, replace(cfg, strategy="beam", beam_size=size, modality="text"))
        return tokens
    if rng is None:
        raise ValueError("sampling strategies need an rng")
    return _sample_text(model, enc, cfg, rng)
