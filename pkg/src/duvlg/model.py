"""Encoder-decoder transformer with hybrid image embeddings.

The encoder reads continuous patch features (through a learned projection)
next to text embeddings; the decoder consumes and produces a unified id
space over specials + text words + discrete visual tokens.  Text embedding
rows are shared storage between the encoder input, the decoder input, and
the generation head.

Unified id layout: specials occupy [0, S), text words [S, S + V_t),
visual tokens [S + V_t, S + V_t + K).

Parameter count (d = d_model, F = d_ff, S = 8 specials, D = max decoder
length = max(max_text_len, max_patches) + 2):

    (V_t + S + K) * d                      embeddings
  + d_feat * d + d                         patch projection + patch [MASK]
  + (max_text_len + max_patches + D) * d   positional tables
  + 2 * d                                  segment embeddings
  + n_enc * (4 d^2 + 2 d F + 9 d + F)      encoder layers
  + n_dec * (8 d^2 + 2 d F + 15 d + F)     decoder layers
  + 4 * d                                  final norms
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import PatchFeaturizer, PatchSequence, VisualCodebook
from .corruption import PatchMask


@dataclass(frozen=True)
class SpecialTokens:
    bos: int = 0
    eos: int = 1
    pad: int = 2
    mask: int = 3
    imagepad: int = 4
    textpad: int = 5
    boi: int = 6
    eoi: int = 7

    @property
    def count(self) -> int:
        return 8


SPECIALS = SpecialTokens()
N_SPECIALS = SPECIALS.count


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 4
    d_ff: int = 128
    text_vocab: int = 17  # word tokens, excluding specials
    visual_vocab: int = 64
    max_text_len: int = 24
    max_patches: int = 64
    d_feat: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("d_model", "n_layers_enc", "n_layers_dec", "n_heads", "d_ff",
                     "text_vocab", "visual_vocab", "max_text_len", "max_patches", "d_feat"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_size(self) -> int:
        return N_SPECIALS + self.text_vocab + self.visual_vocab

    @property
    def max_dec_len(self) -> int:
        return max(self.max_text_len, self.max_patches) + 2


def visual_to_unified(v, cfg: ModelConfig):
    return np.asarray(v, dtype=np.int64) + N_SPECIALS + cfg.text_vocab


def unified_to_visual(u, cfg: ModelConfig):
    return np.asarray(u, dtype=np.int64) - N_SPECIALS - cfg.text_vocab


def parameter_count(cfg: ModelConfig) -> int:
    """Closed form for the number of trainable scalars (see module docstring)."""
    d, f = cfg.d_model, cfg.d_ff
    per_enc = 4 * d * d + 2 * d * f + 9 * d + f
    per_dec = 8 * d * d + 2 * d * f + 15 * d + f
    return ((cfg.text_vocab + N_SPECIALS + cfg.visual_vocab) * d
            + cfg.d_feat * d + d
            + (cfg.max_text_len + cfg.max_patches + cfg.max_dec_len) * d
            + 2 * d
            + cfg.n_layers_enc * per_enc
            + cfg.n_layers_dec * per_dec
            + 4 * d)


class _Params:
    """Ordered parameter registry; names are stable across runs."""

    def __init__(self, rng: np.random.Generator, gain: float):
        self._rng = rng
        self._gain = gain
        self.table: dict[str, Tensor] = {}

    def uniform(self, name, *shape) -> Tensor:
        t = Tensor(self._rng.uniform(-self._gain, self._gain, shape), requires_grad=True)
        self.table[name] = t
        return t

    def ones(self, name, *shape) -> Tensor:
        t = Tensor(np.ones(shape), requires_grad=True)
        self.table[name] = t
        return t

    def zeros(self, name, *shape) -> Tensor:
        t = Tensor(np.zeros(shape), requires_grad=True)
        self.table[name] = t
        return t


@dataclass
class _Attention:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class _EncLayer:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: _Attention
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class _DecLayer:
    ln1_g: Tensor
    ln1_b: Tensor
    self_attn: _Attention
    lnx_g: Tensor
    lnx_b: Tensor
    cross_attn: _Attention
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class DuVlgModel:
    cfg: ModelConfig
    params: dict[str, Tensor]
    text_embed: Tensor
    visual_embed_dec: Tensor
    patch_proj: Tensor
    mask_patch: Tensor
    enc_text_pos: Tensor
    enc_img_pos: Tensor
    dec_pos: Tensor
    seg_embed: Tensor  # row 0 = IMAGE segment, row 1 = TEXT segment
    enc_layers: list[_EncLayer]
    dec_layers: list[_DecLayer]
    enc_final_g: Tensor
    enc_final_b: Tensor
    dec_final_g: Tensor
    dec_final_b: Tensor
    featurizer: PatchFeaturizer | None = None
    codebook: VisualCodebook | None = None
    dropout_rng: np.random.Generator | None = field(default=None, repr=False)

    def named_parameters(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def _init_attention(p: _Params, prefix: str, d: int) -> _Attention:
    return _Attention(
        wq=p.uniform(f"{prefix}.wq", d, d), bq=p.zeros(f"{prefix}.bq", d),
        wk=p.uniform(f"{prefix}.wk", d, d), bk=p.zeros(f"{prefix}.bk", d),
        wv=p.uniform(f"{prefix}.wv", d, d), bv=p.zeros(f"{prefix}.bv", d),
        wo=p.uniform(f"{prefix}.wo", d, d), bo=p.zeros(f"{prefix}.bo", d),
    )


def init_model(cfg: ModelConfig, seed: int,
               featurizer: PatchFeaturizer | None = None,
               codebook: VisualCodebook | None = None) -> DuVlgModel:
    """Deterministic scaled-uniform initialization (gain 0.02)."""
    rng = np.random.default_rng(seed)
    p = _Params(rng, gain=0.02)
    d, f = cfg.d_model, cfg.d_ff

    text_embed = p.uniform("text_embed", cfg.text_vocab + N_SPECIALS, d)
    visual_embed_dec = p.uniform("visual_embed_dec", cfg.visual_vocab, d)
    patch_proj = p.uniform("patch_proj", cfg.d_feat, d)
    mask_patch = p.uniform("mask_patch", d)
    enc_text_pos = p.uniform("enc_text_pos", cfg.max_text_len, d)
    enc_img_pos = p.uniform("enc_img_pos", cfg.max_patches, d)
    dec_pos = p.uniform("dec_pos", cfg.max_dec_len, d)
    seg_embed = p.uniform("seg_embed", 2, d)

    enc_layers = []
    for i in range(cfg.n_layers_enc):
        pre = f"enc.{i}"
        enc_layers.append(_EncLayer(
            ln1_g=p.ones(f"{pre}.ln1.g", d), ln1_b=p.zeros(f"{pre}.ln1.b", d),
            attn=_init_attention(p, f"{pre}.attn", d),
            ln2_g=p.ones(f"{pre}.ln2.g", d), ln2_b=p.zeros(f"{pre}.ln2.b", d),
            w1=p.uniform(f"{pre}.ffn.w1", d, f), b1=p.zeros(f"{pre}.ffn.b1", f),
            w2=p.uniform(f"{pre}.ffn.w2", f, d), b2=p.zeros(f"{pre}.ffn.b2", d),
        ))
    dec_layers = []
    for i in range(cfg.n_layers_dec):
        pre = f"dec.{i}"
        dec_layers.append(_DecLayer(
            ln1_g=p.ones(f"{pre}.ln1.g", d), ln1_b=p.zeros(f"{pre}.ln1.b", d),
            self_attn=_init_attention(p, f"{pre}.self", d),
            lnx_g=p.ones(f"{pre}.lnx.g", d), lnx_b=p.zeros(f"{pre}.lnx.b", d),
            cross_attn=_init_attention(p, f"{pre}.cross", d),
            ln2_g=p.ones(f"{pre}.ln2.g", d), ln2_b=p.zeros(f"{pre}.ln2.b", d),
            w1=p.uniform(f"{pre}.ffn.w1", d, f), b1=p.zeros(f"{pre}.ffn.b1", f),
            w2=p.uniform(f"{pre}.ffn.w2", f, d), b2=p.zeros(f"{pre}.ffn.b2", d),
        ))

    model = DuVlgModel(
        cfg=cfg, params=p.table,
        text_embed=text_embed, visual_embed_dec=visual_embed_dec,
        patch_proj=patch_proj, mask_patch=mask_patch,
        enc_text_pos=enc_text_pos, enc_img_pos=enc_img_pos, dec_pos=dec_pos,
        seg_embed=seg_embed,
        enc_layers=enc_layers, dec_layers=dec_layers,
        enc_final_g=p.ones("enc.final.g", d), enc_final_b=p.zeros("enc.final.b", d),
        dec_final_g=p.ones("dec.final.g", d), dec_final_b=p.zeros("dec.final.b", d),
        featurizer=featurizer, codebook=codebook,
    )
    assert sum(t.size for t in p.table.values()) == parameter_count(cfg)
    return model


# ---------------------------------------------------------------------------
# forward passes


def _dropout(model: DuVlgModel, x: Tensor) -> Tensor:
    p = model.cfg.dropout
    if p <= 0.0 or model.dropout_rng is None:
        return x
    keep = (model.dropout_rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, Tensor(keep))


def _attend(model: DuVlgModel, attn: _Attention, x_q: Tensor, x_kv: Tensor,
            causal: bool) -> Tensor:
    h = model.cfg.n_heads
    d = model.cfg.d_model
    dh = d // h
    tq = x_q.shape[0]
    tk = x_kv.shape[0]

    q = ad.add(ad.matmul(x_q, attn.wq), attn.bq)
    k = ad.add(ad.matmul(x_kv, attn.wk), attn.bk)
    v = ad.add(ad.matmul(x_kv, attn.wv), attn.bv)
    qh = ad.swapaxes(ad.reshape(q, (tq, h, dh)), 0, 1)
    kh = ad.swapaxes(ad.reshape(k, (tk, h, dh)), 0, 1)
    vh = ad.swapaxes(ad.reshape(v, (tk, h, dh)), 0, 1)

    scores = ad.mul(ad.matmul(qh, ad.swapaxes(kh, 1, 2)), Tensor(1.0 / np.sqrt(dh)))
    if causal:
        mask = np.triu(np.full((tq, tk), -np.inf), k=1)
        scores = ad.add(scores, Tensor(mask))
    weights = ad.softmax_rows(scores)
    gathered = ad.reshape(ad.swapaxes(ad.matmul(weights, vh), 0, 1), (tq, d))
    return ad.add(ad.matmul(gathered, attn.wo), attn.bo)


def _attend_batch(model: DuVlgModel, attn: _Attention, x_q: Tensor, x_kv: Tensor,
                  causal: bool, key_add: np.ndarray | None) -> Tensor:
    """Multi-head attention over [B x T x d] stacks.  ``key_add`` is an
    additive [B x 1 x 1 x Tk] mask (0 for real keys, -inf for padding)."""
    h = model.cfg.n_heads
    d = model.cfg.d_model
    dh = d // h
    b, tq, _ = x_q.shape
    tk = x_kv.shape[1]

    q = ad.add(ad.matmul(x_q, attn.wq), attn.bq)
    k = ad.add(ad.matmul(x_kv, attn.wk), attn.bk)
    v = ad.add(ad.matmul(x_kv, attn.wv), attn.bv)
    qh = ad.swapaxes(ad.reshape(q, (b, tq, h, dh)), 1, 2)
    kh = ad.swapaxes(ad.reshape(k, (b, tk, h, dh)), 1, 2)
    vh = ad.swapaxes(ad.reshape(v, (b, tk, h, dh)), 1, 2)

    scores = ad.mul(ad.matmul(qh, ad.swapaxes(kh, 2, 3)), Tensor(1.0 / np.sqrt(dh)))
    if causal:
        scores = ad.add(scores, Tensor(np.triu(np.full((tq, tk), -np.inf), k=1)))
    if key_add is not None:
        scores = ad.add(scores, Tensor(key_add))
    weights = ad.softmax_rows(scores)
    gathered = ad.reshape(ad.swapaxes(ad.matmul(weights, vh), 1, 2), (b, tq, d))
    return ad.add(ad.matmul(gathered, attn.wo), attn.bo)


def _ffn(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(x, w1), b1)), w2), b2)


def _special_row(model: DuVlgModel, token: int) -> Tensor:
    return ad.gather_rows(model.text_embed, np.array([token]))


def encode(model: DuVlgModel, text_ids=None, patches: PatchSequence | None = None,
           patch_mask: PatchMask | None = None) -> Tensor:
    """Concatenated image-then-text encoding; missing modalities become a
    single placeholder embedding; masked patches use the trainable [MASK]
    patch embedding."""
    cfg = model.cfg
    if text_ids is None and patches is None:
        raise ValueError("encode needs at least one modality")

    seg_img = ad.narrow_rows(model.seg_embed, 0, 1)
    seg_text = ad.narrow_rows(model.seg_embed, 1, 2)

    if patches is not None:
        n = patches.n_patches
        if n > cfg.max_patches:
            raise ValueError(f"{n} patches exceeds max_patches {cfg.max_patches}")
        x = ad.matmul(patches.features, model.patch_proj)
        if patch_mask is not None:
            m = patch_mask.flat.astype(np.float64).reshape(n, 1)
            keep = Tensor(1.0 - m)
            drop = Tensor(m)
            mask_row = ad.reshape(model.mask_patch, (1, cfg.d_model))
            x = ad.add(ad.mul(x, keep), ad.mul(mask_row, drop))
        img_seg = ad.add(ad.add(x, ad.narrow_rows(model.enc_img_pos, 0, n)), seg_img)
    else:
        pad = _special_row(model, SPECIALS.imagepad)
        img_seg = ad.add(ad.add(pad, ad.narrow_rows(model.enc_img_pos, 0, 1)), seg_img)

    if text_ids is not None:
        ids = np.asarray(text_ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("empty text; pass None for a missing modality")
        if ids.size > cfg.max_text_len:
            raise ValueError(f"{ids.size} text tokens exceeds max_text_len {cfg.max_text_len}")
        emb = ad.gather_rows(model.text_embed, ids)
        text_seg = ad.add(ad.add(emb, ad.narrow_rows(model.enc_text_pos, 0, ids.size)), seg_text)
    else:
        pad = _special_row(model, SPECIALS.textpad)
        text_seg = ad.add(ad.add(pad, ad.narrow_rows(model.enc_text_pos, 0, 1)), seg_text)

    x = ad.concat([img_seg, text_seg], axis=0)
    for layer in model.enc_layers:
        normed = ad.layer_norm(x, layer.ln1_g, layer.ln1_b)
        a = _attend(model, layer.attn, normed, normed, causal=False)
        x = ad.add(x, _dropout(model, a))
        f = _ffn(ad.layer_norm(x, layer.ln2_g, layer.ln2_b), layer.w1, layer.b1, layer.w2, layer.b2)
        x = ad.add(x, _dropout(model, f))
    return ad.layer_norm(x, model.enc_final_g, model.enc_final_b)


def pad_ragged(seqs, pad_id: int):
    """Stack variable-length id sequences into [B x Lmax] plus a valid mask."""
    lens = [len(s) for s in seqs]
    lmax = max(lens)
    out = np.full((len(seqs), lmax), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), lmax), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, :lens[i]] = s
        valid[i, :lens[i]] = True
    return out, valid


def _key_add(valid: np.ndarray) -> np.ndarray | None:
    """Additive attention mask [B x 1 x 1 x L] from a [B x L] validity mask."""
    if valid.all():
        return None
    add = np.where(valid, 0.0, -np.inf)
    return add[:, None, None, :]


def _broadcast_row(row: Tensor, b: int, d: int) -> Tensor:
    """Tile a [1 x d] embedding row into a [B x 1 x d] stack."""
    return ad.add(ad.reshape(row, (1, 1, d)), Tensor(np.zeros((b, 1, 1))))


def encode_batch(model: DuVlgModel, text_ids: list, patches: list,
                 patch_masks: list) -> tuple[Tensor, np.ndarray]:
    """Batched encoder over homogeneous examples (a modality is present for
    all examples or none).  Returns states [B x L x d] and a [B x L] mask of
    real (non-padding) positions; padding is excluded from attention.
    """
    cfg = model.cfg
    d = cfg.d_model
    b = len(text_ids)
    has_text = text_ids[0] is not None
    has_image = patches[0] is not None
    if any((t is not None) != has_text for t in text_ids) \
            or any((p is not None) != has_image for p in patches):
        raise ValueError("encode_batch needs homogeneous modality presence")
    if not has_text and not has_image:
        raise ValueError("encode needs at least one modality")

    seg_img = ad.narrow_rows(model.seg_embed, 0, 1)
    seg_text = ad.narrow_rows(model.seg_embed, 1, 2)

    if has_image:
        n = patches[0].n_patches
        if any(p.n_patches != n for p in patches):
            raise ValueError("encode_batch needs equal patch counts")
        if n > cfg.max_patches:
            raise ValueError(f"{n} patches exceeds max_patches {cfg.max_patches}")
        feats = Tensor(np.stack([p.features.values for p in patches]))
        x = ad.matmul(feats, model.patch_proj)
        if any(m is not None for m in patch_masks):
            m = np.stack([np.zeros(n) if pm is None else pm.flat.astype(np.float64)
                          for pm in patch_masks]).reshape(b, n, 1)
            mask_row = ad.reshape(model.mask_patch, (1, 1, d))
            x = ad.add(ad.mul(x, Tensor(1.0 - m)), ad.mul(mask_row, Tensor(m)))
        img_seg = ad.add(ad.add(x, ad.narrow_rows(model.enc_img_pos, 0, n)), seg_img)
        img_valid = np.ones((b, n), dtype=bool)
    else:
        pad = _special_row(model, SPECIALS.imagepad)
        img_seg = ad.add(ad.add(_broadcast_row(pad, b, d),
                                ad.narrow_rows(model.enc_img_pos, 0, 1)), seg_img)
        img_valid = np.ones((b, 1), dtype=bool)

    if has_text:
        lens = [len(t) for t in text_ids]
        if max(lens) > cfg.max_text_len:
            raise ValueError(f"{max(lens)} text tokens exceeds max_text_len {cfg.max_text_len}")
        if min(lens) == 0:
            raise ValueError("empty text; pass None for a missing modality")
        padded, text_valid = pad_ragged(text_ids, SPECIALS.pad)
        lt = padded.shape[1]
        emb = ad.reshape(ad.gather_rows(model.text_embed, padded.reshape(-1)), (b, lt, d))
        text_seg = ad.add(ad.add(emb, ad.narrow_rows(model.enc_text_pos, 0, lt)), seg_text)
    else:
        pad = _special_row(model, SPECIALS.textpad)
        text_seg = ad.add(ad.add(_broadcast_row(pad, b, d),
                                 ad.narrow_rows(model.enc_text_pos, 0, 1)), seg_text)
        text_valid = np.ones((b, 1), dtype=bool)

    valid = np.concatenate([img_valid, text_valid], axis=1)
    key_add = _key_add(valid)
    x = ad.concat([img_seg, text_seg], axis=1)
    for layer in model.enc_layers:
        normed = ad.layer_norm(x, layer.ln1_g, layer.ln1_b)
        a = _attend_batch(model, layer.attn, normed, normed, causal=False, key_add=key_add)
        x = ad.add(x, _dropout(model, a))
        f = _ffn(ad.layer_norm(x, layer.ln2_g, layer.ln2_b), layer.w1, layer.b1, layer.w2, layer.b2)
        x = ad.add(x, _dropout(model, f))
    return ad.layer_norm(x, model.enc_final_g, model.enc_final_b), valid


def decode_forward_batch(model: DuVlgModel, targets: np.ndarray, enc_states: Tensor,
                         enc_valid: np.ndarray) -> Tensor:
    """Teacher-forced decoder over padded [B x T] unified targets.

    Padding must be a suffix (it never precedes real tokens), so causal
    masking keeps real positions blind to it; padded rows produce logits
    that callers must ignore.
    """
    cfg = model.cfg
    b, t = targets.shape
    if t == 0:
        raise ValueError("decode_forward needs a non-empty target prefix")
    if targets.min() < 0 or targets.max() >= cfg.head_size:
        raise ValueError(f"target id out of range for unified vocab {cfg.head_size}")
    if t > cfg.max_dec_len:
        raise ValueError(f"{t} targets exceeds max decoder length {cfg.max_dec_len}")

    d = cfg.d_model
    emb = ad.reshape(embed_unified(model, targets.reshape(-1)), (b, t, d))
    x = ad.add(emb, ad.narrow_rows(model.dec_pos, 0, t))
    key_add = _key_add(enc_valid)
    for layer in model.dec_layers:
        normed = ad.layer_norm(x, layer.ln1_g, layer.ln1_b)
        a = _attend_batch(model, layer.self_attn, normed, normed, causal=True, key_add=None)
        x = ad.add(x, _dropout(model, a))
        c = _attend_batch(model, layer.cross_attn, ad.layer_norm(x, layer.lnx_g, layer.lnx_b),
                          enc_states, causal=False, key_add=key_add)
        x = ad.add(x, _dropout(model, c))
        f = _ffn(ad.layer_norm(x, layer.ln2_g, layer.ln2_b), layer.w1, layer.b1, layer.w2, layer.b2)
        x = ad.add(x, _dropout(model, f))
    h = ad.layer_norm(x, model.dec_final_g, model.dec_final_b)
    return ad.concat([ad.matmul(h, ad.transpose(model.text_embed)),
                      ad.matmul(h, ad.transpose(model.visual_embed_dec))], axis=2)


def embed_unified(model: DuVlgModel, ids: np.ndarray) -> Tensor:
    """Decoder input embedding over the unified id space (tied tables)."""
    cfg = model.cfg
    split = N_SPECIALS + cfg.text_vocab
    is_vis = ids >= split
    text_ids = np.where(is_vis, 0, ids)
    vis_ids = np.where(is_vis, ids - split, 0)
    m = is_vis.astype(np.float64).reshape(-1, 1)
    text_part = ad.mul(ad.gather_rows(model.text_embed, text_ids), Tensor(1.0 - m))
    vis_part = ad.mul(ad.gather_rows(model.visual_embed_dec, vis_ids), Tensor(m))
    return ad.add(text_part, vis_part)


def decode_forward(model: DuVlgModel, targets, enc_states: Tensor) -> Tensor:
    """Teacher-forced decoder: causal self-attention plus cross-attention.

    Returns logits [T x (S + V_t + K)]; the text block of the head reuses
    text_embed storage, the visual block reuses visual_embed_dec.
    """
    cfg = model.cfg
    ids = np.asarray(targets, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("decode_forward needs a non-empty target prefix")
    if ids.min() < 0 or ids.max() >= cfg.head_size:
        raise ValueError(f"target id out of range for unified vocab {cfg.head_size}")
    if ids.size > cfg.max_dec_len:
        raise ValueError(f"{ids.size} targets exceeds max decoder length {cfg.max_dec_len}")

    x = ad.add(embed_unified(model, ids), ad.narrow_rows(model.dec_pos, 0, ids.size))
    for layer in model.dec_layers:
        normed = ad.layer_norm(x, layer.ln1_g, layer.ln1_b)
        a = _attend(model, layer.self_attn, normed, normed, causal=True)
        x = ad.add(x, _dropout(model, a))
        c = _attend(model, layer.cross_attn, ad.layer_norm(x, layer.lnx_g, layer.lnx_b),
                    enc_states, causal=False)
        x = ad.add(x, _dropout(model, c))
        f = _ffn(ad.layer_norm(x, layer.ln2_g, layer.ln2_b), layer.w1, layer.b1, layer.w2, layer.b2)
        x = ad.add(x, _dropout(model, f))
    h = ad.layer_norm(x, model.dec_final_g, model.dec_final_b)
    return ad.concat([ad.matmul(h, ad.transpose(model.text_embed)),
                      ad.matmul(h, ad.transpose(model.visual_embed_dec))], axis=1)
