"""Flat key=value run configuration and wiring helpers.

Defaults mirror the reference protocol wherever it pins a value: alpha 0.05,
beta 1, p_dae 0.6, clip 1.0, mask rates 0.5, span lambda 3, beam 5, top-k 50,
top-p 0.9, 16 samples per caption.  Unknown keys are rejected on load.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .codec import PatchFeaturizer, VisualCodebook
from .data import TextVocab
from .decoding import DecodeConfig
from .model import DuVlgModel, ModelConfig, init_model
from .objectives import CorruptionConfig
from .optim import TrainSettings


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # model
    d_model: int = 64
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_text_len: int = 24
    dropout: float = 0.0
    # image codec
    image_size: int = 32
    patch_size: int = 4
    codebook_size: int = 64
    d_feat: int = 32
    d_code: int = 16
    # losses
    alpha: float = 0.05
    beta: float = 1.0
    p_dae: float = 0.6
    use_image_loss: bool = True
    use_text_loss: bool = True
    use_commitment: bool = True
    # corruption
    image_mask_rate: float = 0.5
    text_mask_rate: float = 0.5
    span_lambda: float = 3.0
    min_block: int = 4
    max_block: int = 16
    aspect_min: float = 0.3
    # optimizer
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16
    t2i_lr: float = 1e-4
    caption_lr: float = 3e-5
    # decoding
    beam_size: int = 5
    top_p: float = 0.9
    top_k: int = 50
    n_samples: int = 16
    max_decode_len: int = 24
    temperature: float = 1.0
    length_norm: float = 1.0
    # data
    val_frac: float = 0.1

    def grid_dims(self) -> tuple[int, int]:
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by "
                              f"patch_size {self.patch_size}")
        side = self.image_size // self.patch_size
        return side, side


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {kind})") from None


def apply_overrides(cfg: RunConfig, pairs) -> RunConfig:
    """Apply 'key=value' strings; unknown keys are errors."""
    updates = {}
    for pair in pairs:
        key, eq, raw = pair.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, raw.strip())
    try:
        return dataclasses.replace(cfg, **updates) if updates else cfg
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    pairs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            pairs.append(line)
    return apply_overrides(RunConfig(), pairs)


def format_config(cfg: RunConfig) -> str:
    items = dataclasses.asdict(cfg)
    return "\n".join(f"{k}={str(v).lower() if isinstance(v, bool) else v}"
                     for k, v in items.items())


def config_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return RunConfig(**d)


# ---------------------------------------------------------------------------
# wiring


def to_model_config(cfg: RunConfig, vocab: TextVocab) -> ModelConfig:
    rows, cols = cfg.grid_dims()
    try:
        return ModelConfig(
            d_model=cfg.d_model, n_layers_enc=cfg.n_layers_enc,
            n_layers_dec=cfg.n_layers_dec, n_heads=cfg.n_heads, d_ff=cfg.d_ff,
            text_vocab=vocab.size, visual_vocab=cfg.codebook_size,
            max_text_len=cfg.max_text_len, max_patches=rows * cols,
            d_feat=cfg.d_feat, dropout=cfg.dropout,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def to_corruption_config(cfg: RunConfig) -> CorruptionConfig:
    return CorruptionConfig(image_mask_rate=cfg.image_mask_rate,
                            text_mask_rate=cfg.text_mask_rate,
                            span_lambda=cfg.span_lambda, min_block=cfg.min_block,
                            max_block=cfg.max_block, aspect_min=cfg.aspect_min)


def to_train_settings(cfg: RunConfig) -> TrainSettings:
    return TrainSettings(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                         adam_eps=cfg.adam_eps, clip_norm=cfg.clip_norm,
                         batch_size=cfg.batch_size, alpha=cfg.alpha, beta=cfg.beta,
                         p_dae=cfg.p_dae, use_image_loss=cfg.use_image_loss,
                         use_text_loss=cfg.use_text_loss,
                         use_commitment=cfg.use_commitment,
                         corruption=to_corruption_config(cfg))


def to_decode_config(cfg: RunConfig, strategy: str = "beam", modality: str = "text",
                     n_samples: int | None = None) -> DecodeConfig:
    return DecodeConfig(strategy=strategy, beam_size=cfg.beam_size, top_p=cfg.top_p,
                        k=cfg.top_k, n_samples=cfg.n_samples if n_samples is None else n_samples,
                        max_len=cfg.max_decode_len, temperature=cfg.temperature,
                        modality=modality, length_norm=cfg.length_norm)


def build_model(cfg: RunConfig) -> tuple[DuVlgModel, TextVocab]:
    """Model with frozen featurizer/codebook attached, plus the text vocab."""
    vocab = TextVocab()
    featurizer = PatchFeaturizer(cfg.patch_size, cfg.d_feat)
    codebook = VisualCodebook.build(cfg.codebook_size, cfg.d_code, cfg.patch_size)
    model = init_model(to_model_config(cfg, vocab), cfg.seed,
                       featurizer=featurizer, codebook=codebook)
    return model, vocab
