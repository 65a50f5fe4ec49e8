import numpy as np
import pytest

from duvlg import checkpoint as ck
from duvlg import config as cf
from duvlg import optim as op
from duvlg.config import RunConfig, apply_overrides, build_model, format_config, load_config
from duvlg.data import gen_dataset


SMALL = ["d_model=16", "n_heads=2", "d_ff=32", "image_size=16", "codebook_size=16",
         "d_feat=8", "d_code=8", "n_layers_enc=1", "n_layers_dec=1", "batch_size=2"]


def _small_cfg(extra=()):
    return apply_overrides(RunConfig(), SMALL + list(extra))


def _dataset(cfg, model, n=6):
    from duvlg.data import TextVocab
    return gen_dataset(n, 1, model.codebook, cfg.grid_dims(), TextVocab())


def test_config_defaults_mirror_protocol():
    cfg = RunConfig()
    assert cfg.alpha == 0.05 and cfg.beta == 1.0 and cfg.p_dae == 0.6
    assert cfg.clip_norm == 1.0 and cfg.beam_size == 5 and cfg.top_k == 50
    assert cfg.top_p == 0.9 and cfg.n_samples == 16
    assert cfg.image_mask_rate == 0.5 and cfg.text_mask_rate == 0.5
    assert cfg.span_lambda == 3.0
    assert cfg.t2i_lr == 1e-4 and cfg.caption_lr == 3e-5


def test_config_file_roundtrip(tmp_path):
    cfg = apply_overrides(RunConfig(), ["alpha=0.1", "use_commitment=false", "seed=7"])
    path = tmp_path / "run.cfg"
    path.write_text(format_config(cfg) + "\n# trailing comment\n")
    loaded = load_config(path)
    assert loaded == cfg


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(cf.ConfigError, match="unknown config key"):
        apply_overrides(RunConfig(), ["alhpa=0.1"])
    path = tmp_path / "bad.cfg"
    path.write_text("no equals sign here\n")
    with pytest.raises(cf.ConfigError):
        load_config(path)


def test_config_rejects_bad_values():
    with pytest.raises(cf.ConfigError):
        apply_overrides(RunConfig(), ["d_model=sixty"])
    with pytest.raises(cf.ConfigError):
        apply_overrides(RunConfig(), ["use_commitment=perhaps"])
    with pytest.raises(cf.ConfigError):
        apply_overrides(RunConfig(), ["alpha"])


def test_grid_dims_divisibility():
    with pytest.raises(cf.ConfigError):
        apply_overrides(RunConfig(), ["image_size=30"]).grid_dims()


def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg = _small_cfg(["alpha=0.05"])
    model, vocab = build_model(cfg)
    optim = op.make_optimizer(cf.to_train_settings(cfg))
    rng = np.random.default_rng(3)
    rng.random(5)  # advance the stream
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(path, model, optim, rng, step=12, cfg=cfg)
    loaded = ck.load_checkpoint(path)
    assert loaded.step == 12
    assert loaded.config == cfg  # --set values round-trip
    for (na, pa), (nb, pb) in zip(model.named_parameters(), loaded.model.named_parameters()):
        assert na == nb
        assert pa.values.tobytes() == pb.values.tobytes()
    assert loaded.rng.bit_generator.state == rng.bit_generator.state
    assert loaded.rng.random() == rng.random()


def test_checkpoint_preserves_moments(tmp_path):
    cfg = _small_cfg()
    model, vocab = build_model(cfg)
    dataset = _dataset(cfg, model)
    optim = op.make_optimizer(cf.to_train_settings(cfg))
    op.pretrain(dataset, model, 3, cf.to_train_settings(cfg), np.random.default_rng(0),
                optim=optim)
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(path, model, optim, np.random.default_rng(0), 3, cfg)
    loaded = ck.load_checkpoint(path)
    assert loaded.optim.step_count == 3
    for name in optim.m:
        assert np.array_equal(optim.m[name], loaded.optim.m[name])
        assert np.array_equal(optim.v[name], loaded.optim.v[name])


def test_split_resume_equals_straight_through(tmp_path):
    cfg = _small_cfg()
    settings = cf.to_train_settings(cfg)

    model_a, _ = build_model(cfg)
    optim_a = op.make_optimizer(settings)
    rng_a = np.random.default_rng(cfg.seed)
    dataset = _dataset(cfg, model_a)
    op.pretrain(dataset, model_a, 6, settings, rng_a, optim=optim_a)

    model_b, _ = build_model(cfg)
    optim_b = op.make_optimizer(settings)
    rng_b = np.random.default_rng(cfg.seed)
    op.pretrain(dataset, model_b, 3, settings, rng_b, optim=optim_b)
    path = tmp_path / "half.ckpt"
    ck.save_checkpoint(path, model_b, optim_b, rng_b, 3, cfg)
    loaded = ck.load_checkpoint(path)
    op.pretrain(dataset, loaded.model, 3, settings, loaded.rng,
                optim=loaded.optim, start_step=loaded.step)

    for (na, pa), (_, pb) in zip(model_a.named_parameters(),
                                 loaded.model.named_parameters()):
        assert pa.values.tobytes() == pb.values.tobytes(), na


def test_checkpoint_error_taxonomy(tmp_path):
    cfg = _small_cfg()
    model, _ = build_model(cfg)
    optim = op.make_optimizer(cf.to_train_settings(cfg))
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(path, model, optim, np.random.default_rng(0), 0, cfg)
    blob = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + blob[9:])
    with pytest.raises(ck.BadMagicError):
        ck.load_checkpoint(bad)

    bad.write_bytes(blob[:9] + (99).to_bytes(4, "little") + blob[13:])
    with pytest.raises(ck.VersionMismatchError):
        ck.load_checkpoint(bad)

    bad.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ck.TruncatedCheckpointError):
        ck.load_checkpoint(bad)

    bad.write_bytes(blob[:4])
    with pytest.raises(ck.TruncatedCheckpointError):
        ck.load_checkpoint(bad)


def test_checkpoint_shape_mismatch(tmp_path):
    import json
    import struct

    cfg = _small_cfg()
    model, _ = build_model(cfg)
    optim = op.make_optimizer(cf.to_train_settings(cfg))
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(path, model, optim, np.random.default_rng(0), 0, cfg)
    blob = path.read_bytes()
    hlen = struct.unpack_from("<II", blob, 9)[1]
    header = json.loads(blob[17:17 + hlen])
    # swap one parameter's declared shape; keep byte count identical
    for rec in header["records"]:
        if rec[0] == "patch_proj":
            rec[1] = [rec[1][1], rec[1][0]]
    new_header = json.dumps(header, sort_keys=True).encode()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(blob[:9] + struct.pack("<II", 1, len(new_header)) + new_header
                    + blob[17 + hlen:])
    with pytest.raises(ck.RecordShapeError):
        ck.load_checkpoint(bad)


def test_checkpoint_atomic_no_partial_file(tmp_path):
    # failed save must not leave a corrupt target in place
    cfg = _small_cfg()
    model, _ = build_model(cfg)
    path = tmp_path / "missing" / "m.ckpt"
    with pytest.raises(OSError):
        ck.save_checkpoint(path, model, op.OptimState(), np.random.default_rng(0), 0, cfg)
    assert not path.exists()
