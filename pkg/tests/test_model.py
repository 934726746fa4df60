import dataclasses
import json
import math
import struct

import pytest
import torch

from assetformer import checkpoint as ck
from assetformer.model import (
    NAMED_CONFIGS,
    AssetFormer,
    ModelConfig,
    apply_rope,
    loss_mask,
    rope_tables,
    sequence_loss,
)
from assetformer.pcg import TOY_PARAMS, make_record
from assetformer.tokenizer import EOS_ID, VOCAB_SIZE, TokenizedDataset, prepare
from assetformer.training import TrainConfig, TrainingError, collate, evaluate_loss, lr_at, train

from oracles import finite_difference_check, scalar_cross_entropy

TINY = ModelConfig(n_layers=2, n_heads=2, model_dim=16, cond_embed_dim=8, max_seq_len=64)


def tiny_model(seed=0, cfg=TINY):
    torch.manual_seed(seed)
    return AssetFormer(cfg).eval()


def random_tokens(batch, length, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, EOS_ID, (batch, length), generator=g)


def cond_ids(batch):
    return torch.tensor([[0, 8, 12, 15]] * batch)


# --- config --------------------------------------------------------------------


def test_named_configs():
    assert NAMED_CONFIGS["nano"].n_layers == 2 and NAMED_CONFIGS["nano"].model_dim == 128
    assert NAMED_CONFIGS["mini"].n_layers == 4 and NAMED_CONFIGS["mini"].model_dim == 256


@pytest.mark.parametrize("kw", [{"model_dim": 30, "n_heads": 4}, {"model_dim": 18, "n_heads": 2},
                                {"max_seq_len": 5}, {"vocab_size": 200}, {"cond_dropout": 1.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        dataclasses.replace(TINY, **kw)


# --- forward -------------------------------------------------------------------


def test_logit_shape():
    m = tiny_model()
    assert m(random_tokens(2, 11), cond_ids(2)).shape == (2, 11, VOCAB_SIZE)
    assert m(random_tokens(2, 11), cond_ids(2), return_prefix=True).shape == (2, 12, VOCAB_SIZE)


def test_prefill_only():
    m = tiny_model()
    out = m(torch.zeros((1, 0), dtype=torch.long), cond_ids(1), m.new_cache(1), return_prefix=True)
    assert out.shape == (1, 1, VOCAB_SIZE)


@torch.no_grad()
def test_causality():
    m = tiny_model()
    a = random_tokens(1, 12)
    b = a.clone()
    b[0, 7] = (b[0, 7] + 1) % EOS_ID
    la, lb = m(a, cond_ids(1), return_prefix=True), m(b, cond_ids(1), return_prefix=True)
    # row t + 1 is the output at token t
    assert torch.equal(la[:, :8], lb[:, :8])
    assert not torch.allclose(la[:, 8:], lb[:, 8:])


@torch.no_grad()
def test_condition_changes_every_position():
    m = tiny_model()
    t = random_tokens(1, 6)
    a = m(t, cond_ids(1))
    b = m(t, m.null_condition(1))
    assert (a - b).abs().amax(-1).min() > 0


@torch.no_grad()
@pytest.mark.parametrize("chunks", [[20], [1] * 20, [5, 3, 7, 5]])
def test_incremental_matches_full(chunks):
    m = tiny_model(cfg=dataclasses.replace(NAMED_CONFIGS["nano"], max_seq_len=64))
    t = random_tokens(2, 20, seed=3)
    full = m(t, cond_ids(2), return_prefix=True)
    cache = m.new_cache(2)
    parts = [m(t[:, :0], cond_ids(2), cache, return_prefix=True)]
    pos = 0
    for c in chunks:
        parts.append(m(t[:, pos:pos + c], None, cache))
        pos += c
    inc = torch.cat(parts, dim=1)
    rel = ((inc - full).abs().max() / full.abs().max()).item()
    assert rel <= 1e-5


@torch.no_grad()
def test_cache_truncate_rewinds():
    m = tiny_model()
    t = random_tokens(1, 10)
    cache = m.new_cache(1)
    m(t[:, :6], cond_ids(1), cache)
    ref = m(t[:, 6:8], None, cache)
    cache.truncate(4 + 6)
    m(torch.tensor([[1, 2, 3]]), None, cache)
    cache.truncate(4 + 6)
    assert torch.allclose(m(t[:, 6:8], None, cache), ref, atol=1e-6)


def test_forward_errors():
    m = tiny_model()
    with pytest.raises(ValueError):
        m(random_tokens(1, 61), cond_ids(1))
    with pytest.raises(ValueError):
        m(random_tokens(2, 3), torch.zeros((2, 3), dtype=torch.long))
    cache = m.new_cache(1)
    m(random_tokens(1, 2), cond_ids(1), cache)
    with pytest.raises(ValueError):
        m(random_tokens(1, 2), None, cache, return_prefix=True)


def test_rope_relative_shift():
    cos, sin = rope_tables(8, 32, 10000.0)
    g = torch.Generator().manual_seed(0)
    q = torch.randn(1, 1, 1, 8, generator=g)
    k = torch.randn(1, 1, 1, 8, generator=g)

    def score(i, j):
        return (apply_rope(q, cos[i:i + 1], sin[i:i + 1]) * apply_rope(k, cos[j:j + 1], sin[j:j + 1])).sum()

    assert torch.allclose(score(3, 1), score(10, 8), atol=1e-5)
    assert torch.allclose(score(0, 0), (q * k).sum(), atol=1e-6)


# --- loss ----------------------------------------------------------------------


def test_loss_uniform_logits():
    targets = random_tokens(3, 9)
    loss = sequence_loss(torch.zeros(3, 9, VOCAB_SIZE), targets)
    assert loss.item() == pytest.approx(math.log(214), abs=1e-6)
    assert math.log(214) == pytest.approx(5.366, abs=1e-3)


def test_loss_large_margin_goes_to_zero():
    targets = random_tokens(2, 7)
    logits = torch.full((2, 7, VOCAB_SIZE), -50.0).scatter(2, targets.unsqueeze(-1), 50.0)
    assert sequence_loss(logits, targets).item() < 1e-12


def test_loss_matches_scalar_oracle():
    g = torch.Generator().manual_seed(1)
    logits = torch.randn(1, 2, VOCAB_SIZE, generator=g, dtype=torch.float64)
    targets = torch.tensor([[5, 30]])
    expected = scalar_cross_entropy(logits[0].tolist(), [5, 30])
    assert sequence_loss(logits, targets).item() == pytest.approx(expected, rel=1e-12)


def test_loss_masks_after_first_eos():
    targets = torch.tensor([[5, EOS_ID, 7, EOS_ID]])
    assert loss_mask(targets).tolist() == [[True, True, False, False]]
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(1, 4, VOCAB_SIZE, generator=g, dtype=torch.float64)
    expected = scalar_cross_entropy(logits[0, :2].tolist(), [5, EOS_ID])
    assert sequence_loss(logits, targets).item() == pytest.approx(expected, rel=1e-12)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        sequence_loss(torch.zeros(1, 3, VOCAB_SIZE), torch.zeros(1, 4, dtype=torch.long))


@torch.no_grad()
def test_padding_does_not_change_loss():
    m = tiny_model()
    seq = torch.cat([random_tokens(1, 10), torch.tensor([[EOS_ID]])], dim=1)
    padded = torch.cat([seq, torch.full((1, 6), EOS_ID)], dim=1)
    a = sequence_loss(m.sequence_logits(seq, cond_ids(1)), seq)
    b = sequence_loss(m.sequence_logits(padded, cond_ids(1)), padded)
    assert a.item() == pytest.approx(b.item(), rel=1e-6)


def test_gradients_match_finite_differences_small():
    cfg = ModelConfig(n_layers=1, n_heads=2, model_dim=8, cond_embed_dim=4, max_seq_len=16)
    m = tiny_model(cfg=cfg).double()
    tokens = torch.cat([random_tokens(1, 5), torch.tensor([[EOS_ID]])], dim=1)
    assert finite_difference_check(m, tokens, cond_ids(1)) <= 1e-4


# --- checkpoint ----------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    m = tiny_model(seed=4)
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(ck.Checkpoint(m, step=7, rng_state=b"abc"), path)
    back = ck.load_checkpoint(path)
    assert back.step == 7 and back.rng_state == b"abc" and back.config == m.cfg
    for (ka, va), (kb, vb) in zip(m.state_dict().items(), back.model.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    t = random_tokens(1, 9)
    with torch.no_grad():
        assert torch.equal(m(t, cond_ids(1)), back.model(t, cond_ids(1)))


def test_checkpoint_float64(tmp_path):
    m = tiny_model().double()
    ck.save_checkpoint(ck.Checkpoint(m), tmp_path / "d.ckpt")
    assert ck.load_checkpoint(tmp_path / "d.ckpt").model.head.weight.dtype == torch.float64


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(ck.Checkpoint(tiny_model()), path)
    data = path.read_bytes()
    for cut in (5, 30, len(data) - 3):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(ck.CheckpointError, match="corrupt"):
            ck.load_checkpoint(tmp_path / "t.ckpt")


def test_checkpoint_bitflip(tmp_path):
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(ck.Checkpoint(tiny_model()), path)
    data = bytearray(path.read_bytes())
    data[-10] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ck.CheckpointError, match="checksum"):
        ck.load_checkpoint(path)


def rewrite_header(path, edit):
    data = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<8sIQ", data)
    header = json.loads(data[20:20 + hlen])
    edit(header)
    hb = json.dumps(header).encode()
    path.write_bytes(struct.pack("<8sIQ", magic, version, len(hb)) + hb + data[20 + hlen:])


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(ck.Checkpoint(tiny_model()), path)
    rewrite_header(path, lambda h: h["config"].update(model_dim=32))
    with pytest.raises(ck.CheckpointError, match="mismatch"):
        ck.load_checkpoint(path)
    rewrite_header(path, lambda h: h["config"].update(model_dim=16, n_layers=3))
    with pytest.raises(ck.CheckpointError, match="mismatch"):
        ck.load_checkpoint(path)


def test_checkpoint_vocab_and_version(tmp_path):
    path = tmp_path / "m.ckpt"
    ck.save_checkpoint(ck.Checkpoint(tiny_model()), path)
    rewrite_header(path, lambda h: h.update(vocab_hash="0" * 16))
    with pytest.raises(ck.CheckpointError, match="vocabulary"):
        ck.load_checkpoint(path)
    data = bytearray(path.read_bytes())
    data[8] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.load_checkpoint(path)
    (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(40))
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.load_checkpoint(tmp_path / "x")


# --- training ------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_ds():
    recs = [make_record(TOY_PARAMS, 0, i) for i in range(4)]
    return prepare(recs, "dfs", 0)


def small_cfg(ds, **kw):
    longest = max(len(r.tokens) for r in ds.records)
    return dataclasses.replace(TINY, max_seq_len=longest + 8, **kw)


def test_collate_pads_with_eos(small_ds):
    tokens, cond = collate(small_ds.records[:3])
    assert tokens.shape[0] == 3 and cond.shape == (3, 4)
    r = small_ds.records[0]
    assert tokens[0, :len(r.tokens)].tolist() == list(r.tokens)
    assert (tokens[0, len(r.tokens):] == EOS_ID).all()


def test_lr_schedule():
    cfg = TrainConfig(learning_rate=1.0, warmup_steps=4)
    assert [lr_at(s, cfg) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]


def test_training_is_deterministic(small_ds, tmp_path):
    tc = TrainConfig(learning_rate=3e-3, batch_size=2, total_steps=6, warmup_steps=2, seed=5)
    a = train(small_ds, small_cfg(small_ds), tc, metrics_path=tmp_path / "m.jsonl")
    b = train(small_ds, small_cfg(small_ds), tc)
    assert a.losses == b.losses
    lines = [json.loads(x) for x in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [x["loss"] for x in lines] == a.losses and lines[0]["step"] == 0


def test_condition_dropout_changes_trajectory(small_ds):
    tc = TrainConfig(learning_rate=3e-3, batch_size=4, total_steps=8, warmup_steps=0, seed=1)
    a = train(small_ds, small_cfg(small_ds, cond_dropout=0.0), tc)
    b = train(small_ds, small_cfg(small_ds, cond_dropout=0.5), tc)
    assert a.losses != b.losses


def test_training_reduces_loss(small_ds):
    tc = TrainConfig(learning_rate=1e-2, batch_size=4, total_steps=40, warmup_steps=5, seed=0)
    res = train(small_ds, small_cfg(small_ds, cond_dropout=0.0), tc)
    assert res.losses[-1] < 0.5 * res.losses[0]
    stats = evaluate_loss(res.checkpoint.model, small_ds.records)
    assert 0 <= stats["accuracy"] <= 1 and stats["tokens"] == sum(len(r.tokens) for r in small_ds.records)


def test_training_rejects_incompatible(small_ds):
    cfg = small_cfg(small_ds)
    tc = TrainConfig(total_steps=1)
    with pytest.raises(TrainingError, match="vocab"):
        train(dataclasses.replace(small_ds, vocab_hash="0" * 16), cfg, tc)
    with pytest.raises(TrainingError, match="does not fit"):
        train(small_ds, dataclasses.replace(cfg, max_seq_len=20), tc)
    with pytest.raises(TrainingError, match="empty"):
        train(TokenizedDataset([], 10, small_ds.vocab_hash), cfg, tc)


def test_training_aborts_on_non_finite(small_ds):
    m = AssetFormer(small_cfg(small_ds))
    with torch.no_grad():
        m.head.weight.fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite"):
        train(small_ds, m.cfg, TrainConfig(total_steps=2), model=m)


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"batch_size": 0}, {"warmup_steps": -1}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)
