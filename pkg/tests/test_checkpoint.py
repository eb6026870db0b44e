from __future__ import annotations

import os
import struct

import numpy as np
import pytest

from prime_xmc.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from prime_xmc.model import initialize_model, named_parameters


@pytest.fixture
def model(toy_corpus):
    return initialize_model(toy_corpus, dim=8, vocab_size=128, t_max=8,
                            d_ffn=16, dropout=0.1, alpha=0.9, bank_size=2, seed=21)


class TestRoundTrip:
    def test_save_load_save_is_byte_stable(self, model, tmp_path):
        # the model lives in f64 but the file stores f32; a second generation
        # of the file must be byte-identical because f32 -> f64 -> f32 is exact
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, model)
        save_checkpoint(p2, load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_load_twice_identical(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        a = load_checkpoint(path)
        b = load_checkpoint(path)
        for ga, gb in zip(named_parameters(a), named_parameters(b)):
            assert np.array_equal(ga.value, gb.value), ga.name
        assert np.array_equal(a.centroids.centroids, b.centroids.centroids)
        assert np.array_equal(a.centroids.touched, b.centroids.touched)
        assert np.array_equal(a.bank.assignment, b.bank.assignment)

    def test_values_survive_within_f32(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        for ga, gb in zip(named_parameters(model), named_parameters(loaded)):
            assert np.array_equal(ga.value.astype("<f4"), gb.value.astype("<f4")), ga.name
            assert np.max(np.abs(ga.value - gb.value)) < 1e-6
        assert loaded.encoder.dim == model.encoder.dim
        assert loaded.encoder.vocab_size == model.encoder.vocab_size
        assert loaded.encoder.t_max == model.encoder.t_max
        assert loaded.proto.d_ffn == model.proto.d_ffn
        assert loaded.proto.dropout_rate == pytest.approx(model.proto.dropout_rate, abs=1e-7)
        assert loaded.centroids.alpha == pytest.approx(model.centroids.alpha, abs=1e-7)

    def test_loaded_gradients_are_zero(self, model, tmp_path):
        model.encoder_grads.token_table[:] = 7.0
        model.bank.grad[:] = 3.0
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        for g in named_parameters(loaded):
            assert not g.grad.any(), g.name


class TestAtomicity:
    def test_failed_write_leaves_original_and_no_temp(self, model, tmp_path, monkeypatch):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        original = path.read_bytes()

        real_replace = os.replace

        def exploding_replace(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr(os, "replace", exploding_replace)
        model.proto.w_q[:] += 1.0
        with pytest.raises(OSError, match="disk full"):
            save_checkpoint(path, model)
        monkeypatch.setattr(os, "replace", real_replace)

        assert path.read_bytes() == original
        leftovers = [f for f in os.listdir(tmp_path) if f.endswith(".tmp")]
        assert leftovers == []

    def test_write_to_new_directory_file(self, model, tmp_path):
        target = tmp_path / "sub"
        target.mkdir()
        path = target / "m.ckpt"
        save_checkpoint(path, model)
        assert path.exists()
        load_checkpoint(path)


class TestCorruption:
    def test_bad_magic(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="bad magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncation_at_many_points(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        for cut in (3, 7, 15, len(raw) // 2, len(raw) - 3):
            clipped = tmp_path / "cut.ckpt"
            clipped.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError, match="truncated"):
                load_checkpoint(clipped)

    def test_missing_trailing_segment(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        # the assignment segment is last: tag + rank + one dim + u32 payload
        n_assign = model.bank.assignment.shape[0]
        seg_len = 4 + 4 + 4 + 4 * n_assign
        stripped = tmp_path / "stripped.ckpt"
        stripped.write_bytes(raw[:-seg_len])
        with pytest.raises(CheckpointError, match="missing segment ASGN"):
            load_checkpoint(stripped)

    def test_implausible_segment_rank(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        enc = model.encoder
        header = 4 + 4 + 12
        enc_bytes = 4 * (enc.vocab_size * enc.dim + enc.dim * enc.dim + enc.dim)
        first_seg = header + enc_bytes
        raw[first_seg + 4 : first_seg + 8] = struct.pack("<I", 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="rank"):
            load_checkpoint(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        path.write_bytes(b"")
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)
