import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_log
from prunekit.dynamics_log import (
    HEADER_SIZE,
    DynamicsLog,
    LogChecksumError,
    LogFormatError,
    decode,
    encode,
    file_size,
    log_hash,
    read_log,
    validate,
    write_log,
)


def _tiny():
    return DynamicsLog(
        labels=[0, 1],
        num_classes=2,
        accuracies=[0.5],
        losses=[0.7],
        logits=[[[1.0, -1.0], [0.25, 0.5]]],
        seed=3,
    )


class TestLayout:
    def test_size_n2_c2_e1(self, tmp_path):
        # header 27 (4+2+4+4+4+1+8) + labels 8 + record (4+4+16) + crc 4
        write_log(_tiny(), tmp_path / "t.ydlg")
        assert (tmp_path / "t.ydlg").stat().st_size == 63 == file_size(2, 2, 1)

    def test_field_positions(self):
        raw = encode(_tiny())
        magic, ver, n, c, e, kind, seed = struct.unpack_from("<4sHIIIBQ", raw)
        assert (magic, ver, n, c, e, kind, seed) == (b"YDLG", 1, 2, 2, 1, 0, 3)
        assert struct.unpack_from("<2I", raw, HEADER_SIZE) == (0, 1)
        acc, loss = struct.unpack_from("<2f", raw, HEADER_SIZE + 8)
        assert acc == 0.5 and loss == pytest.approx(0.7)
        assert struct.unpack_from("<4f", raw, HEADER_SIZE + 16) == (1.0, -1.0, 0.25, 0.5)
        assert struct.unpack_from("<I", raw, len(raw) - 4)[0] == zlib.crc32(raw[:-4])

    def test_mse_tag(self):
        log = _tiny()
        log.loss_kind = "mse"
        assert encode(log)[18] == 1  # after magic, version, N, C, E
        assert decode(encode(log)).loss_kind == "mse"


class TestRoundTrip:
    def test_read_back(self, tmp_path, rng):
        log = random_log(rng, n=7, c=4, e=5)
        write_log(log, tmp_path / "a.ydlg")
        back = read_log(tmp_path / "a.ydlg")
        assert (back.n, back.num_classes, back.num_epochs) == (7, 4, 5)
        np.testing.assert_array_equal(back.logits, log.logits)
        np.testing.assert_array_equal(back.labels, log.labels)
        assert back.seed == log.seed

    @settings(max_examples=40, deadline=None)
    @given(
        n=st.integers(1, 12),
        c=st.integers(2, 6),
        e=st.integers(1, 6),
        seed=st.integers(0, 2**32 - 1),
    )
    def test_property_bytes_stable(self, n, c, e, seed):
        log = random_log(np.random.default_rng(seed), n, c, e)
        raw = encode(log)
        assert len(raw) == file_size(n, c, e)
        assert encode(decode(raw)) == raw

    def test_hash_changes_with_content(self, rng):
        log = random_log(rng)
        h = log_hash(log)
        log.logits[0, 0, 0] += 1
        assert log_hash(log) != h


class TestCorruption:
    def test_payload_byte_flip(self, tmp_path):
        p = tmp_path / "a.ydlg"
        write_log(_tiny(), p)
        raw = bytearray(p.read_bytes())
        raw[HEADER_SIZE + 20] ^= 0x40
        p.write_bytes(bytes(raw))
        with pytest.raises(LogChecksumError, match="CRC"):
            read_log(p)

    def test_truncated_reports_epoch(self, tmp_path, rng):
        p = tmp_path / "a.ydlg"
        log = random_log(rng, n=3, c=2, e=4)
        raw = encode(log)
        rec = 8 + 4 * 3 * 2
        # keep header, labels, two full records and half of the third
        cut = HEADER_SIZE + 12 + 2 * rec + rec // 2
        p.write_bytes(raw[:cut])
        with pytest.raises(LogChecksumError, match="truncated at epoch 2"):
            read_log(p)

    def test_too_short_for_header(self):
        with pytest.raises(LogFormatError, match="truncated header"):
            decode(b"YDLG\x01")

    def test_bad_magic_with_valid_crc(self):
        body = bytearray(encode(_tiny())[:-4])
        body[:4] = b"XXXX"
        with pytest.raises(LogFormatError, match="magic"):
            decode(bytes(body) + struct.pack("<I", zlib.crc32(body)))

    def test_bad_version_with_valid_crc(self):
        body = bytearray(encode(_tiny())[:-4])
        body[4] = 9
        with pytest.raises(LogFormatError, match="version"):
            decode(bytes(body) + struct.pack("<I", zlib.crc32(body)))


class TestValidate:
    def test_trained_log_clean(self):
        from prunekit.dataset import BlobSpec, generate_blobs
        from prunekit.trainer import TrainConfig, train_with_dynamics

        _, log = train_with_dynamics(generate_blobs(BlobSpec(2, 20, 2, 4.0, 1.0), 0), TrainConfig(epochs=3))
        assert validate(log) == []

    def test_accuracy_out_of_range(self):
        log = _tiny()
        log.accuracies[0] = 1.5
        assert len(validate(log)) == 1

    def test_label_equal_to_c(self):
        log = _tiny()
        log.labels[1] = 2
        assert len(validate(log)) == 1

    def test_nan_logit_names_epoch_and_sample(self, rng):
        log = random_log(rng, n=4, c=3, e=3)
        log.logits[2, 1, 0] = np.nan
        assert validate(log) == ["epoch 2, sample 1: non-finite logit"]
        with pytest.raises(LogFormatError, match="epoch 2, sample 1"):
            encode(log)

    def test_nan_on_disk_rejected(self, rng):
        log = random_log(rng, n=2, c=2, e=1)
        body = bytearray(encode(log)[:-4])
        body[HEADER_SIZE + 8 + 8 : HEADER_SIZE + 8 + 12] = struct.pack("<f", float("nan"))
        with pytest.raises(LogFormatError, match="epoch 0, sample 0"):
            decode(bytes(body) + struct.pack("<I", zlib.crc32(body)))

    def test_shape_mismatch(self, rng):
        log = random_log(rng, n=4, c=3, e=2)
        log.accuracies = log.accuracies[:1]
        assert any("accuracy/loss" in p for p in validate(log))


def test_head():
    log = random_log(np.random.default_rng(0), e=5)
    h = log.head(2)
    assert h.num_epochs == 2
    np.testing.assert_array_equal(h.logits, log.logits[:2])
