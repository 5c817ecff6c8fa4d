"""File format round trips, rejection paths, and the synthetic generator."""

import struct

import numpy as np
import numpy.testing as npt
import pytest

from avasd import data_io
from avasd.errors import ConfigError, DataFormatError
from avasd.model_asd import AsdModel, ModelConfig
from avasd.tensor_core import Prng


class TestTensorBlob:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip(self, tmp_path, dtype):
        arr = Prng(1).normal(size=(3, 4, 5)).astype(dtype)
        path = tmp_path / "t.avtb"
        data_io.write_tensor(path, arr)
        back = data_io.read_tensor(path)
        assert back.dtype == dtype
        npt.assert_array_equal(back, arr)

    def test_header_reader(self, tmp_path):
        arr = np.zeros((7, 2), dtype=np.float32)
        path = tmp_path / "t.avtb"
        data_io.write_tensor(path, arr)
        dtype, shape = data_io.read_tensor_header(path)
        assert dtype == np.dtype("<f4") and shape == (7, 2)

    def test_bad_magic(self):
        with pytest.raises(DataFormatError, match="magic"):
            data_io.tensor_from_bytes(b"NOPE" + b"\x00" * 20)

    def test_payload_length_mismatch(self):
        good = data_io.tensor_to_bytes(np.ones((2, 2)))
        with pytest.raises(DataFormatError, match="payload"):
            data_io.tensor_from_bytes(good + b"\x00" * 8)

    def test_zero_extent_rejected(self):
        head = data_io.BLOB_MAGIC + struct.pack("<HBB", 1, 2, 2) + struct.pack("<2Q", 2, 0)
        with pytest.raises(DataFormatError, match="extent"):
            data_io.tensor_from_bytes(head)

    def test_int_array_rejected_on_write(self):
        with pytest.raises(ConfigError, match="f32/f64"):
            data_io.tensor_to_bytes(np.ones((2, 2), dtype=np.int32))


class TestWav:
    def test_pcm16_scaling(self, tmp_path):
        path = tmp_path / "a.wav"
        data_io.write_wav(path, [0.0, 0.5, -1.0], 16000)
        samples, rate = data_io.read_wav(path)
        assert rate == 16000
        npt.assert_array_equal(samples, [0.0, 0.5, -1.0])

    def test_round_trip_quantized(self, tmp_path):
        wave = Prng(2).uniform(-0.9, 0.9, size=4000)
        path = tmp_path / "b.wav"
        data_io.write_wav(path, wave, 16000)
        back, _ = data_io.read_wav(path)
        assert np.abs(back - wave).max() <= 1.0 / 32768.0

    def test_stereo_rejected(self, tmp_path):
        pcm = b"\x00\x00" * 4
        body = b"WAVE" + b"fmt " + struct.pack("<IHHIIHH", 16, 1, 2, 16000, 64000, 4, 16)
        body += b"data" + struct.pack("<I", len(pcm)) + pcm
        path = tmp_path / "stereo.wav"
        path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(DataFormatError, match="2 channels"):
            data_io.read_wav(path)

    def test_non_pcm_rejected(self, tmp_path):
        body = b"WAVE" + b"fmt " + struct.pack("<IHHIIHH", 16, 3, 1, 16000, 32000, 2, 16)
        body += b"data" + struct.pack("<I", 0)
        path = tmp_path / "float.wav"
        path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(DataFormatError, match="not PCM"):
            data_io.read_wav(path)

    def test_extra_list_chunk_skipped(self, tmp_path):
        pcm = struct.pack("<3h", 0, 16384, -32768)
        body = b"WAVE"
        body += b"LIST" + struct.pack("<I", 10) + b"INFOabcdef"
        body += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 8000, 16000, 2, 16)
        body += b"junk" + struct.pack("<I", 3) + b"xy z"[:3] + b"\x00"  # odd size + pad
        body += b"data" + struct.pack("<I", len(pcm)) + pcm
        path = tmp_path / "chunky.wav"
        path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        samples, rate = data_io.read_wav(path)
        assert rate == 8000
        npt.assert_array_equal(samples, [0.0, 0.5, -1.0])

    def test_truncated_chunk_rejected(self, tmp_path):
        body = b"WAVE" + b"fmt " + struct.pack("<I", 100)  # declares more than exists
        path = tmp_path / "trunc.wav"
        path.write_bytes(b"RIFF" + struct.pack("<I", len(body) + 8) + body + b"\x00" * 8)
        with pytest.raises(DataFormatError):
            data_io.read_wav(path)

    def test_riff_size_must_match(self, tmp_path):
        path = tmp_path / "size.wav"
        data_io.write_wav(path, [0.1, 0.2], 16000)
        raw = bytearray(path.read_bytes())
        raw[4] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="RIFF size"):
            data_io.read_wav(path)

    def test_data_before_fmt_rejected(self, tmp_path):
        body = b"WAVE" + b"data" + struct.pack("<I", 2) + b"\x00\x00"
        body += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, 16000, 32000, 2, 16)
        path = tmp_path / "order.wav"
        path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
        with pytest.raises(DataFormatError, match="before fmt"):
            data_io.read_wav(path)


class TestManifest:
    def test_round_trip(self, tmp_path):
        records = [
            data_io.ManifestRecord("a", "video/a.avtb", "audio/a.wav", "train", np.array([0, 1, 1])),
            data_io.ManifestRecord("b", "video/b.avtb", "audio/b.wav", "val", np.array([1, 0, 0])),
        ]
        path = tmp_path / "manifest.txt"
        data_io.write_manifest(path, records)
        back = data_io.read_manifest(path)
        assert [r.id for r in back] == ["a", "b"]
        assert back[1].split == "val"
        npt.assert_array_equal(back[0].labels, [0, 1, 1])

    def test_bad_lines_rejected(self, tmp_path):
        path = tmp_path / "manifest.txt"
        path.write_text("id=a split=train video=v.avtb audio=a.wav labels=012\n")
        with pytest.raises(DataFormatError, match="labels"):
            data_io.read_manifest(path)
        path.write_text("id=a split=test video=v audio=a labels=01\n")
        with pytest.raises(DataFormatError, match="split"):
            data_io.read_manifest(path)
        path.write_text("id=a video=v audio=a labels=01\n")
        with pytest.raises(DataFormatError, match="missing"):
            data_io.read_manifest(path)


class TestCheckpoint:
    def test_bitwise_round_trip(self, tmp_path):
        model = AsdModel(ModelConfig.tiny("m2"), seed=5)
        # make running stats nontrivial
        video = Prng(6).normal(size=(2, 2, 5, 8, 8))
        audio = Prng(7).normal(size=(2, 2, 4, 5))
        labels = np.array([[0, 1], [1, 0]])
        model.loss_and_grads(video, audio, labels, "train", Prng(8))
        path = tmp_path / "m.avck"
        data_io.save_checkpoint(model, path)
        back = data_io.load_checkpoint(path)
        assert back.config == model.config
        for (name_a, arr_a), (name_b, arr_b) in zip(model.state_items(), back.state_items()):
            assert name_a == name_b
            npt.assert_array_equal(arr_a, arr_b)
        # identical logits bitwise after reload
        out_a = model.forward(video, audio, "infer")["av"]
        out_b = back.forward(video, audio, "infer")["av"]
        npt.assert_array_equal(out_a, out_b)

    def test_flipped_byte_fails_crc(self, tmp_path):
        model = AsdModel(ModelConfig.tiny("m1"), seed=9)
        path = tmp_path / "m.avck"
        data_io.save_checkpoint(model, path)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError, match="CRC"):
            data_io.load_checkpoint(path)

    def test_variant_mismatch_on_restore(self, tmp_path):
        m1 = AsdModel(ModelConfig.tiny("m1"), seed=0)
        path = tmp_path / "m1.avck"
        data_io.save_checkpoint(m1, path)
        _, state = data_io.read_checkpoint_state(path)
        m3 = AsdModel(ModelConfig.tiny("m3"), seed=0)
        with pytest.raises(ConfigError, match="mismatch"):
            m3.load_state(state)


class TestSyntheticDataset:
    def test_composition_and_balance(self, tmp_path):
        ds = data_io.gen_synthetic(tmp_path / "d", n_sequences=60, seq_len=10,
                                   confuser_fraction=0.5, seed=3)
        speech = np.concatenate([t.speech for t in ds.truth])
        mouth = np.concatenate([t.mouth for t in ds.truth])
        labels = np.concatenate([t.labels for t in ds.truth])
        # the label is exactly the AND of the two modal factors
        npt.assert_array_equal(labels, (speech & mouth).astype(int))
        assert abs(ds.label_balance - 0.5) <= 0.02
        # at f=0.5 every negative is a confuser: speech visible in ~half of them
        neg = labels == 0
        assert 0.35 < speech[neg].mean() < 0.65
        assert 0.35 < mouth[neg].mean() < 0.65

    def test_f_zero_audio_is_perfect(self, tmp_path):
        ds = data_io.gen_synthetic(tmp_path / "d0", n_sequences=30, seq_len=8,
                                   confuser_fraction=0.0, seed=4)
        speech = np.concatenate([t.speech for t in ds.truth])
        labels = np.concatenate([t.labels for t in ds.truth])
        npt.assert_array_equal(speech.astype(int), labels)

    def test_same_seed_bit_identical(self, tmp_path):
        a = data_io.gen_synthetic(tmp_path / "a", n_sequences=4, seq_len=3,
                                  confuser_fraction=0.25, seed=7)
        b = data_io.gen_synthetic(tmp_path / "b", n_sequences=4, seq_len=3,
                                  confuser_fraction=0.25, seed=7)
        for rec_a, rec_b in zip(a.records, b.records):
            va = (tmp_path / "a" / rec_a.video_path).read_bytes()
            vb = (tmp_path / "b" / rec_b.video_path).read_bytes()
            assert va == vb
            wa = (tmp_path / "a" / rec_a.audio_path).read_bytes()
            wb = (tmp_path / "b" / rec_b.audio_path).read_bytes()
            assert wa == wb
        assert (tmp_path / "a" / "manifest.txt").read_text() == (tmp_path / "b" / "manifest.txt").read_text()

    def test_files_readable_and_shaped(self, tmp_path):
        ds = data_io.gen_synthetic(tmp_path / "d2", n_sequences=5, seq_len=4,
                                   confuser_fraction=0.3, seed=8)
        rec = ds.records[0]
        video = data_io.read_tensor(tmp_path / "d2" / rec.video_path)
        assert video.shape == (4, 5, 100, 100) and video.dtype == np.float32
        samples, rate = data_io.read_wav(tmp_path / "d2" / rec.audio_path)
        assert rate == 16000 and samples.size == 4 * 8000
        assert len(data_io.read_manifest(ds.manifest_path)) == 5
        assert ds.n_train + ds.n_val == 5 and ds.n_val >= 1

    def test_confuser_fraction_domain(self, tmp_path):
        with pytest.raises(ConfigError, match="0.5"):
            data_io.gen_synthetic(tmp_path / "bad", 2, 2, confuser_fraction=0.75, seed=0)


class TestKvDocument:
    def test_round_trip(self):
        doc = data_io.format_kv({"auc_av": 0.9876543210123, "n_steps": 400, "noise_condition": "clean"})
        parsed = data_io.parse_kv(doc)
        assert float(parsed["auc_av"]) == 0.9876543210123
        assert parsed["noise_condition"] == "clean"

    def test_bad_line(self):
        with pytest.raises(DataFormatError, match="key"):
            data_io.parse_kv("just words\n")


class TestFuzz:
    """Single-byte header mutations must always produce structured errors."""

    def _mutate(self, raw, pos, rng):
        buf = bytearray(raw)
        old = buf[pos]
        new = old
        while new == old:
            new = int(rng.integers(0, 256))
        buf[pos] = new
        return bytes(buf)

    def test_blob_header_mutations_rejected(self, tmp_path):
        arr = Prng(10).normal(size=(3, 4)).astype(np.float32)
        raw = data_io.tensor_to_bytes(arr)
        header_len = 8 + 8 * 2
        rng = Prng(11)
        path = tmp_path / "fuzz.avtb"
        for _ in range(150):
            pos = int(rng.integers(0, header_len))
            path.write_bytes(self._mutate(raw, pos, rng))
            with pytest.raises(DataFormatError):
                data_io.read_tensor(path)

    def test_checkpoint_any_mutation_rejected(self, tmp_path):
        model = AsdModel(ModelConfig.tiny("m1"), seed=12)
        path = tmp_path / "m.avck"
        data_io.save_checkpoint(model, path)
        raw = path.read_bytes()
        rng = Prng(13)
        target = tmp_path / "fuzz.avck"
        for _ in range(150):
            pos = int(rng.integers(0, len(raw)))
            target.write_bytes(self._mutate(raw, pos, rng))
            with pytest.raises(DataFormatError):
                data_io.load_checkpoint(target)

    def test_wav_header_mutations_never_crash(self, tmp_path):
        src = tmp_path / "src.wav"
        data_io.write_wav(src, Prng(14).uniform(-0.5, 0.5, size=256), 16000)
        raw = src.read_bytes()
        rng = Prng(15)
        target = tmp_path / "fuzz.wav"
        rejected = 0
        for _ in range(150):
            pos = int(rng.integers(0, 44))
            target.write_bytes(self._mutate(raw, pos, rng))
            try:
                data_io.read_wav(target)
            except DataFormatError:
                rejected += 1
        assert rejected > 100  # nearly every header byte is load-bearing
