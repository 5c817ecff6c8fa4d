"""File formats and the synthetic audiovisual dataset generator.

Formats (all little-endian):

Tensor blob (.avtb)
    magic "AVTB" | version u16 | dtype u8 (1=f32, 2=f64) | rank u8 |
    extents u64 * rank | payload row-major

Checkpoint (.avck)
    magic "AVCK" | version u16 | config_len u32 | config JSON |
    n_entries u32 | entries (name_len u16, name utf-8, blob_len u32,
    tensor blob bytes) | crc32 u32 of all preceding bytes (IEEE)

Manifest (manifest.txt)
    one record per line: id=<id> split=<train|val> video=<relpath>
    audio=<relpath> labels=<01 string, one digit per step>

WAV reading accepts only RIFF/WAVE PCM16 mono and walks chunks strictly,
skipping unknown chunk types; every malformed input raises DataFormatError.
"""

import io
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError
from .tensor_core import Prng

BLOB_MAGIC = b"AVTB"
BLOB_VERSION = 1
CKPT_MAGIC = b"AVCK"
CKPT_VERSION = 1
_DTYPE_BY_CODE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_BY_KIND = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_MAX_RANK = 8


# ---------------------------------------------------------------------------
# Tensor blobs
# ---------------------------------------------------------------------------

def tensor_to_bytes(arr: np.ndarray) -> bytes:
    dtype = np.dtype(arr.dtype)
    if dtype not in _CODE_BY_KIND:
        raise ConfigError(f"tensor blobs store f32/f64 only, got {dtype}")
    if arr.ndim == 0 or arr.ndim > _MAX_RANK:
        raise ConfigError(f"tensor rank {arr.ndim} outside 1..{_MAX_RANK}")
    head = BLOB_MAGIC + struct.pack("<HBB", BLOB_VERSION, _CODE_BY_KIND[dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr).astype(dtype.newbyteorder("<"), copy=False).tobytes()


def tensor_from_bytes(buf: bytes, what: str = "tensor blob") -> np.ndarray:
    if len(buf) < 8:
        raise DataFormatError(f"{what}: truncated header ({len(buf)} bytes)")
    if buf[:4] != BLOB_MAGIC:
        raise DataFormatError(f"{what}: bad magic {buf[:4]!r}")
    version, code, rank = struct.unpack_from("<HBB", buf, 4)
    if version != BLOB_VERSION:
        raise DataFormatError(f"{what}: unsupported version {version}")
    if code not in _DTYPE_BY_CODE:
        raise DataFormatError(f"{what}: unknown dtype code {code}")
    if not 1 <= rank <= _MAX_RANK:
        raise DataFormatError(f"{what}: rank {rank} outside 1..{_MAX_RANK}")
    if len(buf) < 8 + 8 * rank:
        raise DataFormatError(f"{what}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    if any(e < 1 for e in shape):
        raise DataFormatError(f"{what}: zero extent in shape {shape}")
    dtype = _DTYPE_BY_CODE[code]
    count = 1
    for e in shape:
        count *= e
    expected = 8 + 8 * rank + count * dtype.itemsize
    if len(buf) != expected:
        raise DataFormatError(f"{what}: payload is {len(buf) - 8 - 8 * rank} bytes, "
                              f"expected {count * dtype.itemsize} for shape {shape}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=8 + 8 * rank)
    return arr.reshape(shape).copy()


def write_tensor(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read(), what=str(path))


def read_tensor_header(path):
    """(dtype, shape) from the header without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(8 + 8 * _MAX_RANK)
    if len(head) < 8 or head[:4] != BLOB_MAGIC:
        raise DataFormatError(f"{path}: not a tensor blob")
    version, code, rank = struct.unpack_from("<HBB", head, 4)
    if version != BLOB_VERSION or code not in _DTYPE_BY_CODE or not 1 <= rank <= _MAX_RANK:
        raise DataFormatError(f"{path}: bad blob header")
    if len(head) < 8 + 8 * rank:
        raise DataFormatError(f"{path}: truncated extents")
    return _DTYPE_BY_CODE[code], struct.unpack_from(f"<{rank}Q", head, 8)


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def read_wav(path):
    """(samples in [-1,1], sample_rate) from a PCM16 mono RIFF/WAVE file."""
    with open(path, "rb") as fh:
        data = fh.read()
    n = len(data)
    if n < 12:
        raise DataFormatError(f"{path}: too short for a RIFF header ({n} bytes)")
    if data[:4] != b"RIFF":
        raise DataFormatError(f"{path}: bad RIFF magic {data[:4]!r}")
    riff_size = struct.unpack_from("<I", data, 4)[0]
    if riff_size != n - 8:
        raise DataFormatError(f"{path}: RIFF size field {riff_size} != file size - 8 ({n - 8})")
    if data[8:12] != b"WAVE":
        raise DataFormatError(f"{path}: bad WAVE tag {data[8:12]!r}")

    fmt = None
    pcm = None
    offset = 12
    while offset < n:
        if offset + 8 > n:
            raise DataFormatError(f"{path}: truncated chunk header at offset {offset}")
        cid = data[offset:offset + 4]
        size = struct.unpack_from("<I", data, offset + 4)[0]
        body_start = offset + 8
        if body_start + size > n:
            raise DataFormatError(f"{path}: chunk {cid!r} of {size} bytes overruns the file")
        body = data[body_start:body_start + size]
        if cid == b"fmt ":
            if size < 16:
                raise DataFormatError(f"{path}: fmt chunk is {size} bytes, need >= 16")
            audio_format, channels, rate, byte_rate, block_align, bits = struct.unpack_from("<HHIIHH", body, 0)
            if audio_format != 1:
                raise DataFormatError(f"{path}: audio format {audio_format} is not PCM")
            if channels != 1:
                raise DataFormatError(f"{path}: {channels} channels; only mono is supported")
            if bits != 16:
                raise DataFormatError(f"{path}: {bits}-bit samples; only PCM16 is supported")
            if rate == 0:
                raise DataFormatError(f"{path}: zero sample rate")
            if block_align != 2:
                raise DataFormatError(f"{path}: block align {block_align} != 2 for PCM16 mono")
            if byte_rate != rate * 2:
                raise DataFormatError(f"{path}: byte rate {byte_rate} != sample_rate*2 ({rate * 2})")
            fmt = (rate,)
        elif cid == b"data":
            if fmt is None:
                raise DataFormatError(f"{path}: data chunk before fmt chunk")
            if size % 2:
                raise DataFormatError(f"{path}: data chunk of {size} bytes is not whole PCM16 samples")
            pcm = body
        # unknown chunks (LIST, fact, ...) are skipped
        offset = body_start + size
        if size % 2:  # chunks are word-aligned; a final missing pad byte is tolerated
            offset += 1 if offset < n else 0
    if fmt is None:
        raise DataFormatError(f"{path}: no fmt chunk")
    if pcm is None:
        raise DataFormatError(f"{path}: no data chunk")
    samples = np.frombuffer(pcm, dtype="<i2").astype(np.float64) / 32768.0
    return samples, fmt[0]


def write_wav(path, samples, sample_rate: int) -> None:
    """Minimal PCM16 mono writer; samples are clipped to [-1, 1)."""
    x = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    body = b"WAVE"
    body += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    body += b"data" + struct.pack("<I", len(pcm)) + pcm
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    id: str
    video_path: str
    audio_path: str
    split: str
    labels: np.ndarray  # int 0/1 per step


def write_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            labels = "".join(str(int(v)) for v in r.labels)
            fh.write(f"id={r.id} split={r.split} video={r.video_path} audio={r.audio_path} labels={labels}\n")


def read_manifest(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = {}
            for token in line.split():
                if "=" not in token:
                    raise DataFormatError(f"{path}:{lineno}: token {token!r} is not key=value")
                key, value = token.split("=", 1)
                fields[key] = value
            missing = {"id", "split", "video", "audio", "labels"} - set(fields)
            if missing:
                raise DataFormatError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            if fields["split"] not in ("train", "val"):
                raise DataFormatError(f"{path}:{lineno}: split must be train|val, got {fields['split']!r}")
            if not fields["labels"] or set(fields["labels"]) - {"0", "1"}:
                raise DataFormatError(f"{path}:{lineno}: labels must be a nonempty 0/1 string")
            records.append(ManifestRecord(
                id=fields["id"], video_path=fields["video"], audio_path=fields["audio"],
                split=fields["split"], labels=np.array([int(ch) for ch in fields["labels"]], dtype=int)))
    return records


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path) -> None:
    """Serialize config + every parameter and buffer, CRC32-sealed."""
    import json

    out = io.BytesIO()
    out.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
    config = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    out.write(struct.pack("<I", len(config)) + config)
    entries = list(model.state_items())
    out.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        blob = tensor_to_bytes(arr)
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)) + encoded)
        out.write(struct.pack("<I", len(blob)) + blob)
    payload = out.getvalue()
    with open(path, "wb") as fh:
        fh.write(payload + struct.pack("<I", zlib.crc32(payload)))


def read_checkpoint_state(path):
    """(config dict, {name: array}) after verifying the trailing CRC32."""
    import json

    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 14:
        raise DataFormatError(f"{path}: too short for a checkpoint")
    stored_crc = struct.unpack_from("<I", data, len(data) - 4)[0]
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise DataFormatError(f"{path}: CRC mismatch (stored {stored_crc:#010x}, actual {actual_crc:#010x})")
    if data[:4] != CKPT_MAGIC:
        raise DataFormatError(f"{path}: bad checkpoint magic {data[:4]!r}")
    version = struct.unpack_from("<H", data, 4)[0]
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
    offset = 6
    (config_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if offset + config_len > len(data) - 4:
        raise DataFormatError(f"{path}: config overruns the file")
    try:
        config = json.loads(data[offset:offset + config_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise DataFormatError(f"{path}: config is not valid JSON ({exc})") from None
    offset += config_len
    (n_entries,) = struct.unpack_from("<I", data, offset)
    offset += 4
    state = {}
    for _ in range(n_entries):
        if offset + 2 > len(data) - 4:
            raise DataFormatError(f"{path}: truncated entry header")
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8", errors="replace")
        offset += name_len
        if offset + 4 > len(data) - 4:
            raise DataFormatError(f"{path}: truncated blob length for {name!r}")
        (blob_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if offset + blob_len > len(data) - 4:
            raise DataFormatError(f"{path}: blob for {name!r} overruns the file")
        state[name] = tensor_from_bytes(data[offset:offset + blob_len], what=f"{path}:{name}")
        offset += blob_len
    if offset != len(data) - 4:
        raise DataFormatError(f"{path}: {len(data) - 4 - offset} trailing bytes before CRC")
    return config, state


def load_checkpoint(path, dtype=None):
    """Rebuild the model stored at `path` (bit-exact round trip)."""
    from .model_asd import AsdModel, ModelConfig
    from .tensor_core import TRAIN_DTYPE

    config, state = read_checkpoint_state(path)
    model = AsdModel(ModelConfig.from_dict(config), seed=0, dtype=dtype or TRAIN_DTYPE)
    model.load_state(state)
    return model


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

STEP_SECONDS = 0.5
SAMPLE_RATE = 16000
FRAMES_PER_STEP = 5
IMAGE_HW = 100
_MOUTH = (slice(55, 71), slice(40, 61))
_FACE = (slice(30, 78), slice(32, 69))

STEP_POSITIVE = "positive"
STEP_CONFUSER_AUDIO = "confuser_audio"  # speech present, static mouth
STEP_CONFUSER_VIDEO = "confuser_video"  # no speech, oscillating mouth
STEP_NEGATIVE = "negative"


@dataclass
class SequenceTruth:
    id: str
    split: str
    labels: np.ndarray
    speech: np.ndarray  # bool per step
    mouth: np.ndarray   # bool per step
    kinds: list


@dataclass
class SyntheticDataset:
    out_dir: str
    manifest_path: str
    records: list        # ManifestRecord
    truth: list          # SequenceTruth
    n_train: int
    n_val: int
    label_balance: float


def _step_waveform(rng, speech, snr_db, n):
    """0.5 s of audio: amplitude-modulated harmonic tone in noise, or near-silence."""
    t = np.arange(n) / SAMPLE_RATE
    if not speech:
        return 0.003 * rng.normal(size=n), None
    f0 = rng.uniform(180.0, 260.0)
    f_mod = rng.uniform(3.0, 5.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    envelope = 0.5 * (1.0 - np.cos(2.0 * np.pi * f_mod * t + phase))
    tone = np.sin(2.0 * np.pi * f0 * t) + 0.5 * np.sin(2.0 * np.pi * 2.3 * f0 * t)
    noise = 10.0 ** (-snr_db / 20.0) * rng.normal(size=n)
    return 0.3 * envelope * (tone + noise), (f_mod, phase)


def _step_frames(rng, mouth_moving, sync_params):
    """Five frames; the mouth patch brightness follows an envelope when moving."""
    frames = 0.05 * rng.normal(size=(FRAMES_PER_STEP, IMAGE_HW, IMAGE_HW))
    frames += 0.35
    frames[:, _FACE[0], _FACE[1]] += 0.25
    if mouth_moving:
        if sync_params is not None:
            f_mod, phase = sync_params  # in sync with the audio envelope
        else:
            f_mod, phase = rng.uniform(3.0, 5.0), rng.uniform(0.0, 2.0 * np.pi)
        t_k = (np.arange(FRAMES_PER_STEP) + 0.5) * (STEP_SECONDS / FRAMES_PER_STEP)
        env = 0.5 * (1.0 - np.cos(2.0 * np.pi * f_mod * t_k + phase))
        brightness = 0.2 + 0.6 * env
    else:
        brightness = np.full(FRAMES_PER_STEP, rng.uniform(0.2, 0.8))
    frames[:, _MOUTH[0], _MOUTH[1]] = brightness[:, None, None] + 0.02 * rng.normal(
        size=(FRAMES_PER_STEP, _MOUTH[0].stop - _MOUTH[0].start, _MOUTH[1].stop - _MOUTH[1].start))
    return np.clip(frames, 0.0, 1.0)


def _draw_step_kind(rng, confuser_fraction):
    u = rng.uniform()
    if u < 0.5:
        return STEP_POSITIVE
    if u < 0.5 + confuser_fraction / 2.0:
        return STEP_CONFUSER_AUDIO
    if u < 0.5 + confuser_fraction:
        return STEP_CONFUSER_VIDEO
    return STEP_NEGATIVE


def gen_synthetic(out_dir, n_sequences, seq_len, confuser_fraction, snr_db=20.0, seed=0,
                  val_fraction=0.2) -> SyntheticDataset:
    """Write a synthetic audiovisual dataset under `out_dir`.

    Every step is positive with probability 1/2 (speech with a mouth patch
    oscillating in sync). A fraction `confuser_fraction` of ALL steps are
    confusers, split evenly between speech+static-mouth and
    silence+oscillating-mouth, both labeled 0; the remainder are honest
    negatives. With f=0.5 every negative is a confuser, capping any
    single-modality score at AUC 0.75 while audio AND video resolves the
    label exactly. Same seed, same bytes.
    """
    if not 0.0 <= confuser_fraction <= 0.5:
        raise ConfigError(
            f"confuser_fraction must lie in [0, 0.5], got {confuser_fraction} "
            "(0.5 already makes every negative step a confuser)")
    if n_sequences < 1 or seq_len < 1:
        raise ConfigError(f"need n_sequences >= 1 and seq_len >= 1, got {n_sequences}, {seq_len}")
    os.makedirs(out_dir, exist_ok=True)
    video_dir = os.path.join(out_dir, "video")
    audio_dir = os.path.join(out_dir, "audio")
    os.makedirs(video_dir, exist_ok=True)
    os.makedirs(audio_dir, exist_ok=True)

    root = Prng(seed)
    step_samples = int(STEP_SECONDS * SAMPLE_RATE)
    records = []
    truths = []
    ones = 0
    val_every = max(2, int(round(1.0 / val_fraction))) if val_fraction > 0 else 0
    for i in range(n_sequences):
        rng = root.child(i)
        sid = f"seq{i:05d}"
        split = "val" if (val_every and i % val_every == val_every - 1) else "train"
        video = np.empty((seq_len, FRAMES_PER_STEP, IMAGE_HW, IMAGE_HW), dtype=np.float32)
        wave = np.empty(seq_len * step_samples)
        labels = np.zeros(seq_len, dtype=int)
        speech_flags = np.zeros(seq_len, dtype=bool)
        mouth_flags = np.zeros(seq_len, dtype=bool)
        kinds = []
        for t in range(seq_len):
            kind = _draw_step_kind(rng, confuser_fraction)
            kinds.append(kind)
            speech = kind in (STEP_POSITIVE, STEP_CONFUSER_AUDIO)
            mouth = kind in (STEP_POSITIVE, STEP_CONFUSER_VIDEO)
            labels[t] = 1 if kind == STEP_POSITIVE else 0
            speech_flags[t] = speech
            mouth_flags[t] = mouth
            step_wave, sync = _step_waveform(rng, speech, snr_db, step_samples)
            wave[t * step_samples:(t + 1) * step_samples] = step_wave
            video[t] = _step_frames(rng, mouth, sync if kind == STEP_POSITIVE else None)
        ones += int(labels.sum())
        video_rel = f"video/{sid}.avtb"
        audio_rel = f"audio/{sid}.wav"
        write_tensor(os.path.join(out_dir, video_rel), video)
        write_wav(os.path.join(out_dir, audio_rel), wave, SAMPLE_RATE)
        records.append(ManifestRecord(id=sid, video_path=video_rel, audio_path=audio_rel,
                                      split=split, labels=labels))
        truths.append(SequenceTruth(id=sid, split=split, labels=labels, speech=speech_flags,
                                    mouth=mouth_flags, kinds=kinds))
    manifest_path = os.path.join(out_dir, "manifest.txt")
    write_manifest(manifest_path, records)
    return SyntheticDataset(
        out_dir=out_dir, manifest_path=manifest_path, records=records, truth=truths,
        n_train=sum(1 for r in records if r.split == "train"),
        n_val=sum(1 for r in records if r.split == "val"),
        label_balance=ones / float(n_sequences * seq_len))


# ---------------------------------------------------------------------------
# Key/value report documents
# ---------------------------------------------------------------------------

def format_kv(mapping) -> str:
    """Flat `key: value` lines; floats rendered with full precision."""
    lines = []
    for key, value in mapping.items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}: {value}")
    return "\n".join(lines) + "\n"


def write_kv(path, mapping) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_kv(mapping))


def parse_kv(text) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if ":" not in line:
            raise DataFormatError(f"line {lineno}: expected 'key: value', got {line!r}")
        key, value = line.split(":", 1)
        out[key.strip()] = value.strip()
    return out
