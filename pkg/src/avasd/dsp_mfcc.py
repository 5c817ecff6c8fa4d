"""MFCC extraction: window -> FFT -> Mel filterbank -> log -> DCT -> tiles.

The FFT is an in-house iterative radix-2 transform with a real-input
packing (N real samples -> N/2-point complex FFT), vectorized over frames.
Cepstra are the first `n_ceps` coefficients of an orthonormal DCT-II over
the log Mel energies, C0 included.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, NumericError

LOG_FLOOR = 1e-10
NORM_EPS = 1e-8


@dataclass
class MfccConfig:
    """DSP parameters; defaults give 13 coefficients per 25 ms frame at 100 frames/s."""

    sample_rate_hz: int = 16000
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 40
    n_ceps: int = 13
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    tile_frames: int = 20
    preemphasis: float = 0.0  # off by default

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.win_samples > self.n_fft:
            raise ConfigError(f"window of {self.win_samples} samples exceeds n_fft {self.n_fft}")
        if self.n_ceps > self.n_mels:
            raise ConfigError(f"n_ceps {self.n_ceps} exceeds n_mels {self.n_mels}")
        if self.fmax_hz > self.sample_rate_hz / 2:
            raise ConfigError(f"fmax {self.fmax_hz} Hz above Nyquist {self.sample_rate_hz / 2} Hz")
        if not 0 <= self.fmin_hz < self.fmax_hz:
            raise ConfigError(f"need 0 <= fmin < fmax, got {self.fmin_hz}..{self.fmax_hz}")

    @property
    def win_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.win_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000.0))

    @property
    def frames_per_second(self) -> float:
        return 1000.0 / self.hop_ms


@dataclass
class MelFilterbank:
    weights: np.ndarray  # [n_mels, n_fft/2 + 1], nonnegative triangles
    center_freqs_hz: list


@dataclass
class MfccTile:
    values: np.ndarray  # [n_ceps, tile_frames]
    start_time_s: float


@dataclass
class FeatureStats:
    """Scalar corpus statistics; computed on the training split only."""

    mean: float
    var: float


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hamming_window(n: int) -> np.ndarray:
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))


def frame_and_window(waveform, cfg: MfccConfig) -> np.ndarray:
    """Slice into hop-strided frames and apply the Hamming window.

    Frame count is floor((len - win) / hop) + 1.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise DataFormatError(f"waveform must be 1-D, got shape {x.shape}")
    win, hop = cfg.win_samples, cfg.hop_samples
    if x.size < win:
        raise DataFormatError(f"waveform has {x.size} samples; need at least {win}")
    if cfg.preemphasis:
        x = np.concatenate([x[:1], x[1:] - cfg.preemphasis * x[:-1]])
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop].copy()
    frames *= hamming_window(win)
    return frames


# ---------------------------------------------------------------------------
# In-house FFT
# ---------------------------------------------------------------------------

_fft_tables = {}


def _tables(m: int):
    """Bit-reversal permutation and per-stage twiddles for an m-point FFT."""
    if m not in _fft_tables:
        bits = m.bit_length() - 1
        rev = np.zeros(m, dtype=np.intp)
        for i in range(m):
            r = 0
            v = i
            for _ in range(bits):
                r = (r << 1) | (v & 1)
                v >>= 1
            rev[i] = r
        stages = []
        size = 2
        while size <= m:
            stages.append(np.exp(-2j * np.pi * np.arange(size // 2) / size))
            size *= 2
        _fft_tables[m] = (rev, stages)
    return _fft_tables[m]


def _complex_fft(z: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT over the last axis."""
    b, m = z.shape
    if m == 1:
        return z.copy()
    rev, stages = _tables(m)
    a = z[:, rev].astype(np.complex128)
    size = 2
    for tw in stages:
        half = size // 2
        blocks = a.reshape(b, m // size, size)
        t = blocks[:, :, half:] * tw
        u = blocks[:, :, :half].copy()
        blocks[:, :, :half] = u + t
        blocks[:, :, half:] = u - t
        size *= 2
    return a


def rfft_onesided(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """One-sided spectrum (bins 0..n_fft/2) of real frames, zero-padded to n_fft."""
    if n_fft < 2 or n_fft & (n_fft - 1):
        raise ConfigError(f"n_fft must be a power of two, got {n_fft}")
    x = np.asarray(frames, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] > n_fft:
        raise ConfigError(f"frame length {x.shape[1]} exceeds n_fft {n_fft}")
    if x.shape[1] < n_fft:
        x = np.pad(x, ((0, 0), (0, n_fft - x.shape[1])))
    m = n_fft // 2
    z = x[:, 0::2] + 1j * x[:, 1::2]
    zf = _complex_fft(z)
    zconj = np.conj(zf[:, (m - np.arange(m)) % m])
    even = 0.5 * (zf + zconj)
    odd = -0.5j * (zf - zconj)
    w = np.exp(-2j * np.pi * np.arange(m) / n_fft)
    out = np.empty((x.shape[0], m + 1), dtype=np.complex128)
    out[:, :m] = even + w * odd
    out[:, m] = (even[:, 0] - odd[:, 0]).real
    return out[0] if squeeze else out


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """|FFT|^2 of each zero-padded frame, one-sided."""
    spec = rfft_onesided(frames, n_fft)
    return (spec.real ** 2 + spec.imag ** 2)


# ---------------------------------------------------------------------------
# Mel filterbank and cepstra
# ---------------------------------------------------------------------------

def build_mel_filterbank(cfg: MfccConfig) -> MelFilterbank:
    """Triangular filters equally spaced on the Mel scale.

    n_mels+2 points span mel(fmin)..mel(fmax); filter m rises over
    [f_m, f_{m+1}] and falls over [f_{m+1}, f_{m+2}], sampled at the FFT
    bin frequencies. Low filters are narrower in Hz than high ones.
    """
    n_bins = cfg.n_fft // 2 + 1
    mel_pts = np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_hz = cfg.sample_rate_hz / cfg.n_fft
    quantized = np.floor(hz_pts / bin_hz).astype(int)
    if np.any(np.diff(quantized) < 1):
        raise ConfigError(
            f"mel points collapse onto the same FFT bin (n_fft {cfg.n_fft} too small for n_mels {cfg.n_mels})")
    freqs = np.arange(n_bins) * bin_hz
    lower = hz_pts[:-2][:, None]
    center = hz_pts[1:-1][:, None]
    upper = hz_pts[2:][:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    weights = np.clip(np.minimum(rising, falling), 0.0, None)
    return MelFilterbank(weights=weights, center_freqs_hz=list(hz_pts[1:-1]))


_dct_cache = {}


def dct_ortho_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows 0..n_out-1."""
    key = (n_out, n_in)
    if key not in _dct_cache:
        k = np.arange(n_out)[:, None]
        n = np.arange(n_in)[None, :]
        mat = np.cos(np.pi * (2 * n + 1) * k / (2 * n_in)) * np.sqrt(2.0 / n_in)
        mat[0] *= np.sqrt(0.5)
        _dct_cache[key] = mat
    return _dct_cache[key]


def mfcc(waveform, cfg: MfccConfig, filterbank: MelFilterbank = None) -> np.ndarray:
    """Cepstral matrix [n_frames, n_ceps] for one waveform."""
    if filterbank is None:
        filterbank = build_mel_filterbank(cfg)
    frames = frame_and_window(waveform, cfg)
    power = power_spectrum(frames, cfg.n_fft)
    mel_energy = power @ filterbank.weights.T
    log_mel = np.log(mel_energy + LOG_FLOOR)
    return log_mel @ dct_ortho_matrix(cfg.n_ceps, cfg.n_mels).T


def tile_mfcc(mfcc_matrix: np.ndarray, n_steps: int, step_seconds: float, cfg: MfccConfig):
    """Cut one tile of `tile_frames` frames per model step.

    Tile t is centered on the midpoint of video step t; edge tiles clamp to
    the valid frame range. Values are submatrices of the input (transposed
    to [n_ceps, tile_frames]), never resampled.
    """
    mat = np.asarray(mfcc_matrix)
    n_frames = mat.shape[0]
    width = cfg.tile_frames
    if n_frames < width:
        raise DataFormatError(f"need at least {width} MFCC frames to tile, got {n_frames}")
    tiles = []
    for t in range(n_steps):
        center = (t + 0.5) * step_seconds * cfg.frames_per_second
        start = int(round(center)) - width // 2
        start = min(max(start, 0), n_frames - width)
        tiles.append(MfccTile(values=mat[start:start + width].T.copy(),
                              start_time_s=start * cfg.hop_ms / 1000.0))
    return tiles


def tiles_to_array(tiles) -> np.ndarray:
    return np.stack([t.values for t in tiles], axis=0)


# ---------------------------------------------------------------------------
# Corpus normalization
# ---------------------------------------------------------------------------

def normalize_features(arrays, stats: FeatureStats = None):
    """Standardize by one scalar mean/variance pair over all elements.

    When `stats` is None they are computed from the given arrays (callers
    must pass the training split only); otherwise the provided statistics
    are reused so validation data never leaks into them.
    """
    single = isinstance(arrays, np.ndarray)
    items = [arrays] if single else list(arrays)
    if stats is None:
        total = sum(a.size for a in items)
        if total == 0:
            raise NumericError("normalize_features: no elements")
        mean = sum(float(a.sum()) for a in items) / total
        var = sum(float(((a - mean) ** 2).sum()) for a in items) / total
        if var == 0.0:
            raise NumericError("normalize_features: zero variance (constant features)")
        stats = FeatureStats(mean=mean, var=var)
    scale = 1.0 / np.sqrt(stats.var + NORM_EPS)
    out = [(a - stats.mean) * scale for a in items]
    return (out[0] if single else out), stats
