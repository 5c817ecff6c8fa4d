"""Training with balanced batches and early stopping, AUC evaluation,
waveform noise injection, and the single-threaded latency benchmark."""

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import data_io
from .dsp_mfcc import MfccConfig, NORM_EPS, FeatureStats, mfcc, normalize_features, tile_mfcc, tiles_to_array
from .errors import ConfigError, DataFormatError, NumericError
from .model_asd import AsdModel
from .tensor_core import BENCH_DTYPE, Prng, sgd_step

STEP_SECONDS = data_io.STEP_SECONDS


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("patience and max_epochs must be >= 1")


@dataclass
class LatencyStats:
    mean_ms: float
    median_ms: float
    p95_ms: float
    reps: int
    warmup: int


@dataclass
class EvalReport:
    auc_av: float
    auc_a: float
    auc_v: float
    acc_av: float
    acc_a: float
    acc_v: float
    n_steps: int
    noise_condition: str = "clean"
    latency: LatencyStats = None

    def to_mapping(self) -> dict:
        out = {
            "auc_av": self.auc_av, "auc_a": self.auc_a, "auc_v": self.auc_v,
            "acc_av": self.acc_av, "acc_a": self.acc_a, "acc_v": self.acc_v,
            "n_steps": self.n_steps, "noise_condition": self.noise_condition,
        }
        if self.latency is not None:
            out.update({
                "latency.mean_ms": self.latency.mean_ms,
                "latency.median_ms": self.latency.median_ms,
                "latency.p95_ms": self.latency.p95_ms,
                "latency.reps": self.latency.reps,
                "latency.warmup": self.latency.warmup,
            })
        return out


# ---------------------------------------------------------------------------
# Dataset preparation (manifest -> normalized features)
# ---------------------------------------------------------------------------

@dataclass
class PreparedSequence:
    id: str
    split: str
    labels: np.ndarray
    video_path: str
    tiles: np.ndarray  # [T, n_ceps, tile_frames], normalized float64
    majority_label: int = 0


@dataclass
class PreparedDataset:
    train: list
    val: list
    video_stats: FeatureStats
    audio_stats: FeatureStats
    mfcc_cfg: MfccConfig
    noise_condition: str = "clean"

    def split(self, name):
        if name == "train":
            return self.train
        if name == "val":
            return self.val
        raise ConfigError(f"unknown split {name!r}")


def _video_stats_streaming(paths) -> FeatureStats:
    """Scalar mean/var over every pixel of the listed blobs, one pass."""
    total = 0
    acc = 0.0
    acc_sq = 0.0
    for path in paths:
        arr = data_io.read_tensor(path).astype(np.float64)
        total += arr.size
        acc += float(arr.sum())
        acc_sq += float((arr * arr).sum())
    if total == 0:
        raise DataFormatError("no video data to compute statistics over")
    mean = acc / total
    var = acc_sq / total - mean * mean
    if var <= 0.0:
        raise NumericError("video features have zero variance")
    return FeatureStats(mean=mean, var=var)


def prepare_dataset(data_dir, mfcc_cfg: MfccConfig = None, noise=False, noise_seed=0,
                    video_stats: FeatureStats = None, audio_stats: FeatureStats = None) -> PreparedDataset:
    """Load a generated dataset and produce normalized model inputs.

    MFCC tiles are extracted here (re-extracted from noisy waveforms when
    `noise` is set); video stays on disk and is normalized batch by batch.
    Statistics come from the train split unless explicitly provided (e.g.
    from a checkpoint at eval time).
    """
    cfg = mfcc_cfg or MfccConfig()
    records = data_io.read_manifest(os.path.join(data_dir, "manifest.txt"))
    if not records:
        raise DataFormatError(f"{data_dir}: empty manifest")
    noise_root = Prng(noise_seed).child(909)
    sequences = []
    for idx, rec in enumerate(records):
        video_path = os.path.join(data_dir, rec.video_path)
        _, shape = data_io.read_tensor_header(video_path)
        if shape[0] != rec.labels.size:
            raise DataFormatError(f"{rec.id}: {rec.labels.size} labels but video has {shape[0]} steps")
        wave, rate = data_io.read_wav(os.path.join(data_dir, rec.audio_path))
        if rate != cfg.sample_rate_hz:
            raise DataFormatError(f"{rec.id}: sample rate {rate} != configured {cfg.sample_rate_hz}")
        if noise:
            wave, _sigma = add_gaussian_noise(wave, noise_root.child(idx))
        coeffs = mfcc(wave, cfg)
        tiles = tiles_to_array(tile_mfcc(coeffs, rec.labels.size, STEP_SECONDS, cfg))
        majority = 1 if 2 * int(rec.labels.sum()) >= rec.labels.size else 0
        sequences.append(PreparedSequence(id=rec.id, split=rec.split, labels=rec.labels,
                                          video_path=video_path, tiles=tiles, majority_label=majority))
    train = [s for s in sequences if s.split == "train"]
    val = [s for s in sequences if s.split == "val"]
    if audio_stats is None:
        if not train:
            raise DataFormatError("cannot compute audio statistics: train split is empty")
        _, audio_stats = normalize_features([s.tiles for s in train])
    if video_stats is None:
        video_stats = _video_stats_streaming([s.video_path for s in train])
    scale = 1.0 / math.sqrt(audio_stats.var + NORM_EPS)
    for s in sequences:
        s.tiles = (s.tiles - audio_stats.mean) * scale
    return PreparedDataset(train=train, val=val, video_stats=video_stats, audio_stats=audio_stats,
                           mfcc_cfg=cfg, noise_condition="noisy" if noise else "clean")


def load_video_batch(seqs, video_stats: FeatureStats, dtype=np.float64) -> np.ndarray:
    """[B,T,f,H,W] normalized video for a list of prepared sequences."""
    arrays = [data_io.read_tensor(s.video_path).astype(dtype) for s in seqs]
    batch = np.stack(arrays)
    batch -= video_stats.mean
    batch /= np.sqrt(video_stats.var + NORM_EPS)
    return batch


def batch_arrays(seqs, video_stats, dtype=np.float64):
    video = load_video_batch(seqs, video_stats, dtype)
    audio = np.stack([s.tiles for s in seqs]).astype(dtype, copy=False)
    labels = np.stack([s.labels for s in seqs])
    return video, audio, labels


# ---------------------------------------------------------------------------
# Balanced batches
# ---------------------------------------------------------------------------

def balanced_batches(seqs, batch_size, prng: Prng):
    """Yield batches with exactly batch_size/2 positive- and negative-majority
    sequences; the minority class is resampled with replacement once its
    shuffled epoch order runs out."""
    if batch_size < 2 or batch_size % 2:
        raise ConfigError(f"batch_size must be even and >= 2, got {batch_size}")
    pos = [s for s in seqs if s.majority_label == 1]
    neg = [s for s in seqs if s.majority_label == 0]
    if not pos or not neg:
        raise DataFormatError(
            f"balanced batches need both classes (positives {len(pos)}, negatives {len(neg)})")
    half = batch_size // 2
    n_batches = math.ceil(2 * max(len(pos), len(neg)) / batch_size)

    def epoch_iter(items):
        order = prng.permutation(len(items))
        for idx in order:
            yield items[idx]
        while True:  # exhausted: resample with replacement
            yield items[int(prng.integers(0, len(items)))]

    pos_iter = epoch_iter(pos)
    neg_iter = epoch_iter(neg)
    for _ in range(n_batches):
        batch = [next(pos_iter) for _ in range(half)] + [next(neg_iter) for _ in range(half)]
        yield batch


# ---------------------------------------------------------------------------
# Metrics and noise
# ---------------------------------------------------------------------------

def compute_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve; ties contribute half.

    Equals the pairwise statistic P(s+ > s-) + 0.5*P(s+ = s-).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(int)
    if scores.shape != labels.shape:
        raise ConfigError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataFormatError(f"AUC needs both classes (positives {n_pos}, negatives {n_neg})")
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # indices where a threshold block of equal scores ends
    block_ends = np.r_[np.nonzero(np.diff(sorted_scores))[0], sorted_scores.size - 1]
    tps = np.cumsum(sorted_labels)[block_ends]
    fps = (block_ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    trapezoid = getattr(np, "trapezoid", np.trapz)
    return float(trapezoid(tpr, fpr))


def add_gaussian_noise(waveform, prng: Prng):
    """Add zero-mean Gaussian noise with sigma equal to the record's RMS.

    Returns (noisy, sigma); sigma == 0.0 flags an all-zero input returned
    unchanged. By construction the output SNR is 0 dB.
    """
    x = np.asarray(waveform, dtype=np.float64)
    sigma = float(np.sqrt(np.mean(x * x)))
    if sigma == 0.0:
        return x.copy(), 0.0
    return x + prng.normal(scale=sigma, size=x.shape), sigma


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: list = field(default_factory=list)  # one dict per epoch
    best_val_auc: float = float("-inf")
    best_epoch: int = 0
    epochs_run: int = 0
    stopped_early: bool = False


def _scores_over(model: AsdModel, seqs, video_stats, chunk=32):
    """Per-step probabilities for each head over a list of sequences."""
    probs = {"av": [], "a": [], "v": []}
    labels = []
    for i in range(0, len(seqs), chunk):
        part = seqs[i:i + chunk]
        video, audio, lab = batch_arrays(part, video_stats, dtype=model.dtype)
        out = model.predict_proba(video, audio)
        for head in probs:
            probs[head].append(out[head].ravel())
        labels.append(lab.ravel())
    return {h: np.concatenate(v) for h, v in probs.items()}, np.concatenate(labels)


def evaluate(model: AsdModel, seqs, video_stats, noise_condition="clean") -> EvalReport:
    if not seqs:
        raise DataFormatError("evaluate: empty sequence list")
    probs, labels = _scores_over(model, seqs, video_stats)
    accs = {h: float(((p >= 0.5).astype(int) == labels).mean()) for h, p in probs.items()}
    return EvalReport(
        auc_av=compute_auc(probs["av"], labels),
        auc_a=compute_auc(probs["a"], labels),
        auc_v=compute_auc(probs["v"], labels),
        acc_av=accs["av"], acc_a=accs["a"], acc_v=accs["v"],
        n_steps=int(labels.size), noise_condition=noise_condition)


def train(model: AsdModel, prepared: PreparedDataset, cfg: TrainConfig, log=None) -> TrainResult:
    """SGD with momentum over balanced batches; early stopping on val AUC.

    Keeps the best checkpoint (strictly higher AV-head validation AUC) and
    stops after `patience` consecutive epochs without improvement. The model
    is left holding the best state; normalization statistics are stored in
    its buffers so checkpoints are self-contained.
    """
    if not prepared.val:
        raise DataFormatError("training needs a validation split")
    model.buffers["norm.video_mean"][...] = prepared.video_stats.mean
    model.buffers["norm.video_var"][...] = prepared.video_stats.var
    model.buffers["norm.audio_mean"][...] = prepared.audio_stats.mean
    model.buffers["norm.audio_var"][...] = prepared.audio_stats.var

    batch_rng = Prng(cfg.seed).child(1)
    dropout_rng = Prng(cfg.seed).child(2)
    result = TrainResult()
    best_state = None
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for b_idx, batch in enumerate(balanced_batches(prepared.train, cfg.batch_size, batch_rng)):
            video, audio, labels = batch_arrays(batch, prepared.video_stats)
            total, _parts = model.loss_and_grads(video, audio, labels, "train", dropout_rng)
            if not np.isfinite(total):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b_idx}")
            sgd_step(model.params, lr=cfg.lr, momentum=cfg.momentum, l2_alpha=model.config.l2_alpha)
            losses.append(total)
        probs, labels = _scores_over(model, prepared.val, prepared.video_stats)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_auc_av": compute_auc(probs["av"], labels),
            "val_auc_a": compute_auc(probs["a"], labels),
            "val_auc_v": compute_auc(probs["v"], labels),
        }
        result.history.append(row)
        result.epochs_run = epoch
        if log:
            log(f"epoch {epoch}: loss {row['train_loss']:.4f} val auc_av {row['val_auc_av']:.4f} "
                f"(a {row['val_auc_a']:.4f}, v {row['val_auc_v']:.4f})")
        if row["val_auc_av"] > result.best_val_auc:
            result.best_val_auc = row["val_auc_av"]
            result.best_epoch = epoch
            best_state = {name: arr.copy() for name, arr in model.state_items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                result.stopped_early = True
                break
    if best_state is not None:
        model.load_state(best_state)
    return result


# ---------------------------------------------------------------------------
# Latency benchmark
# ---------------------------------------------------------------------------

def _bench_inputs(model: AsdModel, prng: Prng):
    cfg = model.config
    video = prng.normal(size=(1, cfg.seq_len, cfg.frames_per_step, cfg.image_hw, cfg.image_hw),
                        dtype=model.dtype)
    audio = prng.normal(size=(1, cfg.seq_len) + tuple(cfg.audio_shape), dtype=model.dtype)
    return video, audio


def _stats_from_ms(samples_ms, warmup) -> LatencyStats:
    arr = np.asarray(samples_ms)
    return LatencyStats(
        mean_ms=float(arr.mean()),
        median_ms=float(np.median(arr)),
        p95_ms=float(np.percentile(arr, 95)),
        reps=int(arr.size), warmup=int(warmup))


def benchmark_inference(model: AsdModel, reps=100, warmup=10, seed=0, include_dsp=False,
                        mfcc_cfg: MfccConfig = None) -> LatencyStats:
    """Wall-clock per forward pass over one sequence, single-threaded, f32.

    The same random input is reused across reps to isolate compute.
    `include_dsp` adds MFCC extraction and tiling to the timed region for
    honest end-to-end numbers.
    """
    if reps < 10:
        raise ConfigError(f"reps must be >= 10, got {reps}")
    if model.dtype != BENCH_DTYPE:
        model = model.astype(BENCH_DTYPE)
    prng = Prng(seed).child(31)
    video, audio = _bench_inputs(model, prng)
    cfg = mfcc_cfg or MfccConfig()
    wave = prng.normal(scale=0.1, size=int(model.config.seq_len * STEP_SECONDS * cfg.sample_rate_hz))

    def one_pass():
        if include_dsp:
            coeffs = mfcc(wave, cfg)
            tile_mfcc(coeffs, model.config.seq_len, STEP_SECONDS, cfg)
        model.forward(video, audio, "infer")

    from threadpoolctl import threadpool_limits

    samples = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            one_pass()
        for _ in range(reps):
            start = time.perf_counter()
            one_pass()
            samples.append((time.perf_counter() - start) * 1000.0)
    return _stats_from_ms(samples, warmup)


def benchmark_models(models: dict, reps=100, warmup=10, seed=0) -> dict:
    """Benchmark several models with interleaved reps so machine drift
    affects them equally; used for latency-ordering comparisons."""
    if reps < 10:
        raise ConfigError(f"reps must be >= 10, got {reps}")
    from threadpoolctl import threadpool_limits

    casted = {name: (m if m.dtype == BENCH_DTYPE else m.astype(BENCH_DTYPE))
              for name, m in models.items()}
    inputs = {name: _bench_inputs(m, Prng(seed).child(31)) for name, m in casted.items()}
    samples = {name: [] for name in casted}
    with threadpool_limits(limits=1):
        for name, m in casted.items():
            for _ in range(warmup):
                m.forward(*inputs[name], "infer")
        for _ in range(reps):
            for name, m in casted.items():
                start = time.perf_counter()
                m.forward(*inputs[name], "infer")
                samples[name].append((time.perf_counter() - start) * 1000.0)
    return {name: _stats_from_ms(vals, warmup) for name, vals in samples.items()}
