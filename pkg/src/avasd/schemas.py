"""Pydantic request/response models for the service endpoints."""

from typing import List, Optional

from pydantic import BaseModel, Field


class ErrorBody(BaseModel):
    kind: str  # usage | data | numeric
    message: str


class HealthResponse(BaseModel):
    status: str
    version: str


class GenSynthRequest(BaseModel):
    out_dir: str
    n_sequences: int = Field(ge=1)
    seq_len: int = Field(default=10, ge=1)
    confuser_fraction: float = 0.25
    snr_db: float = 20.0
    seed: int = 0


class GenSynthResponse(BaseModel):
    out_dir: str
    manifest_path: str
    n_train: int
    n_val: int
    label_balance: float


class ExtractMfccRequest(BaseModel):
    wav_path: str
    out_path: str
    n_mels: int = 40
    n_fft: int = 512


class ExtractMfccResponse(BaseModel):
    out_path: str
    n_frames: int
    n_coeffs: int
    sample_rate_hz: int


class TrainRequest(BaseModel):
    data_dir: str
    out_ckpt: str
    variant: str = "m1"
    bigru_layers: int = 2
    scale: str = "desk"
    lr: float = 0.01
    momentum: float = 0.9
    patience: int = 5
    batch_size: int = 16
    max_epochs: int = 30
    seed: int = 0


class EpochRow(BaseModel):
    epoch: int
    train_loss: float
    val_auc_av: float
    val_auc_a: float
    val_auc_v: float


class TrainResponse(BaseModel):
    ckpt_path: str
    variant: str
    bigru_layers: int
    scale: str
    seq_len: int
    best_val_auc_av: float
    best_epoch: int
    epochs_run: int
    stopped_early: bool
    history: List[EpochRow]


class LatencyModel(BaseModel):
    mean_ms: float
    median_ms: float
    p95_ms: float
    reps: int
    warmup: int


class EvalRequest(BaseModel):
    ckpt: str
    data_dir: str
    noise: bool = False
    split: str = "val"
    seed: int = 0
    report_path: Optional[str] = None


class EvalResponse(BaseModel):
    auc_av: float
    auc_a: float
    auc_v: float
    acc_av: float
    acc_a: float
    acc_v: float
    n_steps: int
    noise_condition: str
    report_path: str


class BenchRequest(BaseModel):
    ckpt: Optional[str] = None
    variant: str = "m1"
    bigru_layers: int = 2
    scale: str = "paper"
    reps: int = 100
    warmup: int = 10
    seed: int = 0
    include_dsp: bool = False


class BenchResponse(BaseModel):
    variant: str
    bigru_layers: int
    scale: str
    latency: LatencyModel
    reference_gpu_ms: Optional[float] = None


class AblateRequest(BaseModel):
    data_dir: str
    out_dir: str
    scale: str = "desk"
    lr: float = 0.01
    momentum: float = 0.9
    patience: int = 5
    batch_size: int = 16
    max_epochs: int = 4
    reps: int = 30
    warmup: int = 5
    seed: int = 0


class AblateRow(BaseModel):
    model: str
    audio_stream: str
    visual_stream: str
    bigru_layers: int
    inf_time_ms: float
    video_auc: float
    audio_auc: float
    av_auc: float


class AblateResponse(BaseModel):
    rows: List[AblateRow]
    table_path: str
