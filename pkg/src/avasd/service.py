"""FastAPI service wrapping the engine; the CLI is a thin client of this app.

Errors map to HTTP statuses by kind: usage 400, data 422, numeric 500;
bodies carry {"kind", "message"} so clients can translate to exit codes.
"""

import os

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from . import __version__, data_io, schemas
from .dsp_mfcc import FeatureStats, MfccConfig, mfcc
from .errors import AvasdError, ConfigError, NumericError
from .model_asd import AsdModel, config_by_scale
from .train_eval import (
    EvalReport,
    TrainConfig,
    benchmark_inference,
    evaluate,
    prepare_dataset,
    train,
)

# Published baseline timings (ms) for these architectures on an 11GB
# GeForce RTX 2080 Ti, keyed by (variant, bigru_layers). Reported next to
# our CPU numbers for reference, never asserted.
REFERENCE_GPU_MS = {
    ("m1", 2): 44.41, ("m1", 1): 39.78,
    ("m2", 2): 44.48, ("m2", 1): 40.37,
    ("m3", 2): 47.44, ("m3", 1): 42.10,
}

AUDIO_STREAM_NAME = {"m1": "MFCC", "m2": "MFCC+2fc", "m3": "MFCC+VGG-M"}

app = FastAPI(title="avasd", version=__version__)


@app.exception_handler(AvasdError)
async def _avasd_error_handler(request, exc: AvasdError):
    if isinstance(exc, ConfigError):
        kind, status = "usage", 400
    elif isinstance(exc, NumericError):
        kind, status = "numeric", 500
    else:
        kind, status = "data", 422
    return JSONResponse(status_code=status, content={"kind": kind, "message": str(exc)})


@app.exception_handler(FileNotFoundError)
async def _missing_file_handler(request, exc: FileNotFoundError):
    return JSONResponse(status_code=422, content={"kind": "data", "message": str(exc)})


@app.get("/healthz", response_model=schemas.HealthResponse)
def healthz():
    return schemas.HealthResponse(status="ok", version=__version__)


@app.post("/gen-synth", response_model=schemas.GenSynthResponse)
def gen_synth(req: schemas.GenSynthRequest):
    ds = data_io.gen_synthetic(req.out_dir, req.n_sequences, req.seq_len,
                               req.confuser_fraction, snr_db=req.snr_db, seed=req.seed)
    return schemas.GenSynthResponse(out_dir=ds.out_dir, manifest_path=ds.manifest_path,
                                    n_train=ds.n_train, n_val=ds.n_val,
                                    label_balance=ds.label_balance)


@app.post("/extract-mfcc", response_model=schemas.ExtractMfccResponse)
def extract_mfcc(req: schemas.ExtractMfccRequest):
    cfg = MfccConfig(n_mels=req.n_mels, n_fft=req.n_fft)
    wave, rate = data_io.read_wav(req.wav_path)
    if rate != cfg.sample_rate_hz:
        raise ConfigError(f"{req.wav_path} is {rate} Hz; expected {cfg.sample_rate_hz} Hz input")
    coeffs = mfcc(wave, cfg)
    data_io.write_tensor(req.out_path, coeffs)
    return schemas.ExtractMfccResponse(out_path=req.out_path, n_frames=coeffs.shape[0],
                                       n_coeffs=coeffs.shape[1], sample_rate_hz=rate)


def _train_once(data_dir, variant, bigru_layers, scale, train_cfg: TrainConfig, prepared=None):
    prepared = prepared or prepare_dataset(data_dir)
    lengths = {s.labels.size for s in prepared.train + prepared.val}
    if len(lengths) != 1:
        raise ConfigError(f"sequences have mixed step counts {sorted(lengths)}; batches need one T")
    seq_len = lengths.pop()
    model_cfg = config_by_scale(scale, variant, bigru_layers, seq_len=seq_len)
    model = AsdModel(model_cfg, seed=train_cfg.seed)
    result = train(model, prepared, train_cfg)
    return model, result, prepared


@app.post("/train", response_model=schemas.TrainResponse)
def train_endpoint(req: schemas.TrainRequest):
    cfg = TrainConfig(lr=req.lr, momentum=req.momentum, batch_size=req.batch_size,
                      max_epochs=req.max_epochs, patience=req.patience, seed=req.seed)
    model, result, _ = _train_once(req.data_dir, req.variant, req.bigru_layers, req.scale, cfg)
    data_io.save_checkpoint(model, req.out_ckpt)
    return schemas.TrainResponse(
        ckpt_path=req.out_ckpt, variant=req.variant, bigru_layers=req.bigru_layers,
        scale=req.scale, seq_len=model.config.seq_len,
        best_val_auc_av=result.best_val_auc, best_epoch=result.best_epoch,
        epochs_run=result.epochs_run, stopped_early=result.stopped_early,
        history=[schemas.EpochRow(**row) for row in result.history])


def _stats_from_model(model: AsdModel):
    video = FeatureStats(mean=float(model.buffers["norm.video_mean"][0]),
                         var=float(model.buffers["norm.video_var"][0]))
    audio = FeatureStats(mean=float(model.buffers["norm.audio_mean"][0]),
                         var=float(model.buffers["norm.audio_var"][0]))
    return video, audio


def _eval_report(model, data_dir, noise, seed, split) -> EvalReport:
    video_stats, audio_stats = _stats_from_model(model)
    prepared = prepare_dataset(data_dir, noise=noise, noise_seed=seed,
                               video_stats=video_stats, audio_stats=audio_stats)
    return evaluate(model, prepared.split(split), video_stats,
                    noise_condition="noisy" if noise else "clean")


@app.post("/eval", response_model=schemas.EvalResponse)
def eval_endpoint(req: schemas.EvalRequest):
    model = data_io.load_checkpoint(req.ckpt)
    report = _eval_report(model, req.data_dir, req.noise, req.seed, req.split)
    suffix = "noisy" if req.noise else "clean"
    report_path = req.report_path or f"{req.ckpt}.eval-{req.split}-{suffix}.txt"
    data_io.write_kv(report_path, report.to_mapping())
    return schemas.EvalResponse(report_path=report_path, **report.to_mapping())


@app.post("/bench", response_model=schemas.BenchResponse)
def bench_endpoint(req: schemas.BenchRequest):
    if req.ckpt:
        model = data_io.load_checkpoint(req.ckpt)
        variant = model.config.variant
        layers = model.config.stream_bigru_layers
        scale = model.config.scale
    else:
        model = AsdModel(config_by_scale(req.scale, req.variant, req.bigru_layers), seed=req.seed)
        variant, layers, scale = req.variant, req.bigru_layers, req.scale
    stats = benchmark_inference(model, reps=req.reps, warmup=req.warmup, seed=req.seed,
                                include_dsp=req.include_dsp)
    return schemas.BenchResponse(
        variant=variant, bigru_layers=layers, scale=scale,
        latency=schemas.LatencyModel(**stats.__dict__),
        reference_gpu_ms=REFERENCE_GPU_MS.get((variant, layers)))


ABLATION_GRID = [("m1", 2), ("m1", 1), ("m2", 2), ("m2", 1), ("m3", 2), ("m3", 1)]


def format_ablation_table(rows) -> str:
    header = f"{'Model':<6} {'Audio stream':<12} {'Visual stream':<13} {'BiGRU':>5} " \
             f"{'Inf. time':>10} {'Video AUC':>10} {'Audio AUC':>10} {'AV AUC':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.model:<6} {r.audio_stream:<12} {r.visual_stream:<13} {r.bigru_layers:>5d} "
                     f"{r.inf_time_ms:>8.2f}ms {r.video_auc:>10.4f} {r.audio_auc:>10.4f} {r.av_auc:>8.4f}")
    return "\n".join(lines) + "\n"


@app.post("/ablate", response_model=schemas.AblateResponse)
def ablate_endpoint(req: schemas.AblateRequest):
    os.makedirs(req.out_dir, exist_ok=True)
    prepared = prepare_dataset(req.data_dir)
    rows = []
    for variant, layers in ABLATION_GRID:
        cfg = TrainConfig(lr=req.lr, momentum=req.momentum, batch_size=req.batch_size,
                          max_epochs=req.max_epochs, patience=req.patience, seed=req.seed)
        model, _result, _ = _train_once(req.data_dir, variant, layers, req.scale, cfg,
                                        prepared=prepared)
        ckpt = os.path.join(req.out_dir, f"{variant}-bigru{layers}.avck")
        data_io.save_checkpoint(model, ckpt)
        report = evaluate(model, prepared.val, prepared.video_stats)
        latency = benchmark_inference(model, reps=req.reps, warmup=req.warmup, seed=req.seed)
        rows.append(schemas.AblateRow(
            model=variant, audio_stream=AUDIO_STREAM_NAME[variant], visual_stream="VGG-M",
            bigru_layers=layers, inf_time_ms=latency.median_ms,
            video_auc=report.auc_v, audio_auc=report.auc_a, av_auc=report.auc_av))
    table_path = os.path.join(req.out_dir, "ablation.txt")
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(format_ablation_table(rows))
    return schemas.AblateResponse(rows=rows, table_path=table_path)
