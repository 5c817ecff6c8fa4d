"""Command-line client for the avasd service.

The CLI is a thin HTTP client: by default it talks to an in-process copy
of the FastAPI app over an ASGI transport (no server needed); pass
--server URL to target a running `avasd serve` instance instead.

Flag > config file > built-in default. Exit codes: 0 success, 1 usage
error, 2 data/format error, 3 numeric failure.
"""

import argparse
import os
import sys

PAPER_DEFAULTS = {"lr": 0.01, "momentum": 0.9, "patience": 5, "batch": 16}


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _opt(flag, payload_key, type_, default=None, required=False, help_=""):
    return {"flag": flag, "key": payload_key, "type": type_, "default": default,
            "required": required, "help": help_}


_BOOL = "bool"

SUBCOMMANDS = {
    "gen-synth": {
        "path": "/gen-synth",
        "help": "generate a synthetic audiovisual dataset",
        "options": [
            _opt("--out", "out_dir", str, required=True, help_="output dataset directory"),
            _opt("--n", "n_sequences", int, required=True, help_="number of sequences"),
            _opt("--seq-len", "seq_len", int, 10, help_="steps per sequence"),
            _opt("--confusers", "confuser_fraction", float, 0.25,
                 help_="fraction of steps that are single-modality confusers (max 0.5)"),
            _opt("--snr", "snr_db", float, 20.0, help_="tone-to-noise ratio inside speech, dB"),
            _opt("--seed", "seed", int, 0),
        ],
    },
    "extract-mfcc": {
        "path": "/extract-mfcc",
        "help": "extract a cepstral matrix from a 16 kHz PCM16 mono WAV",
        "options": [
            _opt("--wav", "wav_path", str, required=True),
            _opt("--out", "out_path", str, required=True, help_="output tensor blob path"),
            _opt("--n-mels", "n_mels", int, 40),
            _opt("--n-fft", "n_fft", int, 512),
        ],
    },
    "train": {
        "path": "/train",
        "help": "train one variant on a generated dataset",
        "options": [
            _opt("--data", "data_dir", str, required=True),
            _opt("--variant", "variant", str, "m1", help_="m1|m2|m3"),
            _opt("--bigru-layers", "bigru_layers", int, 2, help_="stream BiGRU depth, 1 or 2"),
            _opt("--out", "out_ckpt", str, required=True, help_="checkpoint output path"),
            _opt("--lr", "lr", float, PAPER_DEFAULTS["lr"]),
            _opt("--momentum", "momentum", float, PAPER_DEFAULTS["momentum"]),
            _opt("--patience", "patience", int, PAPER_DEFAULTS["patience"]),
            _opt("--batch", "batch_size", int, PAPER_DEFAULTS["batch"]),
            _opt("--max-epochs", "max_epochs", int, 30),
            _opt("--scale", "scale", str, "desk", help_="paper|desk|tiny layer tables"),
            _opt("--seed", "seed", int, 0),
        ],
    },
    "eval": {
        "path": "/eval",
        "help": "evaluate a checkpoint; writes and prints an EvalReport",
        "options": [
            _opt("--ckpt", "ckpt", str, required=True),
            _opt("--data", "data_dir", str, required=True),
            _opt("--noise", "noise", _BOOL, False, help_="inject RMS-matched Gaussian noise"),
            _opt("--split", "split", str, "val"),
            _opt("--report", "report_path", str, None, help_="report file (default <ckpt>.eval-*.txt)"),
            _opt("--seed", "seed", int, 0),
        ],
    },
    "bench": {
        "path": "/bench",
        "help": "single-threaded f32 inference latency benchmark",
        "options": [
            _opt("--ckpt", "ckpt", str, None, help_="benchmark this checkpoint"),
            _opt("--variant", "variant", str, "m1", help_="used when no --ckpt is given"),
            _opt("--bigru-layers", "bigru_layers", int, 2),
            _opt("--scale", "scale", str, "paper"),
            _opt("--reps", "reps", int, 100),
            _opt("--warmup", "warmup", int, 10),
            _opt("--include-dsp", "include_dsp", _BOOL, False, help_="time MFCC extraction too"),
            _opt("--seed", "seed", int, 0),
        ],
    },
    "ablate": {
        "path": "/ablate",
        "help": "run the 3 variants x {1,2} BiGRU grid and emit a results table",
        "options": [
            _opt("--data", "data_dir", str, required=True),
            _opt("--out", "out_dir", str, required=True),
            _opt("--scale", "scale", str, "desk"),
            _opt("--lr", "lr", float, PAPER_DEFAULTS["lr"]),
            _opt("--momentum", "momentum", float, PAPER_DEFAULTS["momentum"]),
            _opt("--patience", "patience", int, PAPER_DEFAULTS["patience"]),
            _opt("--batch", "batch_size", int, PAPER_DEFAULTS["batch"]),
            _opt("--max-epochs", "max_epochs", int, 4),
            _opt("--reps", "reps", int, 30),
            _opt("--warmup", "warmup", int, 5),
            _opt("--seed", "seed", int, 0),
        ],
    },
}


def build_parser() -> _Parser:
    parser = _Parser(prog="avasd", description="audiovisual active speaker detection engine")
    parser.add_argument("--server", default=None, help="remote service URL (default: in-process)")
    parser.add_argument("--config", default=None, help="key: value file overriding defaults")
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    for name, spec in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=spec["help"], prog=f"avasd {name}")
        for opt in spec["options"]:
            if opt["type"] is _BOOL:
                sp.add_argument(opt["flag"], dest=opt["key"], action="store_const", const=True,
                                default=None, help=opt["help"])
            else:
                sp.add_argument(opt["flag"], dest=opt["key"], type=opt["type"], default=None,
                                help=opt["help"])
    serve = sub.add_parser("serve", help="run the HTTP service", prog="avasd serve")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8301)
    return parser


def _coerce(raw: str, type_):
    if type_ is _BOOL:
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return type_(raw)


class UsageError(Exception):
    pass


def resolve_payload(name, args, file_values) -> dict:
    """Merge CLI flags over config-file values over built-in defaults."""
    payload = {}
    missing = []
    for opt in SUBCOMMANDS[name]["options"]:
        key = opt["key"]
        flag_name = opt["flag"].lstrip("-")
        cli_value = getattr(args, key)
        if cli_value is not None:
            payload[key] = cli_value
        elif flag_name in file_values:
            payload[key] = _coerce(file_values[flag_name], opt["type"])
        elif opt["required"]:
            missing.append(opt["flag"])
        else:
            payload[key] = opt["default"]
    if missing:
        raise UsageError(f"missing required options: {', '.join(missing)}")
    return payload


def _print_resolved(name, payload):
    print("resolved-config:")
    print(f"  subcommand: {name}")
    for key in sorted(payload):
        print(f"  {key}: {payload[key]}")


def _apply_thread_cap():
    """AVASD_THREADS caps BLAS worker threads; must run before numpy loads."""
    cap = os.environ.get("AVASD_THREADS")
    if cap:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def _post(server, path, payload):
    import httpx

    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            return client.post(path, json=payload)

    import asyncio

    from .service import app

    async def go():
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(transport=transport, base_url="http://avasd.local",
                                     timeout=None) as client:
            return await client.post(path, json=payload)

    return asyncio.run(go())


def _exit_code_for(response) -> int:
    try:
        kind = response.json().get("kind", "")
    except ValueError:
        kind = ""
    if kind == "usage":
        return 1
    if kind == "data":
        return 2
    if kind == "numeric":
        return 3
    return {400: 1, 422: 2}.get(response.status_code, 3)


def _print_error(response):
    try:
        body = response.json()
        message = body.get("message") or body.get("detail") or response.text
    except ValueError:
        message = response.text
    sys.stderr.write(f"avasd: error ({response.status_code}): {message}\n")


def _render(name, body):
    if name == "gen-synth":
        print(f"dataset: {body['out_dir']}")
        print(f"manifest: {body['manifest_path']}")
        print(f"sequences: {body['n_train']} train + {body['n_val']} val")
        print(f"label balance: {body['label_balance']:.4f}")
    elif name == "extract-mfcc":
        print(f"wrote {body['out_path']}: {body['n_frames']} frames x {body['n_coeffs']} coefficients")
    elif name == "train":
        for row in body["history"]:
            print(f"epoch {row['epoch']}: loss {row['train_loss']:.4f} "
                  f"val auc_av {row['val_auc_av']:.4f} (a {row['val_auc_a']:.4f}, v {row['val_auc_v']:.4f})")
        tail = " (early stop)" if body["stopped_early"] else ""
        print(f"best val auc_av {body['best_val_auc_av']:.4f} at epoch {body['best_epoch']}{tail}")
        print(f"checkpoint: {body['ckpt_path']}")
    elif name == "eval":
        from .data_io import format_kv

        mapping = {k: v for k, v in body.items() if k != "report_path"}
        sys.stdout.write(format_kv(mapping))
        print(f"report written to {body['report_path']}")
    elif name == "bench":
        lat = body["latency"]
        print(f"variant {body['variant']} bigru_layers {body['bigru_layers']} scale {body['scale']}")
        print(f"latency: mean {lat['mean_ms']:.2f} ms, median {lat['median_ms']:.2f} ms, "
              f"p95 {lat['p95_ms']:.2f} ms  ({lat['reps']} reps, {lat['warmup']} warmup)")
        if body.get("reference_gpu_ms") is not None:
            print(f"reference (RTX 2080 Ti, same architecture): {body['reference_gpu_ms']:.2f} ms "
                  "-- reported for comparison, not asserted")
    elif name == "ablate":
        from .schemas import AblateRow
        from .service import format_ablation_table

        rows = [AblateRow(**r) for r in body["rows"]]
        sys.stdout.write(format_ablation_table(rows))
        print(f"table written to {body['table_path']}")


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    if not args.subcommand:
        parser.print_help()
        return 1

    if args.subcommand == "serve":
        print("resolved-config:")
        print(f"  subcommand: serve\n  host: {args.host}\n  port: {args.port}")
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    file_values = {}
    if args.config:
        from .data_io import parse_kv
        from .errors import DataFormatError

        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                file_values = parse_kv(fh.read())
        except FileNotFoundError:
            sys.stderr.write(f"avasd: error: config file {args.config} not found\n")
            return 1
        except DataFormatError as exc:
            sys.stderr.write(f"avasd: error: bad config file: {exc}\n")
            return 1

    try:
        payload = resolve_payload(args.subcommand, args, file_values)
    except (UsageError, ValueError) as exc:
        sys.stderr.write(f"avasd: error: {exc}\n")
        return 1

    _print_resolved(args.subcommand, payload)

    import httpx

    try:
        response = _post(args.server, SUBCOMMANDS[args.subcommand]["path"], payload)
    except httpx.HTTPError as exc:
        sys.stderr.write(f"avasd: error: cannot reach service: {exc}\n")
        return 1
    if response.status_code != 200:
        _print_error(response)
        return _exit_code_for(response)
    _render(args.subcommand, response.json())
    return 0


if __name__ == "__main__":
    sys.exit(main())
