"""``tec`` command-line entry point.

Exit codes: 0 success, 1 domain error, 2 usage error. Every command writes a
``run.meta`` JSON file echoing its resolved arguments next to its primary
output.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__, phonemes
from .dsp import SpectralConfig, Waveform, griffin_lim, mel_spectrogram, read_wav, write_wav

log = logging.getLogger("tec")


class DomainError(Exception):
    """Bad input data or state; reported with exit code 1."""


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DomainError(f"cannot read config {path}: {exc}") from exc


def write_run_meta(directory, command: str, resolved: Dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "run.meta"
    doc = {"command": command, "version": __version__, "config": resolved}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def pmap(fn, items, threads: int) -> List:
    """Ordered map, serial when ``threads`` is 1."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- model configs ------------------------------------------------------------

def resolve_model_config(spec, mode):
    """``spec`` is "toy", "micro", "full" or a config dictionary."""
    from .model.config import ModelConfig, micro_config, toy_config

    if spec is None or spec == "toy":
        return toy_config(mode)
    if spec == "micro":
        return micro_config(mode)
    if spec == "full":
        return ModelConfig(mode=mode).validate()
    if isinstance(spec, dict):
        return ModelConfig.from_dict({**spec, "mode": mode})
    raise DomainError(f"unknown model config {spec!r}")


# -- commands -------------------------------------------------------------------

def cmd_mix(args) -> int:
    from .corpus import load_manifest
    from .synth import DEFAULT_ROOMS, build_dataset, load_rooms

    clean = load_manifest(args.clean)
    playback = load_manifest(args.playback)
    if args.split:
        clean = [r for r in clean if r.get("split") == args.split]
        playback = [r for r in playback if r.get("split") == args.split]
    rooms = _read_json(args.rooms) if args.rooms else DEFAULT_ROOMS
    rirs = load_rooms(rooms, args.seed)
    records, failures = build_dataset(clean, playback, rirs, args.seed, args.out, args.snr_db, args.threads)
    write_run_meta(args.out, "mix", {**vars(args), "rooms_resolved": rooms, "records": len(records),
                                     "failures": failures})
    print(json.dumps({"records": len(records), "failures": len(failures),
                      "manifest": str(Path(args.out) / "manifest.jsonl")}))
    return 1 if failures and not records else 0


def cmd_nlms(args) -> int:
    from .nlms import NlmsConfig, nlms_cancel
    from .synth import pad_to_equal_length

    mix = read_wav(args.mixture)
    ref = read_wav(args.playback)
    if len(ref) > len(mix):
        raise DomainError("playback is longer than the mixture")
    mix, ref = pad_to_equal_length(mix, ref)
    cfg = NlmsConfig(args.taps, args.mu, args.eps)
    out = nlms_cancel(mix, ref, cfg)
    write_wav(args.out, out)
    write_run_meta(Path(args.out).parent, "nlms", vars(args))
    return 0


def cmd_train(args) -> int:
    from .model.config import Mode
    from .model.network import TecModel
    from .model.training import TrainConfig, Trainer, load_examples, save_model

    doc = _read_json(args.config) if args.config else {}
    mode = Mode.parse(args.mode)
    cfg = resolve_model_config(doc.get("model", "toy"), mode)
    train_doc = dict(doc.get("train", {}))
    if args.steps is not None:
        train_doc["steps"] = args.steps
    train_doc["seed"] = args.seed
    tcfg = TrainConfig.from_dict(train_doc)
    examples = load_examples(args.manifest, mode, cfg, args.split)
    if not examples:
        raise DomainError("manifest holds no usable records")
    model = TecModel(cfg, seed=args.seed)
    history = Trainer(model, tcfg).fit(examples)
    save_model(model, args.ckpt_out, {"train": vars(tcfg)})
    summary = {"steps": len(history), "first_loss": history[0].as_dict() if history else None,
               "final_loss": history[-1].as_dict() if history else None}
    write_run_meta(Path(args.ckpt_out).parent, "train",
                   {**vars(args), "model": cfg.to_dict(), "train": vars(tcfg), **summary})
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_enhance(args) -> int:
    from .grad import checkpoint
    from .model.config import Mode
    from .model.training import load_model, spectral_config_for

    model = load_model(args.ckpt)
    spec = spectral_config_for(model.cfg)
    x = mel_spectrogram(read_wav(args.mixture), spec).values
    side = None
    if model.mode is Mode.TEC:
        if not args.text:
            raise DomainError("TEC checkpoint needs --text")
        tokens = phonemes.parse_text(args.text)
        if not tokens:
            raise DomainError("--text yields no phonemes")
        side = np.array(phonemes.encode(tokens), dtype=np.int64)
    elif model.mode is Mode.AEC_SEQ2SEQ:
        if not args.playback:
            raise DomainError("AEC_SEQ2SEQ checkpoint needs --playback")
        side = mel_spectrogram(read_wav(args.playback), spec).values
    result = model.infer(x, side, args.max_steps)
    checkpoint.save_mel(args.out_mel, result.mel, {"n_mels": spec.n_mels, "truncated": result.truncated})
    if args.out_wav:
        write_wav(args.out_wav, griffin_lim(result.mel, spec))
    write_run_meta(Path(args.out_mel).parent, "enhance", vars(args))
    print(json.dumps({"frames": int(result.mel.shape[0]), "truncated": result.truncated}))
    return 0


def read_trn(path) -> Dict[str, str]:
    """``words ... (utt_id)`` lines to {id: words}."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if not line.endswith(")") or "(" not in line:
            raise DomainError(f"malformed hypothesis line: {line!r}")
        text, _, uid = line[:-1].rpartition("(")
        out[uid.strip()] = text.strip()
    return out


def evaluate_manifest(manifest, enhanced_dir, hyp: Optional[Dict[str, str]] = None, threads: int = 1) -> dict:
    from .grad import checkpoint
    from .metrics import mcd, wer
    from .synth import load_records

    records = load_records(manifest)
    enhanced_dir = Path(enhanced_dir)

    def one(rec):
        row = {"id": rec.id}
        mel_path, wav_path = enhanced_dir / f"{rec.id}.mel", enhanced_dir / f"{rec.id}.wav"
        if mel_path.exists():
            enhanced, _ = checkpoint.load_mel(mel_path)
            spec = SpectralConfig(n_mels=enhanced.shape[1])
        elif wav_path.exists():
            enhanced = read_wav(wav_path)
            spec = SpectralConfig(sample_rate_hz=enhanced.sample_rate_hz)
            enhanced = mel_spectrogram(enhanced, spec).values
        else:
            row["error"] = "missing enhanced output"
            return row
        target = mel_spectrogram(read_wav(rec.clean_path), spec).values
        rep = mcd(enhanced, target)
        row.update(mcd_total_db=rep.total_db, mcd_per_frame_db=rep.per_frame_db,
                   aligned_frames=rep.aligned_frames)
        if hyp is not None and rec.id in hyp:
            row["wer"] = wer(rec.clean_text or rec.text, hyp[rec.id])
        return row

    rows = pmap(one, records, threads)
    scored = [r for r in rows if "error" not in r]
    agg = {"records": len(rows), "scored": len(scored)}
    if scored:
        agg["mean_mcd_per_frame_db"] = float(np.mean([r["mcd_per_frame_db"] for r in scored]))
        agg["mean_mcd_total_db"] = float(np.mean([r["mcd_total_db"] for r in scored]))
    with_wer = [r["wer"] for r in scored if "wer" in r]
    if with_wer:
        agg["mean_wer"] = float(np.mean(with_wer))
    return {"records": rows, "aggregate": agg}


def cmd_eval(args) -> int:
    hyp = read_trn(args.hyp) if args.hyp else None
    report = evaluate_manifest(args.manifest, args.enhanced_dir, hyp, args.threads)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_run_meta(Path(args.report).parent, "eval", vars(args))
    print(json.dumps(report["aggregate"], sort_keys=True))
    return 0 if report["aggregate"]["scored"] else 1


def cmd_flops(args) -> int:
    from .metrics import flops_estimate
    from .model.config import Mode

    doc = _read_json(args.config) if args.config else {}
    cfg = resolve_model_config(doc.get("model", args.model), Mode.parse(args.mode))
    rep = flops_estimate(cfg, args.tx, args.ty, args.tz)
    write_run_meta(args.out_dir, "flops", vars(args))
    print(json.dumps(rep.as_dict(), sort_keys=True))
    return 0


def cmd_demo(args) -> int:
    from .demo import demo_pipeline

    report = demo_pipeline(args.seed, steps=args.steps, threads=args.threads, work_dir=args.work)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        meta_dir = Path(args.out).parent
    else:
        sys.stdout.write(text)
        meta_dir = Path(args.work) if args.work else Path(".")
    write_run_meta(meta_dir, "demo", vars(args))
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="record-level workers; 1 is the serial path")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="tec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tec {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mix", parents=[common], help="synthesize echoic mixtures")
    s.add_argument("--clean", required=True)
    s.add_argument("--playback", required=True)
    s.add_argument("--rooms", help="rooms JSON; default is three built-in rooms")
    s.add_argument("--out", required=True)
    s.add_argument("--snr-db", type=float, default=0.0)
    s.add_argument("--split", help="use only manifest rows with this split")
    s.set_defaults(fn=cmd_mix)

    s = sub.add_parser("nlms", parents=[common], help="NLMS echo cancellation")
    s.add_argument("--mixture", required=True)
    s.add_argument("--playback", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--taps", type=int, default=1024)
    s.add_argument("--mu", type=float, default=0.5)
    s.add_argument("--eps", type=float, default=1e-6)
    s.set_defaults(fn=cmd_nlms)

    s = sub.add_parser("train", parents=[common], help="train a model with teacher forcing")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", default="tec", choices=["tec", "vanilla", "aec"])
    s.add_argument("--config", help='JSON with "model" ("toy", "full" or a dict) and "train" keys')
    s.add_argument("--steps", type=int)
    s.add_argument("--split", help="train only on records with this split")
    s.add_argument("--ckpt-out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("enhance", parents=[common], help="run inference on one mixture")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mixture", required=True)
    s.add_argument("--text", help="phone string or plain transcript of the playback")
    s.add_argument("--playback", help="playback WAV (AEC_SEQ2SEQ checkpoints)")
    s.add_argument("--out-mel", required=True)
    s.add_argument("--out-wav")
    s.add_argument("--max-steps", type=int)
    s.set_defaults(fn=cmd_enhance)

    s = sub.add_parser("eval", parents=[common], help="score enhanced outputs")
    s.add_argument("--manifest", required=True)
    s.add_argument("--enhanced-dir", required=True)
    s.add_argument("--hyp", help="hypothesis transcripts, one 'words (id)' per line")
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("flops", parents=[common], help="operation-count estimate")
    s.add_argument("--mode", default="tec", choices=["tec", "vanilla", "aec"])
    s.add_argument("--model", default="full", help="toy, micro or full")
    s.add_argument("--config")
    s.add_argument("--tx", type=int, required=True)
    s.add_argument("--ty", type=int, required=True)
    s.add_argument("--tz", type=int, required=True)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("demo", parents=[common], help="interrupted-query scenario at toy scale")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--work", help="keep intermediate files here")
    s.add_argument("--out", help="report path; stdout when omitted")
    s.set_defaults(fn=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    fn = args.fn
    del args.fn
    try:
        return fn(args) or 0
    except (DomainError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
