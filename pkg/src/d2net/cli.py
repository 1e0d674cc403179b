"""Command line: train, separate, evaluate, bench and ablate.

Settings are layered: preset defaults, then an optional ``key=value``
config file, then command-line flags. Failures print one line of the form
``d2net: error=<Kind> message=<text>`` to stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from .data import TrainConfig, load_corpus, load_wav, save_wav, synth_corpus
from .dsp import StftConfig
from .eval import aggregate, score_track, write_report
from .model import BLOCK_VARIANTS, D2Net, ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import check_rate, evaluate_tracks, mixture_baseline, separate
from .train import train

log = logging.getLogger("d2net")


@dataclass
class RunConfig:
    preset: str = "desk"
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    stft: StftConfig = field(default_factory=StftConfig.desk)
    corpus: str | None = None
    synth: bool = False
    synth_tracks: int = 20
    synth_seconds: float = 15.0
    synth_seed: int = 0
    out: str = "runs/desk"

    @classmethod
    def preset_defaults(cls, name: str) -> "RunConfig":
        if name == "desk":
            return cls()
        if name == "paper":
            return cls(preset="paper", model=ModelConfig.paper(),
                       train=TrainConfig(clip_seconds=5, epochs=500, learning_rate=1e-4),
                       stft=StftConfig.paper(), out="runs/paper")
        raise ValueError(f"unknown preset {name!r}")


def _ints(text: str) -> list[int]:
    return [int(v) for v in str(text).split(",") if v.strip()]


def read_config_file(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    items = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        items[key.strip().replace("-", "_")] = value.strip()
    return items


def apply_overrides(cfg: RunConfig, items: dict) -> RunConfig:
    """Apply flat overrides (from a file or flags) to ``cfg``."""
    m = dataclasses.asdict(cfg.model)
    t = dataclasses.asdict(cfg.train)
    s = dataclasses.asdict(cfg.stft)
    top = {}
    blocks = m["num_blocks"]
    gru = None
    for key, value in items.items():
        if value is None:
            continue
        if key == "blocks":
            blocks = int(value)
        elif key == "gru_dilation":
            gru = ("one", int(value))
        elif key == "gru_dilations":
            gru = ("list", _ints(value))
        elif key == "conv_dilations":
            m["conv_dilations"] = _ints(value)
        elif key in ("channels", "groups", "kernel"):
            m[key] = int(value)
        elif key == "block_variant":
            m[key] = str(value)
        elif key in ("clip_seconds",):
            t[key] = float(value)
            t["batch_size"] = None
        elif key in ("batch_size", "epochs", "workers"):
            t[key] = int(value)
        elif key in ("lr", "learning_rate"):
            t["learning_rate"] = float(value)
        elif key == "grad_clip":
            t["grad_clip"] = None if str(value).lower() in ("none", "0", "off") else float(value)
        elif key == "seed":
            t["seed"] = int(value)
        elif key in ("window_size", "hop", "sample_rate"):
            s[key] = int(value)
        elif key in ("synth_tracks", "synth_seed"):
            top[key] = int(value)
        elif key == "synth_seconds":
            top[key] = float(value)
        elif key == "synth":
            top[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
        elif key in ("corpus", "out"):
            top[key] = str(value)
        elif key == "preset":
            continue
        else:
            raise ValueError(f"unknown setting {key!r}")

    if blocks != m["num_blocks"]:
        m["conv_dilations"] = [2 ** (i + 1) for i in range(blocks)]
        m["gru_dilations"] = (m["gru_dilations"][:1] or [2]) * blocks
        m["num_blocks"] = blocks
    if gru is not None:
        m["gru_dilations"] = [gru[1]] * m["num_blocks"] if gru[0] == "one" else gru[1]
        if gru[0] == "list":
            m["num_blocks"] = len(gru[1])
            if len(m["conv_dilations"]) != len(gru[1]):
                m["conv_dilations"] = [2 ** (i + 1) for i in range(len(gru[1]))]
    stft = StftConfig(**s)
    m["freq_bins"] = stft.freq_bins
    return dataclasses.replace(cfg, model=ModelConfig(**m), train=TrainConfig(**t), stft=stft, **top)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.preset_defaults(getattr(args, "preset", None) or "desk")
    if getattr(args, "config", None):
        cfg = apply_overrides(cfg, read_config_file(args.config))
    flags = {k: getattr(args, k, None) for k in (
        "blocks", "gru_dilation", "gru_dilations", "block_variant", "clip_seconds", "epochs",
        "seed", "workers", "corpus", "out", "lr", "grad_clip", "synth_tracks", "synth_seconds")}
    if getattr(args, "synth", False):
        flags["synth"] = True
    return apply_overrides(cfg, flags)


def load_tracks(cfg: RunConfig, seed_offset: int = 0):
    if cfg.corpus:
        return load_corpus(cfg.corpus, cfg.model.sources)
    if cfg.synth:
        return synth_corpus(cfg.synth_seed + seed_offset, cfg.synth_tracks, cfg.synth_seconds,
                            cfg.stft.sample_rate)
    raise ValueError("no corpus: pass --corpus PATH or --synth")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, construct_only: bool = False) -> dict:
    """Train and checkpoint; the full-size preset only constructs the network."""
    if cfg.preset == "paper" or construct_only:
        model = D2Net(cfg.model, rng=cfg.train.seed)
        for unit, layer, cin, cout in cfg.model.layer_table():
            print(f"{unit}\t{layer}\t{cin}\t{cout}")
        count = model.parameter_count()
        print(f"parameters\t{count}")
        return {"parameters": count}
    tracks = load_tracks(cfg)
    for t in tracks:
        check_rate(t.sample_rate, cfg.stft)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = D2Net(cfg.model, rng=cfg.train.seed, workers=cfg.train.workers)
    result = train(model, tracks, cfg.train, cfg.stft, log_path=out / "train_log.tsv",
                   checkpoint_path=out / "model.ckpt")
    summary = {"checkpoint": str(out / "model.ckpt"), "initial_loss": result.initial_loss,
               "final_loss": result.final_loss, "best_epoch": result.best_epoch,
               "best_val_loss": result.best_val_loss, "seconds": round(result.seconds, 2)}
    print(json.dumps(summary))
    return summary


def cmd_separate(checkpoint, wav_path, out_dir, workers: int = 1) -> dict[str, Path]:
    ckpt = load_checkpoint(checkpoint)
    model = D2Net.from_checkpoint(ckpt, workers=workers)
    wave, rate = load_wav(wav_path)
    check_rate(rate, ckpt.stft)
    estimates = separate(model, wave, ckpt.stft)
    written = {}
    for name, est in estimates.items():
        written[name] = save_wav(Path(out_dir) / f"{name}.wav", est, rate)
    return written


def cmd_evaluate(checkpoint, cfg: RunConfig, bss: bool = False, filter_len: int = 512) -> dict:
    ckpt = load_checkpoint(checkpoint)
    model = D2Net.from_checkpoint(ckpt, workers=cfg.train.workers)
    tracks = load_tracks(dataclasses.replace(cfg, stft=ckpt.stft), seed_offset=1)
    scores = evaluate_tracks(model, tracks, ckpt.stft, bss=bss, filter_len=filter_len)
    base = aggregate(mixture_baseline(tracks))["median"]
    summary = write_report(cfg.out, scores, extra={"mixture_baseline": base})
    print(json.dumps(summary["median"], sort_keys=True))
    return summary


def run_bench(model_config: ModelConfig, dilations: Sequence[int], workers: Sequence[int],
              lengths: Sequence[int], runs: int = 10, batch: int = 1, seed: int = 0) -> list[dict]:
    """Median/stdev forward wall time (ms) per (dilation, workers, T) cell."""
    rows = []
    rng = np.random.default_rng(seed)
    for T in lengths:
        x = nm.Tensor(rng.random((batch, model_config.freq_bins, T)).astype(np.float32))
        for k in dilations:
            cfg = dataclasses.replace(model_config, gru_dilations=[k] * model_config.num_blocks)
            model = D2Net(cfg, rng=seed)
            for w in workers:
                model.workers = w
                with nm.no_grad():
                    model(x)                                  # warm-up
                    times = []
                    for _ in range(runs):
                        t0 = time.perf_counter()
                        model(x)
                        times.append(1000 * (time.perf_counter() - t0))
                rows.append({"dilation": k, "workers": w, "T": T, "median_ms": statistics.median(times),
                             "stdev_ms": statistics.stdev(times) if runs > 1 else 0.0, "runs": runs})
    return rows


def cmd_bench(cfg: RunConfig, dilations, workers, lengths, runs: int = 10) -> list[dict]:
    rows = run_bench(cfg.model, dilations, workers, lengths, runs)
    print("dilation\tworkers\tT\tmedian_ms\tstdev_ms")
    for r in rows:
        print(f"{r['dilation']}\t{r['workers']}\t{r['T']}\t{r['median_ms']:.2f}\t{r['stdev_ms']:.2f}")
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.tsv", "w") as fh:
            fh.write("dilation\tworkers\tT\tmedian_ms\tstdev_ms\truns\n")
            for r in rows:
                fh.write(f"{r['dilation']}\t{r['workers']}\t{r['T']}\t{r['median_ms']!r}\t"
                         f"{r['stdev_ms']!r}\t{r['runs']}\n")
    return rows


def run_ablation(model: D2Net, tracks, stft: StftConfig, keeps: Sequence[int]) -> list[dict]:
    """SDR and output RMS per (keep, source), reusing the trained weights."""
    n = model.config.num_blocks
    rows = []
    for keep in keeps:
        if not 0 <= keep <= n:
            raise ValueError(f"keep must be in [0, {n}], got {keep}")
        scores = []
        rms = {s: [] for s in model.config.sources}
        for track in tracks:
            est = separate(model, track.mixture, stft, keep_blocks=keep)
            for s, wave in est.items():
                if not np.all(np.isfinite(wave)):
                    raise nm.NumericError(f"non-finite audio with {keep} blocks")
                rms[s].append(float(np.sqrt(np.mean(wave ** 2))))
            scores.append(score_track(track.name, track.sources, est, track.sample_rate))
        med = aggregate(scores)["median"]
        for s in model.config.sources:
            rows.append({"keep": keep, "source": s, "SDR": med[s]["SDR"], "rms": float(np.mean(rms[s]))})
    return rows


def cmd_ablate(checkpoint, cfg: RunConfig, keeps: Sequence[int] | None = None) -> list[dict]:
    ckpt = load_checkpoint(checkpoint)
    model = D2Net.from_checkpoint(ckpt, workers=cfg.train.workers)
    keeps = list(range(model.config.num_blocks + 1)) if keeps is None else list(keeps)
    tracks = load_tracks(dataclasses.replace(cfg, stft=ckpt.stft), seed_offset=1)
    rows = run_ablation(model, tracks, ckpt.stft, keeps)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.tsv", "w") as fh:
        fh.write("keep\tsource\tSDR\trms\n")
        for r in rows:
            fh.write(f"{r['keep']}\t{r['source']}\t{r['SDR']!r}\t{r['rms']!r}\n")
    print("keep\tsource\tSDR\trms")
    for r in rows:
        print(f"{r['keep']}\t{r['source']}\t{r['SDR']:.3f}\t{r['rms']:.5f}")
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--preset", choices=("desk", "paper"), default="desk")
    p.add_argument("--gru-dilation", type=int)
    p.add_argument("--gru-dilations")
    p.add_argument("--blocks", type=int)
    p.add_argument("--block-variant", choices=BLOCK_VARIANTS)
    p.add_argument("--clip-seconds", type=float, choices=(5.0, 20.0))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--grad-clip", help="global norm, or 'off'")
    p.add_argument("--synth", action="store_true", help="use the synthetic corpus")
    p.add_argument("--synth-tracks", type=int)
    p.add_argument("--synth-seconds", type=float)
    p.add_argument("--corpus", help="directory of <track>/<source>.wav")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2net", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--construct-only", action="store_true", help="build the network and print its size")

    p = sub.add_parser("separate", help="separate one WAV into per-source WAVs")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("evaluate", help="score a checkpoint on a corpus")
    p.add_argument("checkpoint")
    _common(p)
    p.add_argument("--bss", action="store_true", help="also compute SIR/SAR/ISR")
    p.add_argument("--filter-len", type=int, default=512)

    p = sub.add_parser("bench", help="time forward passes across GRU dilations and workers")
    _common(p)
    p.add_argument("--dilations", default="1,2,4")
    p.add_argument("--worker-counts", default="1,2,4")
    p.add_argument("--lengths", default="8192")
    p.add_argument("--runs", type=int, default=10)

    p = sub.add_parser("ablate", help="remove top blocks of a trained model and re-score")
    p.add_argument("checkpoint")
    _common(p)
    p.add_argument("--keep", help="comma list of block counts (default: all)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "separate":
            cmd_separate(args.checkpoint, args.input, args.out, args.workers)
            return 0
        cfg = resolve_config(args)
        if args.command == "train":
            cmd_train(cfg, construct_only=args.construct_only)
        elif args.command == "evaluate":
            cmd_evaluate(args.checkpoint, cfg, bss=args.bss, filter_len=args.filter_len)
        elif args.command == "bench":
            cmd_bench(cfg, _ints(args.dilations), _ints(args.worker_counts), _ints(args.lengths), args.runs)
        elif args.command == "ablate":
            cmd_ablate(args.checkpoint, cfg, _ints(args.keep) if args.keep else None)
    except Exception as exc:  # noqa: BLE001 - single-line report is the contract
        message = " ".join(str(exc).split())
        print(f"d2net: error={type(exc).__name__} message={message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
