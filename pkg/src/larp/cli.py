"""Command-line entry point.

Every RunConfig key is also a flag (``--key-name value``). Values resolve as
defaults < config file < ``LARP_SEED`` < flags; commands that read a
checkpoint start from the configuration stored inside it and reject flags
that change its (n, c, d, extents) header.

Exit codes: 0 success, 2 config error, 3 data/checkpoint error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis
from .config import ConfigError, RunConfig, parse_pairs
from .generator import frame_corpus, generate_class_conditional, predict_frames, tokenize_corpus
from .numerics import GradCheckError, precision, stream
from .numerics.dtio import FormatError, load_tensor, save_tensor
from .numerics.gradcheck import operator_suite
from .quantizer import QuantizerError
from .tokenizer import load_token_file, psnr, save_token_file
from .trainer import (CheckpointError, NumericError, StepMetrics, array_to_text, check_compatible,
                      full_loss_grad_check, heldout_gen_nll, init_gen_state, init_state, load_checkpoint, load_generator, lr_at,
                      read_entries, save_checkpoint, save_generator, train, train_generator)
from .videodata import DataError, export_frames, load_clips, save_clips, synth_dataset

GRAD_TOL = 1e-4


# -- configuration ------------------------------------------------------------------------------


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    g = p.add_argument_group("config keys (override the file)")
    for f in fields(RunConfig):
        g.add_argument(_flag(f.name), dest="cfg_" + f.name, default=None, metavar=f.name.upper())


def _overrides(args) -> dict[str, str]:
    return {f.name: getattr(args, "cfg_" + f.name) for f in fields(RunConfig)
            if getattr(args, "cfg_" + f.name, None) is not None}


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = cfg.updated(parse_pairs(path.read_text()))
    cfg = cfg.with_env()
    return cfg.updated(_overrides(args))


def config_from_checkpoint(args, path) -> tuple[RunConfig, dict]:
    """Stored config overlaid with the user's settings; header must still match."""
    entries = read_entries(path)
    if "meta.config" not in entries:
        raise CheckpointError(f"{path}: checkpoint is missing tensor 'meta.config'")
    cfg = resolve_config(args, RunConfig.from_text(array_to_text(entries["meta.config"])))
    check_compatible(cfg, entries)
    return cfg, entries


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    """Print the config and store the identical bytes next to the outputs."""
    text = cfg.to_text()
    sys.stdout.write(text)
    sys.stdout.flush()
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(text)


# -- data ---------------------------------------------------------------------------------------


def training_clips(cfg: RunConfig):
    if cfg.data_dir:
        clips = load_clips(cfg.data_dir, cfg.num_classes)
        want = (cfg.frames, cfg.height, cfg.width, 3)
        for i, c in enumerate(clips):
            if c.video.shape != want:
                raise DataError(f"clip {i} has extents {c.video.shape}, config expects {want}")
        return clips
    return synth_dataset(cfg.seed, cfg.num_classes, cfg.num_clips, (cfg.frames, cfg.height, cfg.width),
                         (cfg.f_t, cfg.f_h, cfg.f_w))


def probe_clips(cfg: RunConfig, count: int):
    """Probe clips: synthetic indices after the training set, or the last clips of a loaded dataset."""
    if cfg.data_dir:
        clips = training_clips(cfg)
        return clips[-count:]
    return synth_dataset(cfg.seed, cfg.num_classes, count, (cfg.frames, cfg.height, cfg.width),
                         (cfg.f_t, cfg.f_h, cfg.f_w), start=cfg.num_clips)


def _videos(clips) -> np.ndarray:
    return np.stack([c.video for c in clips])


def _input_videos(args, cfg: RunConfig, count: int) -> np.ndarray:
    if getattr(args, "input", None):
        p = Path(args.input)
        if p.is_dir() or p.suffix == ".tsv":
            return _videos(load_clips(p, cfg.num_classes))[:count]
        v = load_tensor(p)
        return v[None] if v.ndim == 4 else v
    return _videos(probe_clips(cfg, count))


def _write_rows(path: Path, header: str, rows) -> None:
    path.write_text(header + "\n" + "".join(r + "\n" for r in rows))


# -- commands -----------------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    echo_config(cfg, out)
    clips = synth_dataset(cfg.seed, cfg.num_classes, cfg.num_clips, (cfg.frames, cfg.height, cfg.width),
                          (cfg.f_t, cfg.f_h, cfg.f_w))
    manifest = save_clips(out, clips)
    print(f"wrote {len(clips)} clips to {manifest}")
    return 0


def cmd_train_tokenizer(args) -> int:
    if args.resume:
        cfg, _ = config_from_checkpoint(args, args.resume)
        state = load_checkpoint(args.resume)
        state.cfg = cfg
    else:
        cfg = resolve_config(args)
        state = init_state(cfg)
    out = Path(args.out)
    echo_config(cfg, out)
    videos = _videos(training_clips(cfg))
    metrics_path = out / "metrics.csv"
    ckpt = out / "tokenizer.ck"
    with metrics_path.open("w") as f:
        f.write(StepMetrics.CSV_HEADER + "\n")

        def log(m: StepMetrics) -> None:
            row = m.csv_row()
            f.write(row + "\n")
            if args.log_every and (m.step % args.log_every == 0 or m.step == cfg.total_steps - 1):
                print(row, flush=True)
            if args.checkpoint_every and (m.step + 1) % args.checkpoint_every == 0:
                save_checkpoint(state, ckpt)

        train(state, videos, log=log)
    save_checkpoint(state, ckpt)
    print(f"saved {ckpt}")
    return 0


def _gen_corpus(cfg: RunConfig, tok, clips):
    if cfg.gen_task == "class":
        return tokenize_corpus(clips, tok)
    cond, target = frame_corpus(clips, tok, cfg.cond_frames)
    return target, cond


def cmd_train_generator(args) -> int:
    cfg, _ = config_from_checkpoint(args, args.tokenizer)
    tok = load_checkpoint(args.tokenizer).tokenizer
    out = Path(args.out)
    echo_config(cfg, out)
    with precision(cfg.precision):
        seqs, aux = _gen_corpus(cfg, tok, training_clips(cfg))
        h_seqs, h_aux = _gen_corpus(cfg, tok, probe_clips(cfg, args.heldout))
    save_token_file(out / "tokens.ts01", seqs, cfg.codebook_size)
    if cfg.gen_task == "class":
        (out / "tokens.classes").write_text("".join(f"{int(k)}\n" for k in aux))
    state = init_gen_state(cfg)
    with (out / "gen_metrics.csv").open("w") as f:
        f.write("step,lr,loss\n")

        def log(step: int, loss: float) -> None:
            row = f"{step},{lr_at(step, cfg.gen_lr, cfg.gen_warmup_steps, cfg.gen_steps):.9g},{loss:.9g}"
            f.write(row + "\n")
            if args.log_every and (step % args.log_every == 0 or step == cfg.gen_steps - 1):
                print(row, flush=True)

        train_generator(state, seqs, aux, log=log)
    nll = heldout_gen_nll(state, h_seqs, h_aux)
    _write_rows(out / "heldout.csv", "split,num_sequences,nll", [f"heldout,{len(h_seqs)},{nll:.9g}"])
    save_generator(state, out / "generator.ck")
    print(f"heldout_nll={nll:.9g}")
    print(f"saved {out / 'generator.ck'}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg, _ = config_from_checkpoint(args, args.tokenizer)
    tok = load_checkpoint(args.tokenizer).tokenizer
    out = Path(args.out)
    echo_config(cfg, out)
    videos = _input_videos(args, cfg, args.num_videos)
    rows = []
    with precision(cfg.precision):
        for i, v in enumerate(videos):
            rec = tok.reconstruct_numpy(v)
            save_tensor(out / f"recon_{i:04d}.dt", rec)
            export_frames(out / "frames", rec, f"recon_{i:04d}")
            rows.append(f"{i},{psnr(v, rec):.9g}")
    _write_rows(out / "psnr.csv", "video_id,psnr", rows)
    for r in rows:
        print(r)
    return 0


def _load_pair(args):
    gcfg, _ = config_from_checkpoint(args, args.generator)
    tcfg, tentries = config_from_checkpoint(args, args.tokenizer)
    check_compatible(gcfg, tentries)
    tok = load_checkpoint(args.tokenizer).tokenizer
    gen = load_generator(args.generator).generator
    return gcfg, tcfg, tok, gen


def cmd_generate(args) -> int:
    gcfg, _, tok, gen = _load_pair(args)
    out = Path(args.out)
    echo_config(gcfg, out)
    if not 0 <= args.class_id < gcfg.num_classes:
        raise ConfigError(f"--class-id {args.class_id} outside [0, {gcfg.num_classes})")
    rng = stream(gcfg.seed, "generate", args.class_id)
    with precision(gcfg.precision):
        seqs = generate_class_conditional(args.class_id, gen, gcfg.cfg_config(), rng, args.num_samples)
        videos = tok.decode(seqs)
    save_token_file(out / "samples.ts01", seqs, gcfg.codebook_size)
    for i, v in enumerate(videos):
        save_tensor(out / f"sample_{i:04d}.dt", v)
        export_frames(out / "frames", v, f"sample_{i:04d}")
    _write_rows(out / "samples.csv", "sample,tokens", [f"{i}," + " ".join(map(str, s)) for i, s in enumerate(seqs)])
    print(f"wrote {len(seqs)} samples to {out}")
    return 0


def cmd_predict_frames(args) -> int:
    gcfg, _, tok, gen = _load_pair(args)
    if gcfg.gen_task != "frame":
        raise ConfigError("predict-frames needs a generator trained with gen_task=frame")
    out = Path(args.out)
    echo_config(gcfg, out)
    videos = _input_videos(args, gcfg, 1)
    T0 = gcfg.cond_frames
    if not 1 <= T0 < gcfg.frames:
        raise ConfigError(f"--cond-frames must lie in [1, {gcfg.frames}), got {T0}")
    rng = stream(gcfg.seed, "predict-frames")
    with precision(gcfg.precision):
        video, cond, new = predict_frames(videos[0][:T0], tok, gen, rng)
    save_tensor(out / "predicted.dt", video)
    export_frames(out / "frames", video, "predicted")
    save_token_file(out / "tokens.ts01", [cond, new], gcfg.codebook_size)
    print(f"wrote {out / 'predicted.dt'}")
    return 0


def _corpus_for_ngrams(args, cfg: RunConfig):
    if args.tokens:
        seqs, _ = load_token_file(args.tokens)
        cls_path = Path(args.classes) if args.classes else Path(args.tokens).with_suffix(".classes")
        if not cls_path.exists():
            raise DataError(f"class sidecar not found: {cls_path}")
        classes = [int(x) for x in cls_path.read_text().split()]
        return seqs, classes
    if not args.tokenizer:
        raise ConfigError("give --tokens (TS01 corpus) or --tokenizer (checkpoint to tokenize with)")
    tok = load_checkpoint(args.tokenizer).tokenizer
    with precision(cfg.precision):
        return tokenize_corpus(training_clips(cfg), tok)


def cmd_analyze(args) -> int:
    if args.tokenizer:
        cfg, _ = config_from_checkpoint(args, args.tokenizer)
    else:
        cfg = resolve_config(args)
    out = Path(args.out)
    echo_config(cfg, out)
    which = args.analysis
    if which in ("ngrams", "dominance"):
        seqs, classes = _corpus_for_ngrams(args, cfg)
        order = args.order if which == "ngrams" else 2
        table = analysis.ngram_stats(seqs, classes, order, cfg.num_classes)
        if which == "ngrams":
            rows = analysis.ngram_histogram(table)
            analysis.write_histogram_csv(out / f"histogram_{order}gram.csv", rows)
            print(f"{len(table.counts)} unique {order}-grams, {len(rows)} buckets")
        else:
            scores = analysis.class_dominance(table, args.threshold)
            analysis.write_dominance_csv(out / "dominance.csv", scores)
            print(f"{len(scores)} 2-grams with count >= {args.threshold}")
        return 0
    if not args.tokenizer:
        raise ConfigError(f"analyze {which} needs --tokenizer")
    tok = load_checkpoint(args.tokenizer).tokenizer
    videos = _input_videos(args, cfg, args.num_videos)
    with precision(cfg.precision):
        if which == "ablate":
            recs = analysis.token_ablation(videos, tok, stream(cfg.seed, "ablate"))
            analysis.write_ablation_csv(out / "ablation.csv", recs)
            shares = analysis.top_share(recs)
            _write_rows(out / "ablation_top10.csv", "video_id,top10_share",
                        [f"{k},{v:.9g}" for k, v in sorted(shares.items())])
            print(f"{len(recs)} ablation records")
        elif which == "heatmap":
            heats = analysis.token_heatmap(videos, args.token_index, tok)
            rows = []
            for i, h in enumerate(heats):
                analysis.export_heatmap(out / "heatmaps", h, f"heat_v{i:04d}_t{args.token_index:03d}")
                save_tensor(out / f"heat_v{i:04d}_t{args.token_index:03d}.dt", h)
                rows.append(f"{i},{analysis.heat_coverage(h, (cfg.f_t, cfg.f_h, cfg.f_w)):.9g}")
            _write_rows(out / "heat_coverage.csv", "video_id,coverage90", rows)
            print(f"wrote {len(heats)} heat fields")
        elif which == "redundancy":
            levels = _levels(args.levels, cfg.frames)
            sweep = analysis.redundancy_sweep(videos, tok, levels)
            analysis.write_redundancy_csv(out / "redundancy.csv", sweep)
            for r, v in sweep.items():
                print(f"level {r}: {v:.4f} dB")
    return 0


def _levels(raw: str | None, frames: int) -> tuple[int, ...]:
    if raw is None:
        return tuple(r for r in analysis.LEVELS if frames % r == 0)
    try:
        levels = tuple(int(x) for x in raw.split(","))
    except ValueError:
        raise ConfigError(f"--levels must be comma-separated integers, got {raw!r}") from None
    for r in levels:
        if r < 1 or frames % r:
            raise ConfigError(f"repetition level {r} does not divide {frames} frames")
    return levels


def cmd_grad_check(args) -> int:
    results = [("op." + k, v) for k, v in operator_suite(args.seed)]
    results += [("loss." + k, v) for k, v in full_loss_grad_check(args.seed, per_tensor=args.per_tensor or None)]
    failed = 0
    for name, err in results:
        ok = err < GRAD_TOL
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name} max_rel_err={err:.3e}")
    print(f"{len(results) - failed}/{len(results)} checks passed (tolerance {GRAD_TOL:g})")
    if failed:
        raise NumericError(f"{failed} gradient checks exceeded {GRAD_TOL:g}")
    return 0


# -- parser ---------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="larp", description="Holistic video tokenizer toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.set_defaults(func=fn)
        return p

    p = command("synth-data", cmd_synth_data, "write a synthetic labeled clip dataset")
    p.add_argument("--out", required=True)

    p = command("train-tokenizer", cmd_train_tokenizer, "train tokenizer and prior jointly")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a tokenizer checkpoint")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--checkpoint-every", type=int, default=0)

    p = command("train-generator", cmd_train_generator, "train the token generator on a tokenized corpus")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heldout", type=int, default=64, help="held-out clips for the NLL report")
    p.add_argument("--log-every", type=int, default=50)

    p = command("reconstruct", cmd_reconstruct, "encode and decode clips, report PSNR")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--input", help="DT01 clip or dataset directory (default: held-out synthetic clips)")
    p.add_argument("--num-videos", type=int, default=8)

    p = command("generate", cmd_generate, "class-conditional sampling with guidance")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--num-samples", type=int, default=1)

    p = command("predict-frames", cmd_predict_frames, "continue a clip from its first frames")
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--input", help="DT01 clip (default: first held-out synthetic clip)")

    p = command("analyze", cmd_analyze, "latent-space diagnostics")
    p.add_argument("analysis", choices=["ablate", "heatmap", "ngrams", "dominance", "redundancy"])
    p.add_argument("--out", required=True)
    p.add_argument("--tokenizer")
    p.add_argument("--input")
    p.add_argument("--num-videos", type=int, default=10)
    p.add_argument("--token-index", type=int, default=0)
    p.add_argument("--order", type=int, choices=[2, 3], default=2)
    p.add_argument("--threshold", type=int, help="minimum 2-gram count for dominance (required there)")
    p.add_argument("--tokens", help="TS01 corpus for ngrams/dominance")
    p.add_argument("--classes", help="class sidecar for --tokens (default: same stem, .classes)")
    p.add_argument("--levels", help="comma-separated repetition levels")

    p = sub.add_parser("grad-check", help="finite-difference check of every operator and the joint loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-tensor", type=int, default=16, help="elements checked per parameter tensor (0: all)")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "analysis", None) == "dominance" and args.threshold is None:
        parser.error("analyze dominance requires --threshold")
    try:
        return args.func(args)
    except ConfigError as e:
        code, msg = 2, f"config error: {e}"
    except (DataError, CheckpointError, FormatError, QuantizerError, FileNotFoundError) as e:
        code, msg = 3, f"data error: {e}"
    except (NumericError, GradCheckError, FloatingPointError) as e:
        code, msg = 4, f"numeric failure: {e}"
    print(msg, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
