"""Command-line entry point: simulate, train, infer, score, grid.

Exit codes: 0 ok, 2 usage/validation error, 1 runtime error.  The default
config file can be set through the EENDA_CONFIG environment variable;
flags override the file, the file overrides built-in defaults.  Every
command dumps the effective configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .datagen import extract_logmel, generate_corpus, read_wav
from .inference import diarize, predict_domain, result_to_rttm
from .model import DiarizationModel, load_checkpoint
from .scoring import RttmSegment, compute_der, evaluation_grid, parse_rttm, write_rttm
from .training import load_samples, train

CONFIG_ENV_VAR = "EENDA_CONFIG"

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


def _load_config(args) -> RunConfig:
    path = args.config
    if path is None:
        env = os.environ.get(CONFIG_ENV_VAR)
        if env:
            path = Path(env)
    if path is not None and not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        return RunConfig.load(path, overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _prepare_out(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(out_dir / "effective_config.yaml")
    return out_dir


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out_dir = _prepare_out(cfg, args.out)
    sim = cfg.data["simulate"]
    manifest = generate_corpus(
        cfg.domain_specs(),
        sim["mixtures_per_domain"],
        sim["duration_s"],
        out_dir,
        cfg.seed,
        sim["sample_rate"],
    )
    print(f"wrote corpus manifest: {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise UsageError(f"manifest not found: {manifest}")
    out_dir = _prepare_out(cfg, args.out)
    samples = load_samples(manifest, cfg.feature_config(),
                           cfg.train_config().max_speakers)
    sample_domains = {s.domain for s in samples}
    known = set(cfg.domain_names())
    if not sample_domains <= known:
        raise UsageError(
            f"manifest domains {sorted(sample_domains - known)} missing from config")
    torch.manual_seed(cfg.seed)
    start_epoch = 0
    model = DiarizationModel(cfg.model_config())
    if args.resume:
        from .model import checkpoint_metadata
        model = load_checkpoint(Path(args.resume), model)
        start_epoch = checkpoint_metadata(Path(args.resume))["epoch"]
    result = train(model, samples, cfg.train_config(), out_dir,
                   infer_cfg=cfg.inference_config(), start_epoch=start_epoch)
    print(f"final model: {result.final_path}")
    return EXIT_OK


def _adapter_mode(arg: str | None, model: DiarizationModel):
    if arg is None or arg == "none":
        return None
    if arg not in model.domains:
        raise UsageError(
            f"unknown adapter {arg!r}; known domains: {list(model.domains)} or 'none'")
    return arg


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(Path(args.model))
    adapter = _adapter_mode(args.adapter, model)
    out_dir = _prepare_out(cfg, args.out)
    inputs: list[tuple[str, Path]] = []
    if args.manifest:
        from .datagen import load_manifest
        root = Path(args.manifest).parent
        for rec in load_manifest(Path(args.manifest)):
            inputs.append((rec["id"], root / rec["wav"]))
    for wav in args.audio or []:
        inputs.append((Path(wav).stem, Path(wav)))
    if not inputs:
        raise UsageError("no inputs: pass --manifest and/or audio files")
    infer_cfg = cfg.inference_config(adapter)
    for file_id, wav_path in inputs:
        wav, sr = read_wav(wav_path)
        feats = extract_logmel(wav, sr, cfg.feature_config())
        result = diarize(feats, model, infer_cfg)
        rttm = write_rttm(result_to_rttm(result, file_id, feats.hop_s))
        (out_dir / f"{file_id}.rttm").write_text(rttm)
        if args.dump_posteriors and result.posteriors is not None:
            np.save(out_dir / f"{file_id}_posteriors.npy", result.posteriors)
        if args.predict_domain:
            name, probs = predict_domain(feats, model, adapter)
            print(f"{file_id}: predicted domain {name} "
                  f"({', '.join(f'{d}={p:.3f}' for d, p in zip(model.domains, probs))})")
    print(f"wrote {len(inputs)} hypothesis RTTM(s) to {out_dir}")
    return EXIT_OK


def _collect_rttms(directory: Path) -> dict[str, list[RttmSegment]]:
    out = {}
    for path in sorted(Path(directory).glob("*.rttm")):
        out[path.stem] = parse_rttm(path.read_text())
    return out


def cmd_score(args) -> int:
    collar = args.collar
    if collar is None:
        cfg = _load_config(args)
        collar = cfg.collar_s
    refs = _collect_rttms(Path(args.ref))
    hyps = _collect_rttms(Path(args.hyp))
    if not refs:
        raise UsageError(f"no reference RTTMs in {args.ref}")
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise UsageError(f"missing hypothesis for: {missing}")
    header = f"{'file':<24}{'miss':>9}{'fa':>9}{'conf':>9}{'der':>9}"
    print(header)
    all_ref: list[RttmSegment] = []
    all_hyp: list[RttmSegment] = []
    for fid in sorted(refs):
        b = compute_der(refs[fid], hyps[fid], collar)
        print(f"{fid:<24}{b.missed_s:>9.2f}{b.falsealarm_s:>9.2f}"
              f"{b.confusion_s:>9.2f}{b.der:>9.4f}")
        all_ref.extend(refs[fid])
        all_hyp.extend(hyps[fid])
    pooled = compute_der(all_ref, all_hyp, collar)
    print(f"{'TOTAL':<24}{pooled.missed_s:>9.2f}{pooled.falsealarm_s:>9.2f}"
          f"{pooled.confusion_s:>9.2f}{pooled.der:>9.4f}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    model = load_checkpoint(Path(args.model))
    manifest = Path(args.manifest)
    if not manifest.exists():
        raise UsageError(f"manifest not found: {manifest}")
    out_dir = _prepare_out(cfg, args.out)
    samples = load_samples(manifest, cfg.feature_config(),
                           cfg.train_config().max_speakers)
    eval_sets: dict[str, list] = {}
    for s in samples:
        eval_sets.setdefault(s.domain, []).append((s.file_id, s.features, s.reference))
    result = evaluation_grid(model, eval_sets, cfg.inference_config())
    table = result.format_table()
    (out_dir / "grid.tsv").write_text(table)
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eenda",
        description="Multi-domain end-to-end speaker diarization toolkit")
    parser.add_argument("--config", type=Path, default=None,
                        help=f"config file (default: ${CONFIG_ENV_VAR})")
    parser.add_argument("--seed", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic multi-domain corpus")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="finetune on a simulated corpus")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="diarize recordings to hypothesis RTTMs")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("audio", nargs="*", help="wav files")
    p.add_argument("--adapter", default="none",
                   help="adapter routing: 'none' or a trained domain name")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-posteriors", action="store_true")
    p.add_argument("--predict-domain", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("score", help="score hypothesis RTTMs against references")
    p.add_argument("--ref", type=Path, required=True)
    p.add_argument("--hyp", type=Path, required=True)
    p.add_argument("--collar", type=float, default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("grid", help="adapter-mode x domain DER grid")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_grid)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit code 1
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
