"""``diarize train|subset|infer|score|bench|inspect --config <path> [--set key=value ...]``

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import ConfigError, RunConfig, dump_config, load_config, to_dict
from .features import build_backbone
from .metrics import ScoringConfig, compute_der, macro_average, pool
from .model import COMPONENTS, build_model, count_parameters, load_model
from .pipeline import build_embedder, diarize, write_activity
from .powerset import enumerate_powerset
from .signal_io import Annotation, load_audio, read_manifest, read_rttm, read_uem, write_manifest, write_rttm
from .training import ChunkDataset, fit, make_chunks

logger = logging.getLogger("eendvc")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _require(value, name):
    if value in (None, "", {}, []):
        raise ConfigError(f"missing required setting {name}")
    return value


def _require_path(value, name) -> Path:
    path = Path(_require(value, name))
    if not path.exists():
        raise ConfigError(f"{name}: path does not exist: {path}")
    return path


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _prepare_output(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(config, out / "config.yaml")
    return out


def cmd_train(config: RunConfig, resume: bool = False) -> dict:
    train_path = _require_path(config.data.train_manifest, "data.train_manifest")
    dev_path = _require_path(config.data.dev_manifest, "data.dev_manifest")
    if config.model.num_classes != enumerate_powerset(config.model.max_speakers, config.model.max_overlap).num_classes:
        raise ConfigError("model.num_classes does not match the powerset size of max_speakers/max_overlap")
    backbone = build_backbone(config.backbone)
    if backbone.dim != config.model.input_dim:
        raise ConfigError(f"model.input_dim={config.model.input_dim} but the {config.backbone.kind} backbone emits {backbone.dim}")
    train_manifest, dev_manifest = read_manifest(train_path), read_manifest(dev_path)
    out = _prepare_output(config)

    tc = config.train
    model = build_model(config.model, backbone=backbone, seed=tc.seed)

    def dataset(manifest):
        return ChunkDataset(manifest, make_chunks(manifest, tc.chunk_len, tc.chunk_hop), backbone.num_frames,
                            backbone.frame_rate, config.model.max_speakers, tc.cache_audio)

    info = fit(model, dataset(train_manifest), dataset(dev_manifest), tc, config.backbone, out, resume=resume)
    (out / "train_summary.json").write_text(json.dumps(info, indent=2))
    return info


def subset_manifest(entries, ratio: float, seed: int):
    """Whole recordings in a seeded shuffled order, prefix closest to ``ratio`` of the hours.

    Prefixes of one fixed order make smaller subsets nested in larger ones.
    """
    if not 0 < ratio <= 1:
        raise ConfigError(f"ratio must be in (0, 1], got {ratio}")
    order = np.random.default_rng(seed).permutation(len(entries))
    budget = ratio * sum(e.duration for e in entries)
    chosen, total = [], 0.0
    for i in order:
        d = entries[i].duration
        if abs(total + d - budget) >= abs(total - budget) and chosen:
            break
        chosen.append(entries[i])
        total += d
    return chosen


def cmd_subset(config: RunConfig) -> dict:
    sc = config.subset
    _require(sc.manifests, "subset.manifests")
    for r in sc.ratios:
        if not 0 < r <= 1:
            raise ConfigError(f"subset ratio must be in (0, 1], got {r}")
    manifests = {name: read_manifest(_require_path(p, f"subset.manifests.{name}")) for name, p in sc.manifests.items()}
    out = _prepare_output(config)
    report = {"seed": sc.seed, "ratios": {}}
    for ratio in sorted(set(sc.ratios) | {1.0}, reverse=True):
        rdir = out / "subsets" / f"ratio_{ratio:g}"
        rdir.mkdir(parents=True, exist_ok=True)
        compound = []
        row = {"datasets": {}}
        for name, entries in manifests.items():
            chosen = subset_manifest(entries, ratio, sc.seed)
            write_manifest(chosen, rdir / f"{name}.jsonl")
            compound += chosen
            row["datasets"][name] = {"recordings": len(chosen),
                                     "hours": sum(e.duration for e in chosen) / 3600}
        write_manifest(compound, rdir / "compound.jsonl")
        row["hours"] = sum(e.duration for e in compound) / 3600
        row["recordings"] = len(compound)
        report["ratios"][f"{ratio:g}"] = row
    (out / "subset_report.json").write_text(json.dumps(report, indent=2))
    return report


def _load_inference_stack(config: RunConfig, checkpoint):
    ckpt = _require_path(checkpoint, "checkpoint")
    model, meta = load_model(ckpt, build_backbone(config.backbone))
    embedder = build_embedder(config.pipeline.embedder)
    return ckpt, model, meta, embedder


def cmd_infer(config: RunConfig) -> dict:
    manifest = read_manifest(_require_path(config.infer.manifest, "infer.manifest"))
    ckpt, model, meta, embedder = _load_inference_stack(config, config.infer.checkpoint)
    out = _prepare_output(config)
    rttm_dir = out / "rttm"
    rttm_dir.mkdir(exist_ok=True)
    torch.manual_seed(0)
    run = {"checkpoint": str(ckpt), "checkpoint_sha256": _sha256(ckpt), "checkpoint_epoch": meta["epoch"],
           "config": to_dict(config), "recordings": {}}
    for entry in manifest:
        try:
            wav = load_audio(entry.audio_path)
            result = diarize(wav, model, embedder, config.pipeline, entry.recording_id)
            (rttm_dir / f"{entry.recording_id}.rttm").write_text(write_rttm([result.annotation]))
            if config.infer.dump_activity:
                write_activity(rttm_dir / f"{entry.recording_id}.act", result)
            run["recordings"][entry.recording_id] = {"status": "ok", "speakers": len(result.annotation.speakers),
                                                     "turns": len(result.annotation.turns)}
        except Exception as exc:  # one bad recording must not abort the batch
            logger.error("%s failed: %s", entry.recording_id, exc)
            run["recordings"][entry.recording_id] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    (out / "infer_manifest.json").write_text(json.dumps(run, indent=2, sort_keys=True))
    return run


def _fmt_table(rows) -> str:
    header = f"{'level':<10} {'name':<24} {'collar':>6} {'DER':>7} {'Miss':>7} {'FA':>7} {'Conf':>7} {'hours':>8}"
    lines = [header, "-" * len(header)]

    def cell(r, key, width, scale=100.0, digits=2):
        return f"{scale * r[key]:>{width}.{digits}f}" if key in r else " " * width

    for r in rows:
        lines.append(f"{r['level']:<10} {r['name']:<24} {r['collar']:>6.2f} {cell(r, 'der', 7)} "
                     f"{cell(r, 'miss', 7)} {cell(r, 'false_alarm', 7)} {cell(r, 'confusion', 7)} "
                     f"{cell(r, 'scored_hours', 8, 1.0, 3)}".rstrip())
    return "\n".join(lines) + "\n"


def cmd_score(config: RunConfig) -> dict:
    sc = config.score
    hyp_dir = _require_path(sc.hyp_dir, "score.hyp_dir")
    _require(sc.references, "score.references")
    hyps: dict[str, Annotation] = {}
    for f in sorted(hyp_dir.glob("*.rttm")):
        hyps.update(read_rttm(f))
    datasets = {name: read_manifest(_require_path(p, f"score.references.{name}")) for name, p in sc.references.items()}
    if not any(e.recording_id in hyps for entries in datasets.values() for e in entries):
        raise RuntimeError("no hypothesis matches any reference recording")
    out = _prepare_output(config)
    rows, missing = [], []
    for collar in sc.collars:
        per_dataset = {}
        for name, entries in datasets.items():
            breakdowns = []
            for e in entries:
                ref = read_rttm(e.rttm_path).get(e.recording_id, Annotation(e.recording_id))
                hyp = hyps.get(e.recording_id)
                if hyp is None:
                    if e.recording_id not in missing:
                        missing.append(e.recording_id)
                    hyp = Annotation(e.recording_id)
                uem = read_uem(e.uem_path) if sc.use_uem and e.uem_path else None
                b = compute_der(ref, hyp, ScoringConfig(collar, sc.score_overlap, uem))
                breakdowns.append(b)
                rows.append({"level": "recording", "name": e.recording_id, "dataset": name, "collar": collar,
                             **b.as_dict(), "scored_hours": b.scored_speech / 3600,
                             "missing_hypothesis": e.recording_id not in hyps})
            pooled = pool(breakdowns)
            per_dataset[name] = pooled.der
            rows.append({"level": "dataset", "name": name, "collar": collar, **pooled.as_dict(),
                         "scored_hours": pooled.scored_speech / 3600})
        rows.append({"level": "macro", "name": "macro", "collar": collar,
                     "der": macro_average(list(per_dataset.values()))})
    report = {"collars": list(sc.collars), "uem_used": sc.use_uem, "score_overlap": sc.score_overlap,
              "missing_hypotheses": missing, "rows": rows}
    (out / "score_report.json").write_text(json.dumps(report, indent=2))
    with open(out / "score_report.jsonl", "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
    table = _fmt_table([r for r in rows if r["level"] != "recording"])
    (out / "score_report.txt").write_text(table)
    print(table, end="")
    return report


BENCH_KEYS = ("rtf", "seconds", "peak_memory_mb")


def cmd_bench(config: RunConfig) -> dict:
    """Wall-clock RTF and peak RSS per pipeline stage on one recording."""
    audio = _require_path(config.bench.audio, "bench.audio")
    _, model, _, embedder = _load_inference_stack(config, config.bench.checkpoint)
    out = _prepare_output(config)
    wav = load_audio(audio)
    profile: dict[str, dict] = {}
    start = time.perf_counter()
    diarize(wav, model, embedder, config.pipeline, audio.stem, profile)
    profile["total"] = {"seconds": time.perf_counter() - start,
                        "peak_memory_mb": max(p["peak_memory_mb"] for p in profile.values())}
    report = {"audio": str(audio), "duration": wav.duration, "batch_size": config.pipeline.batch_size,
              "device": "cpu", "stages": {}}
    for stage, p in profile.items():
        report["stages"][stage] = {"rtf": p["seconds"] / wav.duration, **p}
    (out / "bench.json").write_text(json.dumps(report, indent=2))
    return report


def cmd_inspect(config: RunConfig, checkpoint: str | None = None) -> dict:
    if checkpoint:
        model, meta = load_model(_require_path(checkpoint, "checkpoint"))
    else:
        backbone = build_backbone(config.backbone)
        model, meta = build_model(config.model, backbone=backbone, seed=config.train.seed), None
    counts = {c: count_parameters(model, c) for c in COMPONENTS}
    counts["total"] = count_parameters(model)
    catalog = enumerate_powerset(model.config.max_speakers, model.config.max_overlap)
    info = {"config": to_dict(config), "parameters": counts, "frame_rate": model.frame_rate,
            "powerset_classes": [list(c) for c in catalog.classes], "checkpoint_metadata": meta}
    print(yaml.safe_dump({"parameters": counts, "frame_rate": model.frame_rate,
                          "powerset_classes": catalog.num_classes}, sort_keys=False), end="")
    return info


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diarize", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "subset", "infer", "score", "bench", "inspect"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.lr_main=5e-4")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from the newest epoch checkpoint")
        if name == "inspect":
            p.add_argument("--checkpoint", help="summarise a checkpoint instead of the configured model")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.overrides)
        if args.command == "train":
            cmd_train(config, resume=args.resume)
        elif args.command == "subset":
            cmd_subset(config)
        elif args.command == "infer":
            cmd_infer(config)
        elif args.command == "score":
            cmd_score(config)
        elif args.command == "bench":
            print(json.dumps(cmd_bench(config), indent=2))
        else:
            cmd_inspect(config, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        logger.exception("%s failed", args.command)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
