"""Command-line entry point.

Every subcommand writes into ``--out`` and echoes the fully resolved
configuration there as ``config.toml``. Values resolve as built-in defaults,
then the ``--config`` file section for the subcommand, then explicit flags.
Feeding a run directory's ``config.toml`` back through ``--config``
reproduces the run.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import torch

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from . import datapipe, distill, encoder, evalkit, synth, teachers, trainer
from .frontend import AudioFrontend, MelFrames, NormStats, compute_logmel, compute_norm_stats, n_mel_frames

log = logging.getLogger("audistill")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


# Per-subcommand defaults; None means "required or derived".
DEFAULTS = {
    "generate": {"minutes": 2.0, "clip_seconds": 4.0, "domains": "speech,music"},
    "prepare": {"inputs": None, "domain": None, "dataset": ""},
    "mix": {"manifests": None, "factors": "speech=1,sound=2,music=2"},
    "dump-teacher": {"teacher": None, "manifest": "", "synth_minutes": 2.0, "layers": ""},
    "distill": {"manifest": "", "synth_minutes": 30.0, "preset": "micro", "train_preset": "",
                "steps": 0, "warmup": -1, "lr": 0.0, "batch_seconds": 0.0,
                "teachers": "synthetic:12x192:seed=1:std=0.2,synthetic:12x192@25:seed=2:std=0.2", "K": 4,
                "extraction": "frame", "objective": "l1cos", "masking": "none",
                "mask_prob": 0.08, "span_len": 10, "normalize_targets": False, "head_input": "layer",
                "checkpoint_every": 0},
    "probe": {"checkpoints": None, "names": "", "anchors": None, "layers": "softmax"},
    "score": {"results": None},
    "report": {"results": None},
    "flops": {"preset": "base", "seconds": 10.0, "extraction": "frame"},
}

COMMANDS = tuple(DEFAULTS)


def _add_global(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML file; its [<subcommand>] table supplies defaults")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS if suppress else False)
    p.add_argument("--out", default=d, help="output/run directory")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="audistill", description="Dual-teacher audio distillation toolkit")
    _add_global(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def cmd(name, help):
        sp = sub.add_parser(name, help=help, argument_default=S)
        _add_global(sp, suppress=True)
        return sp

    g = cmd("generate", "write a synthetic multi-domain corpus as WAV files")
    g.add_argument("--minutes", type=float)
    g.add_argument("--clip-seconds", type=float, dest="clip_seconds")
    g.add_argument("--domains")

    pr = cmd("prepare", "scan WAV directories into a cleaned manifest")
    pr.add_argument("inputs", nargs="*")
    pr.add_argument("--in", dest="in_dirs", nargs="+", action="extend", help="input directories")
    pr.add_argument("--domain", choices=datapipe.DOMAINS)
    pr.add_argument("--dataset")

    mx = cmd("mix", "merge manifests with per-domain upsampling factors")
    mx.add_argument("manifests", nargs="*")
    mx.add_argument("--manifests", dest="manifest_list", help="comma-separated manifest paths")
    mx.add_argument("--factors", help="e.g. speech=1,sound=2,music=2")

    dt = cmd("dump-teacher", "store a synthetic teacher's layer features as a dump")
    dt.add_argument("--teacher")
    dt.add_argument("--manifest")
    dt.add_argument("--synth-minutes", type=float, dest="synth_minutes")
    dt.add_argument("--layers", help="comma list; default all layers")

    ds = cmd("distill", "train a student from two frozen teachers")
    ds.add_argument("--manifest", help="manifest to train on; default a generated corpus")
    ds.add_argument("--synth-minutes", type=float, dest="synth_minutes")
    ds.add_argument("--preset", choices=sorted(encoder.ENCODER_PRESETS))
    ds.add_argument("--train-preset", dest="train_preset", choices=sorted(trainer.TRAIN_PRESETS))
    ds.add_argument("--steps", type=int)
    ds.add_argument("--warmup", type=int)
    ds.add_argument("--lr", type=float)
    ds.add_argument("--batch-seconds", type=float, dest="batch_seconds")
    ds.add_argument("--teachers", help="two comma-separated teacher specs")
    ds.add_argument("--K", type=int)
    ds.add_argument("--extraction", choices=("frame", "patch", "fused"))
    ds.add_argument("--objective", choices=("l1cos", "infonce"))
    ds.add_argument("--masking", choices=("none", "mask-prediction"))
    ds.add_argument("--mask-prob", type=float, dest="mask_prob")
    ds.add_argument("--span-len", type=int, dest="span_len")
    ds.add_argument("--normalize-targets", action="store_true", dest="normalize_targets")
    ds.add_argument("--head-input", choices=("layer", "ffn"), dest="head_input")
    ds.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")

    pb = cmd("probe", "probe checkpoints on the synthetic task suite")
    pb.add_argument("checkpoints", nargs="+")
    pb.add_argument("--names", help="comma list of row names, one per checkpoint")
    pb.add_argument("--anchors", help="CSV: task, baseline, sota[, direction]")
    pb.add_argument("--layers", help="'softmax' or 'one-hot:<layer>'")

    for name, help in (("score", "print the aggregate score per model"),
                       ("report", "write a Markdown score table")):
        sp = cmd(name, help)
        sp.add_argument("results")

    fl = cmd("flops", "count forward multiply-accumulates for an encoder preset")
    fl.add_argument("--preset", choices=sorted(encoder.ENCODER_PRESETS))
    fl.add_argument("--seconds", type=float)
    fl.add_argument("--extraction", choices=("frame", "patch", "fused"))
    return p


def _merge_list_flags(args: argparse.Namespace) -> None:
    # positional lists and their flag spellings (--in a b, --manifests a,b) are interchangeable
    for dest, flag, split in (("inputs", "in_dirs", False), ("manifests", "manifest_list", True)):
        items = list(vars(args).pop(dest, None) or [])
        extra = vars(args).pop(flag, None)
        if extra:
            items += _csv(extra) if split else list(extra)
        if items:
            setattr(args, dest, items)


def _target_file(cfg: dict, default: str) -> tuple[Path, str]:
    """Run directory and manifest name; ``--out x.jsonl`` names the file itself."""
    out = Path(cfg["out"])
    if out.suffix == ".jsonl":
        return out.parent, out.name
    return out, default


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags into one nested config dict."""
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        with open(path, "rb") as fh:
            file_cfg = tomllib.load(fh)
    section = dict(DEFAULTS[args.command])
    section.update(file_cfg.get(args.command, {}))
    for k in DEFAULTS[args.command]:
        if k in vars(args):
            section[k] = getattr(args, k)
    missing = [k for k, v in section.items() if v is None]
    if missing:
        raise UsageError(f"{args.command}: missing required value(s): {', '.join(missing)}")
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    return {
        "command": args.command,
        "seed": int(seed),
        "deterministic": bool(args.deterministic or file_cfg.get("deterministic", False)),
        "out": args.out or file_cfg.get("out") or "run",
        args.command: section,
    }


def make_run_dir(path: str) -> Path:
    """Create the directory atomically (via rename) if it does not exist."""
    out = Path(path)
    if out.is_dir():
        return out
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        os.rename(tmp, out)
    except OSError:
        tmp.rmdir()
        if not out.is_dir():
            raise
    return out


def write_config(out: Path, cfg: dict) -> None:
    clean = {k: v for k, v in cfg.items()}
    tmp = out / "config.toml.tmp"
    with open(tmp, "wb") as fh:
        tomli_w.dump(clean, fh)
    os.replace(tmp, out / "config.toml")


def _csv(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv(text)]


def _synthetic_store(minutes: float, seed: int):
    corpus = synth.make_corpus(minutes, seed=seed)
    mels = [compute_logmel(c.waveform) for c in corpus]
    stats = compute_norm_stats(mels, source="synthetic")
    entries = [datapipe.ManifestEntry(c.clip_id, "", c.domain, c.duration, dataset=f"synthetic-{c.domain}")
               for c in corpus]
    return trainer.ClipStore(entries, stats, {c.clip_id: c.waveform for c in corpus})


def _manifest_store(path: str):
    m = datapipe.read_manifest(path)
    if m.norm_stats is None:
        raise ValueError(f"{path}: manifest has no normalization statistics")
    return trainer.ClipStore(m.entries, m.norm_stats)


def cmd_generate(cfg: dict, out: Path) -> dict:
    c = cfg["generate"]
    domains = _csv(c["domains"])
    corpus = synth.make_corpus(c["minutes"], seed=cfg["seed"], clip_seconds=c["clip_seconds"], domains=domains)
    counts = {}
    for clip in corpus:
        d = out / clip.domain
        d.mkdir(exist_ok=True)
        datapipe.write_wav(d / f"{clip.clip_id.replace('/', '_')}.wav", clip.waveform)
        counts[clip.domain] = counts.get(clip.domain, 0) + 1
    return {"clips": counts}


def cmd_prepare(cfg: dict, out: Path) -> dict:
    c = cfg["prepare"]
    inputs = c["inputs"] if isinstance(c["inputs"], list) else [c["inputs"]]
    m = datapipe.prepare(inputs, c["domain"], c["dataset"] or None)
    _, name = _target_file(cfg, (c["dataset"] or Path(inputs[0]).name) + ".jsonl")
    datapipe.write_manifest(out / name, m)
    return {"manifest": str(out / name), "clips": len(m.entries), "dropped": m.extra.get("dropped")}


def _parse_factors(text: str) -> dict[str, int]:
    factors = {}
    for item in _csv(text):
        key, _, val = item.partition("=")
        if not val:
            raise UsageError(f"bad factor {item!r}; expected name=int")
        f = float(val)
        if f != int(f) or f < 1:
            raise ValueError(f"upsampling factor for {key} must be an integer >= 1, got {val}")
        factors[key.strip()] = int(f)
    return factors


def cmd_mix(cfg: dict, out: Path) -> dict:
    c = cfg["mix"]
    paths = c["manifests"] if isinstance(c["manifests"], list) else [c["manifests"]]
    spec, merged = datapipe.build_mixture([datapipe.read_manifest(p) for p in paths], _parse_factors(c["factors"]))
    _, name = _target_file(cfg, "mixture.jsonl")
    datapipe.write_manifest(out / name, merged)
    props = {k: round(v, 6) for k, v in spec.domain_proportions().items()}
    print("domain proportions: " + ", ".join(f"{k} {100 * v:.2f}%" for k, v in props.items()))
    return {"manifest": str(out / name), "weighted_total": spec.weighted_total,
            "domain_proportions": props}


def cmd_dump_teacher(cfg: dict, out: Path) -> dict:
    c = cfg["dump-teacher"]
    spec = teachers.parse_teacher(c["teacher"], "T", default_seed=cfg["seed"])
    if spec.source != "synthetic":
        raise ValueError("dump-teacher needs a synthetic teacher spec")
    store = _manifest_store(c["manifest"]) if c["manifest"] else _synthetic_store(c["synth_minutes"], cfg["seed"])
    layers = _int_list(c["layers"]) if c["layers"] else list(range(1, spec.n_layers + 1))
    teacher = teachers.SyntheticTeacher(spec, store.norm_stats)
    clips = [(e.clip_id, MelFrames(store.mel(e.clip_id), norm_applied=True)) for e in store.entries]
    teachers.write_teacher_dump(teacher, clips, layers, out / "dump")
    return {"dump": str(out / "dump"), "clips": len(clips), "layers": layers}


def _train_config(c: dict, seed: int, deterministic: bool) -> trainer.TrainConfig:
    base = trainer.TRAIN_PRESETS[c["train_preset"] or ("micro" if c["preset"] == "micro" else c["preset"])]
    changes = {"seed": seed, "deterministic": deterministic}
    if c["steps"]:
        changes["total_steps"] = c["steps"]
        if c["warmup"] < 0:
            changes["warmup_steps"] = min(base.warmup_steps, max(c["steps"] // 10, 0))
    if c["warmup"] >= 0:
        changes["warmup_steps"] = c["warmup"]
    if c["lr"]:
        changes["peak_lr"] = c["lr"]
    if c["batch_seconds"]:
        changes["batch_seconds"] = c["batch_seconds"]
    if c["checkpoint_every"]:
        changes["checkpoint_every"] = c["checkpoint_every"]
    return replace(base, **changes)


def cmd_distill(cfg: dict, out: Path) -> dict:
    c = cfg["distill"]
    enc_cfg = encoder.ENCODER_PRESETS[c["preset"]]
    specs = _csv(c["teachers"])
    if len(specs) != 2:
        raise ValueError(f"distill needs exactly two teachers, got {len(specs)}")
    tspecs = {f"T{i + 1}": teachers.parse_teacher(s, f"T{i + 1}", default_seed=cfg["seed"] + i + 1)
              for i, s in enumerate(specs)}
    plan = distill.DistillPlan.build(enc_cfg.n_layers, {k: s.n_layers for k, s in tspecs.items()}, c["K"])
    loss_cfg = distill.LossConfig(objective=c["objective"], masking=c["masking"], mask_prob=c["mask_prob"],
                                  span_len=c["span_len"], normalize_targets=c["normalize_targets"],
                                  head_input=c["head_input"])
    tcfg = _train_config(c, cfg["seed"], cfg["deterministic"])
    store = _manifest_store(c["manifest"]) if c["manifest"] else _synthetic_store(c["synth_minutes"], cfg["seed"])
    tmodels = {k: teachers.build_teacher(s, store.norm_stats) for k, s in tspecs.items()}
    student = trainer.build_student(enc_cfg, c["extraction"], loss_cfg, cfg["seed"])
    heads = distill.DistillHeads(plan, enc_cfg.d_model, {k: s.target_dim for k, s in tspecs.items()},
                                 {k: s.key for k, s in tspecs.items()}, seed=cfg["seed"])
    res = trainer.train(tcfg, plan, student, heads, tmodels, store, loss_cfg, out)
    summary = {"steps": res.final_step, "first_loss": res.losses[0], "final_ema": res.ema[-1],
               "final_checkpoint": str(res.checkpoints[-1]), "averaged": str(res.averaged),
               "flops_cum": res.flops_cum, "plan": plan.to_dict()}
    if res.averaged is not None:
        summary["final_sha256"] = hashlib.sha256(res.checkpoints[-1].read_bytes()).hexdigest()
    return summary


def cmd_probe(cfg: dict, out: Path) -> dict:
    c = cfg["probe"]
    ckpts = c["checkpoints"] if isinstance(c["checkpoints"], list) else [c["checkpoints"]]
    names = _csv(c["names"]) if c["names"] else [Path(p).stem for p in ckpts]
    if len(names) != len(ckpts):
        raise UsageError("--names needs one name per checkpoint")
    anchors = evalkit.read_anchors(c["anchors"])
    rows = []
    for name, path in zip(names, ckpts):
        model, meta = trainer.load_student(path)
        stats = NormStats.from_dict(meta["norm_stats"])
        rows.extend(evalkit.run_task_suite(model, stats, anchors, layers=c["layers"], model_name=name,
                                           seed=cfg["seed"]))
    evalkit.write_results(out / "results.csv", rows)
    report = evalkit.markdown_report(rows)
    (out / "report.md").write_text(report)
    print(report)
    return {"results": str(out / "results.csv"), "report": str(out / "report.md")}


def _load_tables(path: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"results file {path} not found")
    rows = evalkit.read_results(path)
    return rows, evalkit.tables_from_results(rows)


def cmd_score(cfg: dict, out: Path) -> dict:
    rows, tables = _load_tables(cfg["score"]["results"])
    scores = {name: evalkit.superb_score(t) for name, t in tables.items()}
    for name, s in scores.items():
        print(f"{name}\t{s:.2f}")
    return {"scores": scores}


def cmd_report(cfg: dict, out: Path) -> dict:
    rows, _ = _load_tables(cfg["report"]["results"])
    report = evalkit.markdown_report(rows)
    (out / "report.md").write_text(report)
    print(report)
    return {"report": str(out / "report.md")}


def cmd_flops(cfg: dict, out: Path) -> dict:
    c = cfg["flops"]
    enc = encoder.ENCODER_PRESETS[c["preset"]]
    n_mel = n_mel_frames(int(round(c["seconds"] * 16000)))
    tokens = int(AudioFrontend(enc.d_model, c["extraction"]).output_lengths(torch.tensor([n_mel]))[0])
    fc = encoder.count_flops(enc, tokens, c["extraction"])
    result = {"preset": c["preset"], "tokens": tokens, "embedding": fc.embedding, "projections": fc.projections,
              "attention": fc.attention, "ffn": fc.ffn, "total_macs": fc.total,
              "train_step_macs": trainer.FLOPS_TRAIN_MULTIPLIER * fc.total}
    print(json.dumps(result))
    return result


HANDLERS = {"generate": cmd_generate, "prepare": cmd_prepare, "mix": cmd_mix, "dump-teacher": cmd_dump_teacher,
            "distill": cmd_distill, "probe": cmd_probe, "score": cmd_score, "report": cmd_report,
            "flops": cmd_flops}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _merge_list_flags(args)
    try:
        cfg = resolve(args)
        out = make_run_dir(_target_file(cfg, "")[0])
        write_config(out, cfg)
        summary = HANDLERS[args.command](cfg, out)
        (out / f"{args.command}.summary.json").write_text(json.dumps(summary, indent=1, default=str))
        return EXIT_OK
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, FileNotFoundError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
