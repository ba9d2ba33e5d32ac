"""``momar`` command line: data preparation, training, sampling, editing, evaluation, diagnosis.

Every command writes ``manifest.json`` beside its outputs. ``momar replay
MANIFEST --out DIR`` re-runs the recorded command with the recorded
configuration, seed and inputs.
"""
from __future__ import annotations

import os

# BLAS pools are sized at import, so the cap must be set before numpy loads
if os.environ.get("MOMAR_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["MOMAR_THREADS"])

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from . import autoencoder as ae_mod
from . import evaluators as ev_mod
from . import mar as mar_mod
from . import pipeline as pl
from . import vq
from .motion import extract_essential, normalize
from .motion import io as mio
from .numerics import make_rng

log = logging.getLogger("momar")

COMMANDS = ("prepare-data", "train-ae", "train-mar", "train-eval", "sample", "edit", "evaluate",
            "diagnose")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

@dataclasses.dataclass
class SampleConfig:
    count: int = 64                 # captions drawn from the test split
    repeats: int = 1                # generations per caption
    caption: str = ""               # overrides the test split when set
    length: int = 60                # frames, used with ``caption``
    ar_iters: int = 10
    cfg_scale: float = 4.5
    steps: int = 0                  # 0 = backend default


@dataclasses.dataclass
class EditConfig:
    source: int = 0                 # index into the test split
    start: int = 0                  # frame span [start, stop)
    stop: int = 16
    caption: str = ""
    ar_iters: int = 10
    cfg_scale: float = 4.5


@dataclasses.dataclass
class EvaluateConfig:
    repeats: int = 20
    pool: int = 32
    mm_repeats: int = 10


@dataclasses.dataclass
class DiagnoseConfig:
    sigma: float = 1.0
    eval_steps: int = 400
    ae_steps: int = 600
    codebook: int = 64


def _mar_fields():
    skip = {"latent_width", "vocab_size"}
    return [f for f in dataclasses.fields(mar_mod.GenConfig) if f.name not in skip]


SECTIONS: dict[str, list] = {
    "data": dataclasses.fields(pl.DataConfig),
    "ae": [f for f in dataclasses.fields(ae_mod.AeConfig) if f.name != "input_width"]
    + list(dataclasses.fields(ae_mod.AeTrainConfig)),
    "mar": _mar_fields() + list(dataclasses.fields(mar_mod.MarTrainConfig)),
    "eval": [f for f in dataclasses.fields(ev_mod.EvalConfig) if f.name not in ("input_width", "vocab_size")]
    + list(dataclasses.fields(ev_mod.EvalTrainConfig)),
    "sample": dataclasses.fields(SampleConfig),
    "edit": dataclasses.fields(EditConfig),
    "evaluate": dataclasses.fields(EvaluateConfig),
    "diagnose": dataclasses.fields(DiagnoseConfig),
}
# keys filled from the named preset unless set explicitly
PRESET_KEYS = ("width", "heads", "mlp_width", "mlp_depth")
EXTRA_KEYS = {"mar": {"preset": "desk", **{k: None for k in PRESET_KEYS}}, "eval": {"dims": "essential"}}


def _defaults() -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for sec, fields in SECTIONS.items():
        vals = {}
        for f in fields:
            if getattr(f, "name", None) is None:
                continue
            if f.default is not dataclasses.MISSING:
                vals[f.name] = f.default
            elif f.default_factory is not dataclasses.MISSING:
                vals[f.name] = f.default_factory()
        vals.update(EXTRA_KEYS.get(sec, {}))
        out[sec] = vals
    return out


def _coerce(sec: str, key: str, raw: str, default: Any):
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False, "1": True, "0": False}[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if sec == "mar" and key in PRESET_KEYS:
            return None if raw.lower() == "none" else int(raw)
        if isinstance(default, float) or default is None:
            return None if raw.lower() == "none" else float(raw)
        if isinstance(default, tuple):
            return tuple(raw.split())
        return raw
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[{sec}] {key}: cannot parse {raw!r}") from exc


def load_config(path: str | None) -> dict[str, dict[str, Any]]:
    """Parse a sectioned ``key = value`` file over the defaults; all problems are reported together."""
    cfg = _defaults()
    if path is None:
        return cfg
    if not Path(path).exists():
        raise FileNotFoundError(path)
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    parser.read(path)
    errors = []
    for sec in parser.sections():
        if sec not in cfg:
            errors.append(f"unknown section [{sec}]")
            continue
        for key, raw in parser.items(sec):
            if key not in cfg[sec]:
                errors.append(f"[{sec}] unknown key {key!r}")
                continue
            try:
                cfg[sec][key] = _coerce(sec, key, raw.strip(), cfg[sec][key])
            except ConfigError as exc:
                errors.append(str(exc))
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def _build(cls, values: dict, **fixed):
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {k: v for k, v in values.items() if k in names}
    kw.update(fixed)
    return cls(**kw)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=list).encode()).hexdigest()


def _file_hash(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(path).as_posix().encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


# ------------------------------------------------------------------ commands

@dataclasses.dataclass
class Run:
    command: str
    cfg: dict
    seed: int
    out: Path
    inputs: dict[str, str]

    def input(self, name: str) -> Path:
        if not self.inputs.get(name):
            raise ConfigError(f"{self.command} needs --{name}")
        p = Path(self.inputs[name])
        if not p.exists():
            raise FileNotFoundError(p)
        return p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_prepare_data(run: Run) -> dict:
    ds = pl.prepare_data(_build(pl.DataConfig, run.cfg["data"]), run.seed)
    pl.save_dataset(run.out, ds)
    return {"sequences": len(ds.motions), "test": len(ds.indices("test"))}


def cmd_train_ae(run: Run) -> dict:
    ds = pl.load_dataset(run.input("data"))
    c = run.cfg["ae"]
    width = ds.stats().layout.width
    model, hist = pl.fit_autoencoder(ds, _build(ae_mod.AeConfig, c, input_width=width),
                                     _build(ae_mod.AeTrainConfig, c), run.seed)
    ae_mod.save_ae(run.out / "ae.ckpt", model)
    (run.out / "losses.txt").write_text("".join(f"{v!r}\n" for v in hist.losses))
    report = pl.ae_report(model, ds)
    _write_json(run.out / "metrics.json", report)
    return {"steps": hist.steps, **report}


def _gen_config(run: Run, vocab_size: int, latent_width: int) -> mar_mod.GenConfig:
    c = dict(run.cfg["mar"])
    base = mar_mod.PRESETS[c["preset"]] if c["preset"] in mar_mod.PRESETS else None
    if base is None:
        raise ConfigError(f"unknown preset {c['preset']!r}")
    for k in PRESET_KEYS:
        if c[k] is None:
            c[k] = base[k]
    return _build(mar_mod.GenConfig, c, vocab_size=vocab_size, latent_width=latent_width)


def cmd_train_mar(run: Run) -> dict:
    ds = pl.load_dataset(run.input("data"))
    ae = ae_mod.load_ae(run.input("ae"))
    config = _gen_config(run, len(ds.vocab()), ae.config.latent_width)
    model, stats, hist = pl.fit_generator(ds, ae, config, _build(mar_mod.MarTrainConfig, run.cfg["mar"]),
                                          run.seed)
    mar_mod.save_mar(run.out / "mar.ckpt", model, stats)
    (run.out / "losses.txt").write_text("".join(f"{v!r}\n" for v in hist.losses))
    n = max(1, len(hist.losses) // 10)
    return {"steps": len(hist.losses), "loss_first": float(np.mean(hist.losses[:n])),
            "loss_last": float(np.mean(hist.losses[-n:]))}


def cmd_train_eval(run: Run) -> dict:
    ds = pl.load_dataset(run.input("data"))
    c = run.cfg["eval"]
    dims = c["dims"]
    if dims not in ("essential", "full"):
        raise ConfigError(f"[eval] dims must be essential or full, got {dims!r}")
    width = ds.stats(dims).layout.width
    config = _build(ev_mod.EvalConfig, c, input_width=width, vocab_size=len(ds.vocab()))
    model, losses = pl.fit_evaluator(ds, config, _build(ev_mod.EvalTrainConfig, c), run.seed, dims)
    ev_mod.save_evaluator(run.out / "evaluator.ckpt", model)
    (run.out / "losses.txt").write_text("".join(f"{v!r}\n" for v in losses))
    test = ds.normalized("test", dims)
    m = model.embed_motions([s.frames for s in test])
    t = model.embed_texts(ds.vocab(), ds.split_captions("test"))
    pool = min(32, len(test))
    r = ev_mod.r_precision(m, t, make_rng(run.seed, "eval", "gt"), pool=pool)
    report = {"dims": dims, "gt_r1": float(r[0]), "gt_r3": float(r[2]),
              "matched_cos": float(np.mean(np.sum(m * t, axis=1))),
              "mismatched_cos": float(np.mean(m @ t.T))}
    _write_json(run.out / "metrics.json", report)
    return report


def _sampling_kwargs(c: dict, steps: int | None = None) -> dict:
    kw = {"K": c["ar_iters"], "cfg_scale": c["cfg_scale"]}
    if steps:
        kw["steps"] = steps
    return kw


def cmd_sample(run: Run) -> dict:
    ds = pl.load_dataset(run.input("data"))
    ae = ae_mod.load_ae(run.input("ae"))
    model, stats = mar_mod.load_mar(run.input("mar"))
    c = run.cfg["sample"]
    if c["caption"]:
        jobs = [(c["caption"].split(), c["length"])] * c["count"]
    else:
        test = ds.indices("test")[:c["count"]]
        jobs = [(ds.captions[i], len(ds.motions[i])) for i in test]
    jobs = [j for j in jobs for _ in range(c["repeats"])]
    mdir = run.out / "motions"
    mdir.mkdir(exist_ok=True)
    vocab = ds.vocab()
    records = []
    for i, (cap, n) in enumerate(jobs):
        t0 = time.perf_counter()
        frames = pl.sample_motions(model, stats, ae, vocab, [cap], [n], make_rng(run.seed, "sample", i),
                                   **_sampling_kwargs(c, c["steps"]))[0]
        mio.write_motion(mdir / f"{i:05d}.txt", pl.essential_frames_to_motion(frames, ds))
        records.append({"index": i, "seed": run.seed, "caption": " ".join(cap), "frames": n,
                        "K": c["ar_iters"], "backend": model.config.backend,
                        "cfg_scale": c["cfg_scale"], "wall_time": time.perf_counter() - t0})
    with open(run.out / "samples.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return {"samples": len(records), "backend": model.config.backend, "cfg_scale": c["cfg_scale"]}


def cmd_edit(run: Run) -> dict:
    ds = pl.load_dataset(run.input("data"))
    ae = ae_mod.load_ae(run.input("ae"))
    model, stats = mar_mod.load_mar(run.input("mar"))
    c = run.cfg["edit"]
    test = ds.indices("test")
    if not 0 <= c["source"] < len(test):
        raise ConfigError(f"[edit] source {c['source']} outside test split of {len(test)}")
    idx = test[c["source"]]
    src = normalize(extract_essential(ds.motions[idx]), ds.stats()).frames
    z = stats.scale(ae_mod.encode(ae, src).latents)
    r = ae.config.factor
    # latent span covering the requested frame span
    span = mar_mod.span_mask(len(z), c["start"] // r, min(len(z), -(-c["stop"] // r)))
    caption = c["caption"].split() if c["caption"] else ds.captions[idx]
    t0 = time.perf_counter()
    edited = mar_mod.temporal_edit(model, ds.vocab(), z, span, caption, make_rng(run.seed, "edit"),
                                   **_sampling_kwargs(c))
    frames = ae_mod.decode(ae, stats.unscale(edited), len(src))
    mio.write_motion(run.out / "edited.txt", pl.essential_frames_to_motion(frames, ds))
    mio.write_latents(run.out / "latents_source.txt", z)
    mio.write_latents(run.out / "latents_edited.txt", edited)
    kept = bool(np.array_equal(edited[~span], z[~span]))
    rec = {"seed": run.seed, "caption": " ".join(caption), "span_latents": [int(span.argmax()),
           int(len(span) - span[::-1].argmax())], "K": c["ar_iters"], "backend": model.config.backend,
           "cfg_scale": c["cfg_scale"], "context_preserved": kept, "wall_time": time.perf_counter() - t0}
    (run.out / "samples.jsonl").write_text(json.dumps(rec, sort_keys=True) + "\n")
    return {"context_preserved": kept}


def _read_samples(sample_dir: Path, ds: pl.Dataset):
    recs = [json.loads(line) for line in (sample_dir / "samples.jsonl").read_text().splitlines() if line]
    stats = ds.stats()
    frames = []
    for r in recs:
        m = mio.read_motion(sample_dir / "motions" / f"{r['index']:05d}.txt", ds.layout)
        frames.append(normalize(m, stats).frames)
    return recs, frames


def cmd_evaluate(run: Run) -> dict:
    ds = pl.load_dataset(run.input("data"))
    model = ev_mod.load_evaluator(run.input("eval"))
    c = run.cfg["evaluate"]
    dims = "essential" if model.config.input_width == ds.stats().layout.width else "full"
    real = ds.normalized("test", dims)
    vocab = ds.vocab()
    real_emb = model.embed_motions([m.frames for m in real])
    groups = None
    if run.inputs.get("samples"):
        if dims != "essential":
            raise ConfigError("generated samples carry essential features only; use an essential evaluator")
        recs, frames = _read_samples(run.input("samples"), ds)
        gen_emb = model.embed_motions(frames)
        text_emb = model.embed_texts(vocab, [r["caption"].split() for r in recs])
        by_cap: dict[str, list[int]] = {}
        for i, r in enumerate(recs):
            by_cap.setdefault(r["caption"], []).append(i)
        multi = [v for v in by_cap.values() if len(v) >= 2]
        if multi:
            groups = [gen_emb[v] for v in multi]
    else:
        gen_emb = real_emb
        text_emb = model.embed_texts(vocab, ds.split_captions("test"))
    report = ev_mod.metrics_report(real_emb, gen_emb, text_emb, run.seed, repeats=c["repeats"],
                                   pool=c["pool"], mm_groups=groups)
    _write_json(run.out / "metrics.json", report)
    return {k: report[k] for k in ("fid", "r1", "matching")}


def cmd_diagnose(run: Run) -> dict:
    """Dual-evaluator perturbation study, loss split, and codebook usage."""
    ds = pl.load_dataset(run.input("data"))
    c = run.cfg["diagnose"]
    etrain = ev_mod.EvalTrainConfig(steps=c["eval_steps"])
    full_ev, _ = pl.fit_evaluator(ds, None, etrain, run.seed, "full")
    ess_ev, _ = pl.fit_evaluator(ds, None, etrain, run.seed, "essential")
    test = ds.normalized("test", "full")
    half = len(test) // 2
    grid = [(t, m, c["sigma"]) for t in ("essential", "redundant") for m in ("add_noise", "replace")]
    study = ev_mod.dual_eval_study(full_ev, ess_ev, ds.vocab(), test[:half], test[half:],
                                   ds.split_captions("test")[half:], grid, run.seed,
                                   pool=min(32, len(test) - half))
    rows = [dataclasses.asdict(study.baseline)] + [dataclasses.asdict(cell) for cell in study.cells]
    atrain = ae_mod.AeTrainConfig(steps=c["ae_steps"])
    ae_full, _ = pl.fit_autoencoder(ds, None, atrain, run.seed, "full")
    ae_ess, _ = pl.fit_autoencoder(ds, None, atrain, run.seed, "essential")
    gt = np.concatenate([m.frames for m in test])
    pred = np.concatenate([ae_mod.decode(ae_full, ae_mod.encode(ae_full, m.frames)) for m in test])
    split = vq.loss_decomposition(gt, pred, ds.layout)
    lat_full = [ae_mod.encode(ae_full, m.frames).latents for m in ds.normalized("train", "full")]
    lat_ess = pl.encode_split(ae_ess, ds, "train")
    usage = {"full_dims": pl.codebook_usage(lat_full, c["codebook"], run.seed),
             "essential_dims": pl.codebook_usage(lat_ess, c["codebook"], run.seed)}
    for name, u in usage.items():
        (run.out / f"histogram_{name}.txt").write_text(vq.dump_histogram(np.array(u["counts"])))
    full_inf, ess_inf = study.cell("redundant", "replace").inflation(study.baseline)
    report = {"study": rows, "ordering_holds": study.ordering_holds(),
              "redundant_replace_inflation": {"full": full_inf, "essential": ess_inf},
              "loss_split": dataclasses.asdict(split),
              "codebook": {k: {kk: vv for kk, vv in v.items() if kk != "counts"} for k, v in usage.items()}}
    _write_json(run.out / "report.json", report)
    return {"ordering_holds": report["ordering_holds"], **report["redundant_replace_inflation"]}


HANDLERS: dict[str, Callable[[Run], dict]] = {
    "prepare-data": cmd_prepare_data, "train-ae": cmd_train_ae, "train-mar": cmd_train_mar,
    "train-eval": cmd_train_eval, "sample": cmd_sample, "edit": cmd_edit, "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}
INPUTS = ("data", "ae", "mar", "eval", "samples")
SEEDED = {"prepare-data", "train-ae", "train-mar", "train-eval", "sample", "edit", "diagnose"}


# ------------------------------------------------------------------ driver

def apply_flags(cfg: dict, args: argparse.Namespace) -> None:
    if args.preset is not None:
        cfg["mar"]["preset"] = args.preset
    if args.backend is not None:
        cfg["mar"]["backend"] = args.backend
    if args.cfg_scale is not None:
        cfg["sample"]["cfg_scale"] = cfg["edit"]["cfg_scale"] = args.cfg_scale
    if args.ar_iters is not None:
        cfg["sample"]["ar_iters"] = cfg["edit"]["ar_iters"] = args.ar_iters
    if args.steps is not None:
        # training length for train-* commands, denoising steps for sample
        if args.command == "sample":
            cfg["sample"]["steps"] = args.steps
        else:
            for sec in {"train-ae": "ae", "train-mar": "mar", "train-eval": "eval"}.get(args.command, "").split():
                cfg[sec]["steps"] = args.steps


def execute(command: str, cfg: dict, seed: int, out: Path, inputs: dict[str, str]) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    run = Run(command, cfg, seed, out, {k: v for k, v in inputs.items() if v})
    t0 = time.perf_counter()
    summary = HANDLERS[command](run)
    manifest = {
        "command": command, "seed": seed, "config": cfg, "config_hash": config_hash(cfg),
        "inputs": {k: {"path": str(Path(v).resolve()), "sha256": _file_hash(Path(v))}
                   for k, v in sorted(run.inputs.items())},
        "versions": {"momar": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "summary": summary, "wall_time": time.perf_counter() - t0,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def replay(manifest_path: Path, out: Path) -> dict:
    m = json.loads(Path(manifest_path).read_text())
    inputs = {}
    for k, v in m["inputs"].items():
        p = Path(v["path"])
        if not p.exists():
            raise FileNotFoundError(p)
        if _file_hash(p) != v["sha256"]:
            raise ConfigError(f"input {k} at {p} changed since the manifest was written")
        inputs[k] = str(p)
    cfg = m["config"]
    if config_hash(cfg) != m["config_hash"]:
        raise ConfigError("manifest config does not match its hash")
    return execute(m["command"], _restore_types(cfg), m["seed"], out, inputs)


def _restore_types(cfg: dict) -> dict:
    # JSON turns tuples into lists; put them back so dataclass fields compare equal
    defaults = _defaults()
    return {sec: {k: (tuple(v) if isinstance(defaults[sec].get(k), tuple) else v) for k, v in vals.items()}
            for sec, vals in cfg.items()}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="momar", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="sectioned key = value file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--preset", choices=sorted(mar_mod.PRESETS))
        s.add_argument("--backend", choices=mar_mod.BACKENDS)
        s.add_argument("--cfg-scale", type=float)
        s.add_argument("--steps", type=int)
        s.add_argument("--ar-iters", type=int)
        for inp in INPUTS:
            s.add_argument(f"--{inp}", help=f"{inp} input path")
        s.add_argument("-v", "--verbose", action="store_true")
    r = sub.add_parser("replay", help="re-run a command from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    r.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            manifest = replay(Path(args.manifest), Path(args.out))
        else:
            if args.seed is None and args.command in SEEDED:
                raise ConfigError(f"{args.command} requires --seed")
            cfg = load_config(args.config)
            apply_flags(cfg, args)
            inputs = {k: getattr(args, k) for k in INPUTS}
            manifest = execute(args.command, cfg, args.seed if args.seed is not None else 0,
                               Path(args.out), inputs)
    except FileNotFoundError as exc:
        print(f"momar: missing file: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"momar: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(manifest["summary"], sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
