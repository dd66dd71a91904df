"""Command-line entry point.

Every run prints one JSON summary on stdout (see :mod:`uselab.schema`);
progress goes to stderr. Exit codes: 0 success, 1 validation error, 2 I/O
error. Options can also come from a YAML config file given with
``--config``: top-level ``seed``/``workers`` plus one mapping per command,
keyed by the command words (``simulate:``, ``curate: {filter: {...}}``).
Flags on the command line win over the config file.
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from uselab import curate, dp, metrics, rir, sfi, twostage
from uselab.audio import derive_stream, read_wav, write_wav
from uselab.degrade import AssetBank, apply_recipe, realize_recipe
from uselab.errors import UselabError, ValidationError
from uselab.schema import summary_schema


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


# --------------------------------------------------------------------------
# simulate


@dataclass
class PipelineConfig:
    root_seed: int
    manifest: Path
    recipe: Path
    out: Path
    noise_bank: Path | None = None
    rir_bank: Path | None = None
    target_kind: str = "shifted_anechoic"
    workers: int = 1
    encoding: str = "float32"
    threshold: float | None = None
    problems: list = field(default_factory=list)

    def validate(self) -> None:
        for name in ("manifest", "recipe"):
            p = getattr(self, name)
            if not p.is_file():
                self.problems.append(f"{name}: file not found: {p}")
        for name in ("noise_bank", "rir_bank"):
            p = getattr(self, name)
            if p is not None and not p.is_dir():
                self.problems.append(f"{name}: directory not found: {p}")
        if self.threshold is not None and not 0 <= self.threshold <= 1:
            self.problems.append(f"threshold: must lie in [0, 1], got {self.threshold}")
        if self.workers < 1:
            self.problems.append(f"workers: must be >= 1, got {self.workers}")
        try:
            rir.Target.parse(self.target_kind)
        except (ValueError, KeyError):
            self.problems.append(f"target_kind: invalid value {self.target_kind!r}")
        if self.problems:
            raise ValidationError("invalid configuration: " + "; ".join(self.problems))


@functools.lru_cache(maxsize=4)
def _load_bank(noise_dir, rir_dir) -> AssetBank:
    def load(d):
        if d is None:
            return {}
        return {p.stem: read_wav(p) for p in sorted(Path(d).glob("*.wav"))}

    return AssetBank(noise=load(noise_dir), rir=load(rir_dir))


def _simulate_item(job):
    entry, root, template, cfg = job
    bank = _load_bank(cfg["noise_bank"], cfg["rir_bank"])
    clean = read_wav(Path(root) / entry.path)
    recipe = realize_recipe(template, entry.id, cfg["seed"], bank)
    for step in recipe.steps:
        if step.kind == "reverb":
            step.params.setdefault("target", cfg["target_kind"])
    pair = apply_recipe(clean, recipe, bank, cfg["seed"])
    out = Path(cfg["out"])
    write_wav(pair.input, out / f"{entry.id}_input.wav", cfg["encoding"])
    write_wav(pair.target, out / f"{entry.id}_target.wav", cfg["encoding"])
    meta = dict(pair.metadata)
    meta.update(input=f"{entry.id}_input.wav", target=f"{entry.id}_target.wav", source=entry.source)
    return meta


def cmd_simulate(args):
    _require(args, "manifest", "recipe", "out")
    cfg = PipelineConfig(
        root_seed=args.seed,
        manifest=Path(args.manifest), recipe=Path(args.recipe), out=Path(args.out),
        noise_bank=Path(args.noise_bank) if args.noise_bank else None,
        rir_bank=Path(args.rir_bank) if args.rir_bank else None,
        target_kind=args.target_kind, workers=args.workers, encoding=args.encoding,
    )
    cfg.validate()
    entries = curate.ingest_manifest(cfg.manifest)
    template = json.loads(cfg.recipe.read_text())
    cfg.out.mkdir(parents=True, exist_ok=True)
    shared = {"seed": cfg.root_seed, "out": str(cfg.out), "encoding": cfg.encoding, "target_kind": cfg.target_kind,
              "noise_bank": str(cfg.noise_bank) if cfg.noise_bank else None,
              "rir_bank": str(cfg.rir_bank) if cfg.rir_bank else None}
    root = cfg.manifest.parent
    jobs = [(e, str(root), template, shared) for e in entries]
    if cfg.workers == 1:
        metas = [_simulate_item(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            metas = list(pool.map(_simulate_item, jobs))
    meta_path = cfg.out / "metadata.jsonl"
    with open(meta_path, "w", encoding="utf-8") as fh:
        for m in metas:
            fh.write(json.dumps(m, sort_keys=True) + "\n")
    _log(f"simulated {len(metas)} items into {cfg.out}")
    outputs = [str(cfg.out / m[k]) for m in metas for k in ("input", "target")] + [str(meta_path)]
    digest = hashlib.sha256()
    for p in outputs:
        digest.update(_sha256_file(p).encode())
    return {"count": len(metas), "digest": digest.hexdigest(), "metadata": str(meta_path)}, outputs


# --------------------------------------------------------------------------
# rir / stft / bands


def cmd_rir_decompose(args):
    _require(args, "rir")
    buf = read_wav(args.rir)
    dec = rir.decompose_rir(buf, args.window_ms)
    rec = dec.to_record()
    rec["reconstruction_error"] = float(np.max(np.abs(dec.reconstruct() - buf.samples)))
    outputs = []
    if args.output:
        Path(args.output).write_text(json.dumps(rec, sort_keys=True, indent=2) + "\n")
        outputs.append(args.output)
    return rec, outputs


def cmd_rir_targets(args):
    _require(args, "clean", "rir", "out")
    s = read_wav(args.clean)
    r = read_wav(args.rir)
    dec = rir.decompose_rir(r, args.window_ms)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    y = rir.render_reverberant(s, r)
    write_wav(y, out / "reverberant.wav", args.encoding)
    outputs.append(str(out / "reverberant.wav"))
    targets = {}
    for spec in args.kinds.split(","):
        t = rir.Target.parse(spec.strip())
        name = t.kind.value + (f"_{t.window_ms:g}ms" if t.kind is rir.TargetKind.EARLY_REFLECTED else "")
        path = out / f"target_{name}.wav"
        write_wav(rir.make_target(s, dec, t), path, args.encoding)
        targets[name] = str(path)
        outputs.append(str(path))
    return {"n0": dec.n0, "gain": dec.gain, "targets": targets}, outputs


def cmd_stft(args):
    _require(args, "input", "output")
    grid = sfi.stft(read_wav(args.input))
    sfi.save_grid(grid, args.output)
    p = grid.params
    return {"fs": p.fs, "win_len": p.win_len, "hop_len": p.hop_len, "frames": grid.n_frames, "bins": p.n_bins}, [args.output]


def cmd_istft(args):
    _require(args, "input", "output")
    buf = sfi.istft(sfi.load_grid(args.input))
    write_wav(buf, args.output, args.encoding)
    return {"fs": buf.fs, "samples": len(buf)}, [args.output]


def cmd_bands(args):
    _require(args, "fs")
    return sfi.band_partition(args.fs, args.band_width).to_record(), []


# --------------------------------------------------------------------------
# curate


def _entries_and_scores(args):
    _require(args, "manifest", "scores")
    entries = curate.ingest_manifest(args.manifest)
    return entries, curate.load_scores(args.scores)


def cmd_curate_score(args):
    _require(args, "manifest", "output")
    entries = curate.ingest_manifest(args.manifest)
    scores = curate.score_entries(entries, workers=args.workers, root=Path(args.manifest).parent)
    curate.write_scores([e.id for e in entries], scores, args.output)
    return {"count": len(entries), "scorer": "proxy_percentile_spread"}, [args.output]


def cmd_curate_filter(args):
    entries, scores = _entries_and_scores(args)
    report = curate.filter_by_threshold(entries, scores, args.tau, args.bins)
    outputs = []
    if args.output:
        Path(args.output).write_text(report.to_json() + "\n")
        outputs.append(args.output)
    if args.csv:
        Path(args.csv).write_text(report.histogram_csv())
        outputs.append(args.csv)
    if args.kept_manifest:
        kept = set(report.kept)
        curate.write_manifest([e for e in entries if e.id in kept], args.kept_manifest)
        outputs.append(args.kept_manifest)
    result = {"tau": report.tau, "kept_hours": report.kept_hours, "dropped_hours": report.dropped_hours,
              "total_hours": report.total_hours, "kept_us": report.kept_us, "dropped_us": report.dropped_us,
              "n_kept": len(report.kept), "n_dropped": len(report.dropped),
              "annotations": report.annotations}
    return result, outputs


def cmd_curate_hist(args):
    entries, scores = _entries_and_scores(args)
    report = curate.filter_by_threshold(entries, scores, 0.0, args.bins)
    outputs = []
    if args.csv:
        Path(args.csv).write_text(report.histogram_csv())
        outputs.append(args.csv)
    return {"histograms": {k: v.to_dict() for k, v in report.histograms.items()}}, outputs


# --------------------------------------------------------------------------
# dp


def _model(args) -> dp.DiscreteJointModel:
    name = args.model
    if name == "gaussian":
        return dp.gaussian_model(args.grid)
    if name == "binary":
        return dp.uninformative_model()
    if name == "symmetric-binary":
        return dp.uninformative_model(values=(-1.0, 1.0))
    if name.startswith("file:"):
        return dp.DiscreteJointModel.from_dict(json.loads(Path(name[5:]).read_text()))
    raise ValidationError(f"unknown model {name!r}; use gaussian, binary, symmetric-binary or file:PATH")


def cmd_dp_identity(args):
    return dp.verify_d0_identity(_model(args), args.tol).to_dict(), []


def cmd_dp_curve(args):
    if args.points < 2:
        raise ValidationError("--points must be >= 2")
    pts = dp.dp_curve(_model(args), np.linspace(0.0, 1.0, args.points))
    dist = [q.distortion for q in pts]
    perc = [q.perception for q in pts]
    monotone = all(b >= a - 1e-12 for a, b in zip(dist, dist[1:])) and all(b <= a + 1e-12 for a, b in zip(perc, perc[1:]))
    defects = dp.convexity_defects(pts)
    outputs = []
    if args.csv:
        Path(args.csv).write_text(dp.curve_csv(pts))
        outputs.append(args.csv)
    return {"points": [q.__dict__ for q in pts], "monotone": monotone,
            "min_second_difference": float(defects.min()) if defects.size else 0.0}, outputs


def cmd_dp_sample_mse(args):
    model = _model(args)
    seed = args.seed
    mean, se = dp.posterior_sampling_stats(model, args.samples, derive_stream(seed, b"dp/sample-mse"))
    d_star = dp.mmse_distortion(model)
    return {"sampling_mse": mean, "stderr": se, "D_star": d_star,
            "ratio": mean / d_star if d_star > 0 else None}, []


# --------------------------------------------------------------------------
# twostage


def _load_psd(path, n_bins):
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    data = json.loads(p.read_text())
    return np.asarray(data["psd"] if isinstance(data, dict) else data, dtype=np.float64)


def cmd_twostage_regress(args):
    _require(args, "input", "noise_psd", "output")
    grid = sfi.load_grid(args.input)
    out = twostage.oracle_regression(grid, _load_psd(args.noise_psd, grid.params.n_bins))
    sfi.save_grid(out, args.output)
    return {"frames": out.n_frames, "bins": out.params.n_bins}, [args.output]


def cmd_twostage_fit(args):
    _require(args, "clean", "output")
    corr = twostage.fit_corrector([sfi.load_grid(p) for p in args.clean], args.quantiles)
    corr.save(args.output)
    return {"frames": corr.n_frames, "bins": corr.params.n_bins, "n_quantiles": int(corr.levels.size)}, [args.output]


def cmd_twostage_correct(args):
    _require(args, "input", "corrector", "output")
    res = twostage.transport_correct(sfi.load_grid(args.input), twostage.TransportCorrector.load(args.corrector))
    sfi.save_grid(res.final, args.output)
    outputs = [args.output]
    if args.correction:
        sfi.save_grid(res.correction, args.correction)
        outputs.append(args.correction)
    return {"frames": res.final.n_frames, "bins": res.final.params.n_bins,
            "max_abs_correction": float(np.max(np.abs(res.correction.values)))}, outputs


def cmd_twostage_residual(args):
    _require(args, "clean", "regressed", "final")
    if not (len(args.clean) == len(args.regressed) == len(args.final)):
        raise ValidationError("--clean, --regressed and --final need the same number of files")
    triples = [(sfi.load_grid(c), sfi.load_grid(r), sfi.load_grid(f))
               for c, r, f in zip(args.clean, args.regressed, args.final)]
    per = [twostage.residual_correlation(*t) for t in triples]
    return {"correlation": float(np.mean(per)), "per_utterance": per,
            "reference_value": 0.78, "reference_reproduced": False}, []


def cmd_twostage_lipschitz(args):
    rng = np.random.default_rng(args.seed)
    lo, _, hi = args.depth.partition("-")
    depths = range(int(lo), int(hi or lo) + 1)
    if not depths or min(depths) < 1:
        raise ValidationError("--depth must look like 4 or 1-8")
    violations = 0
    min_slack = math.inf
    total = 0
    for depth in depths:
        stack = twostage.spectral_normalize(
            twostage.LinearLayerStack.random(rng, depth, args.width, args.slope, scale=rng.uniform(0.1, 3.0)), args.iters)
        for _ in range(args.pairs):
            a = rng.standard_normal(args.width)
            b = a + rng.standard_normal(args.width) * 10.0 ** rng.uniform(-6, 1)
            rep = twostage.lipschitz_check(stack, a, b)
            min_slack = min(min_slack, rep.min_slack)
            violations += rep.min_slack < -1e-9
            total += 1
    return {"pairs": total, "violations": int(violations), "min_slack": float(min_slack),
            "depths": list(depths)}, []


# --------------------------------------------------------------------------
# metrics / schema


def cmd_metrics(args):
    if args.pairs:
        outputs = [args.output] if args.output else []
        res = metrics.evaluate_batch(args.pairs, args.output, root=Path(args.pairs).parent)
        return {"count": res["count"], "aggregate": res["aggregate"]}, outputs
    _require(args, "ref", "est")
    row = metrics.evaluate_pair(read_wav(args.ref), read_wav(args.est))
    return {"count": 1, "aggregate": {k: {"mean": v, "std": 0.0} for k, v in row.items()}}, []


def cmd_schema(args):
    return {"schema": summary_schema()}, []


# --------------------------------------------------------------------------
# parser


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="root seed for all random streams (default 0)")
    p.add_argument("--workers", type=int, default=1, help="file-level parallelism")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="uselab", description="Speech-enhancement data and theory toolkit.")
    parser.add_argument("--config", help="YAML config file; command-line flags override it")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    leaves = {}

    def leaf(parent, name, func, path, **kw):
        p = parent.add_parser(name, parents=[common], **kw)
        p.set_defaults(func=func, command_path=path)
        leaves[path] = p
        return p

    p = leaf(sub, "simulate", cmd_simulate, "simulate", help="manifest + recipe template -> degraded pairs")
    p.add_argument("--manifest")
    p.add_argument("--recipe", help="recipe template JSON")
    p.add_argument("--noise-bank")
    p.add_argument("--rir-bank")
    p.add_argument("--out")
    p.add_argument("--target-kind", default="shifted_anechoic")
    p.add_argument("--encoding", default="float32", choices=["float32", "pcm16", "pcm24"])

    rir_p = sub.add_parser("rir", help="RIR decomposition and targets")
    rir_sub = rir_p.add_subparsers(dest="rir_command", parser_class=_Parser, metavar="ACTION")
    p = leaf(rir_sub, "decompose", cmd_rir_decompose, "rir decompose")
    p.add_argument("--rir")
    p.add_argument("--window-ms", type=float, default=rir.DEFAULT_EARLY_WINDOW_MS)
    p.add_argument("--output")
    p = leaf(rir_sub, "targets", cmd_rir_targets, "rir targets")
    p.add_argument("--clean")
    p.add_argument("--rir")
    p.add_argument("--out")
    p.add_argument("--window-ms", type=float, default=rir.DEFAULT_EARLY_WINDOW_MS)
    p.add_argument("--kinds", default="anechoic,shifted_anechoic,early_reflected:50")
    p.add_argument("--encoding", default="float32", choices=["float32", "pcm16", "pcm24"])

    p = leaf(sub, "stft", cmd_stft, "stft")
    p.add_argument("--input")
    p.add_argument("--output")
    p = leaf(sub, "istft", cmd_istft, "istft")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--encoding", default="float32", choices=["float32", "pcm16", "pcm24"])
    p = leaf(sub, "bands", cmd_bands, "bands")
    p.add_argument("--fs", type=int)
    p.add_argument("--band-width", type=float, default=4000.0)

    cur = sub.add_parser("curate", help="quality scoring and filtering")
    cur_sub = cur.add_subparsers(dest="curate_command", parser_class=_Parser, metavar="ACTION")
    p = leaf(cur_sub, "score", cmd_curate_score, "curate score")
    p.add_argument("--manifest")
    p.add_argument("--output")
    p = leaf(cur_sub, "filter", cmd_curate_filter, "curate filter")
    p.add_argument("--manifest")
    p.add_argument("--scores")
    p.add_argument("--tau", type=float, default=0.65)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--output")
    p.add_argument("--csv")
    p.add_argument("--kept-manifest")
    p = leaf(cur_sub, "hist", cmd_curate_hist, "curate hist")
    p.add_argument("--manifest")
    p.add_argument("--scores")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--csv")

    dpp = sub.add_parser("dp", help="distortion-perception numerics")
    dp_sub = dpp.add_subparsers(dest="dp_command", parser_class=_Parser, metavar="ACTION")
    for name, func in (("identity", cmd_dp_identity), ("curve", cmd_dp_curve), ("sample-mse", cmd_dp_sample_mse)):
        p = leaf(dp_sub, name, func, f"dp {name}")
        p.add_argument("--model", default="gaussian")
        p.add_argument("--grid", type=int, default=201)
    leaves["dp identity"].add_argument("--tol", type=float, default=1e-9)
    leaves["dp curve"].add_argument("--points", type=int, default=11)
    leaves["dp curve"].add_argument("--csv")
    leaves["dp sample-mse"].add_argument("--samples", type=int, default=100_000)

    ts = sub.add_parser("twostage", help="regression + transport correction")
    ts_sub = ts.add_subparsers(dest="twostage_command", parser_class=_Parser, metavar="ACTION")
    p = leaf(ts_sub, "regress", cmd_twostage_regress, "twostage regress")
    p.add_argument("--input")
    p.add_argument("--noise-psd", help="JSON list / {\"psd\": [...]} or .npy")
    p.add_argument("--output")
    p = leaf(ts_sub, "fit", cmd_twostage_fit, "twostage fit")
    p.add_argument("--clean", nargs="+")
    p.add_argument("--quantiles", type=int, default=twostage.DEFAULT_QUANTILES)
    p.add_argument("--output")
    p = leaf(ts_sub, "correct", cmd_twostage_correct, "twostage correct")
    p.add_argument("--input")
    p.add_argument("--corrector")
    p.add_argument("--output")
    p.add_argument("--correction")
    p = leaf(ts_sub, "residual-corr", cmd_twostage_residual, "twostage residual-corr")
    p.add_argument("--clean", nargs="+")
    p.add_argument("--regressed", nargs="+")
    p.add_argument("--final", nargs="+")
    p = leaf(ts_sub, "lipschitz", cmd_twostage_lipschitz, "twostage lipschitz")
    p.add_argument("--depth", default="1-8")
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--pairs", type=int, default=1250, help="random pairs per depth")
    p.add_argument("--slope", type=float, default=0.2)
    p.add_argument("--iters", type=int, default=100)

    p = leaf(sub, "metrics", cmd_metrics, "metrics")
    p.add_argument("--ref")
    p.add_argument("--est")
    p.add_argument("--pairs", help="JSONL of {ref_path, est_path}")
    p.add_argument("--output")

    leaf(sub, "schema", cmd_schema, "schema")
    parser.leaves = leaves
    return parser


def _apply_config(parser, path) -> None:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"config {path}: top level must be a mapping")
    top = {k: data[k] for k in ("seed", "workers") if k in data}
    for cmd_path, leaf in parser.leaves.items():
        section = data
        for word in cmd_path.split():
            section = section.get(word, {}) if isinstance(section, dict) else {}
        if not isinstance(section, dict):
            raise ValidationError(f"config {path}: section {cmd_path!r} must be a mapping")
        known = {a.dest for a in leaf._actions}
        defaults = dict(top)
        for key, value in section.items():
            dest = key.replace("-", "_")
            if dest not in known:
                raise ValidationError(f"config {path}: unknown field {cmd_path}.{key}")
            defaults[dest] = value
        leaf.set_defaults(**defaults)


def _emit(summary) -> None:
    sys.stdout.write(json.dumps(summary, sort_keys=True) + "\n")
    sys.stdout.flush()


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = None
    seed = None
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config:
            _apply_config(parser, known.config)
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            raise UsageError(parser.format_usage())
        command, seed = args.command_path, args.seed
        result, outputs = args.func(args)
    except (UselabError, ValueError, KeyError) as exc:
        if isinstance(exc, UsageError):
            _log(str(exc))
        msg = f"missing field {exc}" if isinstance(exc, KeyError) else str(exc)
        _emit({"command": command or "", "status": "error", "seed": seed, "result": {}, "outputs": [],
               "error": {"kind": "validation", "message": msg}})
        return 1
    except OSError as exc:
        _emit({"command": command or "", "status": "error", "seed": seed, "result": {}, "outputs": [],
               "error": {"kind": "io", "message": str(exc)}})
        return 2
    _emit({"command": command, "status": "ok", "seed": seed, "result": result, "outputs": outputs})
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
