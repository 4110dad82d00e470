"""Command-line entry point: ``ksdyn ingest|train|evaluate|gp-table|score``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__, gp
from . import ingest as ing
from . import store
from .core import FeatureTable, Source
from .evaluation import EvalProtocol, EvaluationResult, evaluate, evaluate_gp, gp_trials, prepare_gp
from .gmm import GmmDetector, GmmUserModel, score_probe
from .mahalanobis import MahalanobisDetector, MahalanobisModel
from .report import (
    format_gp_table,
    plot_roc,
    plot_threshold,
    write_roc_csv,
    write_summary_csv,
)
from .synthgen import InvalidSpec, generate_from_file

log = logging.getLogger("ksdyn")

EXIT_OK, EXIT_ALL_FAILED, EXIT_PARSE, EXIT_IO = 0, 1, 2, 3
DETECTORS = ("mahalanobis", "gmm", "gp")
INGEST_FORMATS = ("aalto", "buffalo", "nanglae", "synthetic-spec")


@dataclass
class RunConfig:
    datasets: list[tuple[str, str]] = field(default_factory=list)
    detectors: list[str] = field(default_factory=lambda: ["mahalanobis", "gmm"])
    split: float = 0.7
    impostor_count: int = 5
    mahalanobis_block: int = 1
    gmm_block: int = 10
    gmm_components: int = 2
    gmm_min_rows: int = 10
    skip_unseen: bool = False
    gp_measure: str = "R234A23"
    gp_t: list[float] = field(default_factory=lambda: [1.25])
    gp_k: float = 1.0
    gp_block: int = 700
    gp_rescue: float = gp.DEFAULT_RESCUE
    seed: int = 0
    out: str = "ksdyn-out"

    def protocol(self) -> EvalProtocol:
        return EvalProtocol(self.split, self.impostor_count, 10, self.gp_block, self.gp_k, self.gp_rescue)

    def manifest(self) -> dict:
        cfg = asdict(self)
        cfg["datasets"] = [list(d) for d in self.datasets]
        return {"toolkit": "ksdyn", "version": __version__, "config": cfg, "seeds": {"gmm": self.seed}}

    def run_hash(self) -> str:
        blob = json.dumps(self.manifest(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if "datasets" in data:
            data["datasets"] = [_dataset_pair(d) for d in data["datasets"]]
        if "gp_t" in data and not isinstance(data["gp_t"], list):
            data["gp_t"] = [data["gp_t"]]
        return cls(**data)


def _dataset_pair(d) -> tuple[str, str]:
    if isinstance(d, dict):
        return (d["path"], d.get("format", _guess_tag(d["path"])))
    return (d[0], d[1]) if isinstance(d, (list, tuple)) else (d, _guess_tag(d))


def _guess_tag(path: str) -> str:
    stem = Path(path).stem.lower().replace("-", "").replace("_", "")
    for member in Source:
        if member.value.lower() in stem:
            return member.value
    return Source.SYNTHETIC.value


def _detector(name: str, cfg: RunConfig):
    if name == "mahalanobis":
        return MahalanobisDetector(block=cfg.mahalanobis_block)
    if name == "gmm":
        return GmmDetector(cfg.gmm_components, cfg.seed, cfg.gmm_block, cfg.gmm_min_rows, cfg.skip_unseen)
    raise ValueError(f"unknown detector {name!r}")


def _load_table(path: str, tag: str) -> tuple[FeatureTable, str]:
    source = Source.parse(tag)
    return ing.read_canonical_csv(path, source), source.value


def _warn_gp_fixed_text(tag: str) -> None:
    if not Source.parse(tag).free_text:
        log.warning("Gunetti-Picardi works best with free text; %s is not a free-text dataset", tag)


# -- ingest ------------------------------------------------------------------


def _input_files(path: Path, patterns=("*.csv", "*.txt")) -> list[Path]:
    if path.is_dir():
        files = sorted({p for pat in patterns for p in path.glob(pat)})
        if not files:
            raise FileNotFoundError(f"no input files in {path}")
        return files
    if not path.exists():
        raise FileNotFoundError(str(path))
    return [path]


def cmd_ingest(args) -> int:
    report = ing.ParseReport()
    opts = dict(report=report, pause_cutoff=args.pause_cutoff, keep_negative_ud=args.keep_negative_ud)
    try:
        src = Path(args.input)
        if args.format == "buffalo":
            if not args.manifest:
                print("ingest buffalo needs --manifest", file=sys.stderr)
                return EXIT_PARSE
            task = {"fixed": 0, "free": 1, None: None}[args.task]
            sessions = [int(s) for s in args.sessions.split(",")] if args.sessions else None
            if not src.is_dir():
                raise FileNotFoundError(f"{src} is not a directory")
            table = ing.ingest_buffalo(args.manifest, src, task=task, sessions=sessions, **opts)
        elif args.format == "aalto":
            table = ing.read_aalto_files(_input_files(src), **opts)
        elif args.format == "nanglae":
            table = ing.read_nanglae_files(_input_files(src, ("*.csv",)), **opts)
        else:
            if not src.exists():
                raise FileNotFoundError(str(src))
            table = generate_from_file(src)
            report.rows_emitted = len(table)
        ing.write_canonical_csv(table, args.output)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ing.IngestError, InvalidSpec, ValueError, KeyError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        print(f"parse report: {report}", file=sys.stderr)
        return EXIT_PARSE
    print(f"parse report: {report}")
    print(f"wrote {len(table)} rows for {len(table.subjects)} subjects to {args.output}")
    return EXIT_OK


# -- evaluate ----------------------------------------------------------------


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in text)


def _write_pair(result: EvaluationResult, out: Path, run: str, label: str) -> None:
    stem = f"{_slug(label)}_{_slug(result.dataset)}".lower()
    write_roc_csv(result.pooled, out / f"roc_{stem}.csv", run)
    title = f"{label} / {result.dataset}"
    plot_roc(result.pooled, out / f"roc_{stem}.svg", title, run)
    plot_threshold(result.pooled, out / f"threshold_{stem}.svg", title, run)


def run_evaluate(cfg: RunConfig) -> tuple[list[dict], dict[str, str]]:
    """Evaluate every (detector, dataset) pair and write artifacts under ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    run = cfg.run_hash()
    (out / "run_manifest.json").write_text(
        json.dumps({**cfg.manifest(), "run": run}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    protocol = cfg.protocol()
    summary: list[dict] = []
    failed: dict[str, str] = {}
    for path, tag in cfg.datasets:
        table, tag = _load_table(path, tag)
        for name in cfg.detectors:
            pair = f"{name}/{tag}"
            try:
                if name == "gp":
                    _warn_gp_fixed_text(tag)
                    spec = gp.MeasureSpec.parse(cfg.gp_measure, cfg.gp_t[0])
                    result = evaluate_gp(table, spec, protocol, dataset=tag)
                    label = f"gp-{spec.name}"
                else:
                    result = evaluate(_detector(name, cfg), table, protocol, dataset=tag)
                    label = name
            except (ValueError, KeyError) as exc:
                log.error("%s failed: %s", pair, exc)
                failed[pair] = str(exc)
                continue
            print(result.report())
            _write_pair(result, out, run, label)
            summary.append(result.summary_row())
    write_summary_csv(summary, out / "summary.csv", run)
    return summary, failed


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if args.dataset:
        tags = args.format or []
        cfg.datasets = [(p, tags[i] if i < len(tags) else _guess_tag(p)) for i, p in enumerate(args.dataset)]
    for name in ("split", "impostor_count", "gmm_components", "gp_k", "gp_block", "seed", "out",
                 "gmm_block", "mahalanobis_block", "gp_measure"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if getattr(args, "detector", None):
        cfg.detectors = list(args.detector)
    if getattr(args, "gp_t", None):
        cfg.gp_t = list(args.gp_t)
    if getattr(args, "skip_unseen", False):
        cfg.skip_unseen = True
    return cfg


def _check_paths(cfg: RunConfig) -> str | None:
    if not cfg.datasets:
        return "no datasets given (use --dataset or a config file)"
    for path, tag in cfg.datasets:
        if not Path(path).is_file():
            return f"dataset not found: {path}"
        try:
            Source.parse(tag)
        except ValueError as exc:
            return str(exc)
    return None


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    problem = _check_paths(cfg)
    if problem:
        print(problem, file=sys.stderr)
        return EXIT_IO
    try:
        summary, failed = run_evaluate(cfg)
    except (ing.IngestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not summary:
        print("every detector/dataset pair failed", file=sys.stderr)
        return EXIT_ALL_FAILED
    return EXIT_OK


# -- gp-table ----------------------------------------------------------------


def run_gp_table(cfg: RunConfig, measures=gp.TABLE1_MEASURES) -> list[dict]:
    """FAR/FRR per measure at the k that balances them, best over the t values tried."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    run = cfg.run_hash()
    table, tag = _load_table(*cfg.datasets[0])
    _warn_gp_fixed_text(tag)
    protocol = cfg.protocol()
    specs = [gp.MeasureSpec.parse(m, t) for m in measures for t in cfg.gp_t]
    prepared = prepare_gp(table, protocol, specs)
    detail, best = [], []
    for m in measures:
        candidates = []
        for t in cfg.gp_t:
            trials = gp_trials(prepared, gp.MeasureSpec.parse(m, t), protocol)
            k, far_v, frr_v = trials.operating_point()
            row = {"measure": m, "t": t, "k": k, "far": far_v, "frr": frr_v}
            detail.append(row)
            candidates.append(row)
        best.append(min(candidates, key=lambda r: ((r["far"] + r["frr"]) / 2, abs(r["far"] - r["frr"]), r["t"])))
    for name, rows in (("gp_table_detail.csv", detail), ("gp_table.csv", best)):
        with open(out / name, "w", encoding="utf-8") as fh:
            fh.write(f"# run={run}\n")
            fh.write("measure,t,k,far,frr\n")
            for r in rows:
                fh.write(f"{r['measure']},{r['t']:g},{r['k']:.3f},{r['far']:.6f},{r['frr']:.6f}\n")
    (out / "run_manifest.json").write_text(
        json.dumps({**cfg.manifest(), "run": run}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(format_gp_table(best, tag))
    return best


def cmd_gp_table(args) -> int:
    cfg = _config_from_args(args)
    if not args.gp_t and not (args.config and "gp_t" in json.loads(Path(args.config).read_text())):
        cfg.gp_t = [1.1, 1.25, 1.5]
    problem = _check_paths(cfg)
    if problem:
        print(problem, file=sys.stderr)
        return EXIT_IO
    try:
        run_gp_table(cfg)
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED
    return EXIT_OK


# -- train / score -----------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    problem = _check_paths(cfg)
    if problem:
        print(problem, file=sys.stderr)
        return EXIT_IO
    run = cfg.run_hash()
    table, tag = _load_table(*cfg.datasets[0])
    written = 0
    for name in cfg.detectors:
        if name == "gp":
            _warn_gp_fixed_text(tag)
            specs = [gp.MeasureSpec.parse(cfg.gp_measure, t) for t in cfg.gp_t]
            prepared = prepare_gp(table, cfg.protocol(), specs)
            for subject, profile in prepared.profiles.items():
                store.write_record(args.store, "gp", subject, gp.profile_to_record(profile), run)
                written += 1
            continue
        det = _detector(name, cfg)
        for subject, rows in table.by_subject().items():
            cut = int(cfg.split * len(rows))
            try:
                model = det.fit(rows[:cut])
            except ValueError as exc:
                log.warning("%s/%s not trained: %s", name, subject, exc)
                continue
            store.write_record(args.store, name, subject, model.to_record(), run)
            written += 1
    print(f"wrote {written} profile records to {args.store}")
    return EXIT_OK if written else EXIT_ALL_FAILED


def cmd_score(args) -> int:
    try:
        probe = ing.read_canonical_csv(args.probe)
        records = store.load_detector(args.store, args.detector)
    except (OSError, store.StoreError, ing.IngestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.subject not in records:
        print(f"no {args.detector} profile for {args.subject}", file=sys.stderr)
        return EXIT_PARSE
    rows = list(probe.rows)
    if args.detector == "mahalanobis":
        model = MahalanobisModel.from_record(records[args.subject])
        print(f"score={MahalanobisDetector().score(model, rows):.6f}")
    elif args.detector == "gmm":
        model = GmmUserModel.from_record(records[args.subject])
        print(f"score={score_probe(model, rows):.6f}")
    else:
        gallery = [gp.profile_from_record(r) for r in records.values()]
        spec = gp.MeasureSpec.parse(args.gp_measure or "R234A23", (args.gp_t or [gp.DEFAULT_T])[0])
        decision = gp.authenticate(gp.build_sample(rows), args.subject, gallery, spec,
                                   k=args.gp_k or 1.0)
        print("Accept" if decision else f"Reject({decision.reason.value})")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser, detectors: bool = True) -> None:
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--dataset", action="append", help="canonical feature CSV (repeatable)")
    p.add_argument("--format", action="append",
                   help="dataset tag per --dataset: aalto, buffalo-fixed, buffalo-free, nanglae, synthetic")
    if detectors:
        p.add_argument("--detector", action="append", choices=DETECTORS)
    p.add_argument("--split", type=float)
    p.add_argument("--impostor-count", type=int)
    p.add_argument("--gmm-components", type=int)
    p.add_argument("--gmm-block", type=int, help="rows per GMM probe")
    p.add_argument("--mahalanobis-block", type=int, help="rows per Mahalanobis probe")
    p.add_argument("--skip-unseen", action="store_true", help="GMM: ignore digraphs without a model")
    p.add_argument("--gp-measure", help="GP measure name, e.g. R234A23")
    p.add_argument("--gp-t", type=float, action="append", help="A-measure ratio threshold (repeatable)")
    p.add_argument("--gp-k", type=float)
    p.add_argument("--gp-block", type=int, help="rows per GP sample")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ksdyn", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ksdyn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a raw dataset into the canonical feature CSV")
    p.add_argument("format", choices=INGEST_FORMATS)
    p.add_argument("input", help="raw file or directory (Buffalo: root the manifest paths are relative to)")
    p.add_argument("output", help="canonical CSV to write")
    p.add_argument("--manifest", help="Buffalo manifest CSV: path,subject,session,task,keyboard_condition")
    p.add_argument("--task", choices=("fixed", "free"), help="Buffalo task to keep")
    p.add_argument("--sessions", help="Buffalo sessions to keep, e.g. 0,1")
    p.add_argument("--keep-negative-ud", action="store_true", help="keep rollover rows with UD < 0")
    p.add_argument("--pause-cutoff", type=float, default=10.0, help="drop rows with H or DD above this (s)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("evaluate", help="run detectors over datasets and write ROC/EER reports")
    _add_run_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gp-table", help="FAR/FRR of the nine Gunetti-Picardi measures")
    _add_run_flags(p, detectors=False)
    p.set_defaults(func=cmd_gp_table)

    p = sub.add_parser("train", help="fit per-subject profiles into a profile store")
    _add_run_flags(p)
    p.add_argument("--store", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a probe CSV against a stored profile")
    p.add_argument("--store", required=True)
    p.add_argument("--detector", required=True, choices=DETECTORS)
    p.add_argument("--subject", required=True, help="claimed identity")
    p.add_argument("--probe", required=True, help="canonical CSV holding the probe rows")
    p.add_argument("--gp-measure")
    p.add_argument("--gp-t", type=float, action="append")
    p.add_argument("--gp-k", type=float)
    p.set_defaults(func=cmd_score)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
