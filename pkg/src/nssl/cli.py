"""Command-line entry point: train, embed, probe, robustness, analyze, curate, flops."""

from __future__ import annotations

import argparse
import dataclasses
import difflib
import hashlib
import json
import os
import sys
import typing
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from . import analysis as AN
from . import augment
from . import container
from . import dataio as D
from . import encoder as E
from . import probe as P
from . import stain
from . import synthetic as S
from . import trainer as T
from .errors import ConfigError, InputError, NumericalError

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2
SEED_ENV = "NSSL_SEED"


class UsageError(InputError):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        if message.startswith("unrecognized arguments"):
            known = [o for a in self._actions for o in a.option_strings]
            for sub in self._subparsers._group_actions if self._subparsers else []:
                for p in getattr(sub, "choices", {}).values():
                    known += [o for a in p._actions for o in a.option_strings]
            hints = []
            for tok in message.split(":", 1)[1].split():
                close = difflib.get_close_matches(tok.split("=")[0], known, n=1)
                if close:
                    hints.append(f"{tok} (did you mean {close[0]}?)")
            if hints:
                message += "; " + ", ".join(hints)
        raise UsageError(message, self.format_usage())


# config resolution -----------------------------------------------------------------


def _type_name(t) -> str:
    return getattr(t, "__name__", str(t))


def _coerce(key: str, value, typ):
    if typ is float and isinstance(value, str):
        # YAML 1.1 reads exponent literals without a dot (1e-08) as strings
        try:
            value = float(value)
        except ValueError:
            pass
    ok = {
        int: isinstance(value, int) and not isinstance(value, bool),
        float: isinstance(value, (int, float)) and not isinstance(value, bool),
        str: isinstance(value, str),
        bool: isinstance(value, bool),
        tuple: isinstance(value, (list, tuple)),
        dict: isinstance(value, dict),
    }.get(typ, True)
    if not ok:
        raise ConfigError(f"config key {key!r} expects {_type_name(typ)}, "
                          f"got {type(value).__name__} {value!r}")
    if typ is float:
        return float(value)
    if typ is tuple:
        return tuple(value)
    return value


def _check_keys(keys, known, where: str) -> None:
    for k in keys:
        if k not in known:
            close = difflib.get_close_matches(k, sorted(known), n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise ConfigError(f"unknown config key {k!r} in {where}{hint}")


def load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping of config keys")
    return doc


def config_resolve(cls, file_values: Optional[dict] = None, flags: Optional[dict] = None,
                   env: Optional[dict] = None):
    """Precedence: flags > file > ``NSSL_SEED`` (seed only) > dataclass defaults."""
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    file_values = dict(file_values or {})
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    _check_keys(file_values, known, "config file")
    _check_keys(flags, known, "flags")
    env = os.environ if env is None else env
    values = {}
    if "seed" in known and env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    for src in (file_values, flags):
        for k, v in src.items():
            values[k] = _coerce(k, v, hints[k])
    return cls(**values)


# run manifest ----------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict = field(default_factory=dict)
    seed: Optional[int] = None
    version: str = __version__
    inputs: dict = field(default_factory=dict)   # path -> sha256
    outputs: list = field(default_factory=list)
    started: str = ""
    finished: str = ""
    exit_code: Optional[int] = None
    error: Optional[str] = None

    def add_input(self, path) -> None:
        if path is None:
            return
        h = hashlib.sha256()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
        self.inputs[str(path)] = h.hexdigest()

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str) + "\n"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write(run: RunManifest, out: Path, name: str, data) -> Path:
    path = out / name
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data, encoding="utf-8")
    run.outputs.append(name)
    return path


# shared inputs -----------------------------------------------------------------------


@dataclass
class Sources:
    ids: list
    patches: np.ndarray            # (n, 60, 60, 3)
    labels: Optional[list] = None
    slides: Optional[list] = None
    report: Optional[D.ExtractionReport] = None
    synthetic: Optional[S.SyntheticSet] = None
    manifest: Optional[D.CellManifest] = None


def _add_data_args(p):
    p.add_argument("--data", help="cell manifest CSV; without it a synthetic set is generated")
    p.add_argument("--synthetic", type=int, default=2000, metavar="N",
                   help="synthetic nuclei to generate when --data is absent (default 2000)")
    p.add_argument("--synthetic-seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None, help="reader/augmentation threads")


def _load_sources(args, run: RunManifest, loader=D.load_image) -> Sources:
    workers = args.workers or 1
    if args.data:
        run.add_input(args.data)
        manifest = D.read_manifest(args.data)
        patches, rep = D.extract_patches(manifest, workers=workers, loader=loader)
        keep = set(rep.cell_ids)
        recs = [r for r in manifest.records if r.cell_id in keep]
        labels = [r.label for r in recs]
        return Sources(rep.cell_ids, patches, labels if all(l is not None for l in labels) else None,
                       [r.slide_id for r in recs], rep, manifest=manifest)
    syn = S.make_dataset(S.SyntheticConfig(n=args.synthetic, seed=args.synthetic_seed))
    ids = [f"syn{i:06d}" for i in range(args.synthetic)]
    labels = [S.CLASS_NAMES[int(l)] for l in syn.labels]
    return Sources(ids, syn.images, labels, ["synthetic"] * len(ids), synthetic=syn)


def _data_config(args) -> dict:
    if args.data:
        return {"data": str(args.data)}
    return {"data": None, "synthetic": args.synthetic, "synthetic_seed": args.synthetic_seed}


def export_branch(cfg: T.TrainConfig) -> str:
    """Downstream encoder: the base encoder for contrastive runs, the EMA teacher for distillation."""
    return "student" if cfg.preset == "mocov3" else "teacher"


def load_encoder(path, branch: Optional[str] = None) -> E.EncoderState:
    buf = Path(path).read_bytes()
    meta, _ = container.loads(buf)
    if meta.get("kind") == "encoder":
        return E.from_bytes(buf)
    state = T.checkpoint_from_bytes(buf)
    branch = branch or export_branch(state.config)
    if branch not in ("student", "teacher"):
        raise ConfigError(f"--branch must be student or teacher, got {branch!r}")
    return getattr(state, branch)


def _embed(enc: E.EncoderState, patches: np.ndarray) -> np.ndarray:
    crops = np.stack([augment.center_crop(p, enc.config.image_size) for p in patches]) if len(patches) \
        else np.zeros((0, enc.config.image_size, enc.config.image_size, 3), np.float32)
    return E.encode(enc, crops)


# commands ------------------------------------------------------------------------------


TRAIN_FLAGS = {
    "preset": ("--preset", str), "encoder": ("--encoder", str), "epochs": ("--epochs", int),
    "steps_per_epoch": ("--steps-per-epoch", int), "batch_size": ("--batch-size", int),
    "base_lr": ("--lr", float), "lr_schedule": ("--lr-schedule", str),
    "weight_decay": ("--weight-decay", float), "warmup_steps": ("--warmup", int),
    "ema_start": ("--ema", float), "ema_end": ("--ema-end", float), "mask_ratio": ("--mask-ratio", float),
    "prototypes": ("--prototypes", int), "temperature": ("--temperature", float),
    "teacher_temp": ("--teacher-temp", float), "kde_kappa": ("--kde-kappa", float),
    "policy": ("--policy", str), "seed": ("--seed", int),
}


def cmd_train(args, run: RunManifest, out: Path) -> int:
    flags = {k: getattr(args, k) for k in TRAIN_FLAGS}
    flags["workers"] = args.workers
    cfg = config_resolve(T.TrainConfig, load_config_file(args.config), flags)
    run.add_input(args.config)
    run.seed = cfg.seed
    run.config = {"train": cfg.to_dict(), "steps": args.steps, "resume": args.resume, **_data_config(args)}
    src = _load_sources(args, run)
    state = None
    if args.resume:
        run.add_input(args.resume)
        state = T.checkpoint_load(args.resume, cfg)
    log_path = out / "train.log"
    if state is None and log_path.exists():
        log_path.unlink()
    state, hist = T.train(cfg, src.patches, log_path=log_path, state=state, stop_after=args.steps)
    run.outputs.append("train.log")
    T.checkpoint_save(state, out / "checkpoint.nssl")
    run.outputs.append("checkpoint.nssl")
    E.save(getattr(state, export_branch(cfg)), out / "encoder.nssl")
    run.outputs.append("encoder.nssl")
    if hist:
        print(f"step {state.step}/{state.total_steps}  loss {hist[-1].loss:.4f}  "
              f"per-dim std {hist[-1].per_dim_std:.4f}")
    return EXIT_OK


def cmd_embed(args, run: RunManifest, out: Path) -> int:
    run.add_input(args.model)
    run.config = {"model": str(args.model), "branch": args.branch, **_data_config(args)}
    enc = load_encoder(args.model, args.branch)
    src = _load_sources(args, run)
    emb = _embed(enc, src.patches)
    D.write_embeddings(out / "embeddings.lemb", D.Embeddings(src.ids, emb))
    run.outputs.append("embeddings.lemb")
    if src.labels is not None:
        D.write_labels(out / "labels.csv", D.LabelTable(src.ids, src.labels, src.slides))
        run.outputs.append("labels.csv")
    if src.report is not None:
        _write(run, out, "excluded.tsv", src.report.to_tsv())
    print(f"embedded {len(src.ids)} cells -> {out / 'embeddings.lemb'} ({emb.shape[1]} dims)")
    return EXIT_OK


def _probe_folds(args, y, slides):
    if args.split == "slide":
        if slides is None:
            raise InputError("--split slide needs a slide_id column in the label table")
        return P.leave_one_slide_out(slides)
    return P.stratified_kfold(y, args.folds, args.seed)


def cmd_probe(args, run: RunManifest, out: Path) -> int:
    run.add_input(args.embeddings)
    run.add_input(args.labels)
    run.add_input(args.counts)
    run.seed = args.seed
    run.config = {k: getattr(args, k) for k in ("embeddings", "labels", "counts", "task", "folds", "split",
                                                 "seed", "lam", "genes")}
    emb = D.read_embeddings(args.embeddings)
    table = D.read_labels(args.labels)
    x = emb.align(table.cell_ids)
    y = np.asarray(table.labels)
    folds = _probe_folds(args, y, table.slides)
    if args.task == "cls":
        report = P.probe_classification(x, y, folds, seed=args.seed)
    else:
        if not args.counts:
            raise InputError("--task reg needs --counts")
        gc = D.load_gene_counts(args.counts)
        counts = gc.align(table.cell_ids)
        slides = table.slides or ["all"] * len(y)
        per_slide = [counts[np.asarray(slides) == s] for s in sorted(set(slides))]
        genes = P.select_target_genes(per_slide, gc.genes, args.genes)
        cols = [gc.genes.index(g) for g in genes]
        report = P.probe_regression(x, counts[:, cols], folds, lam=args.lam)
        report.notes.append("genes: " + ",".join(genes))
    _write(run, out, f"probe_{args.task}.tsv", report.to_tsv())
    if report.notes:
        _write(run, out, f"probe_{args.task}_notes.txt", "\n".join(report.notes) + "\n")
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_robustness(args, run: RunManifest, out: Path) -> int:
    run.add_input(args.model)
    for r in args.references or []:
        run.add_input(r)
    run.seed = args.seed
    run.config = {"model": str(args.model), "branch": args.branch, "references": args.references,
                  "shifts": args.shifts, "k": args.k, "pca_dim": args.pca_dim, "probe": args.probe,
                  "seed": args.seed, **_data_config(args)}
    enc = load_encoder(args.model, args.branch)
    src = _load_sources(args, run)
    names, conditions = [], []
    if args.references:
        for ref_path in args.references:
            ref = stain.prepare_reference(D.load_image(ref_path))

            def normalised(path, ref=ref):
                return stain.normalize_to_reference(D.load_image(path), ref).astype(np.float32)

            if src.manifest is not None:
                patches, rep = D.extract_patches(src.manifest, workers=args.workers or 1, loader=normalised)
                if rep.cell_ids != src.ids:
                    raise InputError("normalised images changed the set of extractable cells")
            else:
                patches = np.stack([stain.normalize_to_reference(p, ref) for p in src.patches]).astype(np.float32)
            names.append(Path(ref_path).name)
            conditions.append(patches)
    else:
        if src.synthetic is None:
            raise InputError("--shifts needs synthetic data; pass --references for a manifest")
        for i in range(args.shifts):
            basis, intensity = S.shifted_basis(args.seed + 1000 + i)
            names.append(f"shift{i}")
            conditions.append(src.synthetic.render(basis, intensity))
    e0 = _embed(enc, src.patches)
    shifted = [_embed(enc, c) for c in conditions]
    rep = AN.shift_metrics(e0, shifted, k=args.k, pca_dim=args.pca_dim, names=names)
    _write(run, out, "shift_report.tsv", rep.to_tsv())
    if args.probe:
        if src.labels is None:
            raise InputError("--probe needs labels in the data")
        y = np.asarray(src.labels)
        folds = P.stratified_kfold(y, 5, args.seed)
        lines = ["condition\tbalanced_accuracy\tsd"]
        for name, e in [("original", e0)] + list(zip(names, shifted)):
            m, sd = P.probe_classification(e, y, folds, seed=args.seed).summary()["balanced_accuracy"]
            lines.append(f"{name}\t{m:.6f}\t{sd:.6f}")
        _write(run, out, "probe_by_condition.tsv", "\n".join(lines) + "\n")
    s = rep.summary()
    print("  ".join(f"{k} {m:.4f} ({sd:.4f})" for k, (m, sd) in s.items()))
    return EXIT_OK


def _normalise_expression(counts: np.ndarray, how: str) -> np.ndarray:
    c = counts.astype(np.float64)
    if how == "log1p_cp10k":
        lib = c.sum(axis=1, keepdims=True)
        return np.log1p(c / np.maximum(lib, 1.0) * 1e4)
    if how == "log1p":
        return np.log1p(c)
    return c


def cmd_analyze(args, run: RunManifest, out: Path) -> int:
    run.add_input(args.embeddings)
    run.add_input(args.counts)
    run.seed = args.seed
    run.config = {k: getattr(args, k) for k in ("embeddings", "counts", "genes", "top", "k", "normalize",
                                                 "permutations", "seed")}
    emb = D.read_embeddings(args.embeddings)
    gc = D.load_gene_counts(args.counts)
    ids = [c for c in gc.cell_ids if c in set(emb.ids)]
    if len(ids) <= args.k:
        raise InputError(f"only {len(ids)} cells shared by embeddings and counts; need more than k={args.k}")
    counts = gc.align(ids)
    if args.genes:
        genes = args.genes.split(",")
        unknown = [g for g in genes if g not in gc.genes]
        if unknown:
            raise InputError(f"unknown gene(s): {', '.join(unknown)}")
    else:
        genes = P.select_target_genes([counts], gc.genes, args.top)
    expr = _normalise_expression(counts, args.normalize)
    graph = AN.knn_graph(emb.align(ids), k=args.k)
    lines = [f"# k\t{args.k}", f"# normalize\t{args.normalize}", "gene\tmorans_i" +
             ("\tp_perm" if args.permutations else "")]
    for g in genes:
        x = expr[:, gc.genes.index(g)]
        try:
            val = AN.morans_i(graph, x)
        except AN.ZeroVariance:
            lines.append(f"{g}\tnan" + ("\tnan" if args.permutations else ""))
            continue
        row = f"{g}\t{val:.6f}"
        if args.permutations:
            null = AN.morans_i_permutation_null(graph, x, args.permutations, args.seed)
            row += f"\t{(1 + np.sum(null >= val)) / (1 + len(null)):.6f}"
        lines.append(row)
    _write(run, out, "morans_i.tsv", "\n".join(lines) + "\n")
    print("\n".join(lines[2:]))
    return EXIT_OK


def cmd_curate(args, run: RunManifest, out: Path) -> int:
    run.add_input(args.embeddings)
    run.seed = args.seed
    run.config = {k: getattr(args, k) for k in ("embeddings", "k", "seed", "restarts")}
    emb = D.read_embeddings(args.embeddings)
    res = AN.kmedoids(emb.data.astype(np.float64), args.k, seed=args.seed, restarts=args.restarts,
                      distance=False)
    chosen = [emb.ids[i] for i in res.medoids]
    _write(run, out, "whitelist.txt", "\n".join(chosen) + "\n")
    members = "\n".join(f"{cid}\t{emb.ids[res.medoids[l]]}" for cid, l in zip(emb.ids, res.labels))
    _write(run, out, "assignments.tsv", "id\tmedoid\n" + members + "\n")
    print(f"{len(chosen)} medoids, total distance {res.cost:.6f}")
    return EXIT_OK


def cmd_flops(args, run: RunManifest, out: Path) -> int:
    over = {"image_size": args.size} if args.size else {}
    cfg = E.preset(args.preset, **over)
    run.config = {"preset": args.preset, "encoder": cfg.to_dict()}
    parts = E.flops_breakdown(cfg)
    total = E.flops_estimate(cfg)
    lines = ["part\tflops"] + [f"{k}\t{v}" for k, v in parts.items()] + [f"total\t{int(total)}"]
    _write(run, out, "flops.tsv", "\n".join(lines) + "\n")
    print(f"{args.preset} @ {cfg.image_size}x{cfg.image_size}: {total / 1e9:.3f} GFLOPs")
    return EXIT_OK


# parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nssl", description="Single-cell SSL toolkit for 40x40 H&E nucleus patches.")
    p.add_argument("--version", action="version", version=f"nssl {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def common(sp):
        sp.add_argument("--out", default="nssl-out", help="output directory (default nssl-out)")

    t = sub.add_parser("train", help="self-supervised pretraining")
    t.add_argument("--config", help="YAML/JSON file of training config keys")
    for key, (flag, typ) in TRAIN_FLAGS.items():
        t.add_argument(flag, dest=key, type=typ, default=None)
    t.add_argument("--steps", type=int, default=None, help="stop after this many global steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    _add_data_args(t)
    common(t)

    e = sub.add_parser("embed", help="write an embedding file for a dataset")
    e.add_argument("--model", required=True, help="encoder.nssl or checkpoint.nssl")
    e.add_argument("--branch", choices=("student", "teacher"), default=None)
    _add_data_args(e)
    common(e)

    pr = sub.add_parser("probe", help="linear probing on frozen embeddings")
    pr.add_argument("--embeddings", required=True)
    pr.add_argument("--labels", required=True, help="CSV with cell_id,label[,slide_id]")
    pr.add_argument("--task", choices=("cls", "reg"), default="cls")
    pr.add_argument("--folds", type=int, default=5)
    pr.add_argument("--split", choices=("kfold", "slide"), default="kfold")
    pr.add_argument("--counts", help="gene counts for --task reg")
    pr.add_argument("--genes", type=int, default=50, help="target genes for --task reg")
    pr.add_argument("--lam", type=float, default=1.0, help="ridge penalty")
    pr.add_argument("--seed", type=int, default=None)
    common(pr)

    r = sub.add_parser("robustness", help="embedding shift under stain normalisation")
    r.add_argument("--model", required=True)
    r.add_argument("--branch", choices=("student", "teacher"), default=None)
    r.add_argument("--references", nargs="+", help="reference stain images")
    r.add_argument("--shifts", type=int, default=5, help="synthetic stain shifts when no references")
    r.add_argument("--k", type=int, default=100)
    r.add_argument("--pca-dim", type=int, default=64)
    r.add_argument("--probe", action="store_true", help="also probe every condition")
    r.add_argument("--seed", type=int, default=None)
    _add_data_args(r)
    common(r)

    a = sub.add_parser("analyze", help="Moran's I of gene expression on the embedding kNN graph")
    a.add_argument("--embeddings", required=True)
    a.add_argument("--counts", required=True)
    a.add_argument("--genes", help="comma-separated gene names (default: top expressed)")
    a.add_argument("--top", type=int, default=50)
    a.add_argument("--k", type=int, default=30)
    a.add_argument("--normalize", choices=("log1p_cp10k", "log1p", "none"), default="log1p_cp10k")
    a.add_argument("--permutations", type=int, default=0)
    a.add_argument("--seed", type=int, default=None)
    common(a)

    c = sub.add_parser("curate", help="k-medoids slide selection")
    c.add_argument("--embeddings", required=True, help="slide-level embedding file")
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--restarts", type=int, default=10)
    c.add_argument("--seed", type=int, default=None)
    common(c)

    f = sub.add_parser("flops", help="forward FLOPs of an encoder preset")
    f.add_argument("--preset", default="vits8", choices=sorted(E.PRESETS))
    f.add_argument("--size", type=int, default=None, help="input side length (default 40)")
    common(f)
    return p


COMMANDS = {"train": cmd_train, "embed": cmd_embed, "probe": cmd_probe, "robustness": cmd_robustness,
            "analyze": cmd_analyze, "curate": cmd_curate, "flops": cmd_flops}


def _default_seed(args) -> None:
    if getattr(args, "seed", "absent") is None and args.command != "train":
        env = os.environ.get(SEED_ENV)
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage + f"nssl: error: {exc}\n")
        return EXIT_INPUT
    out = Path(args.out)
    manifest = RunManifest(args.command, argv, started=_now())
    code = EXIT_OK
    try:
        _default_seed(args)
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            code = COMMANDS[args.command](args, manifest, out)
    except InputError as exc:
        code, manifest.error = EXIT_INPUT, f"{type(exc).__name__}: {exc}"
    except NumericalError as exc:
        code, manifest.error = EXIT_NUMERICAL, f"{type(exc).__name__}: {exc}"
    except OSError as exc:
        code, manifest.error = EXIT_INPUT, f"{type(exc).__name__}: {exc}"
    if manifest.error:
        sys.stderr.write(f"nssl {args.command}: error: {manifest.error}\n")
    manifest.exit_code = code
    manifest.finished = _now()
    if out.is_dir():
        (out / "run_manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
