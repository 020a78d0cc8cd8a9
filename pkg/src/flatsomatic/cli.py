"""``flatsomatic`` command line.

Every subcommand wraps one library operation, writes its outputs atomically
and leaves a ``<output>.manifest.json`` next to the first output.

Exit codes: 0 ok, 2 parse/input error, 3 empty vocabulary, 4 invalid
configuration, 5 shape mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import data, evaluate, vae
from .errors import ConfigError, FlatsomaticError, ParseError, ShapeError

logger = logging.getLogger("flatsomatic")

DEFAULT_SEED = 42
THREADS_ENV = "FLATSOMATIC_THREADS"


@dataclass
class PipelineConfig:
    """One serializable snapshot of every knob a pipeline run uses.

    ``seed`` is the single global seed; it overrides ``vae.seed``.
    """

    vae: vae.VaeConfig = field(default_factory=vae.VaeConfig)
    min_freq: int = 5
    folds: int = 5
    k: int = 32
    seed: int = DEFAULT_SEED

    def problems(self) -> list[str]:
        out = list(self.vae.problems())
        if self.min_freq < 1:
            out.append(f"min_freq must be >= 1, got {self.min_freq}")
        if self.folds < 2:
            out.append(f"folds must be >= 2, got {self.folds}")
        if self.k < 1:
            out.append(f"k must be >= 1, got {self.k}")
        if self.seed < 0:
            out.append(f"seed must be >= 0, got {self.seed}")
        return out

    def validate(self) -> "PipelineConfig":
        bad = self.problems()
        if bad:
            raise ConfigError(bad)
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "vae"}
        d["vae"] = self.vae.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        vae_cfg = vae.VaeConfig.from_dict(d.pop("vae", {}))
        cfg = cls(vae=vae_cfg, **d)
        return cfg.with_seed(cfg.seed)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=seed, vae=replace(self.vae, seed=seed))


def load_config(path: Optional[str]) -> PipelineConfig:
    if path is None:
        return PipelineConfig().with_seed(DEFAULT_SEED)
    text = _read_bytes(path).decode("utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    try:
        return PipelineConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# input tracking and atomic output


class Run:
    """Tracks input digests and stages outputs until the command succeeds."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, bytes] = {}
        self.config: Optional[dict] = None
        self.started = datetime.now(timezone.utc).isoformat()

    def read(self, path) -> bytes:
        raw = _read_bytes(path)
        self.inputs[str(path)] = hashlib.sha256(raw).hexdigest()
        return raw

    def text(self, path) -> io.StringIO:
        return io.StringIO(self.read(path).decode("utf-8"), newline="")

    def stage(self, path, payload) -> None:
        if path is None:
            return
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        self.outputs[str(path)] = payload

    def commit(self) -> None:
        if not self.outputs:
            return
        first = next(iter(self.outputs))
        manifest = {
            "tool": "flatsomatic",
            "version": __version__,
            "command": self.command,
            "arguments": {k: v for k, v in vars(self.args).items() if k != "func"},
            "config": self.config,
            "inputs": self.inputs,
            "outputs": list(self.outputs),
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(),
        }
        staged = dict(self.outputs)
        staged[first + ".manifest.json"] = (json.dumps(manifest, indent=2) + "\n").encode("utf-8")
        temps = []
        try:
            for path, payload in staged.items():
                temps.append((_write_temp(path, payload), path))
            for tmp, path in temps:
                os.replace(tmp, path)
        except BaseException:
            for tmp, _ in temps:
                if os.path.exists(tmp):
                    os.unlink(tmp)
            raise


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read input: {exc.strerror}", path=path) from None


def _write_temp(path: str, payload: bytes) -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    with os.fdopen(fd, "wb") as fh:
        fh.write(payload)
    return tmp


def _require_inputs(*paths) -> None:
    for p in paths:
        if p is not None and not os.path.exists(p):
            raise ParseError("input path does not exist", path=p)


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, run: Run) -> int:
    ds = data.synth_generate(args.n_samples, args.n_features, args.clusters, args.p_in,
                             args.p_out, args.signature_size, args.seed)
    run.stage(args.out_mutations, data.profiles_to_tsv(ds.profiles))
    buf = io.StringIO()
    data.write_labels_tsv(ds.profiles.labels, buf, ds.profiles.sample_ids)
    run.stage(args.out_labels, buf.getvalue())
    if args.out_response:
        y = data.synth_response_labels(ds.clusters, args.clusters, args.response_flip, args.seed)
        buf = io.StringIO()
        data.write_labels_tsv(dict(zip(ds.profiles.sample_ids, map(str, y))), buf)
        run.stage(args.out_response, buf.getvalue())
    print(f"samples={args.n_samples} features={args.n_features} clusters={args.clusters}")
    return 0


def cmd_build_matrix(args, run: Run) -> int:
    _require_inputs(*args.input)
    samples = []
    for path in args.input:
        try:
            samples.extend(data.parse_mutation_file(run.text(path)).samples)
        except ParseError as exc:
            raise exc.at(path) from None
    profiles = _merge_samples(samples)
    vocab = data.build_vocabulary(profiles, args.min_freq)
    matrix = data.build_matrix(profiles, vocab)
    run.config = {"min_freq": args.min_freq}
    run.stage(args.out, data.matrix_to_bytes(matrix))
    print(f"n={matrix.n_samples}\tm={matrix.n_features}\tnnz={matrix.nnz}\tremoved={vocab.removed}")
    return 0


def _merge_samples(samples) -> data.SomaticProfileSet:
    # a sample spread over several input files is merged into one key set
    merged: dict[str, set] = {}
    for sid, keys in samples:
        merged.setdefault(sid, set()).update(keys)
    return data.SomaticProfileSet(tuple((sid, frozenset(k)) for sid, k in merged.items()))


def _pipeline_config(args) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    overrides = {}
    for flag, key in (("epochs", "epochs"), ("latent_dim", "latent_dim"), ("loss", "loss_kind"),
                      ("batch_size", "batch_size"), ("beta_max", "beta_max"),
                      ("warmup_epochs", "warmup_epochs"), ("dropout", "dropout_rate"),
                      ("l1", "l1_coeff"), ("lr", "learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    units = getattr(args, "encoder_units", None)
    if units is not None:
        overrides["encoder_units"] = tuple(units)
        overrides["decoder_units"] = tuple(reversed(units))
    cfg = replace(cfg, vae=replace(cfg.vae, **overrides))
    if getattr(args, "folds", None) is not None:
        cfg = replace(cfg, folds=args.folds)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.validate()


def _load_matrix(run: Run, path) -> data.OccurrenceMatrix:
    try:
        return data.matrix_from_bytes(run.read(path))
    except ParseError as exc:
        raise exc.at(path) from None


def cmd_train(args, run: Run) -> int:
    _require_inputs(args.matrix, args.config)
    cfg = _pipeline_config(args)
    matrix = _load_matrix(run, args.matrix)
    vcfg = replace(cfg.vae, input_dim=matrix.n_features).validate()
    if vcfg.batch_size > matrix.n_samples:
        raise ConfigError(f"batch_size {vcfg.batch_size} exceeds the {matrix.n_samples} samples")
    run.config = replace(cfg, vae=vcfg).to_dict()
    held = None
    if args.holdout:
        n_held = int(round(args.holdout * matrix.n_samples))
        if not 1 <= n_held < matrix.n_samples:
            raise ConfigError(f"holdout fraction {args.holdout} leaves no train or no held-out rows")
        held = np.sort(data.kfold_split(matrix.n_samples, 2, cfg.seed).folds[0][:n_held])
    model, history = vae.train(matrix, vcfg, validation_indices=held)
    run.stage(args.out, vae.checkpoint_bytes(model))
    run.stage(args.history, history.to_jsonl())
    last = history.records[-1]
    if held is not None:
        print(f"epochs={len(history)}\tval_f1={last.val_f1:.6f}\tval_cosine={last.val_cosine:.6f}")
    else:
        print(f"epochs={len(history)}\trecon_loss={last.recon_loss:.6f}\tkl={last.kl:.6f}")
    return 0


def cmd_embed(args, run: Run) -> int:
    _require_inputs(args.checkpoint, args.matrix)
    try:
        model = vae.model_from_bytes(run.read(args.checkpoint))
    except ParseError as exc:
        raise exc.at(args.checkpoint) from None
    matrix = _load_matrix(run, args.matrix)
    if matrix.n_features != model.input_dim:
        raise ShapeError(f"matrix has shape ({matrix.n_samples}, {matrix.n_features}) "
                         f"but the model expects ({matrix.n_samples}, {model.input_dim})")
    Z = vae.embed(model, matrix)
    buf = io.StringIO()
    evaluate.write_embeddings_tsv(matrix.sample_ids, Z, buf)
    run.stage(args.out, buf.getvalue())
    print(f"n={Z.shape[0]}\td={Z.shape[1]}")
    return 0


def cmd_eval_recon(args, run: Run) -> int:
    _require_inputs(args.matrix, args.config)
    cfg = _pipeline_config(args)
    matrix = _load_matrix(run, args.matrix)
    vcfg = replace(cfg.vae, input_dim=matrix.n_features).validate()
    if cfg.folds > matrix.n_samples:
        raise ShapeError(f"{cfg.folds} folds requested for {matrix.n_samples} samples")
    run.config = replace(cfg, vae=vcfg).to_dict()
    report = evaluate.cross_validate(matrix, vcfg, cfg.folds, cfg.seed)
    run.stage(args.out, report.to_json())
    print(f"f1={report['f1']:.6f}\tprecision={report['precision']:.6f}\t"
          f"recall={report['recall']:.6f}\tcosine={report['cosine']:.6f}")
    return 0


def cmd_pca(args, run: Run) -> int:
    _require_inputs(args.matrix)
    matrix = _load_matrix(run, args.matrix)
    res = evaluate.pca(matrix.dense(), args.dims)
    buf = io.StringIO()
    evaluate.write_embeddings_tsv(matrix.sample_ids, res.projection, buf)
    run.stage(args.out, buf.getvalue())
    ratios = ",".join(f"{r:.6f}" for r in res.explained_variance_ratio)
    print(f"n={matrix.n_samples}\td={args.dims}\texplained_variance_ratio={ratios}")
    return 0


def _read_embeddings(run: Run, path):
    try:
        return evaluate.read_embeddings_tsv(run.text(path))
    except ParseError as exc:
        raise exc.at(path) from None


def _read_labels(run: Run, path) -> dict:
    try:
        return data.parse_labels(run.text(path))
    except ParseError as exc:
        raise exc.at(path) from None


def _aligned_labels(ids, labels: dict, what: str) -> np.ndarray:
    missing = [sid for sid in ids if sid not in labels]
    if missing:
        raise ShapeError(f"{len(missing)} of {len(ids)} {what} rows have no label "
                         f"(first: {missing[0]!r})")
    return np.array([labels[sid] for sid in ids])


def cmd_cluster(args, run: Run) -> int:
    _require_inputs(args.embeddings, args.pca, args.labels)
    ids, Z = _read_embeddings(run, args.embeddings)
    y = _aligned_labels(ids, _read_labels(run, args.labels), "embedding")
    if args.k > len(ids):
        raise ShapeError(f"k={args.k} exceeds the {len(ids)} samples")
    if args.pca:
        pids, P = _read_embeddings(run, args.pca)
        if pids != ids:
            raise ShapeError(f"embeddings ({len(ids)} rows) and PCA projection "
                             f"({len(pids)} rows) list different samples")
        report = evaluate.cluster_compare(Z, P, y, args.k, args.seed, args.restarts)
    else:
        c = evaluate.kmeans(Z, args.k, restarts=args.restarts, seed=args.seed)
        report = evaluate.MetricsReport({"nmi_vae": evaluate.nmi(y, c.assignments)}, [],
                                        {"k": args.k, "seed": args.seed, "restarts": args.restarts,
                                         "dim_vae": Z.shape[1], "inertia": c.inertia})
    run.stage(args.out, report.to_json())
    print("\t".join(f"{k}={v:.6f}" for k, v in report.values.items()))
    return 0


def cmd_classify(args, run: Run) -> int:
    _require_inputs(args.matrix, args.embeddings, args.labels)
    if (args.matrix is None) == (args.embeddings is None):
        raise ConfigError("give exactly one of --matrix or --embeddings")
    if args.matrix:
        matrix = _load_matrix(run, args.matrix)
        ids, X = list(matrix.sample_ids), matrix
    else:
        ids, X = _read_embeddings(run, args.embeddings)
    y = _aligned_labels(ids, _read_labels(run, args.labels), "feature")
    if args.folds > len(ids):
        raise ShapeError(f"{args.folds} folds requested for {len(ids)} samples")
    report = evaluate.classify(X, y, args.folds, args.seed, args.l2, args.iters)
    run.stage(args.out, report.to_json())
    print(f"precision={report['precision']:.6f}\trecall={report['recall']:.6f}\tf1={report['f1']:.6f}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _add_vae_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON pipeline config; flags below override it")
    p.add_argument("--seed", type=int, help=f"global seed (default {DEFAULT_SEED})")
    p.add_argument("--epochs", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--encoder-units", type=int, nargs=2, metavar=("H1", "H2"))
    p.add_argument("--loss", choices=vae.LOSS_KINDS)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--beta-max", type=float)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--l1", type=float)
    p.add_argument("--lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flatsomatic", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a planted-cluster mutation TSV and labels")
    p.add_argument("--out-mutations", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--out-response", help="also write planted binary response labels")
    p.add_argument("--response-flip", type=float, default=0.1)
    p.add_argument("--n-samples", type=int, default=2000)
    p.add_argument("--n-features", type=int, default=5000)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--p-in", type=float, default=0.3)
    p.add_argument("--p-out", type=float, default=0.005)
    p.add_argument("--signature-size", type=int, default=data.SynthParams.signature_size)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-matrix", help="mutation TSV(s) -> FSMX occurrence matrix")
    p.add_argument("--input", required=True, nargs="+")
    p.add_argument("--min-freq", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_matrix)

    p = sub.add_parser("train", help="train a VAE, write an FSOM checkpoint")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="JSON-lines per-epoch history")
    p.add_argument("--holdout", type=float, default=0.0,
                   help="fraction of samples held out for per-epoch validation")
    _add_vae_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="posterior means for every matrix row")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval-recon", help="k-fold cross-validated reconstruction F1")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int)
    _add_vae_overrides(p)
    p.set_defaults(func=cmd_eval_recon)

    p = sub.add_parser("pca", help="PCA projection of the occurrence matrix")
    p.add_argument("--matrix", required=True)
    p.add_argument("--dims", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("cluster", help="k-means + NMI against labels")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--pca", help="PCA projection TSV to compare against")
    p.add_argument("--labels", required=True)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("classify", help="cross-validated logistic classification")
    p.add_argument("--matrix")
    p.add_argument("--embeddings")
    p.add_argument("--labels", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--l2", type=float, default=1e-2)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)
    return parser


def _thread_limit() -> int:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args.command, args)
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=_thread_limit()):
            code = args.func(args, run)
        run.commit()
        return code
    except FlatsomaticError as exc:
        print(f"flatsomatic {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
