"""Command line entry point: ``efc train | predict | evaluate | unknown | synth``.

Exit status: 0 success, 1 validation or metric failure, 2 I/O or
configuration error.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import Counter
from pathlib import Path

import click
import numpy as np

from efc import model_io, preprocess, reporting
from efc.classifier import classify_table, fit_multiclass
from efc.errors import ConfigError, DataFileError, EFCError
from efc.evaluation import cross_validate, unknown_attack_experiment
from efc.schema import (
    SYMBOLIC,
    DatasetSchema,
    RawFlowTable,
    concat_tables,
    load_schema,
    merge_labels,
    parse_merge_rule,
    read_csv,
    save_schema,
    sidecar_path,
    write_csv,
)
from efc.synthesis import generate, load_spec, separable_spec, synthetic_schema, to_continuous

logger = logging.getLogger("efc")

DEFAULT_BINS = 30
DEFAULT_ALPHA = 0.5
DEFAULT_FOLDS = 5


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except EFCError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exc.exit_code)


def _resolve_schema(schema: str | None, input_path: Path) -> DatasetSchema:
    if schema:
        return load_schema(schema)
    side = sidecar_path(input_path)
    if side.exists():
        return load_schema(side)
    raise ConfigError(f"no --schema given and no sidecar {side} next to the input")


def _check_inputs(paths) -> list[Path]:
    out = [Path(p) for p in paths]
    for p in out:
        if not p.is_file():
            raise DataFileError(f"cannot read input {p}: no such file")
    return out


def _load_table(inputs, schema, clip_nonfinite, merges):
    paths = _check_inputs(inputs)
    schema = _resolve_schema(schema, paths[0])
    table = concat_tables([read_csv(p, schema, clip_nonfinite) for p in paths])
    for rule in merges:
        sources, target = parse_merge_rule(rule)
        table = merge_labels(table, sources, target)
    return paths, schema, table


input_opt = click.option("--input", "inputs", multiple=True, required=True,
                         type=click.Path(path_type=Path),
                         help="Labelled flow CSV; repeat to concatenate files.")
schema_opt = click.option("--schema", default=None,
                          help="Builtin profile (cidds001, cicids2017) or JSON sidecar path. "
                               "Defaults to <input>.schema.json.")
bins_opt = click.option("--bins", "Q", type=click.IntRange(min=2), default=DEFAULT_BINS,
                        show_default=True, help="Alphabet size Q.")
alpha_opt = click.option("--alpha", type=click.FloatRange(0, 1, max_open=True),
                         default=DEFAULT_ALPHA, show_default=True, help="Pseudocount weight.")
cap_opt = click.option("--cap", type=click.IntRange(min=1), default=None,
                       help="Undersample training classes larger than this.")
seed_opt = click.option("--seed", type=int, default=0, show_default=True)
clip_opt = click.option("--clip-nonfinite", is_flag=True,
                        help="Replace inf/NaN cells with the column's finite maximum "
                             "instead of rejecting the file.")
merge_opt = click.option("--merge", "merges", multiple=True, metavar="A,B=TARGET",
                         help="Relabel classes A and B as TARGET before use.")
folds_opt = click.option("--folds", type=click.IntRange(min=2), default=DEFAULT_FOLDS,
                         show_default=True)


@click.group(cls=_Group)
@click.option("-v", "--verbose", count=True)
def cli(verbose):
    """Energy-based flow classifier."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@input_opt
@schema_opt
@bins_opt
@alpha_opt
@cap_opt
@seed_opt
@clip_opt
@merge_opt
@click.option("--model", "model_path", type=click.Path(path_type=Path), required=True,
              help="Output .efc model file.")
def train(inputs, schema, Q, alpha, cap, seed, clip_nonfinite, merges, model_path):
    """Fit one model per class and save them."""
    paths, schema, table = _load_table(inputs, schema, clip_nonfinite, merges)
    t0 = time.perf_counter()
    state, disc = preprocess.fit_transform(table, Q)
    if cap is not None:
        disc = preprocess.undersample(disc, cap, seed)
    model = fit_multiclass(disc, alpha, state, {"cap": cap, "seed": seed})
    elapsed = time.perf_counter() - t0
    model_io.save(model, model_path)
    counts = disc.class_counts()
    for c in model.classes:
        click.echo(f"{c.label}\tn={counts[c.label]}\tthreshold={c.threshold:.6f}")
    click.echo(f"trained {len(model.classes)} classes in {elapsed:.2f}s -> {model_path}")
    model_io.write_manifest(
        model_path.with_name(model_path.name + ".manifest.json"), "train",
        {f"input{k}": p for k, p in enumerate(paths)},
        {"schema": schema.name, "bins": Q, "alpha": alpha, "cap": cap, "seed": seed,
         "clip_nonfinite": clip_nonfinite, "merge": list(merges)},
        {"model_sha256": model_io.file_sha256(model_path), "train_seconds": elapsed})


@cli.command()
@click.option("--input", "input_path", type=click.Path(path_type=Path), required=True)
@click.option("--model", "model_path", type=click.Path(path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="Predictions CSV.")
@schema_opt
@clip_opt
@click.option("--emit-energies", is_flag=True, help="Add one energy column per class.")
def predict(input_path, model_path, out, schema, clip_nonfinite, emit_energies):
    """Classify flows with a saved model."""
    _check_inputs([input_path])
    model = model_io.load(model_path)
    if model.preprocessor is None:
        raise ConfigError(f"{model_path} has no preprocessor and cannot read raw CSV input")
    if schema is None and not sidecar_path(input_path).exists():
        feats = [(f.name, f.kind) for f in model.preprocessor.features]
        sch = DatasetSchema.from_columns(feats, "label")
    else:
        sch = _resolve_schema(schema, input_path)
    table = read_csv(input_path, sch, clip_nonfinite, require_labels=False)
    preds = classify_table(table, model)
    has_labels = bool(table.n) and any(table.labels)
    header = ["row", "verdict", "min_energy", "argmin_class"]
    if has_labels:
        header.insert(1, "label")
    if emit_energies:
        header += [f"energy[{l}]" for l in model.labels]
    try:
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r, ev in enumerate(preds):
                row = [r, ev.verdict, repr(ev.min_energy), model.labels[ev.argmin]]
                if has_labels:
                    row.insert(1, table.labels[r])
                if emit_energies:
                    row += [repr(float(e)) for e in ev.energies]
                w.writerow(row)
    except OSError as exc:
        raise DataFileError(f"cannot write {out}: {exc.strerror}") from exc
    counts = Counter(preds.verdicts.tolist())
    click.echo(f"classified {len(preds)} flows -> {out}  {dict(counts)}")
    model_io.write_manifest(out.with_name(out.name + ".manifest.json"), "predict",
                            {"input": input_path, "model": model_path},
                            {"clip_nonfinite": clip_nonfinite, "emit_energies": emit_energies})


@cli.command()
@input_opt
@schema_opt
@bins_opt
@alpha_opt
@cap_opt
@folds_opt
@seed_opt
@clip_opt
@merge_opt
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="Report directory.")
@click.option("--min-macro-f1", type=float, default=None,
              help="Exit with status 1 if the macro F1 falls below this value.")
def evaluate(inputs, schema, Q, alpha, cap, folds, seed, clip_nonfinite, merges, out,
             min_macro_f1):
    """Stratified k-fold cross-validation report."""
    paths, schema, table = _load_table(inputs, schema, clip_nonfinite, merges)
    t0 = time.perf_counter()
    report = cross_validate(table, folds, Q, alpha, cap, seed)
    elapsed = time.perf_counter() - t0
    written = reporting.write_metrics_report(report, out)
    click.echo(reporting.metrics_table(report), nl=False)
    options = {"schema": schema.name, "bins": Q, "alpha": alpha, "cap": cap, "folds": folds,
               "seed": seed, "clip_nonfinite": clip_nonfinite, "merge": list(merges)}
    model_io.write_manifest(out / "manifest.json", "evaluate",
                            {f"input{k}": p for k, p in enumerate(paths)}, options,
                            {"outputs": [p.name for p in written], "seconds": elapsed})
    if min_macro_f1 is not None and report.macro_f1 < min_macro_f1:
        click.echo(f"macro F1 {report.macro_f1:.4f} below required {min_macro_f1}", err=True)
        raise SystemExit(1)


@cli.command()
@input_opt
@schema_opt
@bins_opt
@alpha_opt
@cap_opt
@folds_opt
@seed_opt
@clip_opt
@merge_opt
@click.option("--benign", required=True, help="Label of normal traffic.")
@click.option("--withheld", "withheld", multiple=True,
              help="Attack label to hide from training; repeat for several. "
                   "Default: every non-benign label, one at a time.")
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="Report directory.")
def unknown(inputs, schema, Q, alpha, cap, folds, seed, clip_nonfinite, merges, benign,
            withheld, out):
    """Unknown-attack experiment: withhold each attack class from training."""
    paths, schema, table = _load_table(inputs, schema, clip_nonfinite, merges)
    labels = list(dict.fromkeys(table.labels.tolist()))
    targets = list(withheld) or [l for l in labels if l != benign]
    reports = []
    for label in targets:
        click.echo(f"withholding {label!r} ...")
        reports.append(unknown_attack_experiment(table, label, benign, folds, Q, alpha, cap, seed))
    written = reporting.write_unknown_report(reports, out)
    click.echo(reporting.unknown_table(reports), nl=False)
    options = {"schema": schema.name, "bins": Q, "alpha": alpha, "cap": cap, "folds": folds,
               "seed": seed, "clip_nonfinite": clip_nonfinite, "merge": list(merges),
               "benign": benign, "withheld": targets}
    model_io.write_manifest(out / "manifest.json", "unknown",
                            {f"input{k}": p for k, p in enumerate(paths)}, options,
                            {"outputs": [p.name for p in written]})


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(path_type=Path), default=None,
              help="JSON generator spec. Without it a separable spec is built "
                   "from the options below.")
@click.option("--classes", type=click.IntRange(min=1), default=3, show_default=True)
@click.option("--features", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--bins", "Q", type=click.IntRange(min=2), default=10, show_default=True,
              help="Alphabet size of the generated symbols.")
@click.option("--rows", type=click.IntRange(min=1), default=5000, show_default=True,
              help="Rows per class.")
@seed_opt
@click.option("--continuous", is_flag=True,
              help="Emit real values instead of symbols (exercises the discretizer).")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output CSV.")
def synth(spec_path, classes, features, Q, rows, seed, continuous, out):
    """Write a synthetic labelled flow CSV plus its schema sidecar."""
    if spec_path is not None:
        spec = load_spec(spec_path)
    else:
        spec = separable_spec(classes, features, Q, rows, seed=seed)
    disc = generate(spec)
    # interleave classes so symbolic codes, assigned in order of appearance,
    # follow pooled frequency rather than class order
    disc = disc.take(np.random.default_rng([spec.seed, 1]).permutation(disc.n))
    if continuous:
        table = to_continuous(disc, seed)
    else:
        table = RawFlowTable.from_values(synthetic_schema(disc.m, SYMBOLIC),
                                         disc.symbols.tolist(), disc.labels.tolist())
    write_csv(table, out)
    save_schema(table.schema, sidecar_path(out))
    click.echo(f"wrote {table.n} rows x {table.m} features -> {out}")
    model_io.write_manifest(out.with_name(out.name + ".manifest.json"), "synth",
                            {"spec": spec_path} if spec_path else {},
                            {"classes": len(spec.classes), "features": spec.m, "Q": spec.Q,
                             "seed": spec.seed, "continuous": continuous},
                            {"output_sha256": model_io.file_sha256(out)})


def main():
    cli()


if __name__ == "__main__":
    main()
