"""Command-line surface for the pipeline.

Five subcommands cover the stages end to end: ``synth`` (planted
datasets), ``detect`` (mismatch report), ``pseudolabel`` (description
alignment + initial pseudolabels), ``train`` (adapter fine-tuning), and
``eval`` (metrics report + CSV extracts).

Configuration precedence is flags > TOML config file > defaults; every
option can also come from a ``CAPFORGE_``-prefixed environment variable.
Each artifact embeds the effective configuration that produced it.
Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

import csv
import json
import os
import sys
import warnings

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:                      # Python < 3.11
    import tomli as tomllib

from .adapters import AdapterModel, image_embed, load_model, save_model, text_embed
from .alignment import (FileDescriptionProvider, MockDescriptionProvider,
                        PseudolabelSet, build_initial_pl, enhance_mismatched)
from .cluster import row_softmax
from .dataset import load_dataset, make_ssl_split, make_trzsl_split
from .errors import CapError, ValidationError
from .margin import build_margin_state
from .metrics import DEFAULT_ECE_BINS, DEFAULT_THETA_G, full_report
from .mismatch import DEFAULT_GAMMA, MismatchReport, auto_threshold, detect_mismatch
from .synth import SynthSpec, write_synth_dataset
from .trainer import PRESETS, TrainConfig, run_training, write_metric_log


def _status(message: str) -> None:
    click.echo(message, err=True)


def _write_json(doc: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_pairs(text: str | None) -> list[tuple[int, int, float]]:
    """Parse ``a:b:bias[,a:b:bias...]`` confusion-pair syntax."""
    if not text:
        return []
    pairs = []
    for chunk in filter(None, (p.strip() for p in text.split(","))):
        parts = chunk.split(":")
        if len(parts) != 3:
            raise ValidationError(
                f"bad confusion pair {chunk!r}; expected CLASS:CLASS:BIAS")
        try:
            pairs.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise ValidationError(f"bad confusion pair {chunk!r}: {exc}") from exc
    return pairs


def _resolve_t(t: str | None, n_classes: int) -> int:
    if t is None or t == "auto":
        return auto_threshold(n_classes)
    try:
        return int(t)
    except ValueError as exc:
        raise ValidationError(f"--t must be an integer or 'auto', got {t!r}") from exc


def _load_config(ctx: click.Context, param, value):
    if value is None:
        return None
    with open(value, "rb") as fh:
        data = tomllib.load(fh)
    ctx.default_map = dict(ctx.default_map or {})
    for key, section in data.items():
        if isinstance(section, dict):
            merged = dict(ctx.default_map.get(key, {}))
            merged.update(section)
            ctx.default_map[key] = merged
    return value


@click.group(name="capforge")
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              callback=_load_config, expose_value=False, is_eager=True,
              help="TOML config file with one table per subcommand.")
@click.version_option(package_name="capforge")
def cli():
    """Pseudolabeling pipeline over precomputed embeddings."""


@cli.command("synth")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--classes", default=10, show_default=True)
@click.option("--per-class", default=60, show_default=True)
@click.option("--test-per-class", default=20, show_default=True)
@click.option("--dim", default=32, show_default=True)
@click.option("--intra-class-std", default=0.1, show_default=True)
@click.option("--n-mismatch", default=0, show_default=True)
@click.option("--confusion-pairs", default="", show_default=True,
              help="Planted pairs as CLASS:CLASS:BIAS, comma separated.")
@click.option("--aug-noise-std", default=0.05, show_default=True)
@click.option("--n-descriptions", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_synth(out, classes, per_class, test_per_class, dim, intra_class_std,
              n_mismatch, confusion_pairs, aug_noise_std, n_descriptions, seed):
    """Generate a planted synthetic dataset with scoring ground truth."""
    spec = SynthSpec(
        n_classes=classes, per_class=per_class, test_per_class=test_per_class,
        dim=dim, intra_class_std=intra_class_std, n_mismatch=n_mismatch,
        confusion_pairs=_parse_pairs(confusion_pairs),
        aug_noise_std=aug_noise_std, n_descriptions=n_descriptions, seed=seed)
    write_synth_dataset(spec, out)
    effective = {
        "classes": classes, "per_class": per_class,
        "test_per_class": test_per_class, "dim": dim,
        "intra_class_std": intra_class_std, "n_mismatch": n_mismatch,
        "confusion_pairs": confusion_pairs, "aug_noise_std": aug_noise_std,
        "n_descriptions": n_descriptions, "seed": seed,
    }
    _write_json({"command": "synth", "config": effective},
                os.path.join(out, "config.json"))
    _status(f"wrote dataset ({classes} classes, dim {dim}) to {out}")


@cli.command("detect")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--t", default="auto", show_default=True,
              help="Stop threshold: integer or 'auto' (ceil of a tenth of C).")
@click.option("--gamma", default=DEFAULT_GAMMA, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_detect(data, t, gamma, seed, out):
    """Detect concept-mismatched classes and write the report."""
    ds = load_dataset(data)
    t_value = _resolve_t(t, ds.n_classes)
    report = detect_mismatch(ds, t=t_value, seed=seed, gamma=gamma)
    effective = {"data": data, "t": t_value, "gamma": gamma, "seed": seed}
    doc = report.to_json(ds.class_names)
    doc["config"] = effective
    _write_json(doc, out)
    names = [ds.class_names[c] for c in report.y_mm]
    _status(f"t={t_value}; mismatched classes: {report.y_mm} {names}")
    _status(f"wrote report to {out}")


def _provider_from_flags(ds, descriptions, seed):
    if descriptions:
        return FileDescriptionProvider(descriptions)
    return MockDescriptionProvider(ds.dim, seed=seed)


@cli.command("pseudolabel")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--report", "report_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Mismatch report from `detect`; omitted → run detection.")
@click.option("--descriptions", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON candidate descriptions; omitted → mock provider.")
@click.option("--t", default="auto", show_default=True)
@click.option("--n-descriptions", default=5, show_default=True)
@click.option("--k", default=16, show_default=True)
@click.option("--gamma", default=DEFAULT_GAMMA, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def cmd_pseudolabel(data, report_path, descriptions, t, n_descriptions, k,
                    gamma, seed, out):
    """Align mismatched classes with enhanced descriptions and emit the
    initial top-k pseudolabel set."""
    ds = load_dataset(data)
    if report_path:
        with open(report_path, encoding="utf-8") as fh:
            report = MismatchReport.from_json(json.load(fh))
    else:
        report = detect_mismatch(ds, t=_resolve_t(t, ds.n_classes),
                                 seed=seed, gamma=gamma)
    provider = _provider_from_flags(ds, descriptions, seed)
    enhanced = enhance_mismatched(ds, report, provider, n_descriptions, seed=seed)
    pl = build_initial_pl(ds, report, enhanced, k, gamma=gamma)
    effective = {
        "data": data, "report": report_path, "descriptions": descriptions,
        "t": report.t, "n_descriptions": n_descriptions, "k": k,
        "gamma": gamma, "seed": seed,
    }
    doc = pl.to_json()
    doc["enhanced"] = [
        {"class_id": c, "class_name": ds.class_names[c], "text": cand.text,
         "embedding": cand.embedding.tolist()}
        for c, cand in sorted(enhanced.items())
    ]
    doc["config"] = effective
    _write_json(doc, out)
    _status(f"pseudolabeled {len(pl.records)} records "
            f"({len(enhanced)} classes enhanced); wrote {out}")


@cli.command("train")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--pl", "pl_path", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="Pseudolabel JSON from `pseudolabel`; omitted → run the "
                   "detection and alignment stages in-process.")
@click.option("--report", "report_path", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--descriptions", default=None,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--preset", default="default", show_default=True,
              type=click.Choice(sorted(PRESETS)))
@click.option("--paradigm", default="ul", show_default=True,
              type=click.Choice(["ul", "ssl", "trzsl"]))
@click.option("--epochs", default=50, show_default=True)
@click.option("--batch-size", default=32, show_default=True)
@click.option("--lr", default=0.01, show_default=True)
@click.option("--momentum", default=0.9, show_default=True)
@click.option("--weight-decay", default=0.1, show_default=True)
@click.option("--tau", default=None, type=float,
              help="Confidence threshold; default from preset (0.85).")
@click.option("--k", default=16, show_default=True)
@click.option("--margin-scale", default=12.0, show_default=True)
@click.option("--growth-every", default=5, show_default=True)
@click.option("--gamma", default=DEFAULT_GAMMA, show_default=True)
@click.option("--aug-noise-std", default=0.05, show_default=True)
@click.option("--t", default="auto", show_default=True)
@click.option("--n-descriptions", default=5, show_default=True)
@click.option("--make-trzsl-split", "make_trzsl_split_frac", default=None,
              type=float,
              help="Derive a seen/unseen split with this seen fraction "
                   "(e.g. 0.62) before TRZSL training.")
@click.option("--make-ssl-split", "make_ssl_split_n", default=None, type=int,
              help="Derive a labeled split with this many labels per class "
                   "before SSL training.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def cmd_train(data, pl_path, report_path, descriptions, preset, paradigm,
              epochs, batch_size, lr, momentum, weight_decay, tau, k,
              margin_scale, growth_every, gamma, aug_noise_std, t,
              n_descriptions, make_trzsl_split_frac, make_ssl_split_n, seed,
              out_dir):
    """Fine-tune the adapters, writing a checkpoint and the metric log."""
    ds = load_dataset(data)
    if make_trzsl_split_frac is not None:
        ds.splits = make_trzsl_split(ds, make_trzsl_split_frac, seed)
    if make_ssl_split_n is not None:
        ds.splits = make_ssl_split(ds, make_ssl_split_n, seed)

    config = TrainConfig.preset(
        preset, paradigm=paradigm, epochs=epochs, batch_size=batch_size,
        lr=lr, momentum=momentum, weight_decay=weight_decay, k=k,
        margin_scale=margin_scale, growth_every=growth_every, gamma=gamma,
        aug_noise_std=aug_noise_std, seed=seed)
    if tau is not None:
        config.tau = tau
    config.validate()

    if report_path:
        with open(report_path, encoding="utf-8") as fh:
            report = MismatchReport.from_json(json.load(fh))
    else:
        report = detect_mismatch(ds, t=_resolve_t(t, ds.n_classes),
                                 seed=seed, gamma=gamma)
    if pl_path:
        with open(pl_path, encoding="utf-8") as fh:
            pl = PseudolabelSet.from_json(json.load(fh))
    else:
        provider = _provider_from_flags(ds, descriptions, seed)
        enhanced = enhance_mismatched(ds, report, provider, n_descriptions,
                                      seed=seed)
        pl = build_initial_pl(ds, report, enhanced, config.k, gamma=gamma)

    os.makedirs(out_dir, exist_ok=True)
    model, log = run_training(ds, report, pl, config,
                              log_path=os.path.join(out_dir, "metrics.jsonl"))
    save_model(model, os.path.join(out_dir, "model"))
    effective = config.to_json()
    effective.update({"data": data, "pl": pl_path, "report": report_path,
                      "descriptions": descriptions, "preset": preset})
    _write_json({"command": "train", "config": effective, "final": log[-1]},
                os.path.join(out_dir, "summary.json"))
    _status(f"trained {config.epochs} epochs; artifacts in {out_dir}")


def _margin_snapshot(model, ds, tau, margin_scale):
    """Diagnostic margin state from test-split geometry (training-branch
    embeddings, test-set prediction tendencies)."""
    test_idx = ds.splits.test
    feats = image_embed(model, ds.image_features[test_idx].astype(np.float64),
                        "main")
    T = text_embed(model, ds.text_features, training=True)
    probs = row_softmax(model.gamma * (feats @ T.T))
    preds = np.argmax(probs, axis=1)
    confs = probs[np.arange(len(preds)), preds]
    truth = ds.labels[test_idx]
    features_by_class = {c: feats[truth == c] for c in range(ds.n_classes)}
    return build_margin_state(features_by_class, T, list(zip(preds, confs)),
                              tau, ds.n_classes, margin_scale)


@cli.command("eval")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--model", "model_path", default=None,
              type=click.Path(exists=True, file_okay=False),
              help="Checkpoint directory; omitted → untrained (zero-shot) model.")
@click.option("--theta-g", default=DEFAULT_THETA_G, show_default=True)
@click.option("--bins", default=DEFAULT_ECE_BINS, show_default=True)
@click.option("--tau", default=0.85, show_default=True)
@click.option("--margin-scale", default=12.0, show_default=True)
@click.option("--dump-margin", is_flag=True,
              help="Also write the margin-state diagnostic JSON.")
@click.option("--gamma", default=DEFAULT_GAMMA, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def cmd_eval(data, model_path, theta_g, bins, tau, margin_scale, dump_margin,
             gamma, seed, out_dir):
    """Evaluate a checkpoint (or the zero-shot baseline) on the test split."""
    ds = load_dataset(data)
    model = load_model(model_path) if model_path else AdapterModel.init(ds.dim, gamma)
    state = None
    try:
        state = _margin_snapshot(model, ds, tau, margin_scale)
    except CapError as exc:
        warnings.warn(f"margin diagnostics unavailable: {exc}")
    sim = state.sim_matrix if state is not None else None
    report = full_report(model, ds, sim_matrix=sim, theta_g=theta_g,
                         bins=bins, seed=seed)

    os.makedirs(out_dir, exist_ok=True)
    effective = {"data": data, "model": model_path, "theta_g": theta_g,
                 "bins": bins, "tau": tau, "margin_scale": margin_scale,
                 "gamma": gamma, "seed": seed}
    _write_json({"command": "eval", "config": effective,
                 "report": report.to_json()}, os.path.join(out_dir, "report.json"))

    with open(os.path.join(out_dir, "per_class.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "class_name", "accuracy", "pred_count",
                         "cluster_concentration"])
        for c in range(ds.n_classes):
            writer.writerow([c, ds.class_names[c], report.per_class_acc[c],
                             report.pred_counts[c],
                             report.cluster_concentration[c]])

    if report.confidence_histogram:
        with open(os.path.join(out_dir, "histograms.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["group", "bin_lo", "bin_hi", "correct", "incorrect"])
            for entry in report.confidence_histogram:
                label = "|".join(str(c) for c in entry["group"])
                edges = entry["bin_edges"]
                for b in range(len(edges) - 1):
                    writer.writerow([label, edges[b], edges[b + 1],
                                     entry["correct"][b], entry["incorrect"][b]])

    if dump_margin and state is not None:
        _write_json(state.to_json(), os.path.join(out_dir, "margin_state.json"))
    _status(f"overall accuracy {report.overall_acc:.4f}; report in {out_dir}")


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False,
                 auto_envvar_prefix="CAPFORGE")
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except CapError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except Exception as exc:   # noqa: BLE001 — CLI boundary
        click.echo(f"unexpected error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
