"""Command-line surface: validate, synth, train, generate, evaluate,
gradcheck, inspect-graph. Data goes to stdout (or the named output file),
diagnostics to stderr; exit status is nonzero iff the command's contract
failed.
"""

from __future__ import annotations

import json
import sys

import click
import numpy as np

from . import gradcheck as GC
from . import metrics as M
from . import plots
from . import training as TR
from .errors import StoryEndError
from .graphs import graph_to_json, load_corpus, validate_corpus
from .model import StoryEndingModel
from .params import check_shapes, load_checkpoint
from .synthdata import make_synthetic_corpus
from .graphs import write_corpus


def _fail(message, code=1):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Image-guided story ending generation toolkit."""


@main.command()
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False))
def validate(corpus_path):
    """Check every corpus line against the record schema."""
    verdicts = validate_corpus(corpus_path)
    bad = [v for v in verdicts if not v[1]]
    for line_no, ok, message in verdicts:
        if not ok:
            click.echo(f"line {line_no}: {message}", err=True)
    if bad:
        _fail(f"{len(bad)} of {len(verdicts)} records failed validation")
    click.echo(f"{len(verdicts)} records OK")


@main.command()
@click.option("--count", default=20, show_default=True, help="Stories to generate.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def synth(count, seed, out_path):
    """Write a synthetic story corpus as JSON lines."""
    records = make_synthetic_corpus(count, np.random.default_rng(seed))
    write_corpus(out_path, records)
    click.echo(f"wrote {len(records)} records to {out_path}")


@main.command()
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Flat key=value training configuration; defaults used if omitted.")
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(dir_okay=False))
@click.option("--log", "log_path", type=click.Path(dir_okay=False),
              help="CSV metrics log; defaults to <checkpoint>.log.csv.")
@click.option("--curves", "curves_path", type=click.Path(dir_okay=False),
              help="Loss-curve figure; defaults to <checkpoint>.curves.png.")
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
def train(corpus_path, config_path, checkpoint_path, log_path, curves_path, seed):
    """Train a model and write checkpoint, CSV log, and loss curves."""
    try:
        records = load_corpus(corpus_path)
        config = TR.load_config(config_path) if config_path else TR.TrainingConfig()
        if seed is not None:
            config.seed = seed
        log_path = log_path or checkpoint_path + ".log.csv"
        curves_path = curves_path or checkpoint_path + ".curves.png"
        result = TR.train(records, config, log_path=log_path,
                          checkpoint_path=checkpoint_path)
        plots.render_training_curves(log_path, curves_path)
    except StoryEndError as exc:
        _fail(str(exc))
    final = result.history[-1]
    click.echo(f"trained {len(result.history)} steps, final loss {final[1]:.4f} "
               f"(gen {final[2]:.4f}, clf {final[3]:.4f})")
    click.echo(f"checkpoint: {checkpoint_path}")
    click.echo(f"log: {log_path}")
    click.echo(f"curves: {curves_path}")


def _load_model(checkpoint_path):
    params, meta = load_checkpoint(checkpoint_path)
    model = StoryEndingModel.from_checkpoint(params, meta)
    expected = {name: tensor.data.shape for name, tensor in model.params.items()}
    check_shapes(params, expected)
    return model


@main.command()
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--beam", default=3, show_default=True)
@click.option("--max-len", default=25, show_default=True)
@click.option("--diagnostics", is_flag=True,
              help="Attach per-token gate values and top attended nodes.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False),
              help="Write JSON lines here instead of stdout.")
def generate(corpus_path, checkpoint_path, beam, max_len, diagnostics, out_path):
    """Beam-search an ending for every story in the corpus."""
    if beam < 1:
        _fail("--beam must be >= 1")
    try:
        records = load_corpus(corpus_path)
        model = _load_model(checkpoint_path)
        lines = []
        for rec in records:
            out = model.generate(rec, beam_size=beam, max_len=max_len,
                                 diagnostics=diagnostics)
            lines.append(json.dumps(out))
    except StoryEndError as exc:
        _fail(str(exc))
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        click.echo(f"wrote {len(lines)} endings to {out_path}", err=True)
    else:
        for line in lines:
            click.echo(line)


@main.command()
@click.argument("generated_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--report", "report_path", type=click.Path(dir_okay=False),
              help="Write the scores as JSON here.")
@click.option("--figure", "figure_path", type=click.Path(dir_okay=False),
              help="Render a metric bar chart here.")
def evaluate(generated_path, corpus_path, report_path, figure_path):
    """Score generated endings against the gold corpus."""
    try:
        records = {rec.story_id: rec for rec in load_corpus(corpus_path)}
    except StoryEndError as exc:
        _fail(str(exc))
    pairs = []
    with open(generated_path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                _fail(f"{generated_path} line {line_no}: invalid JSON ({exc.msg})")
            story_id = obj.get("story_id")
            if story_id not in records:
                _fail(f"story_id {story_id!r} (line {line_no}) not present in {corpus_path}")
            pairs.append(M.EvalPair(hypothesis=obj["generated_ending"],
                                    references=[records[story_id].ending]))
    if not pairs:
        _fail("no generated endings matched the corpus")
    try:
        scores = M.evaluate_corpus(pairs)
    except StoryEndError as exc:
        _fail(str(exc))
    click.echo(M.format_table(scores))
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            json.dump(scores, fh, indent=2)
            fh.write("\n")
        click.echo(f"report: {report_path}", err=True)
    if figure_path:
        plots.render_metric_bars(scores, figure_path)
        click.echo(f"figure: {figure_path}", err=True)


@main.command()
@click.option("--seed", default=0, show_default=True)
def gradcheck(seed):
    """Finite-difference check of every op plus the micro pipeline."""
    reports = GC.run_suite(seed)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        click.echo(f"{r.name:24s} max rel err {r.max_rel_err:.3e}  {status}")
    if failed:
        _fail(f"{len(failed)} gradient checks failed: "
              + ", ".join(r.name for r in failed))
    click.echo(f"all {len(reports)} gradient checks passed")


@main.command("inspect-graph")
@click.argument("corpus_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--story-id", default=None, help="Defaults to the first record.")
@click.option("--no-cross-modal", is_flag=True, help="Omit the bridge edges.")
def inspect_graph(corpus_path, story_id, no_cross_modal):
    """Emit one story's merged event graph as JSON."""
    from . import tensor as T
    from .graphs import build_semantic_graph, build_visual_graph, merge_graphs

    try:
        records = load_corpus(corpus_path)
    except StoryEndError as exc:
        _fail(str(exc))
    if story_id is not None:
        matches = [r for r in records if r.story_id == story_id]
        if not matches:
            _fail(f"story_id {story_id!r} not found in {corpus_path}")
        record = matches[0]
    else:
        record = records[0]

    # Feature content is irrelevant to graph structure; zeros suffice.
    dim = 4
    token_embeddings = [T.Tensor(np.zeros((len(sent), dim)))
                        for sent in record.sentences]
    semantic, sem_feats = build_semantic_graph(
        record.sentences, record.srl_events, token_embeddings,
        story_id=record.story_id)

    def embed(_label):
        return T.Tensor(np.zeros(dim))

    visual, vis_feats = build_visual_graph(
        record.scene_objects, record.scene_relations, embed, embed, dim=dim)
    merged, _feats = merge_graphs(
        semantic, visual, sem_feats, vis_feats,
        cross_modal_edges=not no_cross_modal)
    click.echo(json.dumps(graph_to_json(merged), indent=2))


if __name__ == "__main__":
    main()
