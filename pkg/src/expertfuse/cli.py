"""Command-line driver: gen-data, train, eval, decode, ablate, cost.

Exit codes: 0 on success, 2 on validation errors, 3 when an ablation arm
fails. Options fall back to the key=value --config file, whose keys carry
section prefixes (model., train., data., experts.).
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .data import build_dataset, load_dataset, make_examples
from .decode import generate, rank_closed_ended
from .errors import ConfigError, ContractError
from .harness import (PLAN_KINDS, default_plan, estimate_cost, qa_accuracy,
                      caption_exact_match, final_loss, run_plan)
from .io import read_keyvalues
from .model import FusionModel, ModelConfig, load_model
from .text import CAPTION_PROMPT, DEFAULT_VOCAB, EOS
from .train import TrainConfig, train_loop


def _fields(ctx) -> dict:
    return ctx.obj["fields"]


def validated(fn):
    """Map package validation errors onto exit code 2."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, ContractError, FileNotFoundError) as exc:
            raise click.UsageError(str(exc))

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="key=value config file with model./train./data. sections")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), default="out", show_default=True)
@click.pass_context
def main(ctx, config_path, seed, out):
    """Multi-task expert fusion captioner: data, training, ablations."""
    fields = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise click.UsageError(f"config file not found: {path}")
        fields = read_keyvalues(path)
    ctx.obj = {"fields": fields, "seed": seed, "out": Path(out)}


def _data_field(fields, key, cast, default):
    raw = fields.get(f"data.{key}")
    return default if raw is None else cast(raw)


def _experts_field(fields, key, cast, default):
    raw = fields.get(f"experts.{key}")
    return default if raw is None else cast(raw)


@main.command("gen-data")
@click.option("--n", type=int, default=None, help="number of scenes")
@click.option("--difficulty", type=int, default=None)
@click.option("--size", "image_size", type=int, default=None)
@click.option("--experts", "experts_csv", type=str, default=None,
              help="comma-separated expert kinds to render")
@click.option("--corrupt-kind", type=str, default=None)
@click.option("--corrupt-fraction", type=float, default=None)
@click.pass_context
@validated
def gen_data(ctx, n, difficulty, image_size, experts_csv, corrupt_kind,
             corrupt_fraction):
    """Render a synthetic dataset with expert labels into --out."""
    fields = _fields(ctx)
    n = n if n is not None else _data_field(fields, "n", int, 64)
    difficulty = (difficulty if difficulty is not None
                  else _data_field(fields, "difficulty", int, 1))
    image_size = (image_size if image_size is not None
                  else _data_field(fields, "image_size", int, 64))
    if experts_csv is None:
        experts_csv = _experts_field(fields, "kinds", str, "depth,segmentation")
    kinds = tuple(k for k in experts_csv.split(",") if k)
    corrupt_kind = (corrupt_kind if corrupt_kind is not None
                    else _experts_field(fields, "corrupt_kind", str, "") or None)
    corrupt_fraction = (corrupt_fraction if corrupt_fraction is not None
                        else _experts_field(fields, "corrupt_fraction",
                                            float, 0.0))
    manifest = build_dataset(ctx.obj["out"], n=n, difficulty=difficulty,
                             expert_kinds=kinds, image_size=image_size,
                             seed=ctx.obj["seed"], corrupt_kind=corrupt_kind,
                             corrupt_fraction=corrupt_fraction)
    click.echo(f"wrote {manifest['n']} scenes to {ctx.obj['out']}")


def _model_config(ctx) -> ModelConfig:
    return ModelConfig.from_manifest_fields(_fields(ctx))


def _examples_for(ctx, data_dir, config):
    dataset = load_dataset(data_dir)
    fields = _fields(ctx)
    return make_examples(
        dataset, config,
        corrupt_kind=_experts_field(fields, "corrupt_kind", str, "") or None,
        corrupt_fraction=_experts_field(fields, "corrupt_fraction", float, 0.0),
        view_seed=ctx.obj["seed"])


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.pass_context
@validated
def train(ctx, data_dir):
    """Train a model on a dataset; writes trace.csv and checkpoint/."""
    config = _model_config(ctx)
    train_cfg = TrainConfig.from_manifest_fields(_fields(ctx))
    if "train.seed" not in _fields(ctx):
        train_cfg = TrainConfig.from_manifest_fields(
            {**_fields(ctx), "train.seed": str(ctx.obj["seed"])})
    examples = _examples_for(ctx, data_dir, config)
    model = FusionModel(config, seed=ctx.obj["seed"])
    result = train_loop(model, examples, train_cfg, out_dir=ctx.obj["out"])
    if result.trace:
        click.echo(f"final loss {result.trace[-1][1]:.4f} after "
                   f"{len(result.trace)} steps")
    else:
        click.echo("wrote initialization checkpoint (0 steps)")


@main.command("eval")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--metric", type=click.Choice(["qa-accuracy",
                                             "caption-exact-match",
                                             "final-loss"]),
              default="qa-accuracy", show_default=True)
@click.pass_context
@validated
def eval_cmd(ctx, checkpoint, data_dir, metric):
    """Score a checkpoint on a dataset."""
    model = load_model(Path(checkpoint))
    examples = _examples_for(ctx, data_dir, model.config)
    fn = {"qa-accuracy": qa_accuracy,
          "caption-exact-match": caption_exact_match,
          "final-loss": final_loss}[metric]
    value = fn(model, examples)
    click.echo(f"{metric}={value:.6f}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--index", type=int, default=0, show_default=True,
              help="scene index within the dataset")
@click.option("--beam", type=int, default=3, show_default=True)
@click.option("--max-len", type=int, default=16, show_default=True)
@click.option("--prompt", type=str, default=CAPTION_PROMPT, show_default=True)
@click.option("--question", type=str, default=None,
              help="closed-ended mode: question text")
@click.option("--candidates", type=str, default=None,
              help="closed-ended mode: |-separated answer texts")
@click.pass_context
@validated
def decode(ctx, checkpoint, data_dir, index, beam, max_len, prompt, question,
           candidates):
    """Open-ended generation, or closed-ended ranking with --candidates."""
    model = load_model(Path(checkpoint))
    examples = _examples_for(ctx, data_dir, model.config)
    if not 0 <= index < len(examples):
        raise ConfigError(f"scene index {index} outside [0, {len(examples)})")
    example = examples[index]
    import expertfuse.tensor as T
    with T.no_grad():
        z = model.encoder_forward(example.rgb, example.expert_maps)

    if candidates is not None:
        if question is None:
            raise ConfigError("closed-ended mode needs --question")
        prefix = DEFAULT_VOCAB.encode(question)
        option_ids = [DEFAULT_VOCAB.encode(c.strip())
                      for c in candidates.split("|")]
        best, scores = rank_closed_ended(model, z, prefix, option_ids)
        for i, (text, score) in enumerate(zip(candidates.split("|"), scores)):
            click.echo(json.dumps({"index": i, "candidate": text.strip(),
                                   "score": score, "chosen": i == best}))
        return

    prompt_ids = DEFAULT_VOCAB.encode(prompt) if prompt else np.array([], int)
    result = generate(model, z, prompt_ids, beam=beam, max_len=max_len)
    click.echo(DEFAULT_VOCAB.decode(result.tokens))


@main.command()
@click.option("--plan", "plan_kind", type=click.Choice(PLAN_KINDS),
              required=True)
@click.option("--scenes", type=int, default=600, show_default=True)
@click.option("--steps", type=int, default=300, show_default=True)
@click.option("--n-seeds", type=int, default=3, show_default=True)
@click.option("--difficulty", type=int, default=1, show_default=True)
@click.option("--size", "image_size", type=int, default=32, show_default=True)
@click.pass_context
@validated
def ablate(ctx, plan_kind, scenes, steps, n_seeds, difficulty, image_size):
    """Run one ablation plan; exits 3 if any arm diverges."""
    train_cfg = TrainConfig(peak_lr=3e-3, warmup_steps=min(30, steps // 10),
                            total_steps=steps, batch_size=4)
    plan = default_plan(plan_kind, n_scenes=scenes, difficulty=difficulty,
                        image_size=image_size,
                        seeds=tuple(range(n_seeds)),
                        base_seed=ctx.obj["seed"],
                        train=train_cfg)
    rows = run_plan(plan, ctx.obj["out"])
    failed = [r for r in rows if r.value is None]
    for row in rows:
        shown = "failed" if row.value is None else f"{row.value:.4f}"
        click.echo(f"{row.arm:24s} seed={row.seed} {row.metric}={shown}")
    if failed:
        click.echo(f"{len(failed)} arm runs diverged", err=True)
        sys.exit(3)


@main.command()
@click.option("--tokens", type=int, default=30, show_default=True,
              help="text tokens per example")
@click.option("--examples", "example_count", type=int, default=10000,
              show_default=True)
@click.option("--expert-params", type=int, default=0, show_default=True,
              help="black-box expert ensemble parameters counted in totals")
@click.pass_context
@validated
def cost(ctx, tokens, example_count, expert_params):
    """Parameter counts and flop estimates for the configured model."""
    config = _model_config(ctx)
    estimate = estimate_cost(config, tokens, example_count,
                             expert_params=expert_params)
    click.echo(f"trainable_params={estimate.trainable_params}")
    click.echo(f"total_params={estimate.total_params}")
    share = estimate.trainable_params / max(estimate.total_params, 1)
    click.echo(f"trainable_share={share:.4f}")
    click.echo(f"training_flops={estimate.training_flops:.4e}")
    click.echo(f"inference_flops={estimate.inference_flops:.4e}")


if __name__ == "__main__":
    main()
