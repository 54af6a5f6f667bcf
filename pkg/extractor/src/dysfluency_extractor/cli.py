"""The `dysfluency-extract` command."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .extract import batch_extract


@click.command()
@click.option("--manifest", "manifest_path", required=True,
              type=click.Path(exists=True, path_type=Path))
@click.option("--audio-root", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out-root", required=True, type=click.Path(path_type=Path))
@click.option("--model", "model_name", required=True,
              type=click.Choice(["en", "de", "test"]),
              help="English/German ASR encoder, or the offline test encoder.")
@click.option("--layer", type=int, default=None,
              help="Transformer layer to export (default: last hidden state).")
def main(manifest_path, audio_root, out_root, model_name, layer):
    """Export encoder hidden states for every manifest clip as DYSF files."""
    try:
        result = batch_extract(manifest_path, audio_root, out_root, model_name, layer)
    except (ValueError, OSError, RuntimeError) as exc:
        message = " ".join(str(exc).split())
        click.echo(f"error: {type(exc).__name__}: {message}", err=True)
        sys.exit(1)
    click.echo(f"extracted {result.extracted} clips to {out_root}")
    click.echo(f"manifest: {result.manifest_path}")
    for cid, reason in result.failures:
        click.echo(f"failed: {cid}: {reason}", err=True)
    if not result.ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
