"""Command line for the export harness.

Exit codes follow the house convention: 0 ok, 2 config/refusal, 3 I/O,
4 internal. Progress goes to stderr; stdout carries one JSON summary.
"""

from __future__ import annotations

import functools
import json
import sys

import click

from .bundle import TOOL_VERSION, export_subset, train_and_export
from .errors import ModelkitError
from .lenet import ARCHITECTURES
from .quantize import DEFAULT_MARGIN


def _progress(msg: str) -> None:
    click.echo(msg, err=True)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ModelkitError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(exc.exit_code)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(3)
        except click.exceptions.Exit:
            raise
        except click.ClickException:
            raise
        except Exception as exc:  # pragma: no cover - bug guard
            click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
            sys.exit(4)

    return wrapper


@click.group()
@click.version_option(TOOL_VERSION, prog_name="modelkit")
def main() -> None:
    """Train and export interchange-format model bundles."""


@main.command("train-export")
@click.option("--epochs", type=int, default=3, show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--arch", type=click.Choice(sorted(ARCHITECTURES)), default="lenet5",
              show_default=True)
@click.option("--margin", type=float, default=DEFAULT_MARGIN, show_default=True,
              help="Calibration headroom multiplier on observed activation maxima.")
@click.option("--n-val", type=int, default=1000, show_default=True)
@click.option("--n-test", type=int, default=1000, show_default=True)
@click.option("--lr", type=float, default=0.01, show_default=True)
@click.option("--mnist-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory with idx-format image/label files; default is the synthetic corpus.")
@_guarded
def cmd_train_export(epochs, seed, out_dir, arch, margin, n_val, n_test, lr, mnist_dir):
    """Train, quantize, and write a full bundle to --out."""
    bundle = train_and_export(
        epochs, seed, out_dir, arch_name=arch, margin=margin,
        n_val=n_val, n_test=n_test, lr=lr, data_dir=mnist_dir, log=_progress,
    )
    click.echo(json.dumps(bundle.summary, indent=2, sort_keys=True))


@main.command("export-subset")
@click.option("--n-val", type=int, required=True)
@click.option("--n-test", type=int, required=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--mnist-dir", type=click.Path(exists=True, file_okay=False), default=None)
@_guarded
def cmd_export_subset(n_val, n_test, seed, out_dir, mnist_dir):
    """Write val.qds/test.qds slices (pixels pre-quantized) to --out."""
    val_path, test_path = export_subset(
        n_val, n_test, seed, out_dir, data_dir=mnist_dir, log=_progress
    )
    click.echo(json.dumps(
        {"val": str(val_path), "test": str(test_path), "n_val": n_val, "n_test": n_test},
        indent=2, sort_keys=True,
    ))


if __name__ == "__main__":
    main()
