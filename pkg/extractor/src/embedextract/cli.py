"""Command-line entry point: `extract --images DIR --classes FILE --out DIR`."""

import json
import sys

import click

from .encoder import DEFAULT_IMAGE_SIZE, DEFAULT_WIDTH
from .extract import DEFAULT_TEMPLATE, ExtractError, ExtractJob, extract


def _read_class_list(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh
                if line.strip() and not line.startswith("#")]


@click.command(name="extract")
@click.option("--images", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="Root folder of images; one subfolder per class labels them.")
@click.option("--classes", "classes_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Text file with one class name per line.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--template", default=DEFAULT_TEMPLATE, show_default=True)
@click.option("--descriptions", default=None,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON object {class name: [description, ...]} to embed "
                   "alongside the dataset.")
@click.option("--width", default=DEFAULT_WIDTH, show_default=True)
@click.option("--image-size", default=DEFAULT_IMAGE_SIZE, show_default=True)
@click.option("--augment/--no-augment", default=False, show_default=True,
              help="Also write a randomized-crop augmented view.")
def cli(images, classes_path, out, template, descriptions, width, image_size,
        augment):
    """Encode an image folder into the embedding-store format."""
    prompts = None
    if descriptions:
        with open(descriptions, encoding="utf-8") as fh:
            prompts = {str(k): [str(v) for v in vs]
                       for k, vs in json.load(fh).items()}
    job = ExtractJob(
        image_root=images, class_names=_read_class_list(classes_path),
        output_dir=out, prompt_template=template,
        description_prompts=prompts, width=width, image_size=image_size,
        augment=augment)
    ds = extract(job)
    click.echo(f"wrote {ds.n_samples} samples x {ds.dim} dims "
               f"({ds.n_classes} classes) to {out}", err=True)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ExtractError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:   # noqa: BLE001 — CLI boundary
        click.echo(f"unexpected error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
