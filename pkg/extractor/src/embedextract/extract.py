"""Walk an image folder, encode everything, and write the embedding-store
directory (plus an optional candidate-descriptions file).

Labels come from the folder structure when it encodes them: an image
whose first path component under the root matches a listed class name
gets that class's index, anything else gets the unknown label -1.
Undecodable files are skipped with a warning and listed in the manifest
notes so a run is auditable afterwards.
"""

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from capforge import EmbeddingDataset, SplitSpec, save_dataset

from .encoder import (DEFAULT_IMAGE_SIZE, DEFAULT_WIDTH, ENCODER_NAME,
                      ImageEncoder, TextEncoder)

DEFAULT_TEMPLATE = "a photo of a [CLS]"


class ExtractError(Exception):
    """A job that cannot produce a valid dataset directory."""


@dataclass
class ExtractJob:
    image_root: str
    class_names: list[str]
    output_dir: str
    prompt_template: str = DEFAULT_TEMPLATE
    description_prompts: dict[str, list[str]] | None = None
    width: int = DEFAULT_WIDTH
    image_size: int = DEFAULT_IMAGE_SIZE
    augment: bool = False

    def validate(self) -> None:
        if not os.path.isdir(self.image_root):
            raise ExtractError(f"image root {self.image_root!r} is not a directory")
        if not self.class_names:
            raise ExtractError("class list is empty")
        if len(set(self.class_names)) != len(self.class_names):
            raise ExtractError("class names must be unique")
        if "[CLS]" not in self.prompt_template:
            raise ExtractError("prompt template must contain the [CLS] slot")


def build_prompt(template: str, class_name: str) -> str:
    return template.replace("[CLS]", class_name)


def _walk_files(root: str) -> list[str]:
    """Every regular file under root as a sorted relative POSIX path."""
    found = []
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            full = os.path.join(dirpath, name)
            found.append(os.path.relpath(full, root).replace(os.sep, "/"))
    return sorted(found)


def _label_for(rel_path: str, class_index: dict[str, int]) -> int:
    head = rel_path.split("/", 1)[0]
    return class_index.get(head, -1)


def extract(job: ExtractJob) -> EmbeddingDataset:
    """Run the job and return the dataset that was written to disk."""
    job.validate()
    image_encoder = ImageEncoder(job.width, job.image_size)
    text_encoder = TextEncoder(job.width)
    class_index = {name: i for i, name in enumerate(job.class_names)}

    rows, aug_rows, labels, kept, skipped = [], [], [], [], []
    for rel_path in _walk_files(job.image_root):
        full = os.path.join(job.image_root, rel_path)
        try:
            with Image.open(full) as image:
                rows.append(image_encoder.encode(image))
                if job.augment:
                    aug_rows.append(image_encoder.encode_crop(image, rel_path))
        except (UnidentifiedImageError, OSError) as exc:
            warnings.warn(f"skipping unreadable image {rel_path}: {exc}")
            skipped.append(rel_path)
            continue
        labels.append(_label_for(rel_path, class_index))
        kept.append(rel_path)
    if not rows:
        raise ExtractError(f"no decodable images under {job.image_root!r}")

    prompts = [build_prompt(job.prompt_template, name)
               for name in job.class_names]
    text = np.stack([text_encoder.encode(p) for p in prompts])

    ds = EmbeddingDataset(
        n_samples=len(rows),
        n_classes=len(job.class_names),
        dim=job.width,
        image_features=np.stack(rows).astype(np.float32),
        text_features=text.astype(np.float32),
        class_names=list(job.class_names),
        labels=np.asarray(labels, dtype=np.int64),
        splits=SplitSpec(train_unlabeled=np.arange(len(rows), dtype=np.int64)),
        image_features_aug=(np.stack(aug_rows).astype(np.float32)
                            if job.augment else None),
    )
    notes = {
        "encoder": ENCODER_NAME,
        "width": job.width,
        "image_size": job.image_size,
        "crop_policy": "seeded 80% crop" if job.augment else "none",
        "prompt_template": job.prompt_template,
        "source_files": kept,
        "skipped_files": skipped,
    }
    save_dataset(ds, job.output_dir, notes=notes)

    if job.description_prompts is not None:
        entries = []
        for name in job.class_names:
            for prompt in job.description_prompts.get(name, []):
                embedding = text_encoder.encode(prompt)
                entries.append({
                    "class_name": name,
                    "text": prompt,
                    "embedding": [float(np.float32(x)) for x in embedding],
                })
        path = os.path.join(job.output_dir, "descriptions.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(entries, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return ds
