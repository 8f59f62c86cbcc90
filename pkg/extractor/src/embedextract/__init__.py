"""Image-folder feature extraction into the capforge embedding-store format."""

from .encoder import (DEFAULT_IMAGE_SIZE, DEFAULT_WIDTH, ENCODER_NAME,
                      ImageEncoder, TextEncoder)
from .extract import (DEFAULT_TEMPLATE, ExtractError, ExtractJob,
                      build_prompt, extract)

__all__ = [
    "DEFAULT_IMAGE_SIZE",
    "DEFAULT_TEMPLATE",
    "DEFAULT_WIDTH",
    "ENCODER_NAME",
    "ExtractError",
    "ExtractJob",
    "ImageEncoder",
    "TextEncoder",
    "build_prompt",
    "extract",
]
