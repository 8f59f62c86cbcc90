import pytest
from PIL import Image


def write_png(path, color, size=(40, 30)):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.new("RGB", size, color).save(path)


@pytest.fixture()
def three_image_root(tmp_path):
    root = tmp_path / "images"
    write_png(root / "cat" / "a.png", (200, 30, 30))
    write_png(root / "cat" / "b.png", (30, 200, 30), size=(64, 48))
    write_png(root / "dog" / "c.png", (30, 30, 200))
    return root


@pytest.fixture()
def classes_file(tmp_path):
    path = tmp_path / "classes.txt"
    path.write_text("cat\ndog\n")
    return path
