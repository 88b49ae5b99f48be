import numpy as np
import pytest

from tfakit.boxes import BBox
from tfakit.dataset import Annotation, Category, CategoryTable, Dataset, Image, Split

ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_dataset(boxes_by_image, n_classes=2, novel=(), size=(200, 200)):
    """Tiny dataset from {image_id: [(category_id, (x, y, w, h)), ...]}."""
    images, anns, next_id = [], [], 1
    for im_id in sorted(boxes_by_image):
        images.append(Image(im_id, *size))
        for cid, box in boxes_by_image[im_id]:
            anns.append(Annotation(next_id, im_id, cid, BBox(*box)))
            next_id += 1
    cats = tuple(Category(c, f"c{c}", Split.NOVEL if c in novel else Split.BASE)
                 for c in range(1, n_classes + 1))
    return Dataset(tuple(images), tuple(anns), CategoryTable(cats))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
