import pathlib

import numpy as np
import pytest

from dar_forge import data, zoo
from dar_forge.autodiff import AvgPool2D, Conv2D, Dense, Flatten, MaxPool2D, Model, ReLU

ROOT = pathlib.Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist5k"
TRAIN_CFG = zoo.TrainConfig(epochs=3, lr=0.05, batch_size=16, seed=0)


def random_model(kind, seed, input_shape=(1, 8, 8), num_classes=4, scale=0.5):
    """A small random model exercising one layer kind, with every parameter nonzero."""
    c, h, w = input_shape
    if kind == "conv2d":
        layers = [Conv2D(c, 3, 3, padding=1), Flatten(), Dense(3 * h * w, num_classes)]
    elif kind == "conv2d_stride":
        layers = [Conv2D(c, 2, 3, stride=2, padding=1), Flatten(), Dense(2 * ((h - 1) // 2 + 1) * ((w - 1) // 2 + 1), num_classes)]
    elif kind == "dense":
        layers = [Flatten(), Dense(c * h * w, 6), Dense(6, num_classes)]
    elif kind == "relu":
        layers = [Flatten(), Dense(c * h * w, 6), ReLU(), Dense(6, num_classes)]
    elif kind == "maxpool2d":
        layers = [Conv2D(c, 2, 3, padding=1), MaxPool2D(2), Flatten(), Dense(2 * (h // 2) * (w // 2), num_classes)]
    elif kind == "avgpool2d":
        layers = [Conv2D(c, 2, 3, padding=1), AvgPool2D(2), Flatten(), Dense(2 * (h // 2) * (w // 2), num_classes)]
    elif kind == "flatten":
        layers = [Flatten(), Dense(c * h * w, num_classes)]
    elif kind == "mixed":
        layers = [Conv2D(c, 3, 3, padding=1), ReLU(), MaxPool2D(2), Flatten(),
                  Dense(3 * (h // 2) * (w // 2), 8), ReLU(), Dense(8, num_classes)]
    else:
        raise ValueError(kind)
    model = Model(layers, input_shape, num_classes)
    rng = np.random.default_rng(seed)
    for p in model.params():
        p[...] = rng.normal(0, scale, p.shape)
    return model


@pytest.fixture(scope="session")
def mnist_train():
    return data.load_mnist(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    return data.load_mnist(MNIST_DIR, "t10k")


@pytest.fixture(scope="session")
def trained_models(mnist_train):
    """The canonical triple trained on the bundled MNIST subset."""
    return {spec.name: zoo.train_model(spec, mnist_train, TRAIN_CFG)[0] for spec in zoo.canonical_specs()}


@pytest.fixture(scope="session")
def checkpoint_dir(trained_models, tmp_path_factory):
    d = tmp_path_factory.mktemp("checkpoints")
    for name, model in trained_models.items():
        zoo.save_checkpoint(model, d / f"{name}.darw")
    return d


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
