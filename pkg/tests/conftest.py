import shutil
from pathlib import Path

import numpy as np
import pytest

from stonefuse import imaging

FIXTURES = Path(__file__).parent / "fixtures"
SLICE_SIZE = (128, 96)  # width, height


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by a test")


def write_png(path, img):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(imaging.encode_png(img))
    return path


def synth_ct(seed, width=SLICE_SIZE[0], height=SLICE_SIZE[1]):
    """Dark noisy frame with two bright blobs where kidneys would sit."""
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 40, size=(height, width), dtype=np.uint8)
    yy, xx = np.mgrid[0:height, 0:width]
    for cx in (0.27 * width, 0.73 * width):
        blob = ((xx - cx) / (0.12 * width)) ** 2 + ((yy - 0.5 * height) / (0.22 * height)) ** 2 < 1
        img[blob] = rng.integers(120, 200, size=int(blob.sum()), dtype=np.uint8)
    return np.repeat(img[:, :, None], 3, axis=2)


@pytest.fixture(scope="session")
def testset_dir(tmp_path_factory):
    """346-image test set laid out next to its manifest and detection replay."""
    root = tmp_path_factory.mktemp("testset")
    shutil.copy(FIXTURES / "testset_manifest.csv", root / "manifest.csv")
    shutil.copy(FIXTURES / "testset_replay.jsonl", root / "replay.jsonl")
    for line in (root / "manifest.csv").read_text().splitlines()[1:]:
        stem = line.split(",")[0]
        write_png(root / "images" / f"{stem}.png", synth_ct(int(stem[2:6])))
    return root


# --- tiny ONNX models -------------------------------------------------------


def _save_model(graph, path):
    import onnx
    from onnx import helper

    model = helper.make_model(graph, opset_imports=[helper.make_opsetid("", 13)])
    model.ir_version = 8
    onnx.checker.check_model(model)
    onnx.save(model, str(path))
    return Path(path)


def make_classifier_onnx(path, weight=1.0, bias=0.0, side=224, sigmoid=False):
    """Logit = weight * mean(input) + bias, output shape (1, 1)."""
    from onnx import TensorProto, helper

    nodes = [
        helper.make_node("ReduceMean", ["x"], ["m"], axes=[1, 2, 3], keepdims=0),
        helper.make_node("Reshape", ["m", "shape"], ["m2"]),
        helper.make_node("Mul", ["m2", "w"], ["mw"]),
        helper.make_node("Add", ["mw", "b"], ["logit"]),
    ]
    out = "logit"
    if sigmoid:
        nodes.append(helper.make_node("Sigmoid", ["logit"], ["prob"]))
        out = "prob"
    graph = helper.make_graph(
        nodes,
        "classifier",
        [helper.make_tensor_value_info("x", TensorProto.FLOAT, [1, 3, side, side])],
        [helper.make_tensor_value_info(out, TensorProto.FLOAT, [1, 1])],
        initializer=[
            helper.make_tensor("shape", TensorProto.INT64, [2], [1, 1]),
            helper.make_tensor("w", TensorProto.FLOAT, [1, 1], [weight]),
            helper.make_tensor("b", TensorProto.FLOAT, [1, 1], [bias]),
        ],
    )
    return _save_model(graph, path)


def make_detector_onnx(path, rows, side=640, channels_first=True, dynamic=False):
    """Detector emitting the fixed (cx, cy, w, h, score) ``rows`` for any input."""
    from onnx import TensorProto, helper

    rows = np.asarray(rows, dtype=np.float32).reshape(-1, 5)
    const = rows.T[None] if channels_first else rows[None]
    n = rows.shape[0]
    out_shape = [1, 5, "N" if dynamic else n] if channels_first else [1, "N" if dynamic else n, 5]
    graph = helper.make_graph(
        [
            helper.make_node("ReduceMean", ["x"], ["m"], axes=[1, 2, 3], keepdims=0),
            helper.make_node("Mul", ["m", "zero"], ["z"]),
            helper.make_node("Add", ["table", "z"], ["out"]),
        ],
        "detector",
        [helper.make_tensor_value_info("x", TensorProto.FLOAT, [1, 3, side, side])],
        [helper.make_tensor_value_info("out", TensorProto.FLOAT, out_shape)],
        initializer=[
            helper.make_tensor("zero", TensorProto.FLOAT, [1], [0.0]),
            helper.make_tensor("table", TensorProto.FLOAT, list(const.shape), const.ravel().tolist()),
        ],
    )
    return _save_model(graph, path)


# --- acceptance summary -----------------------------------------------------

_criteria = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, text = marker.args
    if call.when == "setup" and call.excinfo is not None and call.excinfo.errisinstance(pytest.skip.Exception):
        _criteria.setdefault(number, (text, "SKIP"))
    elif call.when == "call":
        if call.excinfo is None:
            status = "PASS"
        elif call.excinfo.errisinstance(pytest.skip.Exception):
            status = "SKIP"
        else:
            status = "FAIL"
        prev = _criteria.get(number, (text, "PASS"))[1]
        if prev == "FAIL" or (prev == "SKIP" and status == "PASS"):
            status = prev
        _criteria[number] = (text, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        text, status = _criteria[number]
        terminalreporter.write_line(f"AC{number:<3} {status:<5} {text}")
