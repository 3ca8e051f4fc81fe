import dataclasses

import pytest

from grnplus import models as M
from grnplus import phantom as P
from grnplus import trainer as T

TINY_SEGMENTOR = M.SegmentorConfig(encoder_channels=(2, 4))
TINY_GENERATOR = M.GeneratorConfig(stem_channels=2, n_down=1, n_res_blocks=1)


def small_spec():
    return dataclasses.replace(
        P.PhantomSpec(height=64, width=32),
        top_margin_range=(6.0, 8.0),
        layer_thickness_range=((3.0, 5.0), (5.0, 8.0), (2.0, 3.0), (5.0, 7.0), (2.0, 3.0), (10.0, 14.0)),
        occlusion=P.Occlusion(radius_range=(3.0, 6.0)),
    )


def tiny_config(**kw):
    kw.setdefault("segmentor", TINY_SEGMENTOR)
    kw.setdefault("generator", TINY_GENERATOR)
    kw.setdefault("max_epochs", 2)
    return T.TrainConfig(**kw)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """5 subjects x 1 scan x 2 slices at 64x32: 6 train, 2 val and 2 test images."""
    root = tmp_path_factory.mktemp("tiny")
    P.generate_dataset(root, small_spec(), 5, 1, 2, (0.6, 0.2, 0.2), seed=0)
    return root


@pytest.fixture(scope="session")
def tiny_manifest(tiny_data):
    return P.DatasetManifest.load(tiny_data)


def pytest_configure(config):
    config._acceptance_results = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(results):
        ok, detail = results[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
