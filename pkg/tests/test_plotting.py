from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from matcher.evaluation import CumulativeCurve
from matcher.inference import MatchPair, MatchSet
from matcher.plotting import location_colors, plot_cumulative_curves, plot_matches


def test_cumulative_curves_png(tmp_path):
    thresholds = (0.0, 8.0, 64.0)
    curves = {
        ("proposed", "elastic"): CumulativeCurve(thresholds, (0.2, 0.8, 1.0)),
        ("baseline-ratio-test", "elastic"): CumulativeCurve(thresholds, (0.0, 0.3, 0.7)),
        ("proposed", "affine"): CumulativeCurve(thresholds, (0.0, 0.0, 0.0), warning=True)
    }
    path = plot_cumulative_curves(curves, str(tmp_path / "plots" / "curves.png"))
    with open(path, "rb") as f:
        assert f.read(8) == b"\x89PNG\r\n\x1a\n"


def test_no_curves():
    with pytest.raises(ValueError):
        plot_cumulative_curves({}, "unused.png")


def test_match_figure(tmp_path, texture):
    matches = MatchSet([MatchPair((10.0, 12.0), (11.0, 13.5), 0.9, 0.1),
                        MatchPair((40.0, 30.0), (41.0, 29.0), 0.7, 0.3)])
    path = plot_matches(texture, texture, matches, str(tmp_path / "matches.png"), title="pair")
    assert (tmp_path / "matches.png").stat().st_size > 0
    assert path.endswith("matches.png")


def test_match_figures_from_worker_threads(tmp_path, texture):
    matches = MatchSet([MatchPair((10.0, 12.0), (11.0, 13.5), 0.9, 0.1)])
    paths = [str(tmp_path / f"pair_{i:02d}.png") for i in range(8)]

    with ThreadPoolExecutor(max_workers=4) as pool:
        written = list(pool.map(lambda p: plot_matches(texture, texture, matches, p, title=p), paths))

    assert written == paths
    for path in paths:
        with open(path, "rb") as f:
            assert f.read(8) == b"\x89PNG\r\n\x1a\n"


def test_location_colors():
    colors = location_colors(np.array([[0.0, 0.0], [63.0, 63.0]]), (64, 64))
    np.testing.assert_allclose(colors, [[0.0, 0.0, 0.6], [1.0, 1.0, 0.6]])
