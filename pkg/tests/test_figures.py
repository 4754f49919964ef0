"""Report figures render to files without a display."""

from tokenprune.figures import render_eval, render_strategy_curves, render_tradeoff
from tokenprune.strategies import EliminationResult


def test_tradeoff_figure(tmp_path):
    rows = [
        (0.0, 0, 0.99, 0.95),
        (0.0, 1, 1.0, 0.96),
        (0.01, 0, 0.98, 2.9),
        (0.01, 1, 0.97, 3.0),
    ]
    out = tmp_path / "tradeoff.png"
    render_tradeoff(rows, out)
    assert out.stat().st_size > 1000


def test_strategy_figure(tmp_path):
    results = [
        EliminationResult("random", 0.2, 0.4, 2.5),
        EliminationResult("random", 0.5, 0.7, 1.6),
        EliminationResult("residual", 0.2, 0.9, 2.5),
        EliminationResult("residual", 0.5, 0.98, 1.6),
    ]
    out = tmp_path / "curves.png"
    render_strategy_curves(results, out)
    assert out.stat().st_size > 1000


def test_eval_figure(tmp_path):
    rows = [
        {"orig_len": 48, "speedup": 2.5},
        {"orig_len": 48, "speedup": 2.8},
        {"orig_len": 32, "speedup": 1.9},
    ]
    out = tmp_path / "eval.png"
    render_eval(rows, out)
    assert out.stat().st_size > 1000
