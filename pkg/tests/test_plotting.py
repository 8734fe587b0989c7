import numpy as np

from autoview.plotting import (count_operation_lines, plot_comparison, plot_loss_curves,
                               plot_sampling_probabilities, read_trajectory)


def test_sampling_plot_one_line_per_operation(tmp_path):
    names = [f"op{j}" for j in range(7)]
    steps = np.arange(5)
    probs = np.random.default_rng(0).dirichlet(np.ones(7), size=5)
    out = plot_sampling_probabilities(names, steps, probs, tmp_path / "p.svg", label_top=3)
    assert count_operation_lines(out) == 7


def test_plots_are_byte_stable(tmp_path):
    records = [{"step": s, "loss": 1.0 / (s + 1), "h_main": 2.0 - s * 0.1, "h_reg": None} for s in range(4)]
    a = plot_loss_curves(records, tmp_path / "a.svg").read_bytes()
    b = plot_loss_curves(records, tmp_path / "b.svg").read_bytes()
    assert a == b
    assert b"curve-h_main" in a and b"curve-h_reg" not in a


def test_comparison_chart(tmp_path):
    rows = [{"setting": "full", "knn_best": 0.4}, {"setting": "no-regularizer", "knn_best": 0.3}]
    assert plot_comparison(rows, "setting", "knn_best", tmp_path / "c.svg", "k-NN").exists()


def test_read_trajectory(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("step,a,b\n0,0.5,0.5\n10,0.25,0.75\n")
    names, steps, probs = read_trajectory(path)
    assert names == ["a", "b"]
    assert steps.tolist() == [0, 10]
    np.testing.assert_allclose(probs, [[0.5, 0.5], [0.25, 0.75]])
