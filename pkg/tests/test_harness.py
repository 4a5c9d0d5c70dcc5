import json
import os

import numpy as np
import pytest

from hradapt import cli
from hradapt import harness as H
from hradapt.mesh import Mesh, save_mesh

from conftest import two_triangle_square

SMALL = dict(
    train_count=2, eval_count=2, ref_depth=2, target_elements=12, alpha_count=2, theta_count=3,
    heuristic_steps=2, record_time=False,
)


def small_cfg(tmp_path, **kw):
    base = dict(SMALL, out_dir=str(tmp_path))
    base.update(kw)
    return H.ExperimentConfig(**base)


def inside_polygon(p, poly):
    """Even-odd ray casting."""
    x, y = p
    inside = False
    n = len(poly)
    for i in range(n):
        (x1, y1), (x2, y2) = poly[i], poly[(i + 1) % n]
        if (y1 > y) != (y2 > y) and x < x1 + (y - y1) * (x2 - x1) / (y2 - y1):
            inside = not inside
    return inside


# ----------------------------------------------------------------------
# dataset


def test_gen_dataset_deterministic_and_disjoint(tmp_path):
    a = small_cfg(tmp_path / "a")
    b = small_cfg(tmp_path / "b")
    fa, fb = H.gen_dataset(a), H.gen_dataset(b)
    assert len(fa) == 4
    for pa, pb in zip(fa, fb):
        for ext in (".json", ".mesh", "_ref.mesh", "_ref.field"):
            with open(pa + ext, "rb") as x, open(pb + ext, "rb") as y:
                assert x.read() == y.read()
    train = {H.instance_seed(a, "train", i) for i in range(a.train_count)}
    ev = {H.instance_seed(a, "eval", i) for i in range(a.eval_count)}
    assert not train & ev


def test_gmm_means_inside_l_shape(tmp_path):
    cfg = small_cfg(tmp_path)
    for i in range(20):
        inst, mesh = H.make_instance(cfg, H.instance_seed(cfg, "train", i))
        poly = mesh.boundary.corners
        for mu in inst.means:
            assert inside_polygon(mu, poly)


def test_load_task_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        H.load_task(str(tmp_path / "nope"))


@pytest.mark.parametrize(
    "kw", [dict(train_count=0), dict(eval_count=0), dict(alpha_min=0.0), dict(alpha_min=0.1, alpha_max=0.01)]
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        H.ExperimentConfig(**kw)


# ----------------------------------------------------------------------
# evaluation rows


def test_uniform_rows_and_initial_error(tmp_path):
    cfg = small_cfg(tmp_path)
    H.gen_dataset(cfg)
    tasks = H.load_tasks(cfg, "eval")
    rows = H.evaluate_heuristics(tasks, cfg, ["uniform"])
    for ti, task in enumerate(tasks):
        mine = rows[ti * (cfg.ref_depth + 1) : (ti + 1) * (cfg.ref_depth + 1)]
        n0 = task.initial_mesh.n_elements
        assert [r[2] for r in mine] == [n0 * 4**k for k in range(cfg.ref_depth + 1)]
        assert mine[0][3] == 1.0


def test_aggregate_hand_means():
    rows = [
        ("m", 0.1, 10, 0.5, 1.0, 0.0),
        ("m", 0.1, 20, 0.3, 3.0, 0.2),
        ("m", 0.2, 40, 0.1, 2.0, 0.4),
    ]
    agg = H.aggregate(rows)
    assert len(agg) == 2
    assert agg[0]["elements"] == 15.0 and agg[0]["err_rel"] == pytest.approx(0.4)
    assert agg[0]["time_s"] == 2.0 and agg[0]["displacement"] == pytest.approx(0.1)
    assert agg[0]["elements_std"] == 5.0 and agg[0]["n"] == 2
    assert agg[1]["elements"] == 40.0 and agg[1]["elements_std"] == 0.0


def test_rows_roundtrip_and_header(tmp_path):
    rows = [("oracle", 0.5, 12, 0.25, 0.0, 0.0), ("learned", 1e-3, 30, 1.0 / 3.0, 0.0, 0.125)]
    H.write_rows(rows, tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text()
    assert text.splitlines()[0] == "method,alpha_or_theta,elements,err_rel,time_s,displacement"
    assert H.read_rows(tmp_path / "r.csv") == rows
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(ValueError):
        H.read_rows(tmp_path / "bad.csv")


# ----------------------------------------------------------------------
# rendering


def test_render_square(tmp_path):
    m = two_triangle_square()
    save_mesh(m, tmp_path / "m.mesh")
    H.cmd_render(str(tmp_path / "m.mesh"), str(tmp_path / "a.svg"))
    H.cmd_render(str(tmp_path / "m.mesh"), str(tmp_path / "b.svg"))
    svg = (tmp_path / "a.svg").read_text()
    assert svg.count("<polygon") == 2
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()
    assert H.render_svg(m, quality=True).count("<polygon") == 2


def test_render_highlights_inverted():
    pts = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [1.5, 0.5]], float)
    m = Mesh(pts, [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    svg = H.render_svg(m, field=pts[:, 0])
    assert svg.count("#ff00ff") >= 2


def test_render_field_length_mismatch(tmp_path):
    from hradapt import fem

    save_mesh(two_triangle_square(), tmp_path / "m.mesh")
    fem.save_field(np.zeros(3), tmp_path / "u.field")
    with pytest.raises(ValueError):
        H.cmd_render(str(tmp_path / "m.mesh"), str(tmp_path / "o.svg"), str(tmp_path / "u.field"))


# ----------------------------------------------------------------------
# matched random baseline


def test_matched_flags_hit_counts(tmp_path):
    cfg = small_cfg(tmp_path)
    inst, mesh = H.make_instance(cfg, 3)
    from hradapt.mesh import rgb_refine

    rng = np.random.default_rng(0)
    for target in (mesh.n_elements + 5, 2 * mesh.n_elements, 4 * mesh.n_elements):
        flags = H._matched_flags(mesh, target, rng)
        got = rgb_refine(mesh, flags)[0].n_elements
        assert abs(got - target) <= 6
    assert not H._matched_flags(mesh, mesh.n_elements, rng).any()


# ----------------------------------------------------------------------
# command line


def _run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def _flags(out_dir):
    return [
        "--out-dir", str(out_dir), "--train-count", "2", "--eval-count", "1", "--ref-depth", "2",
        "--target-elements", "12", "--alpha-count", "2", "--theta-count", "2", "--heuristic-steps", "2", "--no-time",
    ]


def test_cli_end_to_end_is_reproducible(tmp_path, capsys):
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        f = _flags(d)
        assert _run(["gen"] + f, capsys)[0] == 0
        train = ["train"] + f + ["--iterations", "1", "--transitions-per-iter", "5", "--minibatch", "8",
                                 "--phase1-iters", "0", "--quiet"]
        assert _run(train, capsys)[0] == 0
        ckpt = str(d / "train" / "final.json")
        code, out, _ = _run(["eval"] + f + ["--checkpoint", ckpt], capsys)
        assert code == 0 and "pareto" in out
        outputs.append(((d / "eval" / "rows.csv").read_bytes(), (d / "eval" / "pareto.csv").read_bytes()))
    assert outputs[0] == outputs[1]
    rows = H.read_rows(tmp_path / "a" / "eval" / "rows.csv")
    assert {r[0] for r in rows} == {"learned", "uniform", "oracle", "zz"}
    assert all(r[4] == 0.0 for r in rows)


def test_cli_config_file_overridden_by_flags(tmp_path, capsys):
    cfg = dict(SMALL, out_dir=str(tmp_path / "x"), train_count=1, eval_count=1)
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    code, out, _ = _run(["gen", "--config", str(tmp_path / "c.json"), "--eval-count", "2"], capsys)
    assert code == 0
    assert sorted(os.listdir(tmp_path / "x" / "dataset" / "eval")) == sorted(
        f"{i:04d}{e}" for i in range(2) for e in (".json", ".mesh", "_ref.mesh", "_ref.field")
    )
    assert len(os.listdir(tmp_path / "x" / "dataset" / "train")) == 4


def test_cli_baseline_and_render(tmp_path, capsys):
    f = _flags(tmp_path)
    _run(["gen"] + f, capsys)
    code, out, _ = _run(["baseline"] + f + ["--methods", "uniform,oracle"], capsys)
    assert code == 0
    methods = {r[0] for r in H.read_rows(tmp_path / "eval" / "rows.csv")}
    assert methods == {"uniform", "oracle"}
    code, out, _ = _run(["render", str(tmp_path / "dataset" / "eval" / "0000.mesh"), "-o", str(tmp_path / "m.svg")], capsys)
    assert code == 0 and (tmp_path / "m.svg").read_text().startswith("<svg")


def test_cli_errors_are_json(tmp_path, capsys):
    code, _, err = _run(["eval"] + _flags(tmp_path) + ["--checkpoint", str(tmp_path / "missing.json")], capsys)
    assert code == 2
    assert err.startswith("error: ")
    payload = json.loads(err[len("error: "):])
    assert payload["type"] == "FileNotFoundError"
    code, _, err = _run(["render", str(tmp_path / "nope.mesh"), "-o", str(tmp_path / "o.svg")], capsys)
    assert code == 2 and json.loads(err[len("error: "):])["message"]


def test_cli_verify(capsys):
    code, out, _ = _run(["verify", "-n", "3"], capsys)
    lines = out.strip().splitlines()
    assert code == 0 and lines and all(line.startswith("PASS ") for line in lines)
