import csv

import numpy as np
import pytest

from eqcanon import cli
from eqcanon.bench import GCNNBaseline, Timing, growth, overhead_ratio, time_call, write_bench_csv
from eqcanon.canonicalization import pca_frame
from eqcanon.config import ConfigError, ExperimentConfig, dump, load_config, parse_lines
from eqcanon.groups import haar_orthogonal
from eqcanon.tensor import load_tensors
from eqcanon.training import (Adam, TrainingAbort, build_model, evaluate, train, trainable_names)

SMALL_NBODY = """
task.name = nbody
task.n_train = 24
task.n_test = 16
task.n_steps = 20
model.canon_hidden = 4
model.predictor = gnn
model.hidden = 8
model.layers = 1
model.output_rep = positions
model.fallback_identity = true
training.epochs = 2
training.batch_size = 8
audit.group = e3
audit.n_samples = 8
audit.n_transforms = 3
eval.group = o3
"""

SMALL_GLYPHS = """
task.name = glyphs
task.group = c4
task.n_train = 32
task.n_test = 16
model.canon_group = c4
model.canon_channels = 4,1
model.hidden = 8
training.epochs = 2
training.batch_size = 16
audit.group = c4
audit.exhaustive = true
audit.n_samples = 8
audit.tol = 1e-12
eval.group = c4
"""


@pytest.fixture
def cfg_file(tmp_path):
    def make(text, name="c.cfg"):
        p = tmp_path / name
        p.write_text(text)
        return p
    return make


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_parse_comments_and_types():
    cfg = parse_lines(["# header", "training.epochs = 5   # inline", "", "model.fallback_identity = yes",
                       "training.learning_rate=3e-4", "ablation_mode = frozen"])
    assert cfg.training.epochs == 5 and cfg.model.fallback_identity is True
    assert cfg.training.learning_rate == 3e-4 and cfg.ablation_mode == "frozen"


@pytest.mark.parametrize("line", ["training.epoch = 3", "trainer.epochs = 3", "training.epochs = three",
                                  "no equals sign", "bogus = 1"])
def test_parse_errors(line):
    with pytest.raises(ConfigError):
        parse_lines([line])


@pytest.mark.parametrize("override", ["training.learning_rate=0", "training.batch_size=-1",
                                      "ablation_mode=sometimes", "task.name=cifar"])
def test_validation(cfg_file, override):
    p = cfg_file(SMALL_NBODY)
    with pytest.raises(ConfigError):
        load_config(p, [override])


def test_overrides_and_dump(cfg_file):
    cfg = load_config(cfg_file(SMALL_NBODY), ["training.seed=7"])
    assert cfg.training.seed == 7
    text = dump(cfg)
    assert "training.seed = 7" in text and "model.fallback_identity = true" in text
    again = parse_lines(text.splitlines())
    assert dump(again) == text


def test_missing_config():
    with pytest.raises(ConfigError, match="nope.cfg"):
        load_config("/nonexistent/nope.cfg")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_zero_epoch_checkpoint_equals_init(cfg_file, tmp_path):
    cfg = load_config(cfg_file(SMALL_NBODY), ["training.epochs=0"])
    res = train(cfg, tmp_path / "run")
    init = build_model(cfg).params.state()
    saved = load_tensors(tmp_path / "run" / "model.canon1")
    assert list(saved) == list(init)
    for k in init:
        assert saved[k].tobytes() == init[k].tobytes()
    assert res.rows == []


def test_frozen_mode_keeps_canonicalizer(cfg_file):
    cfg = load_config(cfg_file(SMALL_NBODY), ["ablation_mode=frozen"])
    res = train(cfg)
    canon = [k for k in res.initial_state if k.startswith("canon.")]
    assert canon
    for k in canon:
        assert res.final_state[k].tobytes() == res.initial_state[k].tobytes()
    assert any(res.final_state[k].tobytes() != res.initial_state[k].tobytes()
               for k in res.initial_state if k.startswith("f."))
    assert not [n for n in trainable_names(res.model, "frozen") if n.startswith("canon.")]


def test_adam_first_step_matches_closed_form():
    from eqcanon.tensor import ParameterStore
    p = ParameterStore()
    p.add("w", np.array([1.0, -2.0]))
    p["w"].grad = np.array([0.5, -0.1])
    Adam(p, ["w"], lr=0.1).step()
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"].data, [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 0.1 / (0.1 + 1e-8)])


def test_degenerate_abort(cfg_file):
    cfg = load_config(cfg_file(SMALL_NBODY), ["training.degenerate_abort_rate=0", "model.canon_hidden=1",
                                              "model.canon_layers=1"])
    # a single hidden VN channel gives rank-1 frames on every sample
    with pytest.raises(TrainingAbort):
        train(cfg)


def test_eval_invariance_and_negative_control(cfg_file):
    cfg = load_config(cfg_file(SMALL_NBODY))
    res = train(cfg)
    cfg.eval.transform = "none"
    plain = evaluate(cfg, res.model)
    cfg.eval.transform = "rotated"
    rotated = evaluate(cfg, res.model)
    assert abs(plain[2] - rotated[2]) < 1e-9 * max(1.0, plain[2])
    assert evaluate(cfg, res.model)[:5] == rotated[:5]

    base_cfg = load_config(cfg_file(SMALL_NBODY), ["ablation_mode=none"])
    base = train(base_cfg).model
    base_cfg.eval.transform = "none"
    b_plain = evaluate(base_cfg, base)
    base_cfg.eval.transform = "rotated"
    base_cfg.eval.group = "so3"
    # translations would be absorbed too, so rotate only; the baseline is not rotation-equivariant
    assert evaluate(base_cfg, base)[2] != pytest.approx(b_plain[2], rel=1e-6)


def test_train_deterministic(cfg_file, tmp_path):
    p = cfg_file(SMALL_GLYPHS)
    for name in ("a", "b"):
        cfg = load_config(p)
        train(cfg, tmp_path / name)
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    rows = list(csv.reader(a.decode().splitlines()))
    assert rows[0] == ["epoch", "split", "loss", "metric", "wall_ms", "equivariance_max_dev"]
    assert [r[0] for r in rows[1:]] == ["1", "2"]


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_missing_config(tmp_path, capsys):
    code = cli.main(["train", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path)])
    assert code == 1
    assert "absent.cfg" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["fly"], ["train"], ["train", "--config", "x", "--bogus"]])
def test_cli_usage_errors(argv, capsys):
    assert cli.main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_cli_config_errors(cfg_file, tmp_path):
    p = cfg_file(SMALL_NBODY)
    assert cli.main(["audit", "--config", str(p), "--set", "audit.group=q9", "--out", str(tmp_path)]) == 1
    assert cli.main(["audit", "--config", str(p), "--set", "nonsense", "--out", str(tmp_path)]) == 1


def test_cli_runtime_error(cfg_file, tmp_path):
    p = cfg_file(SMALL_NBODY)
    assert cli.main(["eval", "--config", str(p), "--checkpoint", str(tmp_path / "none.canon1"),
                     "--out", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.canon1"
    bad.write_bytes(b"CANON1\nxx\n")
    assert cli.main(["eval", "--config", str(p), "--checkpoint", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_cli_audit_fresh_init(cfg_file, tmp_path, capsys):
    p = cfg_file(SMALL_NBODY)
    out = tmp_path / "audit"
    assert cli.main(["audit", "--config", str(p), "--set", "training.seed=7", "--out", str(out)]) == 0
    assert "training.seed = 7" in (out / "resolved_config.txt").read_text()
    rows = list(csv.DictReader(open(out / "audit.csv")))
    assert len(rows) == 8 * 3
    assert max(float(r["rel_dev"]) for r in rows) < 1e-6
    assert "max_rel_dev" in capsys.readouterr().out


def test_cli_train_eval_audit_cycle(cfg_file, tmp_path):
    p = cfg_file(SMALL_GLYPHS)
    out = tmp_path / "run"
    assert cli.main(["gen-data", "--config", str(p), "--out", str(out)]) == 0
    assert (out / "train.canon1").is_file() and (out / "train.canon1.meta.json").is_file()
    assert cli.main(["train", "--config", str(p), "--out", str(out)]) == 0
    assert (out / "train_loss.svg").read_text().startswith("<svg")
    assert cli.main(["eval", "--config", str(p), "--out", str(out)]) == 0
    assert (out / "eval.csv").is_file()
    for name in ("a1", "a2"):
        assert cli.main(["audit", "--config", str(p), "--checkpoint", str(out / "model.canon1"),
                         "--out", str(tmp_path / name)]) == 0
    a1 = (tmp_path / "a1" / "audit.csv").read_bytes()
    assert a1 == (tmp_path / "a2" / "audit.csv").read_bytes()
    rows = list(csv.DictReader(a1.decode().splitlines()))
    assert all(float(r["abs_dev"]) == 0.0 for r in rows if r["symmetric_flag"] == "0")


# ---------------------------------------------------------------------------
# PCA frame and benchmarks
# ---------------------------------------------------------------------------

def test_pca_frame_equivariant_up_to_sign():
    rng = np.random.default_rng(0)
    for _ in range(20):
        X = rng.normal(size=(40, 3)) * [3.0, 2.0, 1.0]
        C = np.cov((X - X.mean(0)).T, bias=True)
        w = np.sort(np.linalg.eigvalsh(C))
        if np.min(np.diff(w)) <= 0.1:
            continue
        O, c = pca_frame(X)
        R = haar_orthogonal(3, rng)
        O2, c2 = pca_frame(X @ R.T)
        np.testing.assert_allclose(np.abs(O2), np.abs(R @ O), atol=1e-8)
        # the sign rule follows the first point, which rotates along
        np.testing.assert_allclose(O2, R @ O, atol=1e-8)
        np.testing.assert_allclose(c2, R @ c, atol=1e-10)


def test_time_call_and_summaries(tmp_path):
    med, iqr = time_call(lambda: sum(range(1000)), repetitions=5)
    assert med > 0 and iqr >= 0
    with pytest.raises(ValueError):
        time_call(lambda: None, repetitions=0)
    rows = [Timing("shapes.predictor", 0, 1, 2.0, 0.1, 20), Timing("shapes.pipeline", 0, 1, 2.5, 0.1, 20),
            Timing("image.canonicalizer", 4, 1, 1.0, 0.1, 20), Timing("image.canonicalizer", 64, 1, 2.0, 0.1, 20)]
    assert overhead_ratio(rows) == pytest.approx(0.25)
    assert growth(rows, "image.canonicalizer") == pytest.approx(2.0)
    write_bench_csv(rows, tmp_path / "b.csv")
    header = (tmp_path / "b.csv").read_text().splitlines()[0]
    assert header == "component,group_order,batch,median_ms,iqr_ms,repetitions"


def test_gcnn_baseline_shapes():
    rng = np.random.default_rng(1)
    g = GCNNBaseline(8, rng)
    assert g.gconv.shape == (8 * 4, 8 * 4, 3, 3)
    out = g(rng.random((2, 1, 16, 16))).data
    assert out.shape == (2, 8) and np.isfinite(out).all()
