import json
import math
import statistics

import numpy as np
import pytest

from drcil.datastream import Sample
from drcil.evalcli import RunConfig, emit_results, load_results, parse_config, parse_text, summarize
from drcil.evalcli.cli import main
from drcil.evalcli.config import ConfigError, parse_seeds
from drcil.evalcli.reporting import mean_and_se, read_steps_csv, steps_csv_name
from drcil.evaluation import ExperimentResult, StepRecord, evaluate
from drcil.model import DrcModel, ModelOutput
from drcil.numcore import Tensor

TINY = """\
dataset.kind = synthetic
dataset.n_classes = 4
dataset.per_class = 50
dataset.dim = 6
protocol = b0
protocol.steps = 2
model.hidden = 8
model.feature_dim = 4
pipeline.adaptation_epochs = 3
pipeline.fusion_epochs = 6
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


# ---------------------------------------------------------------- config

def test_minimal_config_gets_loss_defaults():
    cfg = parse_text("dataset.kind = synthetic\nprotocol = b0\n")
    w = cfg.loss_weights()
    assert (w.alpha, w.beta, w.tro) == (0.2, 4.0, 1.2)


def test_alpha_out_of_range_names_key_and_line():
    with pytest.raises(ConfigError) as err:
        parse_text("protocol = b0\n# comment\nloss.alpha = 1.5\n", "c.cfg")
    assert err.value.key == "loss.alpha"
    assert err.value.line == 3
    assert "c.cfg:3" in str(err.value)


@pytest.mark.parametrize(
    "text, key",
    [
        ("loss.alpah = 0.3\n", "loss.alpah"),
        ("pipeline.fusion_epochs = many\n", "pipeline.fusion_epochs"),
        ("pipeline.kind = DER\n", "pipeline.kind"),
        ("seed = 1\nseed = 2\n", "seed"),
        ("dataset.kind = csv\n", "dataset.path"),
    ],
)
def test_strict_parsing(text, key):
    with pytest.raises(ConfigError) as err:
        parse_text(text)
    assert err.value.key == key


def test_comments_and_blank_lines():
    cfg = parse_text("\n# header\nseed = 9   # trailing\n\n")
    assert cfg["seed"] == 9


def test_round_trip(tiny_cfg):
    cfg = parse_config(tiny_cfg).with_overrides(["loss.beta=2.5", "model.hidden=16,8", "seeds=3..6"])
    again = parse_text(cfg.serialize())
    assert again == cfg
    assert again.serialize() == cfg.serialize()
    assert again["seeds"] == (3, 4, 5, 6)


def test_parse_seeds():
    assert parse_seeds("1..5") == (1, 2, 3, 4, 5)
    assert parse_seeds("4, 2") == (4, 2)
    with pytest.raises(ValueError):
        parse_seeds("5..1")


def test_builds_pipeline_config_and_stream(tiny_cfg):
    cfg = parse_config(tiny_cfg)
    pc = cfg.pipeline_config(seed=3)
    assert (pc.seed, pc.hidden, pc.feature_dim, pc.fusion_epochs) == (3, (8,), 4, 6)
    stream = cfg.build_stream(3)
    assert [len(t.classes) for t in stream.tasks] == [2, 2]


def test_csv_stream(tmp_path):
    rng = np.random.default_rng(0)
    rows = [f"{c}," + ",".join(str(v) for v in rng.integers(0, 256, 5)) for c in range(4) for _ in range(10)]
    (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
    cfg = parse_text(f"dataset.kind = csv\ndataset.path = {tmp_path / 'd.csv'}\ndataset.features = 5\ndataset.n_classes = 4\nprotocol.steps = 2\n")
    stream = cfg.build_stream(0)
    X = np.stack([s.features for t in stream.tasks for s in t.train_samples])
    assert X.min() >= 0.0 and X.max() <= 1.0


# ---------------------------------------------------------------- evaluation

class _LeakyModel:
    """Puts a large logit on the true column: an oracle classifier."""

    def __init__(self, lookup, k):
        self.lookup, self.k = lookup, k

    def forward(self, x):
        X = x.data if isinstance(x, Tensor) else np.asarray(x)
        z = np.zeros((len(X), self.k))
        z[np.arange(len(z)), [self.lookup[tuple(r)] for r in X]] = 10.0
        t = Tensor(z)
        return ModelOutput(t, t, None, t, 0)


def _pool(rng, labels):
    return [Sample(rng.normal(size=3), int(c)) for c in labels]


def test_oracle_model_is_perfect():
    rng = np.random.default_rng(0)
    pool = _pool(rng, rng.integers(0, 5, 100))
    seen = [3, 0, 4, 1, 2]
    col = {c: i for i, c in enumerate(seen)}
    model = _LeakyModel({tuple(s.features): col[s.label] for s in pool}, 5)
    assert evaluate(model, pool, seen)[0] == 1.0


def test_constant_model_on_balanced_classes():
    rng = np.random.default_rng(1)
    pool = _pool(rng, np.repeat(np.arange(4), 25))
    model = DrcModel.create([3, 2], 4, rng)
    for h in model.heads:
        h.weight.data[:] = 0.0
        h.bias.data[:] = [0.0, 0.0, 5.0, 0.0]
    assert evaluate(model, pool, [0, 1, 2, 3])[0] == 0.25


def test_overall_is_weighted_mean_of_tasks():
    rng = np.random.default_rng(2)
    pool = _pool(rng, rng.integers(0, 6, 301))
    model = DrcModel.create([3, 5, 4], 6, rng)
    tasks = [(0, 1), (2, 3, 4), (5,)]
    acc, per_task = evaluate(model, pool, list(range(6)), tasks)
    sizes = [sum(s.label in t for s in pool) for t in tasks]
    weighted = sum(per_task[i + 1] * n for i, n in enumerate(sizes)) / len(pool)
    assert acc == pytest.approx(weighted, abs=1e-12)


# ---------------------------------------------------------------- reporting

def _fake_result(seed, accs, kind="MAF"):
    steps = [StepRecord(i + 1, 2 * (i + 1), a, {1: a}, None if i == 0 else 1.5 * i) for i, a in enumerate(accs)]
    cfg = {"kind": kind, "drc_enabled": True, "seed": seed}
    return ExperimentResult(cfg, seed, steps, float(np.mean(accs)), accs[-1], timings=[0.1] * len(accs))


def test_single_run_round_trip(tmp_path):
    r = _fake_result(0, [0.9, 0.8, 0.7000000000000001])
    written = emit_results([r], tmp_path)
    assert len(written) == 2
    (back,) = load_results(tmp_path)
    assert back == r
    rows = read_steps_csv(tmp_path / steps_csv_name(r))
    assert [row["accuracy"] for row in rows] == r.accuracies
    assert rows[0]["imbalance_ratio"] is None
    assert (tmp_path / "results.jsonl").read_text().count("\n") == 1
    assert "step_seconds" in (tmp_path / "timings.jsonl").read_text()
    header = (tmp_path / steps_csv_name(r)).read_text().splitlines()[0]
    assert header == "step,seen_classes,accuracy,imbalance_ratio"


def test_summary_matches_hand_statistics():
    results = [_fake_result(s, a) for s, a in enumerate([[0.5, 0.4], [0.8, 0.6], [0.3, 0.35]])]
    (row,) = summarize(results)
    avgs = [0.45, 0.7, 0.325]
    assert row.runs == 3
    assert row.avg_mean == pytest.approx((0.45 + 0.7 + 0.325) / 3, abs=1e-15)
    assert row.avg_se == pytest.approx(statistics.stdev(avgs) / math.sqrt(3), abs=1e-12)
    assert row.last_se == pytest.approx(statistics.stdev([0.4, 0.6, 0.35]) / math.sqrt(3), abs=1e-12)


def test_summary_groups_by_config():
    results = [_fake_result(0, [0.5]), _fake_result(1, [0.6]), _fake_result(0, [0.2], kind="MDT")]
    rows = summarize(results)
    assert sorted((r.label, r.runs) for r in rows) == [("MAF+DRC", 2), ("MDT+DRC", 1)]
    assert math.isnan(mean_and_se([0.3])[1])


def test_unwritable_output_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        emit_results([_fake_result(0, [0.5])], blocker / "sub")


# ---------------------------------------------------------------- cli

def test_cli_run_is_deterministic(tiny_cfg, tmp_path, capsys):
    assert main(["run", "--config", str(tiny_cfg), "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", str(tiny_cfg), "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "results.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "results.jsonl").read_bytes()
    assert json.loads(a)["seed"] == 7


def test_cli_sweep_then_report(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(tiny_cfg), "--seeds", "1..3", "--out", str(out)]) == 0
    first = (out / "summary.csv").read_text()
    records = [json.loads(ln) for ln in (out / "results.jsonl").read_text().splitlines()]
    assert [r["seed"] for r in records] == [1, 2, 3]
    (out / "summary.csv").unlink()
    assert main(["report", "--results", str(out)]) == 0
    assert (out / "summary.csv").read_text() == first
    (row,) = summarize(load_results(out))
    assert row.avg_mean == pytest.approx(np.mean([r["avg_accuracy"] for r in records]), abs=1e-15)


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no.such.key = 1\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert "no.such.key" in capsys.readouterr().err
    assert main(["bogus"]) == 1
    assert main(["report", "--results", str(tmp_path / "missing")]) == 2
    assert main(["run", "--override", "loss.beta=-1"]) == 1


def test_cli_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 4


def test_default_config_is_valid():
    RunConfig().validate()
