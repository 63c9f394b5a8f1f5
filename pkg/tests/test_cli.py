import json

import pytest

from delayed_hedge import cli
from delayed_hedge.errors import ConfigParseError

CAPPED = {"breakpoints": [0.0, 1.0], "values": [0.0, 1.0]}
BUTTERFLY = {"breakpoints": [-1.0, 0.0, 1.0], "values": [0.0, 1.0, 0.0]}
UNIT = {"s0": 0.0, "sigma": 1.0, "mu": 0.0, "T": 1.0}
POLICY = {"partition": [0.0, 0.5, 1.0], "pieces": [{"x": [0.0], "nu": [2.0]}]}


@pytest.fixture
def inputs(tmp_path):
    for name, body in (("capped.json", CAPPED), ("bf.json", BUTTERFLY), ("unit.json", UNIT), ("policy.json", POLICY)):
        (tmp_path / name).write_text(json.dumps(body))
    return tmp_path


def run(capsys, *argv):
    code = cli.main(list(argv))
    return code, json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_envelope_capped_call(inputs, capsys):
    code, out = run(capsys, "envelope", "--payoff", str(inputs / "capped.json"), "--params", str(inputs / "unit.json"), "--out", str(inputs / "o"))
    assert code == 0
    assert out["price"] == 1.0 and out["hedge_slope"] == 0.0
    assert json.loads((inputs / "o" / "envelope.json").read_text())["finite"] is True


def test_missing_payoff_is_usage_error(inputs, capsys):
    code, out = run(capsys, "envelope", "--payoff", str(inputs / "nope.json"), "--params", str(inputs / "unit.json"), "--out", str(inputs / "o"))
    assert code == 2 and out["status"] == "error"
    assert not (inputs / "o").exists()


def test_malformed_payoff(inputs, capsys):
    (inputs / "bad.json").write_text(json.dumps({"breakpoints": [1.0, 0.0], "values": [0.0, 1.0]}))
    code, _ = run(capsys, "envelope", "--payoff", str(inputs / "bad.json"), "--params", str(inputs / "unit.json"), "--out", str(inputs / "o"))
    assert code == 2


def test_unknown_subcommand(capsys):
    assert cli.main(["bogus"]) == 2


def test_price_limit_outputs(inputs, capsys):
    code, out = run(capsys, "price-limit", "--payoff", str(inputs / "bf.json"), "--params", str(inputs / "unit.json"), "--A", "1", "--nodes", "16", "--out", str(inputs / "o"))
    assert code == 0
    assert 0.0 < out["value"] < 1.0
    lines = (inputs / "o" / "zeta.csv").read_text().splitlines()
    assert lines[0] == "z,zeta" and len(lines) == 17


def test_price_discrete(inputs, capsys):
    code, out = run(
        capsys, "price-discrete", "--payoff", str(inputs / "bf.json"), "--params", str(inputs / "unit.json"),
        "--N", "4", "--lambda", "4", "--s-nodes", "301", "--out", str(inputs / "o"),
    )
    assert code == 0
    assert 0.0 < out["price"] < 1.0
    assert "diagnostics" in json.loads((inputs / "o" / "discrete.json").read_text())


def test_convergence_header(inputs, capsys):
    code, _ = run(capsys, "convergence", "--payoff", str(inputs / "bf.json"), "--params", str(inputs / "unit.json"), "--A", "1", "--N", "4,8", "--out", str(inputs / "o"))
    assert code == 0
    lines = (inputs / "o" / "convergence.csv").read_text().splitlines()
    assert lines[0] == "N,H,lambda,price,limit_value,gap"
    assert [int(r.split(",")[0]) for r in lines[1:]] == [4, 8]


def test_simulate_dual(inputs, capsys):
    code, out = run(
        capsys, "--threads", "2", "simulate-dual", "--policy", str(inputs / "policy.json"), "--params", str(inputs / "unit.json"),
        "--H", "0.125", "--A", "1", "--paths", "1000", "--out", str(inputs / "o"),
    )
    assert code == 0 and out["entropy"] > 0
    header = (inputs / "o" / "martingale_stats.csv").read_text().splitlines()[0]
    assert header.startswith("s,t,test")


def test_simulate_dual_thread_invariance(inputs, capsys, monkeypatch):
    args = ["simulate-dual", "--policy", str(inputs / "policy.json"), "--params", str(inputs / "unit.json"), "--H", "0.125", "--A", "1", "--paths", "2000"]
    run(capsys, *args, "--out", str(inputs / "a"))
    monkeypatch.setenv("DELAYED_HEDGE_THREADS", "3")
    run(capsys, *args, "--out", str(inputs / "b"))
    for name in ("dual_report.json", "martingale_stats.csv"):
        assert (inputs / "a" / name).read_bytes() == (inputs / "b" / name).read_bytes()


class TestThreads:
    def test_default(self, monkeypatch):
        monkeypatch.delenv("DELAYED_HEDGE_THREADS", raising=False)
        assert cli.resolve_threads(None) == 1

    def test_env(self, monkeypatch):
        monkeypatch.setenv("DELAYED_HEDGE_THREADS", "4")
        assert cli.resolve_threads(None) == 4
        assert cli.resolve_threads(2) == 2

    @pytest.mark.parametrize("bad", ["zero", "0", "-1"])
    def test_bad_env(self, monkeypatch, bad):
        monkeypatch.setenv("DELAYED_HEDGE_THREADS", bad)
        with pytest.raises(ConfigParseError):
            cli.resolve_threads(None)


class TestRunConfig:
    def write(self, inputs, body):
        f = inputs / "exp.toml"
        f.write_text(body)
        return str(f)

    def test_checks_pass(self, inputs, capsys):
        cfg = self.write(inputs, 'kind = "envelope"\npayoff = "capped.json"\nparams = "unit.json"\noutput_dir = "res"\n[checks]\ntolerance = 1e-12\nexpect = { price = 1.0 }\n')
        code, out = run(capsys, "run", cfg)
        assert code == 0
        assert (inputs / "res" / "envelope.json").is_file()

    def test_tolerance_failure(self, inputs, capsys):
        cfg = self.write(inputs, 'kind = "envelope"\npayoff = "capped.json"\nparams = "unit.json"\n[checks]\ntolerance = 1e-3\nexpect = { price = 0.9 }\n')
        code, out = run(capsys, "run", cfg)
        assert code == 1 and out["status"] == "fail"

    def test_knobs(self, inputs, capsys):
        cfg = self.write(inputs, 'kind = "limit"\npayoff = "bf.json"\nparams = "unit.json"\n[knobs]\nA = 2.0\nnodes = 12\n')
        code, out = run(capsys, "run", cfg)
        assert code == 0 and out["A"] == 2.0

    @pytest.mark.parametrize(
        "body",
        ['kind = "nope"\n', 'kind = "envelope"\npayoff = \n', 'kind = "envelope"\npayoff = "capped.json"\nparams = "unit.json"\n[knobs]\nbogus = 1\n[checks]\nexpect = { nothing = 1 }\n'],
    )
    def test_config_errors(self, inputs, capsys, body):
        code, _ = run(capsys, "run", self.write(inputs, body))
        assert code == 2

    def test_missing_config(self, inputs, capsys):
        code, _ = run(capsys, "run", str(inputs / "absent.toml"))
        assert code == 2


class TestAtomicWrite:
    def test_replaces_whole_file(self, tmp_path):
        f = tmp_path / "sub" / "x.txt"
        cli.atomic_write(f, "first")
        cli.atomic_write(f, "second")
        assert f.read_text() == "second"
        assert [p.name for p in f.parent.iterdir()] == ["x.txt"]

    def test_failure_leaves_old_content(self, tmp_path, monkeypatch):
        f = tmp_path / "x.txt"
        cli.atomic_write(f, "old")

        def boom(*a, **k):
            raise OSError("disk full")

        monkeypatch.setattr(cli.os, "replace", boom)
        with pytest.raises(OSError):
            cli.atomic_write(f, "new")
        assert f.read_text() == "old"
        assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]


def test_csv_floats_roundtrip():
    text = cli.csv_text([{"a": 0.1 + 0.2, "b": 3}], ("a", "b"))
    assert text.splitlines() == ["a,b", "0.30000000000000004,3"]
