import json
import subprocess
import sys

import pytest

from pvl.harness.cli import EXIT_DATA, EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from pvl.modelio import load_model


def run(tmp_path, *argv):
    return main(["--out-dir", str(tmp_path), *argv])


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert run(tmp_path, "generate") == EXIT_USAGE  # no --model
    assert run(tmp_path, "steer", "--model", "random", "--transcript", "x.json", "--alpha", "1") == EXIT_DATA
    assert main(["--help"]) == EXIT_OK


def test_data_errors(tmp_path, capsys):
    assert run(tmp_path, "generate", "--model", str(tmp_path / "nope.pvl"), "--transcript", "script:drift") == EXIT_DATA
    assert "model file not found" in capsys.readouterr().err
    assert run(tmp_path, "generate", "--model", "random", "--transcript", "script:drift") == EXIT_DATA
    assert run(tmp_path, "analyze", "--cloud", str(tmp_path / "none.json")) == EXIT_DATA


def test_build_generate_prefill_edit(tmp_path, capsys):
    model_path = tmp_path / "m.pvl"
    assert run(tmp_path, "build-model", "--output", str(model_path)) == EXIT_OK
    assert load_model(model_path).planted is not None
    capsys.readouterr()
    assert run(tmp_path, "generate", "--model", str(model_path), "--transcript", "script:plan", "--n-new", "3") == EXIT_OK
    assert "new_text" in json.loads(capsys.readouterr().out)
    assert run(tmp_path, "prefill", "--model", str(model_path), "--transcript", "script:aura", "--parallel") == EXIT_OK
    capsys.readouterr()
    cache = tmp_path / "cache.pvkc"
    assert run(tmp_path, "edit-cache", "--model", str(model_path), "--cache", str(cache), "--layers", "1:3", "--role", "assistant", "--scale", "0.5") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["edited"] > 0
    assert run(tmp_path, "edit-cache", "--model", "random", "--cache", str(cache), "--layers", "0:1", "--scale", "0.5") == EXIT_DATA


def test_persona_verbs(tmp_path, capsys):
    m = "planted:default"
    assert run(tmp_path, "extract", "--model", m) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["cosine_with_planted_gateway"] >= 0.95
    assert run(tmp_path, "steer", "--model", m, "--transcript", "script:aura", "--alpha", "-2", "--n-new", "2") == EXIT_OK
    capsys.readouterr()
    assert run(tmp_path, "cap", "--model", m, "--transcript", "script:drift", "--tau", "0.1", "--format", "csv") == EXIT_OK
    assert capsys.readouterr().out.splitlines()[0] == "turn,role,mean_projection"
    assert run(tmp_path, "fold", "--model", m, "--alpha", "1", "--layer", "2", "--output", str(tmp_path / "f.pvl")) == EXIT_OK
    capsys.readouterr()
    assert run(tmp_path, "sweep", "--model", m, "--format", "svg") == EXIT_OK
    assert capsys.readouterr().out.startswith("<svg")
    assert run(tmp_path, "steer", "--model", "random", "--transcript", "script:drift", "--alpha", "1") == EXIT_DATA


def test_space_verbs(tmp_path, capsys):
    assert run(tmp_path, "cloud", "--model", "planted:default", "--questions", "2") == EXIT_OK
    assert run(tmp_path, "analyze", "--cloud", str(tmp_path / "cloud.json"), "--assistant", "tutor") == EXIT_OK
    for name in ("axis.json", "loadings.csv", "roles-pc1.svg", "assistant-axis.json"):
        assert (tmp_path / name).exists()
    assert run(tmp_path, "cloud", "--model", "random") == EXIT_USAGE


def test_exp_and_trace(tmp_path, capsys):
    assert run(tmp_path, "exp", "prefill-equivalence", "--seed", "1") == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["pass"] is True and (tmp_path / "prefill-equivalence.json").exists()
    assert run(tmp_path, "trace", "--model", "random", "--transcript", str(_random_script(tmp_path)), "--format", "csv") == EXIT_OK
    assert capsys.readouterr().out.startswith("layer,head,src,dst,weight")
    assert run(tmp_path, "transfer", "--model", "random", "--transcript", str(_random_script(tmp_path)), "--splits", "a,b") == EXIT_USAGE
    assert run(tmp_path, "transfer", "--model", "random", "--transcript", str(_random_script(tmp_path)), "--splits", "2", "--n-new", "4") == EXIT_OK


def _random_script(tmp_path):
    path = tmp_path / "r.json"
    path.write_text(json.dumps({"turns": [{"role": "user", "text": "t1 t2 t3"}]}))
    return path


@pytest.mark.parametrize("argv", [["-m", "pvl", "--help"]])
def test_module_entry_point(argv):
    proc = subprocess.run([sys.executable, *argv], capture_output=True, text=True)
    assert proc.returncode == 0 and "exp" in proc.stdout
    assert EXIT_FAIL == 1
