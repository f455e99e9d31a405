import textwrap

import pytest

from sud2.config import load_config
from sud2.errors import ConfigError


def write(tmp_path, body, name="run.cfg"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(body))
    return p


def test_defaults_and_overrides(tmp_path):
    p = write(tmp_path, """
        [experiment]
        name = demo   # trailing comment
        seed = 3

        [train]
        lambda2 = 0
        sigma2 = 0.2

        [ablation]
        noise_injection = false
    """)
    cfg = load_config(p)
    assert cfg.experiment.name == "demo" and cfg.experiment.seed == 3
    assert cfg.train.lambda1 == 0.01 and cfg.train.batch_size == 8 and cfg.train.epochs == 50
    w = cfg.loss_weights()
    assert (w.lambda1, w.lambda2, w.sigma2) == (0.01, 0.0, 0.0)
    tc = cfg.train_config()
    assert tc.seed == 3 and tc.learning_rate == 1e-3 and tc.weight_decay == 1e-4
    assert cfg.family == "faces"
    assert cfg.output_dir() == tmp_path / "runs" / "demo"
    assert len(cfg.config_hash()) == 16


def test_output_root_env(tmp_path, monkeypatch):
    p = write(tmp_path, "[experiment]\nname = x\n")
    monkeypatch.setenv("SUD2_OUTPUT_ROOT", str(tmp_path / "root"))
    assert load_config(p).output_dir() == tmp_path / "root" / "runs" / "x"


def test_ablation_supervisor_override(tmp_path):
    p = write(tmp_path, "[supervisor]\nkind = ddpm\n[ablation]\nsupervisor_kind = autoencoder\ncorrelation_loss = no\n")
    cfg = load_config(p)
    assert cfg.supervisor_kind == "autoencoder"
    assert cfg.loss_weights().lambda2 == 0.0


@pytest.mark.parametrize("body, line, needle", [
    ("[experiment]\nname = a\n[bogus]\nx = 1\n", 3, "unknown section"),
    ("[experiment]\nname = a\n\n[train]\nlamda1 = 1\n", 5, "unknown key"),
    ("[train]\nepochs = many\n", 2, "cannot parse"),
    ("[train]\nlambda1 = -1\n", 2, "nonnegative"),
    ("[supervisor]\nkind = magic\n", 2, "must be one of"),
    ("[data]\nsize = 20\n", 2, "not divisible"),
    ("[train]\nbatch_size = 1\n", 2, "batch_size"),
    ("[data]\nsource = bundle\npath = nowhere\n", 3, "does not exist"),
    ("[model]\nresidual = perhaps\n", 2, "cannot parse"),
])
def test_errors_are_line_anchored(tmp_path, body, line, needle):
    p = write(tmp_path, body)
    with pytest.raises(ConfigError) as exc:
        load_config(p)
    msg = str(exc.value)
    assert msg.startswith(f"{p}:{line}:") and needle in msg


def test_syntax_error_and_missing_file(tmp_path):
    p = write(tmp_path, "name = outside any section\n")
    with pytest.raises(ConfigError, match=str(p)):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.cfg")
