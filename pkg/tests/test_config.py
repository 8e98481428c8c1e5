import pytest

from ctattn.config import (SEED_ENV, ConfigError, RunConfig, build_config, load_config_file,
                           parse_config_text)


def test_defaults_are_valid():
    cfg = build_config()
    assert cfg.seed == 0 and cfg.lr == 1e-2 and cfg.n_train == 100


def test_file_grammar():
    text = """
    # a comment
    step-size = 0.05   # trailing comment
    quadrature = gauss:3
    causal = yes
    lengths = 8, 16,32
    """
    vals = parse_config_text(text)
    assert vals == {"step_size": 0.05, "quadrature": "gauss:3", "causal": True,
                    "lengths": [8, 16, 32]}


def test_precedence(monkeypatch, tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 4\nheads = 4\nlr = 0.5\n")
    monkeypatch.setenv(SEED_ENV, "9")
    assert build_config().seed == 9
    cfg = build_config(load_config_file(path), {"lr": 0.1})
    assert (cfg.seed, cfg.heads, cfg.lr) == (4, 4, 0.1)
    assert build_config(load_config_file(path), {}, seed_flag=11).seed == 11


@pytest.mark.parametrize("text,key", [("bogus = 1", "bogus"), ("heads = two", "heads"),
                                      ("causal = maybe", "causal"), ("quadrature = gauss:9", "quadrature"),
                                      ("heads = 3", "heads"), ("dropout = 1.5", "dropout"),
                                      ("model = rnn", "model"), ("step_size = 0", "step_size"),
                                      ("just words", "expected")])
def test_errors_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key):
        build_config(parse_config_text(text))


def test_missing_file():
    with pytest.raises(ConfigError, match="config"):
        load_config_file("/nonexistent/run.cfg")


def test_snapshot_round_trip():
    cfg = build_config(overrides={"step_size": 0.2, "causal": True, "lengths": [4, 8]})
    again = build_config(parse_config_text(cfg.snapshot()))
    assert again == cfg


def test_bad_env_seed(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "abc")
    with pytest.raises(ConfigError, match="seed"):
        build_config()


def test_run_config_is_a_dataclass():
    assert RunConfig().validate().model == "contiformer"
