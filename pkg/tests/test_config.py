import pytest

from sidrec.config import ConfigError, config_to_dict, load_config, set_override


def _write(tmp_path, text):
    p = tmp_path / "c.yaml"
    p.write_text(text)
    return p


def test_defaults_and_paths(tmp_path):
    cfg = load_config(_write(tmp_path, "seed: 4\nquantizer:\n  K: 16\n"))
    assert cfg.seed == 4 and cfg.quantizer.K == 16 and cfg.quantizer.n_fsq == 13
    assert cfg.path("store") == tmp_path / "work/store.side"
    assert cfg.path("sequences") is None
    with pytest.raises(ConfigError) as exc:
        cfg.require_path("sequences")
    assert exc.value.key == "paths.sequences"
    assert config_to_dict(cfg)["quantizer"]["K"] == 16


@pytest.mark.parametrize("text,key", [
    ("bogus: 1\n", "bogus"),
    ("gsu:\n  kk: 3\n", "gsu.kk"),
    ("gsu:\n  k: 0\n", "gsu.k"),
    ("gsu:\n  k: two\n", "gsu.k"),
    ("gsu:\n  use_reduced: 1\n", "gsu.use_reduced"),
    ("gsu:\n  ks: []\n", "gsu.ks"),
    ("esu:\n  lr: -1\n", "esu.lr"),
    ("esu:\n  tasks: []\n", "esu.tasks"),
    ("judge:\n  mode: carrier-pigeon\n", "judge.mode"),
    ("judge:\n  mode: http\n", "judge.url"),
    ("mask:\n  step: 20\n", "mask.step"),
    ("quantizer: 5\n", "quantizer"),
])
def test_validation_names_offending_key(tmp_path, text, key):
    with pytest.raises(ConfigError) as exc:
        load_config(_write(tmp_path, text))
    assert exc.value.key == key


def test_overrides(tmp_path):
    p = _write(tmp_path, "gsu:\n  k: 5\n")
    cfg = load_config(p, ["gsu.k=7", "esu.tasks=[ctr, cvr]", "gsu.use_reduced=false"])
    assert cfg.gsu.k == 7 and cfg.esu.tasks == ["ctr", "cvr"] and cfg.gsu.use_reduced is False
    with pytest.raises(ConfigError):
        load_config(p, ["gsu.k"])
    d = {"a": 1}
    with pytest.raises(ConfigError):
        set_override(d, "a.b=2")


def test_unparseable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "a: [1,\n"))
