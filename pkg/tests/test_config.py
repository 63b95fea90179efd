import pytest

from ddbsense import config
from ddbsense.config import AttackerSpec, ConfigError, ExperimentConfig, ScenarioSpec


def write(tmp_path, text):
    p = tmp_path / "cfg.toml"
    p.write_text(text)
    return p


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.train_size, cfg.test_size) == config.DESK_SIZES
    assert cfg.attacker.m == 7 and cfg.attacker.controlled == tuple(range(1, 8))
    assert cfg.group_size == 25 and cfg.alpha == 0.01 and cfg.ddb_method == "lrt"
    assert cfg.floor_slack == 0.0


def test_load_full_file(tmp_path):
    path = write(tmp_path, """
seed = 4
group_size = 50
alpha = 0.05
ddb_method = "deepfool"

[scenario]
node_count = 10
noise_scale = [0.1, 0.2]

[attacker]
m = 3
nodes = [2, 5, 9]
method = "pgd"
ratio = 0.5
""")
    cfg = config.load(path)
    assert cfg.seed == 4 and cfg.group_size == 50 and cfg.alpha == 0.05
    assert cfg.scenario.node_count == 10 and cfg.scenario.noise_scale == (0.1, 0.2)
    assert cfg.attacker.controlled == (2, 5, 9) and cfg.attacker.method == "pgd"


@pytest.mark.parametrize("text, path", [
    ("group_size = 0\n", "group_size"),
    ("alpha = 2.0\n", "alpha"),
    ("bogus = 1\n", "bogus"),
    ("seed = 1.5\n", "seed"),
    ("ddb_method = \"newton\"\n", "ddb_method"),
    ("[scenario]\nnode_count = 1\n", "scenario.node_count"),
    ("[scenario]\nsnr = [1.0]\n", "scenario.snr"),
    ("[scenario]\nnoise_scale = [0.5, 0.1]\n", "scenario.noise_scale"),
    ("[attacker]\nm = 20\n", "attacker.m"),
    ("[attacker]\nm = 0\n", "attacker.m"),
    ("[attacker]\nm = 2\nnodes = [1, 1]\n", "attacker.nodes"),
    ("[attacker]\nm = 2\nnodes = [1, 21]\n", "attacker.nodes"),
    ("[attacker]\nm = 3\nnodes = [1, 2]\n", "attacker.nodes"),
    ("[attacker]\nmethod = \"elastic\"\n", "attacker.method"),
    ("[attacker]\nratio = -0.5\n", "attacker.ratio"),
    ("[attacker]\nmode = \"oracle\"\n", "attacker.mode"),
    ("[attacker]\nstep_size = true\n", "attacker.step_size"),
    ("attacker = 3\n", "attacker"),
])
def test_errors_name_the_key(tmp_path, text, path):
    with pytest.raises(ConfigError, match=rf"{path}:"):
        config.load(write(tmp_path, text))


def test_unreadable_and_malformed(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        config.load(tmp_path / "missing.toml")
    with pytest.raises(ConfigError):
        config.load(write(tmp_path, "seed = = 3\n"))


def test_scaled():
    cfg = ExperimentConfig().scaled(0.25)
    assert cfg.train_size == 1250 and cfg.test_size == 5000 and cfg.scale == 0.25
    assert cfg.floor_slack == 0.05


def test_hash_tracks_content():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    assert ExperimentConfig(seed=1).hash() != a.hash()


def test_sub_specs_validate_directly():
    with pytest.raises(ConfigError):
        ScenarioSpec(occupancy_prior=2.0).validate()
    with pytest.raises(ConfigError):
        AttackerSpec(pgd_steps=0).validate(20)
    with pytest.raises(ConfigError):
        ExperimentConfig(trials=0)
