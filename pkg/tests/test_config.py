from pathlib import Path

import pytest

from cvfade.config import ConfigError, RunConfig, dump_config, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.mark.parametrize("name", ["small.toml", "reference.toml"])
def test_shipped_configs_load(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.alphabet.build().size in (2, 4)
    assert cfg.detection.n_slots > 0


def test_defaults_are_valid():
    cfg = parse_config({})
    assert cfg == RunConfig()
    assert cfg.certify.log_base == 2.0 and cfg.certify.sigma == (0.0, 1.0, 2.0, 3.0)


def test_unknown_key_names_file_and_line(tmp_path):
    p = write(tmp_path, "[alphabet]\nkind = \"two\"\nampltude = 0.5\n")
    with pytest.raises(ConfigError, match=r"c\.toml:3: alphabet\.ampltude: unknown key"):
        load_config(p)


def test_unknown_section(tmp_path):
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(write(tmp_path, "[detector]\nn = 1\n"))


@pytest.mark.parametrize(
    "text, where",
    [
        ("[channel]\ntransmission = 1.5\n", "channel.transmission"),
        ("[channel]\nefficiency = 0.0\n", "channel"),
        ("[detection]\nn_slots = 1.5\n", "detection.n_slots"),
        ("[detection]\nwrite_records = 1\n", "detection.write_records"),
        ("[certify]\nlog_base = 1\n", "certify.log_base"),
        ("[certify]\nsigma = [-1]\n", "certify.sigma"),
        ("[alphabet]\nkind = \"custom\"\n", "alphabet.amplitudes"),
        ("[alphabet]\npriors = [0.9, 0.3, 0.0, 0.0]\n", "alphabet"),
        ("[channel]\nsource = \"file\"\n", "channel.file"),
        ("[sweep]\nfamilies = [\"eight\"]\n", "sweep.families"),
    ],
)
def test_invalid_values(tmp_path, text, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        load_config(write(tmp_path, text))


def test_bad_toml(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, "[alphabet\n"))
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.toml")


def test_custom_alphabet(tmp_path):
    cfg = load_config(write(tmp_path, "[alphabet]\nkind = \"custom\"\namplitudes = [[0.88, 0], [0, 0.92], [-0.87, 0], [0, -0.92]]\n"))
    assert cfg.alphabet.build().amplitudes[1] == 0.92j


def test_dump_roundtrip(tmp_path):
    cfg = load_config(CONFIGS / "reference.toml")
    again = load_config(write(tmp_path, dump_config(cfg)))
    assert again == cfg


def test_digest_ignores_output_only():
    cfg = RunConfig()
    assert cfg.replace(output="elsewhere").digest() == cfg.digest()
    assert cfg.replace("detection", seed=1).digest() != cfg.digest()


def test_replace_validates():
    with pytest.raises(ConfigError):
        RunConfig().replace("detection", bin_width=-1.0)


def test_relative_channel_file(tmp_path):
    (tmp_path / "t.txt").write_text("0.7\n")
    cfg = load_config(write(tmp_path, "[channel]\nsource = \"file\"\nfile = \"t.txt\"\n"))
    assert Path(cfg.channel.file) == tmp_path / "t.txt"
