import dataclasses
import json
from typing import Tuple

import pytest

from lfrt.config import apply_overrides, build_config, from_dict, load_json, parse_override, to_dict
from lfrt.errors import ConfigError
from lfrt.noise import SynthesisConfig
from lfrt.training import TrainConfig


@dataclasses.dataclass
class Inner(object):
    scale: float = 1.0


@dataclasses.dataclass
class Outer(object):
    name: str = 'x'
    shape: Tuple[int, int] = (2, 3)
    sizes: Tuple[int, ...] = (1,)
    inner: Inner = dataclasses.field(default_factory=Inner)


def test_round_trip_through_json():
    outer = Outer('y', (4, 5), (1, 2, 3), Inner(2.5))
    data = json.loads(json.dumps(to_dict(outer)))
    assert data['shape'] == [4, 5]
    assert from_dict(Outer, data) == outer


def test_from_dict_coerces_and_rejects():
    assert from_dict(Inner, {'scale': 3}).scale == 3.0
    assert isinstance(from_dict(Inner, {'scale': 3}).scale, float)
    with pytest.raises(ConfigError):
        from_dict(Outer, {'nmae': 'z'})
    with pytest.raises(ConfigError):
        from_dict(Outer, [1, 2])


def test_parse_override():
    assert parse_override('epochs=5') == ('epochs', 5)
    assert parse_override('preset=toy') == ('preset', 'toy')
    assert parse_override('synthesis.beta_range=[0.1, 0.2]') == ('synthesis.beta_range', [0.1, 0.2])
    for token in ('epochs', '=3'):
        with pytest.raises(ConfigError):
            parse_override(token)


def test_apply_overrides_descends_without_mutating():
    data = {'a': 1, 'nested': {'b': 2}}
    out = apply_overrides(data, ['nested.b=7', 'a=null'])
    assert out == {'a': None, 'nested': {'b': 7}}
    assert data == {'a': 1, 'nested': {'b': 2}}
    with pytest.raises(ConfigError):
        apply_overrides(data, ['a.b=1'])


def test_build_config_layers(tmp_path):
    filename = tmp_path / 'train.json'
    filename.write_text(json.dumps({'epochs': 7, 'synthesis': {'k_range': [0.001, 0.002]}}))
    cfg = build_config(TrainConfig, str(filename), ['epochs=9', 'synthesis.noise_mode=shot_read'])
    assert cfg.epochs == 9
    assert cfg.synthesis.k_range == (0.001, 0.002)
    assert cfg.synthesis.noise_mode == 'shot_read'
    assert cfg.synthesis.beta_range == SynthesisConfig().beta_range

    filename.write_text('[1, 2]')
    with pytest.raises(ConfigError):
        build_config(TrainConfig, str(filename))


def test_load_json_reports_malformed_files(tmp_path):
    filename = tmp_path / 'bad.json'
    filename.write_text('{"epochs": ')
    with pytest.raises(ConfigError) as excinfo:
        load_json(str(filename))
    assert 'bad.json' in str(excinfo.value)
