import os

import pytest

from lfrt.automation import atomic_directory, atomic_output, list_scenes, map_scenes, write_text
from lfrt.errors import LFRTError


def square(x):
    return x * x


def make_scene_dir(path):
    os.makedirs(path)
    write_text(os.path.join(path, 'meta.json'), '{}')


def test_atomic_output_replaces_on_success(tmp_path):
    target = tmp_path / 'sub' / 'out.txt'
    write_text(str(target), 'first')
    write_text(str(target), 'second')
    assert target.read_text() == 'second'
    assert os.listdir(str(tmp_path / 'sub')) == ['out.txt']


def test_atomic_output_cleans_up_on_error(tmp_path):
    target = tmp_path / 'out.txt'
    target.write_text('keep')
    with pytest.raises(RuntimeError):
        with atomic_output(str(target)) as tmp:
            with open(tmp, 'w') as outfile:
                outfile.write('partial')
            raise RuntimeError('boom')
    assert target.read_text() == 'keep'
    assert os.listdir(str(tmp_path)) == ['out.txt']


def test_atomic_directory(tmp_path):
    target = tmp_path / 'scene'
    with atomic_directory(str(target)) as tmp:
        write_text(os.path.join(tmp, 'a.txt'), 'a')
    with pytest.raises(RuntimeError):
        with atomic_directory(str(target)) as tmp:
            write_text(os.path.join(tmp, 'b.txt'), 'b')
            raise RuntimeError('boom')
    assert os.listdir(str(target)) == ['a.txt']
    assert sorted(os.listdir(str(tmp_path))) == ['scene']


def test_list_scenes_natural_order(tmp_path):
    for name in ('scene10', 'scene2', 'scene1'):
        make_scene_dir(str(tmp_path / name))
    os.makedirs(str(tmp_path / 'not_a_scene'))
    names = [os.path.basename(p) for p in list_scenes(str(tmp_path))]
    assert names == ['scene1', 'scene2', 'scene10']
    assert list_scenes(str(tmp_path / 'scene2')) == [str(tmp_path / 'scene2')]


def test_list_scenes_errors(tmp_path):
    with pytest.raises(LFRTError):
        list_scenes(str(tmp_path / 'missing'))
    with pytest.raises(LFRTError):
        list_scenes(str(tmp_path))


def test_map_scenes_keeps_order():
    assert map_scenes(square, range(5)) == [0, 1, 4, 9, 16]
    assert map_scenes(square, range(5), nprocesses=2) == [0, 1, 4, 9, 16]
