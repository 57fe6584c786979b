"""
JSON configuration helpers shared by the dataclass configs of every module.

Configuration precedence is defaults < file < command-line overrides.

"""
import dataclasses
import json
import logging
import typing

from .errors import ConfigError

logger = logging.getLogger(__name__)


def to_dict(obj):
    """Convert a (possibly nested) config dataclass to plain JSON types."""
    if dataclasses.is_dataclass(obj):
        return {field.name: to_dict(getattr(obj, field.name)) for field in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(item) for item in obj]
    if isinstance(obj, dict):
        return {key: to_dict(value) for key, value in obj.items()}
    return obj


def _coerce(hint, value):
    if dataclasses.is_dataclass(hint) and isinstance(value, dict):
        return from_dict(hint, value)
    origin = typing.get_origin(hint)
    if origin is tuple and isinstance(value, (list, tuple)):
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], item) for item in value)
        if args and len(args) == len(value):
            return tuple(_coerce(arg, item) for arg, item in zip(args, value))
        return tuple(value)
    if hint is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def from_dict(cls, data):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys.

    Missing keys keep their defaults; nested dataclasses and tuple fields are
    rebuilt from their JSON (dict / list) forms.
    """
    if not isinstance(data, dict):
        raise ConfigError('%s expects a JSON object, got %r' % (cls.__name__, data))
    hints = typing.get_type_hints(cls)
    names = {field.name for field in dataclasses.fields(cls) if field.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError("Unknown %s key '%s'" % (cls.__name__, unknown[0]))
    kwargs = {key: _coerce(hints.get(key), value) for key, value in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError('Cannot build %s: %s' % (cls.__name__, e))


def load_json(filename):
    """Read a JSON file, reporting malformed content with the path."""
    try:
        with open(filename, 'r') as infile:
            return json.load(infile)
    except json.JSONDecodeError as e:
        raise ConfigError("Malformed JSON in '%s': %s" % (filename, e))


def parse_override(token):
    """Split ``key=value``; the value is parsed as JSON, falling back to a string."""
    if '=' not in token:
        raise ConfigError("Override '%s' is not of the form key=value" % token)
    key, text = token.split('=', 1)
    key = key.strip()
    if not key:
        raise ConfigError("Override '%s' has an empty key" % token)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return key, value


def apply_overrides(data, overrides):
    """Apply ``key=value`` overrides onto a nested dict (dotted keys descend).

    Parameters
    ----------
    data : dict
        Configuration as loaded from JSON (or ``to_dict`` of the defaults).
    overrides : list of str
        Tokens such as ``epochs=5`` or ``synthesis.beta_range=[0.1,0.1]``.

    Returns
    -------
    data : dict
        A new dict; the input is not modified.

    """
    data = json.loads(json.dumps(data))
    for token in overrides or []:
        key, value = parse_override(token)
        node = data
        parts = key.split('.')
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                raise ConfigError("Override key '%s' does not address a nested object" % key)
            node = child
        node[parts[-1]] = value
        logger.debug('override %s = %r', key, value)
    return data


def build_config(cls, filename=None, overrides=None):
    """Defaults, then the JSON file (if any), then the overrides."""
    data = to_dict(cls())
    if filename is not None:
        file_data = load_json(filename)
        if not isinstance(file_data, dict):
            raise ConfigError("'%s' must hold a JSON object" % filename)
        data = _merge(data, file_data)
    data = apply_overrides(data, overrides)
    return from_dict(cls, data)


def _merge(base, update):
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged
