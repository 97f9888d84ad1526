"""
Configuration loader.

Environment defaults are read from a .env file in the project directory,
falling back to environment variables. Run configs are TOML files with
optional [model], [task], [train] and [analysis] sections, each mapping
onto one dataclass.
"""
import json
import os
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing
from dataclasses import dataclass, fields, replace

from dotenv import dotenv_values

from analysis import AnalysisSpec
from model_zoo import ModelConfig
from nn_core import ConfigurationError
from train_harness import TaskSpec, TrainConfig

# Look for the env file in project directory
PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
ENV_PATHS = [os.path.join(PROJECT_ROOT, '.env')]

# Whitelist of keys to load from the env file
ALLOWED_KEYS = (
    'RINGFORMER_OUTPUT_DIR',
    'RINGFORMER_LOG_LEVEL',
)
DEFAULTS = {
    'RINGFORMER_OUTPUT_DIR': 'runs',
    'RINGFORMER_LOG_LEVEL': 'INFO',
}

SECTIONS = {
    'model': ModelConfig,
    'task': TaskSpec,
    'train': TrainConfig,
    'analysis': AnalysisSpec,
}


def _load_env_file(paths=None):
    """Load whitelisted settings from the first env file found."""
    settings = {}
    for path in paths or ENV_PATHS:
        if os.path.exists(path):
            for key, val in dotenv_values(path).items():
                if key in ALLOWED_KEYS and val:
                    settings[key] = val
            break  # Stop after finding first valid file
    return settings


# Load settings once at module import
_settings = _load_env_file()


def reload_settings(paths=None):
    global _settings
    _settings = _load_env_file(paths)
    return dict(_settings)


def get_setting(name):
    """
    Get a setting by name.
    Priority: env file > environment variable > built-in default
    """
    if name not in ALLOWED_KEYS:
        raise KeyError(f"Unknown setting '{name}'")
    if name in _settings:
        return _settings[name]
    return os.getenv(name) or DEFAULTS[name]


# ============ RUN CONFIG FILES ============

class ConfigError(ConfigurationError):
    """Run-config problem anchored to a line of its source."""

    def __init__(self, message, line=None, source=None):
        self.message = message
        self.line = line
        self.source = source
        where = source or '<config>'
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


@dataclass
class RunConfig:
    model: ModelConfig = None
    task: TaskSpec = None
    train: TrainConfig = None
    analysis: AnalysisSpec = None


_SECTION_RE = re.compile(r'^\s*\[\s*([A-Za-z0-9_.-]+)\s*\]')


def _find_line(text, section, key=None):
    current = None
    for line_no, line in enumerate(text.splitlines(), start=1):
        match = _SECTION_RE.match(line)
        if match:
            current = match.group(1)
            if key is None and current == section:
                return line_no
            continue
        if key is not None and current == section and re.match(rf'^\s*"?{re.escape(key)}"?\s*=', line):
            return line_no
    return None


def _field_types(cls):
    return typing.get_type_hints(cls)


def _coerce(value, annotation, where):
    """Check a TOML value against a dataclass field type; ints widen to float."""
    if typing.get_origin(annotation) is typing.Union:
        options = [a for a in typing.get_args(annotation) if a is not type(None)]
        annotation = options[0]
    if annotation is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if annotation is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if annotation is str and isinstance(value, str):
        return value
    if annotation is bool and isinstance(value, bool):
        return value
    raise ValueError(f"{where} expects {annotation.__name__}, got {type(value).__name__} {value!r}")


def _build_section(name, table, text=None, source=None):
    cls = SECTIONS[name]
    if not isinstance(table, dict):
        raise ConfigError(f"'{name}' must be a table", _find_line(text or '', name, name), source)
    types = _field_types(cls)
    values = {}
    for key, value in table.items():
        line = _find_line(text, name, key) if text else None
        if key not in types:
            raise ConfigError(f"unknown key '{key}' in [{name}] (known: {', '.join(types)})", line, source)
        try:
            values[key] = _coerce(value, types[key], f"{name}.{key}")
        except ValueError as e:
            raise ConfigError(str(e), line, source) from None
    try:
        return cls(**values)
    except ConfigurationError as e:
        raise ConfigError(str(e), _find_line(text, name) if text else None, source) from None


def parse_run_config(text, source=None):
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        match = re.search(r'line (\d+)', str(e))
        raise ConfigError(f"invalid TOML: {e}", int(match.group(1)) if match else None, source) from None
    run = RunConfig()
    for name, table in data.items():
        if name not in SECTIONS:
            line = _find_line(text, name) or _find_line(text, None, name)
            raise ConfigError(f"unknown section '{name}' (expected {', '.join(SECTIONS)})", line, source)
        setattr(run, name, _build_section(name, table, text, source))
    return run


def load_run_config(path):
    with open(path, 'r', encoding='utf-8') as f:
        return parse_run_config(f.read(), source=path)


def _toml_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (int, float)):
        return repr(value)
    return json.dumps(value)


def render_run_config(run):
    """Canonical TOML text; unset (None) fields are omitted."""
    blocks = []
    for name in SECTIONS:
        section = getattr(run, name)
        if section is None:
            continue
        lines = [f"[{name}]"]
        for f in fields(section):
            value = getattr(section, f.name)
            if value is not None:
                lines.append(f"{f.name} = {_toml_value(value)}")
        blocks.append('\n'.join(lines))
    return '\n\n'.join(blocks) + '\n'


def _parse_override_value(raw):
    try:
        return tomllib.loads(f"v = {raw}")['v']
    except tomllib.TOMLDecodeError:
        return raw


def apply_overrides(run, overrides):
    """Apply 'section.key=value' strings on top of a RunConfig (flags win over the file)."""
    for item in overrides or []:
        if '=' not in item or '.' not in item.split('=', 1)[0]:
            raise ConfigError(f"override '{item}' is not of the form section.key=value", source='--set')
        target, raw = item.split('=', 1)
        name, key = target.strip().split('.', 1)
        if name not in SECTIONS:
            raise ConfigError(f"unknown section '{name}' in override '{item}'", source='--set')
        current = getattr(run, name)
        types = _field_types(SECTIONS[name])
        if key not in types:
            raise ConfigError(f"unknown key '{key}' in [{name}]", source='--set')
        try:
            value = _coerce(_parse_override_value(raw.strip()), types[key], target)
            section = replace(current, **{key: value}) if current is not None else SECTIONS[name](**{key: value})
        except (ValueError, ConfigurationError) as e:
            raise ConfigError(str(e), source='--set') from None
        setattr(run, name, section)
    return run
