"""Named adapter factories plus external plugin discovery.

Real backbones, captioners, embedders, erasers, and feature extractors are
heavyweight and optional; configs refer to adapters by name and plugins can
add names at runtime.  The AEROADAPT_PLUGINS environment variable holds a
path-separated list of Python files; each is executed and may call the
``register_*`` functions.
"""

from __future__ import annotations

import importlib.util
import logging
import os
import sys
from pathlib import Path

from .backbone import ToyBackbone
from .toydata import (
    FixedTagCaptioner,
    PooledEmbedder,
    PooledFeatureExtractor,
    RingMeanEraser,
)

log = logging.getLogger(__name__)

PLUGIN_ENV_VAR = "AEROADAPT_PLUGINS"


class UnknownAdapterError(KeyError):
    pass


_REGISTRIES: dict[str, dict[str, object]] = {
    "backbone": {"toy": ToyBackbone},
    "captioner": {"fixed-tags": FixedTagCaptioner},
    "embedder": {"pooled8": PooledEmbedder},
    "eraser": {"ring-mean": RingMeanEraser},
    "extractor": {"pooled8": PooledFeatureExtractor},
}


def _register(kind: str, name: str, factory) -> None:
    table = _REGISTRIES[kind]
    if name in table:
        log.warning("%s %r re-registered", kind, name)
    table[name] = factory


def register_backbone(name, factory):
    _register("backbone", name, factory)


def register_captioner(name, factory):
    _register("captioner", name, factory)


def register_embedder(name, factory):
    _register("embedder", name, factory)


def register_eraser(name, factory):
    _register("eraser", name, factory)


def register_extractor(name, factory):
    _register("extractor", name, factory)


def _create(kind: str, name: str, **kwargs):
    table = _REGISTRIES[kind]
    if name not in table:
        raise UnknownAdapterError(
            f"no {kind} named {name!r}; available: {sorted(table)}"
        )
    return table[name](**kwargs)


def get_backbone(name: str, **kwargs):
    return _create("backbone", name, **kwargs)


def get_captioner(name: str, **kwargs):
    return _create("captioner", name, **kwargs)


def get_embedder(name: str, **kwargs):
    return _create("embedder", name, **kwargs)


def get_eraser(name: str, **kwargs):
    return _create("eraser", name, **kwargs)


def get_extractor(name: str, **kwargs):
    return _create("extractor", name, **kwargs)


def available(kind: str) -> list[str]:
    return sorted(_REGISTRIES[kind])


def load_plugins(env_value: str | None = None) -> list[str]:
    """Execute each plugin file named by the env var; return loaded paths."""
    raw = os.environ.get(PLUGIN_ENV_VAR, "") if env_value is None else env_value
    loaded = []
    for entry in raw.split(os.pathsep):
        entry = entry.strip()
        if not entry:
            continue
        path = Path(entry)
        if not path.is_file():
            log.warning("plugin path %s does not exist; skipped", path)
            continue
        module_name = f"aeroadapt_plugin_{path.stem}"
        spec = importlib.util.spec_from_file_location(module_name, path)
        if spec is None or spec.loader is None:
            log.warning("cannot load plugin %s; skipped", path)
            continue
        module = importlib.util.module_from_spec(spec)
        sys.modules[module_name] = module
        spec.loader.exec_module(module)
        loaded.append(str(path))
        log.info("loaded plugin %s", path)
    return loaded
