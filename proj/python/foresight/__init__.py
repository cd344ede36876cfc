"""Python access to the foresight core: layouts, block masks, the block-sparse
executor, temporal importance sampling, the synthetic world and metrics.

Config arguments are plain dicts with the same keys as the CLI's JSON config.
"""

import json as _json

from . import _foresight as _core
from ._foresight import (  # noqa: F401
    ConfigError,
    DomainError,
    PreconditionError,
    RuntimeFailure,
    ade_fde,
    cces_total,
    decode_latent,
    encode_observation,
    rf_interpolate,
    sample_steps,
    sampling_distribution,
)


def _dump(cfg):
    return "" if cfg is None else _json.dumps(cfg)


def layout(n_chunks, config=None):
    """Segment table of a prompt with n_chunks chunks, as a dict."""
    return _json.loads(_core.layout_json(_dump(config), n_chunks))


def block_mask(n_chunks, layout=None, mask=None, group=0):
    """Boolean (n_blocks, n_blocks) array of active query/key block pairs."""
    return _core.block_mask(_dump(layout), _dump(mask), n_chunks, group)


def sparse_and_dense_attention(n_chunks, layout=None, mask=None, head_dim=16, seed=0, group=0):
    """Block-sparse output and the dense reference on random inputs."""
    return _core.sparse_and_dense_attention(_dump(layout), _dump(mask), n_chunks, head_dim, seed, group)


def importance_scores(a_x, a_y, config=None):
    return _core.importance_scores(a_x, a_y, _dump(config))


def generate_episode(seed, world=None):
    """Episode as a dict of numpy arrays plus (start, end, kind) event spans."""
    return _core.generate_episode(seed, _dump(world))


def random_event_script(seed, episode_len_s=60.0):
    return _json.loads(_core.random_event_script(seed, episode_len_s))


def camera_loss(pred, gt, n_views, squared=False):
    return _core.camera_loss(pred, gt, n_views, squared)


__all__ = [name for name in dir() if not name.startswith("_")]
