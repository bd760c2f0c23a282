"""Portable seeded random streams.

All randomness in the package comes from numpy's Philox4x64-10 counter-based
bit generator keyed through ``SeedSequence([seed, stream])``.  Gaussian draws
use the Box-Muller transform on 53-bit uniforms, so a seed fixes every bit
of the output independently of numpy's own normal sampler.
"""

import numpy as np

# named sub-streams so that unrelated consumers of one seed never overlap
STREAM_DATA = 0
STREAM_INIT = 1
STREAM_SPLIT = 2
STREAM_SHUFFLE = 3
STREAM_HEAD = 4


def make_rng(seed, stream=0):
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream)])
    return np.random.Generator(np.random.Philox(seq))


def uniform(rng, shape, low=0.0, high=1.0):
    return low + (high - low) * rng.random(shape)


def standard_normal(rng, shape):
    """Box-Muller normals; consumes ``ceil(size/2)`` uniform pairs."""
    shape = tuple(np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    size = int(np.prod(shape)) if shape else 1
    half = (size + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1]: log stays finite
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:size]
    return z.reshape(shape)


def get_state(rng):
    """JSON-friendly snapshot of a generator's bit-generator state."""
    return _to_jsonable(rng.bit_generator.state)


def set_state(rng, state):
    bg = rng.bit_generator
    current = bg.state
    bg.state = _from_jsonable(state, current)


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.ravel()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _from_jsonable(obj, template):
    if isinstance(template, dict):
        return {k: _from_jsonable(obj[k], template[k]) for k in template}
    if isinstance(template, np.ndarray):
        return np.array(obj, dtype=template.dtype).reshape(template.shape)
    return obj
