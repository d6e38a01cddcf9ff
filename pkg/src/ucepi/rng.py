"""Counter-based random streams.

Every stochastic component draws from a Philox generator whose 128-bit key is
derived by hashing a content tag (master seed plus a tuple of strings/ints
naming the consumer, e.g. ``("filter", step)``).  Streams are therefore
independent of scheduling: the same draws are produced whether particles are
advanced serially, in one vectorized block, or split across workers.

Within a drawn block, position ``[..., k]`` belongs to individual ``k``; code
consuming a block must index it by identity, never by iteration order.
"""

import hashlib

import numpy as np
from numpy.random import Generator, Philox


def stream_key(master_seed, *tag):
    """128-bit Philox key derived from the master seed and a content tag."""
    payload = repr((int(master_seed),) + tuple(tag)).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:16], "little")


def stream(master_seed, *tag) -> Generator:
    """Fresh generator for the stream named by ``tag``."""
    return Generator(Philox(key=stream_key(master_seed, *tag)))


class StreamFactory:
    """Hands out named substreams under a fixed master seed and scope.

    ``child(*scope)`` narrows the scope (e.g. per rejuvenation round); the
    resulting streams never collide with the parent's as long as tags differ.
    """

    def __init__(self, master_seed, *scope):
        self.master_seed = int(master_seed)
        self.scope = tuple(scope)

    def child(self, *scope) -> "StreamFactory":
        return StreamFactory(self.master_seed, *self.scope, *scope)

    def generator(self, *tag) -> Generator:
        return stream(self.master_seed, *self.scope, *tag)

    def uniforms(self, shape, *tag, dtype=np.float32) -> np.ndarray:
        """Uniform(0,1) block; position identifies the consumer."""
        return self.generator(*tag).random(shape, dtype=dtype)


def as_factory(rng, *scope) -> StreamFactory:
    """Coerce an int seed or factory into a StreamFactory."""
    if isinstance(rng, StreamFactory):
        return rng.child(*scope) if scope else rng
    return StreamFactory(int(rng), *scope)
