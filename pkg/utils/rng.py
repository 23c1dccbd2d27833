import numpy as np
from typing import Optional


MASTER_SEED_BITS = 64


class StreamFactory:
    """Per-replicate random streams derived from one 64-bit master seed

    A stream is identified by (master seed, side, replicate). The identifier is
    fed to a SeedSequence and the resulting key drives a Philox counter-based
    bit generator, so streams never share state and can be created in any
    order on any thread.
    """

    def __init__(self, master_seed: int):
        if not 0 <= int(master_seed) < 2 ** MASTER_SEED_BITS:
            raise ValueError(f"Master seed must fit in 64 unsigned bits, got {master_seed}")
        self.master_seed = int(master_seed)

    def stream(self, replicate: int, side: int = 0) -> np.random.Generator:
        """
        Get the generator of one replicate

        Args:
            replicate: Replicate index (>= 0)
            side: Independent family index (e.g. the two sides of a comparison)

        Returns:
            Fresh numpy Generator positioned at the start of the stream
        """
        if replicate < 0 or side < 0:
            raise ValueError(f"Stream coordinates must be non-negative, got ({side}, {replicate})")
        sequence = np.random.SeedSequence(self.master_seed, spawn_key=(int(side), int(replicate)))
        return np.random.Generator(np.random.Philox(sequence))

    def stream_id(self, replicate: int, side: int = 0) -> int:
        """64-bit identifier of a stream, stable across runs"""
        sequence = np.random.SeedSequence(self.master_seed, spawn_key=(int(side), int(replicate)))
        return int(sequence.generate_state(1, dtype=np.uint64)[0])


def make_stream(master_seed: int, replicate: int = 0, side: int = 0) -> np.random.Generator:
    """Shortcut for a single stream (function interface)"""
    return StreamFactory(master_seed).stream(replicate, side)


def resolve_seed(seed: Optional[int], fallback: Optional[str]) -> Optional[int]:
    """Pick an explicit seed over an environment fallback; None if neither is usable"""
    if seed is not None:
        return int(seed)
    if fallback is None or fallback.strip() == "":
        return None
    try:
        return int(fallback, 0)
    except ValueError as e:
        raise ValueError(f"MBR4_SEED is not an integer: {fallback!r}") from e
