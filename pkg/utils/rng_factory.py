"""
Seed factory for reproducible, schedule-independent random streams.
"""
import numbers

import numpy as np


class RngFactory:
    """Factory class for creating seed sequences and uniform blocks with a consistent contract.

    Every random draw in the library goes through a ``numpy.random.SeedSequence``. Child
    sequences are spawned from a master seed, so work split across processes sees the same
    streams as work done in one loop.
    """

    @staticmethod
    def seed_sequence(seed):
        """
        Normalize a seed into a SeedSequence.

        A SeedSequence argument is copied with a fresh spawn counter, so spawning from the
        same sequence twice yields the same children.

        Args:
            seed: int, SeedSequence, or None (fresh entropy)

        Returns:
            numpy.random.SeedSequence
        """
        if isinstance(seed, np.random.SeedSequence):
            return np.random.SeedSequence(
                entropy=seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size
            )
        if seed is None or isinstance(seed, numbers.Integral):
            return np.random.SeedSequence(None if seed is None else int(seed))
        raise TypeError(f"seed must be an int or SeedSequence, got {type(seed).__name__}")

    @staticmethod
    def spawn(seed, n):
        """
        Derive ``n`` independent child sequences from a master seed.

        Args:
            seed: master seed (int or SeedSequence)
            n (int): number of children

        Returns:
            list: child SeedSequence objects, index-stable
        """
        return RngFactory.seed_sequence(seed).spawn(n)

    @staticmethod
    def generator(seed):
        """
        Create a Generator from a seed.

        Args:
            seed: int, SeedSequence or None

        Returns:
            numpy.random.Generator
        """
        return np.random.default_rng(RngFactory.seed_sequence(seed))

    @staticmethod
    def uniform_blocks(seeds, size):
        """
        Draw one block of uniforms per child seed.

        Args:
            seeds: sequence of SeedSequence
            size (int): uniforms per block

        Returns:
            np.ndarray: shape (len(seeds), size), row i depends only on seeds[i]
        """
        out = np.empty((len(seeds), size), dtype=np.float64)
        for i, child in enumerate(seeds):
            out[i] = np.random.default_rng(child).random(size)
        return out
