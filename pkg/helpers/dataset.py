from collections.abc import Iterator

from beartype import beartype
import numpy as np
import torch

from helpers import logger


# one independent stream per use, so held-out data never depends on the training length
STREAMS: dict[str, int] = {"teacher": 0, "calib": 1, "train": 2, "heldout": 3}


@beartype
def stream_generator(seed: int, stream: str) -> torch.Generator:
    """Seeded torch generator for one named stream of a run"""
    if stream not in STREAMS:
        raise KeyError(f"unknown stream: {stream}")
    state = np.random.SeedSequence([seed, STREAMS[stream]]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


class SyntheticBatches(object):
    """Gaussian (batch, channels, width) inputs, replayed identically for a given seed"""

    @beartype
    def __init__(self,
                 seed: int,
                 stream: str,
                 *,
                 channels: int,
                 width: int,
                 batch_size: int,
                 std: float = 1.):
        self.seed = seed
        self.stream = stream
        self.shape = (batch_size, channels, width)
        self.std = std
        self.rng = stream_generator(seed, stream)
        logger.debug(f"synthetic {stream} batches of shape {self.shape}, seed {seed}")

    @beartype
    def sample(self) -> torch.Tensor:
        return self.std * torch.randn(self.shape, generator=self.rng, dtype=torch.float64)

    @beartype
    def take(self, num: int) -> list[torch.Tensor]:
        return [self.sample() for _ in range(num)]

    def __iter__(self) -> Iterator[torch.Tensor]:
        while True:
            yield self.sample()
