"""
    Sampler for batches of state transitions
"""

from typing import Generator, Optional

import torch
from torch.utils.data import Sampler


class TransitionSampler(Sampler):
    """
    Yields lists of transition indices, shuffled per epoch when `random`.
    """

    def __init__(self, num_transitions: int, batch_size: int, random: bool = False, seed: Optional[int] = None):
        self.num_transitions = num_transitions
        self.batch_size = batch_size if batch_size > 0 else num_transitions
        self.random = random
        self.generator = torch.Generator()
        if seed is not None:
            self.generator.manual_seed(seed)

    def __iter__(self) -> Generator[list, None, None]:
        if self.random:
            order = torch.randperm(self.num_transitions, generator=self.generator).tolist()
        else:
            order = list(range(self.num_transitions))
        for start in range(0, self.num_transitions, self.batch_size):
            yield order[start:start + self.batch_size]

    def __len__(self) -> int:
        """
        Number of batches per epoch
        """
        return (self.num_transitions + self.batch_size - 1) // self.batch_size
