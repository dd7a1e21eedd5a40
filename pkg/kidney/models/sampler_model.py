import logging
import math
from collections import deque

import numpy as np

from kidney.errors import ConfigError, EmptyGroupError
from kidney.utils.logger import configure_logger
from kidney.utils.preprocess_utils import Group, Slab


logger = logging.getLogger(__name__)
configure_logger(logger)


STAGE_GROUPS = {
    1: (Group.B, Group.K, Group.KT),
    2: (Group.K, Group.KT),
}


class BalancedSampler:
    """Draws class-balanced batches of slabs.

    Stage 1 splits every batch evenly over B, K and KT; when the batch size is
    not a multiple of three the extra slots rotate over the groups from batch
    to batch (11/11/10 at 32). Stage 2 draws half K and half KT. Each group is
    a queue of shuffled indices drawn without replacement. A group refills with
    a fresh permutation as soon as its queue runs dry, independently of the
    other groups and of epoch boundaries, so a small group cycles several times
    per epoch while a large one may not finish a pass.
    """

    def __init__(self, slabs: list[Slab], stage: int = 1, batch_size: int = 32, seed: int = 0):
        if stage not in STAGE_GROUPS:
            raise ConfigError(f"Stage must be 1 or 2, got {stage}")
        if batch_size < len(STAGE_GROUPS[stage]):
            raise ConfigError(f"Batch size {batch_size} cannot hold every group of stage {stage}")
        self.slabs = slabs
        self.stage = stage
        self.batch_size = batch_size
        self.groups = STAGE_GROUPS[stage]
        self.pools = {group: [i for i, slab in enumerate(slabs) if slab.group == group] for group in Group}
        for group in self.groups:
            if not self.pools[group]:
                logger.error(f"Stage {stage} sampling needs group {group.value}, which has no slabs")
                raise EmptyGroupError(f"Group {group.value} is empty; stage {stage} sampling needs it")
        self.rng = np.random.default_rng(seed)
        self.queues: dict[Group, deque] = {group: deque() for group in self.groups}
        self.batch_index = 0

    def composition(self, batch_index: int) -> dict[Group, int]:
        """How many slabs of each group the batch with this index holds."""
        count = len(self.groups)
        base, extra = divmod(self.batch_size, count)
        sizes = {group: base for group in self.groups}
        for offset in range(extra):
            sizes[self.groups[(batch_index + offset) % count]] += 1
        return sizes

    def epoch_length(self) -> int:
        """Batches needed for one pass over the K and KT slabs."""
        foreground = len(self.pools[Group.K]) + len(self.pools[Group.KT])
        per_batch = self.batch_size * sum(1 for g in self.groups if g != Group.B) / len(self.groups)
        return max(1, math.ceil(foreground / per_batch))

    def _draw(self, group: Group, count: int) -> list[Slab]:
        """Pops ``count`` slabs of ``group``, reshuffling the group whenever its queue empties."""
        queue = self.queues[group]
        drawn = []
        while len(drawn) < count:
            if not queue:
                queue.extend(int(i) for i in self.rng.permutation(self.pools[group]))
            drawn.append(self.slabs[queue.popleft()])
        return drawn

    def sample_batch(self) -> list[Slab]:
        sizes = self.composition(self.batch_index)
        self.batch_index += 1
        return [slab for group in self.groups for slab in self._draw(group, sizes[group])]


class UniformSampler:
    """Shuffled passes over every slab regardless of group, for overfitting and debugging runs."""

    def __init__(self, slabs: list[Slab], batch_size: int = 32, seed: int = 0):
        if not slabs:
            raise EmptyGroupError("No slabs to sample from")
        self.slabs = slabs
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.queue: deque = deque()

    def epoch_length(self) -> int:
        return max(1, math.ceil(len(self.slabs) / self.batch_size))

    def sample_batch(self) -> list[Slab]:
        batch = []
        while len(batch) < self.batch_size:
            if not self.queue:
                self.queue.extend(int(i) for i in self.rng.permutation(len(self.slabs)))
            batch.append(self.slabs[self.queue.popleft()])
        return batch


def sample_batches(slabs: list[Slab], stage: int, count: int, batch_size: int = 32, seed: int = 0) -> list[list[Slab]]:
    sampler = BalancedSampler(slabs, stage, batch_size, seed)
    return [sampler.sample_batch() for _ in range(count)]
