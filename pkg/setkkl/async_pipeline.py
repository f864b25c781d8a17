import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence

from .models import DomainSpec, ImageAtlas, IssRow
from .observer import ObserverSetup, check_amplitudes, steady_state_floor
from .transform import ATLAS_BATCH, TransformField, assemble_atlas, split_batches, tabulate_batch

logger = logging.getLogger(__name__)


class AsyncPipeline:
    """Runs independent numerical batches concurrently on a thread pool"""

    DEFAULT_WORKERS = 1

    def __init__(self, workers: Optional[int] = None):
        self.workers = self.DEFAULT_WORKERS if workers is None else workers
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        self._executor = ThreadPoolExecutor(max_workers=self.workers)

    async def __aenter__(self):
        return self

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        self._executor.shutdown(wait=True)

    async def map_batches(self, func: Callable, batches: Sequence) -> list:
        """Apply func to every batch concurrently; results keep the batch order."""
        loop = asyncio.get_running_loop()
        tasks = [loop.run_in_executor(self._executor, func, batch) for batch in batches]
        return list(await asyncio.gather(*tasks))

    async def tabulate_image(
        self,
        field: TransformField,
        domain: Optional[DomainSpec] = None,
        batch_size: int = ATLAS_BATCH,
    ) -> ImageAtlas:
        """Atlas tabulation with the same batch partition as the sequential path.

        Args:
            field: Transform to evaluate
            domain: Grid source; defaults to the domain of the field's system
            batch_size: Rows per batch

        Returns:
            ImageAtlas identical to transform.tabulate_image for any worker count
        """
        domain = domain or field.system.domain
        points = domain.grid()
        batches = split_batches(points, batch_size)
        results = await self.map_batches(lambda batch: tabulate_batch(field, batch), batches)
        logger.info("Tabulated %d grid points in %d batches on %d workers",
                    len(points), len(batches), self.workers)
        return assemble_atlas(points, results, domain.spacing)

    async def iss_sweep(self, setup: ObserverSetup, amplitudes: Sequence[float]) -> list:
        """Observer runs for each noise amplitude, concurrently.

        Returns:
            List of IssRow in the order of `amplitudes`
        """
        amplitudes = check_amplitudes(amplitudes)

        def floor_at(amplitude: float) -> IssRow:
            run = setup.run(setup.noise_at(amplitude))
            return IssRow(amplitude=amplitude, floor=steady_state_floor(run))

        rows = await self.map_batches(floor_at, amplitudes)
        for row in rows:
            logger.info("Noise amplitude %g: floor %.3g", row.amplitude, row.floor)
        return rows
