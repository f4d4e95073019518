import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Tuple

from .conf import get_setting, info


def ordered_map(func: Callable, tasks: Iterable, workers: Optional[int] = None) -> List:
    """
    Applies func to every task on a thread pool and returns the results in
    task order.

    Args:
        func (Callable): The task body. Must not share mutable state with other tasks.
        tasks (Iterable): Task arguments, one per call.
        workers (int, optional): Pool size. Defaults to the WORKERS setting.

    Returns:
        list: func(task) for every task, in the order the tasks were given.

    Notes:
        - numpy and scipy release the GIL inside their kernels, so threads
          give real parallelism for the vectorised ensemble chunks.
        - The reduction order is the task order, never the completion order.
    """
    tasks = list(tasks)
    workers = workers or get_setting("WORKERS")

    if workers <= 1 or len(tasks) <= 1:
        return [func(task) for task in tasks]

    info(
        f"Running {len(tasks)} tasks on {workers} workers (Thread: {threading.current_thread().name})"
    )
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="stablelab") as pool:
        return list(pool.map(func, tasks))


def ensemble_chunks(n: int, chunk_size: Optional[int] = None) -> List[Tuple[int, int]]:
    """
    Splits an ensemble of n paths into (chunk_index, chunk_length) pairs.

    The split depends only on n and the CHUNK_SIZE setting, so each chunk
    always draws from the same RNG stream whatever the worker count.
    """
    if n <= 0:
        raise ValueError("Ensemble size must be positive.")
    chunk_size = chunk_size or get_setting("CHUNK_SIZE")
    chunks = []
    start = 0
    index = 0
    while start < n:
        length = min(chunk_size, n - start)
        chunks.append((index, length))
        start += length
        index += 1
    return chunks
