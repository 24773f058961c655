"""Thread-pool fan-out with a shared progress bar; results keep submission order"""
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, List, Sequence, TypeVar

from tqdm import tqdm

import config

T = TypeVar('T')
R = TypeVar('R')


def run_ordered(fn: Callable[[T], R], items: Sequence[T], workers: int = config.DEFAULT_WORKERS,
                desc: str = '', show_progress: bool = True) -> List[R]:
    """Apply `fn` to every item; exceptions from workers propagate"""
    results: List[R] = [None] * len(items)
    pbar = tqdm(total=len(items), desc=desc, disable=not show_progress)
    if workers <= 1:
        for i, item in enumerate(items):
            results[i] = fn(item)
            pbar.update(1)
        pbar.close()
        return results

    with ThreadPoolExecutor(max_workers=workers) as executor:
        futures = {executor.submit(fn, item): i for i, item in enumerate(items)}
        try:
            for future in as_completed(futures):
                results[futures[future]] = future.result()
                pbar.update(1)
        finally:
            pbar.close()
    return results
