import time
import functools
import logging

logger = logging.getLogger('stylemlm')


def experimental(func):
    """Informs about use of functionality with an unsettled convention"""
    @functools.wraps(func)
    def wrapper_experimental(*args, **kwargs):
        logger.warning(f"Calling {func.__name__}, which is experimental")
        value = func(*args, **kwargs)
        return value
    return wrapper_experimental


def timed(func):
    """Logs the wall time of the call"""
    @functools.wraps(func)
    def wrapper_timed(*args, **kwargs):
        start = time.perf_counter()
        value = func(*args, **kwargs)
        logger.info('%s finished in %.1f s', func.__name__, time.perf_counter() - start)
        return value
    return wrapper_timed


def traceback(func):
    """In case of exception, log the keyword arguments"""
    @functools.wraps(func)
    def wrapper_try(*args, **kwargs):
        try:
            value = func(*args, **kwargs)
            return value
        except Exception as e:
            kwargs_repr = [f"{k}={v!r}" for k, v in kwargs.items()]
            logger.info(f"Exception during call {func.__name__}({', '.join(kwargs_repr)}): {e}")
            raise e
    return wrapper_try
