"""
Module for classes and methods pertaining to multithreading
"""
import functools
import inspect
import logging
import threading

logger = logging.getLogger("synchronized")


def synchronized(target, lock=None):
    """
    Wraps a function, or every public method of a class, so that calls hold a shared re-entrant lock

    Classes get one lock per decorated class; all instances share it.

    :param target: The function or class to synchronize
    :param lock: The lock to synchronize with, a new :class:`threading.RLock` if omitted

    :return: Synchronized version of :param target:
    """
    if lock is None:
        logger.debug("Creating new lock for %s", target)
        lock = threading.RLock()

    if inspect.isroutine(target):
        @functools.wraps(target)
        def synced(*args, **kwargs):
            with lock:
                return target(*args, **kwargs)

        synced.__lock__ = lock
        return synced

    for name, member in inspect.getmembers(target, inspect.isfunction):
        if name.startswith("__") and name not in ("__len__", "__contains__", "__getitem__"):
            continue

        try:
            setattr(target, name, synchronized(member, lock))
        except (TypeError, AttributeError):
            logger.warning("Unable to add lock to function %s", member)

    target.__lock__ = lock
    return target
