from functools import wraps
from time import perf_counter
import logging

logger = logging.getLogger(__name__)


def measure_time(f):
    @wraps(f)
    def wrap(*args, **kw):
        ts = perf_counter()
        result = f(*args, **kw)
        te = perf_counter()
        logger.info('func:%s took: %.3f sec', f.__name__, te - ts)
        return result
    return wrap
